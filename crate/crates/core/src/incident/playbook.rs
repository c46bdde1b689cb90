//! Playbook documents: triggers, templates, authority, escalation, fallbacks
//! and redeployment requirements.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authority::{automatic_permitted, AuthorityMatrix};
use crate::comms::{CommsConfig, FallbackPlan};
use crate::gateway::filter::{FilterConfig, PatternFilter};
use crate::monitor::{Binding, Grade, Trigger};
use crate::policy::{CorrectionKind, PolicyParams, Principal, Rule, Scope, Tier};
use crate::role::Role;

use super::{Approvals, Stage};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlaybookError {
    #[error("ParseError: {0}")]
    ParseError(String),
    #[error("DanglingReference: {0}")]
    DanglingReference(String),
    #[error("GradeGateViolation: {0}")]
    GradeGateViolation(String),
    #[error("Invalid: {0}")]
    Invalid(String),
}

impl PlaybookError {
    pub fn code(&self) -> &'static str {
        match self {
            PlaybookError::ParseError(_) => "ParseError",
            PlaybookError::DanglingReference(_) => "DanglingReference",
            PlaybookError::GradeGateViolation(_) => "GradeGateViolation",
            PlaybookError::Invalid(_) => "Invalid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DynamicScope {
    /// One Principal-scoped policy per principal flagged in the alert window.
    #[serde(rename = "flagged_principals")]
    FlaggedPrincipals,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TemplateScope {
    Fixed(Scope),
    Dynamic(DynamicScope),
}

impl Default for TemplateScope {
    fn default() -> Self {
        TemplateScope::Fixed(Scope::Global)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    pub id: String,
    /// Trigger this template answers, if any.
    #[serde(default)]
    pub trigger: Option<String>,
    pub kind: CorrectionKind,
    #[serde(default)]
    pub scope: TemplateScope,
    #[serde(default)]
    pub params: PolicyParams,
    #[serde(default = "containment")]
    pub stage: Stage,
    #[serde(default)]
    pub description: String,
}

fn containment() -> Stage {
    Stage::Containment
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStep {
    pub role: Role,
    #[serde(default)]
    pub contact: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Escalation {
    pub chain: Vec<ChainStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RedeployRequirements {
    /// Each listed role must be met by an approver of equal or higher seniority.
    pub required_roles: Vec<Role>,
    pub external_signoff: bool,
}

impl RedeployRequirements {
    pub fn check(&self, approvals: &Approvals) -> Result<(), String> {
        for r in &self.required_roles {
            if !approvals.roles.iter().any(|a| a >= r) {
                return Err(format!("requires approval by {r}"));
            }
        }
        if self.external_signoff && approvals.external_signoff.as_deref().is_none_or(|s| s.trim().is_empty()) {
            return Err("requires external sign-off".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    pub tick_secs: u64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self { tick_secs: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    /// Strip tool intents instead of denying under a deny-mode tool limit.
    pub strip_tools: bool,
    pub injection_set: Option<String>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self { strip_tools: false, injection_set: Some("prompt-injection".into()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Playbook {
    pub id: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub triggers: Vec<Trigger>,
    #[serde(default)]
    pub templates: Vec<Template>,
    #[serde(default)]
    pub authority: AuthorityMatrix,
    pub escalation: Escalation,
    #[serde(default)]
    pub fallbacks: Vec<FallbackPlan>,
    #[serde(default)]
    pub redeploy: RedeployRequirements,
    #[serde(default)]
    pub comms: CommsConfig,
    #[serde(default)]
    pub monitor: MonitorConfig,
    #[serde(default = "FilterConfig::reference")]
    pub filters: FilterConfig,
    #[serde(default)]
    pub gateway: GatewayConfig,
}

impl Playbook {
    /// Parses without cross-reference validation.
    pub fn parse(text: &str) -> Result<Playbook, PlaybookError> {
        serde_json::from_str(text).map_err(|e| PlaybookError::ParseError(e.to_string()))
    }

    /// Parses and validates; rejected atomically on any failure.
    pub fn load(text: &str, roster: Option<&[Principal]>) -> Result<Playbook, PlaybookError> {
        let pb = Self::parse(text)?;
        pb.validate(roster)?;
        Ok(pb)
    }

    pub fn template(&self, id: &str) -> Option<&Template> {
        self.templates.iter().find(|t| t.id == id)
    }

    pub fn validate(&self, roster: Option<&[Principal]>) -> Result<(), PlaybookError> {
        use PlaybookError::*;
        let mut ids = BTreeSet::new();
        for t in &self.triggers {
            t.validate().map_err(Invalid)?;
            if !ids.insert(t.id.as_str()) {
                return Err(Invalid(format!("duplicate trigger `{}`", t.id)));
            }
        }
        let mut tids = BTreeSet::new();
        for t in &self.templates {
            if !tids.insert(t.id.as_str()) {
                return Err(Invalid(format!("duplicate template `{}`", t.id)));
            }
            if let Some(trig) = &t.trigger {
                if !ids.contains(trig.as_str()) {
                    return Err(DanglingReference(format!("template `{}` references unknown trigger `{trig}`", t.id)));
                }
            }
            let scope = match &t.scope {
                TemplateScope::Fixed(s) => s.clone(),
                TemplateScope::Dynamic(_) => Scope::Principal("flagged".into()),
            };
            Rule::from_parts(t.kind, &scope, &t.params).map_err(|e| Invalid(format!("template `{}`: {e}", t.id)))?;
            if let Some(set) = &t.params.pattern_set {
                if !self.filters.sets.contains_key(set) {
                    return Err(DanglingReference(format!("template `{}` references unknown pattern set `{set}`", t.id)));
                }
            }
        }
        for trig in &self.triggers {
            match &trig.binding {
                Binding::AlertOnly => {}
                Binding::AutoCorrection { template, .. } => {
                    let Some(t) = self.template(template) else {
                        return Err(DanglingReference(format!(
                            "trigger `{}` references unknown template `{template}`",
                            trig.id
                        )));
                    };
                    if t.kind.requires_code_red() && trig.grade != Grade::CodeRed {
                        return Err(GradeGateViolation(format!(
                            "trigger `{}` is {:?} but binds {}, which needs CodeRed",
                            trig.id, trig.grade, t.kind
                        )));
                    }
                    if !automatic_permitted(t.kind) || !self.authority.granted(Role::System, t.kind) {
                        return Err(Invalid(format!("System may not apply {} automatically", t.kind)));
                    }
                }
                Binding::AutoIncident { playbook } => {
                    if *playbook != self.id {
                        return Err(DanglingReference(format!(
                            "trigger `{}` references unknown playbook `{playbook}`",
                            trig.id
                        )));
                    }
                }
            }
        }
        self.authority.validate().map_err(Invalid)?;
        let chain = &self.escalation.chain;
        if chain.is_empty() {
            return Err(Invalid("escalation chain is empty".into()));
        }
        if chain.iter().any(|s| !s.role.is_human()) {
            return Err(Invalid("escalation chain may only name human roles".into()));
        }
        if chain.windows(2).any(|w| w[0].role >= w[1].role) {
            return Err(Invalid("escalation chain must ascend in seniority".into()));
        }
        if self.authority.emergency_clause.enabled && !chain.iter().any(|s| s.role == self.authority.emergency_clause.fallback_role) {
            return Err(Invalid("emergency fallback role is not in the escalation chain".into()));
        }
        if self.redeploy.required_roles.iter().any(|r| !r.is_human()) {
            return Err(Invalid("redeploy approvers must be human roles".into()));
        }
        let mut seen = BTreeSet::new();
        for plan in &self.fallbacks {
            if !seen.insert(plan.principal_id.as_str()) {
                return Err(Invalid(format!("duplicate fallback plan for `{}`", plan.principal_id)));
            }
            if let Some(roster) = roster {
                let Some(p) = roster.iter().find(|p| p.id == plan.principal_id) else {
                    return Err(DanglingReference(format!("fallback plan names unknown principal `{}`", plan.principal_id)));
                };
                if p.tier != Tier::SafetyCritical {
                    return Err(Invalid(format!("fallback plans exist only for safety-critical principals, not `{}`", p.id)));
                }
            }
        }
        if self.monitor.tick_secs == 0 {
            return Err(Invalid("monitor tick must be > 0".into()));
        }
        PatternFilter::new(&self.filters).map_err(|e| Invalid(format!("pattern set: {e}")))?;
        if let Some(set) = &self.gateway.injection_set {
            if !self.filters.sets.contains_key(set) {
                return Err(DanglingReference(format!("injection screen references unknown pattern set `{set}`")));
            }
        }
        self.comms.validate().map_err(Invalid)?;
        Ok(())
    }
}
