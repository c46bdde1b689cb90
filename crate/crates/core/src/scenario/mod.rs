//! Scripted scenarios driven against a fully wired stack on a virtual clock.
//!
//! A scenario file is a JSON document:
//!
//! ```json
//! {
//!   "id": "case3",
//!   "seed": 3,
//!   "playbook": "case3.playbook",
//!   "deployments": [{"model_id": "model-d", "version": "v2", "other_versions": ["v1"]}],
//!   "principals": [{"id": "hospital", "tier": "SafetyCritical", "allowlisted": true}],
//!   "steps": [{"at_secs": 0, "action": {"type": "tick"}}],
//!   "assertions": [{"check": "deployment_state", "model": "model-d", "state": "Active"}]
//! }
//! ```
//!
//! `playbook` is either a path relative to the scenario file or an inline
//! playbook object.

mod report;
mod run;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::comms::{Audience, NotifyMode};
use crate::gateway::backend::Cue;
use crate::incident::{AfterActionReview, Approvals, CorrectionOrder, IncidentOp, IncidentState, Playbook, Severity};
use crate::monitor::TriageOutcome;
use crate::policy::{CorrectionKind, DenyReason, DeploymentStatus, Principal, Scope};
use crate::role::Role;
use crate::stack::DeploymentSpec;

pub use report::{CheckResult, RequestOutcome, ScenarioReport};
pub use run::{run, RunOptions, ScenarioRun};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("ScenarioInvalid: {0}")]
    Invalid(String),
    #[error("StackInitFailure: {0}")]
    StackInit(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    pub playbook: Value,
    pub deployments: Vec<DeploymentSpec>,
    pub principals: Vec<Principal>,
    #[serde(default)]
    pub steps: Vec<Step>,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    /// Absolute virtual time; the clock advances (ticking) to it first.
    #[serde(default)]
    pub at_secs: Option<u64>,
    #[serde(default)]
    pub note: String,
    pub action: Action,
    /// The step must fail with this error code.
    #[serde(default)]
    pub expect_error: Option<String>,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    AdvanceClock {
        secs: u64,
        /// Skip intermediate evaluation ticks (long jumps).
        #[serde(default)]
        quiet: bool,
    },
    Tick,
    SendRequest {
        label: String,
        principal: String,
        model: String,
        #[serde(default)]
        prompt: Option<String>,
        #[serde(default = "one")]
        repeat: u32,
        #[serde(default)]
        session: Option<String>,
        #[serde(default)]
        tool_intents: Vec<String>,
        #[serde(default)]
        use_case: Option<String>,
        #[serde(default)]
        cue: Option<Cue>,
    },
    Feedback {
        principal: String,
        model: String,
        unsatisfactory: bool,
        #[serde(default = "one")]
        repeat: u32,
    },
    EmitExternalReport {
        model: String,
        #[serde(default)]
        principal: Option<String>,
        #[serde(default)]
        note: Option<String>,
    },
    /// Linear ramp of the observed unsatisfactory rate, one batch of traffic
    /// per evaluation tick.
    Ramp {
        label: String,
        model: String,
        principals: Vec<String>,
        from_pct: f64,
        to_pct: f64,
        duration_secs: u64,
        requests_per_tick: u32,
    },
    OperatorAction {
        role: Role,
        op: Op,
    },
    Expect {
        check: Assertion,
    },
}

/// Incident references: a name given at `open_incident`, `alert:<trigger>`
/// for the incident linked to that trigger's latest alert, or a literal id.
pub type IncidentRef = String;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Op {
    OpenIncident {
        model: String,
        severity: Severity,
        report: String,
        #[serde(default)]
        name: Option<String>,
    },
    Triage {
        trigger: String,
        outcome: TriageOutcome,
    },
    Escalate {
        incident: IncidentRef,
        to: Role,
        #[serde(default)]
        emergency: bool,
    },
    Acknowledge {
        incident: IncidentRef,
    },
    Transition {
        incident: IncidentRef,
        to: IncidentOp,
    },
    AssessSeverity {
        incident: IncidentRef,
        severity: Severity,
    },
    ExecuteCorrection {
        incident: IncidentRef,
        order: CorrectionOrder,
    },
    RevokePolicy {
        model: String,
        kind: CorrectionKind,
    },
    SubmitReview {
        incident: IncidentRef,
        review: AfterActionReview,
    },
    ApproveRedeployment {
        incident: IncidentRef,
        #[serde(default)]
        review: Option<AfterActionReview>,
        #[serde(default)]
        approvals: Approvals,
    },
    Notify {
        incident: IncidentRef,
        #[serde(default = "standard")]
        mode: NotifyMode,
        message: String,
        #[serde(default)]
        affected: Option<Vec<String>>,
    },
    AlertStakeholders {
        incident: IncidentRef,
        audiences: Vec<Audience>,
        summary: String,
    },
    ActivateFallback {
        principal: String,
        #[serde(default)]
        incident: Option<IncidentRef>,
    },
    RecordRemedy {
        principal: String,
        downtime_secs: u64,
        #[serde(default)]
        incident: Option<IncidentRef>,
    },
}

fn standard() -> NotifyMode {
    NotifyMode::Standard
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum Assertion {
    DeploymentState {
        model: String,
        state: DeploymentStatus,
    },
    Moratorium {
        model: String,
        set: bool,
    },
    ActivePolicies {
        model: String,
        kind: CorrectionKind,
        #[serde(default)]
        scope: Option<Scope>,
        count: usize,
    },
    /// `nth` is 1-based; without it every request under the label must match.
    Request {
        label: String,
        #[serde(default)]
        nth: Option<usize>,
        status: u16,
        #[serde(default)]
        reason: Option<DenyReason>,
        #[serde(default)]
        route: Option<String>,
    },
    RequestCount {
        label: String,
        status: u16,
        count: usize,
    },
    WebhookHits {
        audience: Audience,
        count: usize,
    },
    IncidentState {
        incident: IncidentRef,
        state: IncidentState,
    },
    Devolved {
        incident: IncidentRef,
        role: Role,
    },
    AlertCount {
        trigger: String,
        count: usize,
    },
    /// Recomputes the breach instant from the ramp's own traffic and counts
    /// evaluation ticks from it until `model` reaches `state`.
    FlipWithinTicks {
        ramp: String,
        model: String,
        state: DeploymentStatus,
        window_secs: u64,
        min_samples: u64,
        threshold: f64,
        ticks: usize,
    },
    NotificationOrder,
    AuditReplay,
    DecisionsEqualRequests,
}

impl Assertion {
    pub fn name(&self) -> String {
        let v = serde_json::to_value(self).expect("assertion serializes");
        let mut parts = vec![v["check"].as_str().unwrap_or("check").to_owned()];
        if let Some(obj) = v.as_object() {
            for (k, val) in obj {
                if k != "check" && !val.is_null() {
                    parts.push(format!("{k}={}", compact(val)));
                }
            }
        }
        parts.join(" ")
    }
}

fn compact(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Invalid(e.to_string()))
    }

    /// Reads a scenario file and resolves its playbook.
    pub fn load(path: &Path) -> Result<(Scenario, Playbook), ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Invalid(format!("{}: {e}", path.display())))?;
        let sc = Scenario::parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let pb = sc.resolve_playbook(&base)?;
        sc.validate(&pb)?;
        Ok((sc, pb))
    }

    pub fn resolve_playbook(&self, base: &Path) -> Result<Playbook, ScenarioError> {
        let text = match &self.playbook {
            Value::String(rel) => {
                let p: PathBuf = base.join(rel);
                std::fs::read_to_string(&p).map_err(|e| ScenarioError::Invalid(format!("{}: {e}", p.display())))?
            }
            inline @ Value::Object(_) => inline.to_string(),
            _ => return Err(ScenarioError::Invalid("playbook must be a path or an object".into())),
        };
        Playbook::load(&text, Some(&self.principals)).map_err(|e| ScenarioError::Invalid(format!("playbook: {e}")))
    }

    pub fn validate(&self, playbook: &Playbook) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.id.trim().is_empty() {
            return bad("scenario id is empty".into());
        }
        let models: BTreeSet<&str> = self.deployments.iter().map(|d| d.model_id.as_str()).collect();
        if models.len() != self.deployments.len() || models.is_empty() {
            return bad("deployments must be non-empty with unique model ids".into());
        }
        let mut roster = BTreeSet::new();
        for p in &self.principals {
            p.validate().map_err(ScenarioError::Invalid)?;
            if !roster.insert(p.id.as_str()) {
                return bad(format!("duplicate principal `{}`", p.id));
            }
        }
        let triggers: BTreeSet<&str> = playbook.triggers.iter().map(|t| t.id.as_str()).collect();
        let mut labels = BTreeSet::new();
        let mut names = BTreeSet::new();
        let mut last_at = 0;
        for (i, step) in self.steps.iter().enumerate() {
            let n = i + 1;
            if let Some(at) = step.at_secs {
                if at < last_at {
                    return bad(format!("step {n}: at_secs {at} goes back in time"));
                }
                last_at = at;
            }
            let model_ok = |m: &str| models.contains(m);
            let principal_ok = |p: &str| roster.contains(p);
            match &step.action {
                Action::SendRequest { label, principal, model, repeat, .. } => {
                    if !model_ok(model) || !principal_ok(principal) || *repeat == 0 {
                        return bad(format!("step {n}: unknown model/principal or zero repeat"));
                    }
                    labels.insert(label.clone());
                }
                Action::Feedback { principal, model, .. } => {
                    if !model_ok(model) || !principal_ok(principal) {
                        return bad(format!("step {n}: unknown model or principal"));
                    }
                }
                Action::EmitExternalReport { model, .. } if !model_ok(model) => {
                    return bad(format!("step {n}: unknown model `{model}`"));
                }
                Action::Ramp { label, model, principals, from_pct, to_pct, duration_secs, requests_per_tick } => {
                    let pct_ok = |p: f64| (0.0..=100.0).contains(&p);
                    if !model_ok(model)
                        || principals.is_empty()
                        || principals.iter().any(|p| !principal_ok(p))
                        || !pct_ok(*from_pct)
                        || !pct_ok(*to_pct)
                        || *duration_secs == 0
                        || *requests_per_tick == 0
                    {
                        return bad(format!("step {n}: invalid ramp"));
                    }
                    labels.insert(label.clone());
                }
                Action::OperatorAction { op, .. } => match op {
                    Op::OpenIncident { model, name, .. } => {
                        if !model_ok(model) {
                            return bad(format!("step {n}: unknown model `{model}`"));
                        }
                        if let Some(name) = name {
                            names.insert(name.clone());
                        }
                    }
                    Op::Triage { trigger, .. } if !triggers.contains(trigger.as_str()) => {
                        return bad(format!("step {n}: unknown trigger `{trigger}`"));
                    }
                    Op::ActivateFallback { principal, .. } | Op::RecordRemedy { principal, .. }
                        if !principal_ok(principal) =>
                    {
                        return bad(format!("step {n}: unknown principal `{principal}`"));
                    }
                    _ => {}
                },
                Action::Expect { check } => check_refs(check, &labels, &models).map_err(ScenarioError::Invalid)?,
                _ => {}
            }
        }
        for a in &self.assertions {
            check_refs(a, &labels, &models).map_err(ScenarioError::Invalid)?;
        }
        Ok(())
    }
}

fn check_refs(a: &Assertion, labels: &BTreeSet<String>, models: &BTreeSet<&str>) -> Result<(), String> {
    match a {
        Assertion::Request { label, .. } | Assertion::RequestCount { label, .. } if !labels.contains(label) => {
            Err(format!("assertion references unknown request label `{label}`"))
        }
        Assertion::FlipWithinTicks { ramp, .. } if !labels.contains(ramp) => {
            Err(format!("assertion references unknown ramp `{ramp}`"))
        }
        Assertion::DeploymentState { model, .. }
        | Assertion::Moratorium { model, .. }
        | Assertion::ActivePolicies { model, .. }
        | Assertion::FlipWithinTicks { model, .. }
            if !models.contains(model.as_str()) =>
        {
            Err(format!("assertion references unknown model `{model}`"))
        }
        _ => Ok(()),
    }
}
