//! The pure decision function.
//!
//! Stage order is fixed: deployment state, moratorium, blocklist, allowlist
//! mode, use-case prohibition, throttles (consulted, not consumed), then
//! capability restrictions and transforms. The first denying stage wins.

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::kind::CorrectionKind;
use super::model::*;
use super::store::PolicySnapshot;
use super::PolicyError;
use crate::clock::Timestamp;

/// Quota a request would consume if admitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThrottleCharge {
    pub policy_id: PolicyId,
    pub kind: CorrectionKind,
    pub key: String,
    pub limit: ChargeLimit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ChargeLimit {
    Window { cap: u64, window_ms: u64, weight: u64 },
    Distinct { cap: u64, member: String, window_ms: Option<u64> },
}

/// Read-only view of limiter state.
pub trait UsageView {
    fn admits(&self, charge: &ThrottleCharge, now: Timestamp) -> bool;
}

/// A limiter that has never seen traffic.
#[derive(Debug, Clone, Copy, Default)]
pub struct FreshUsage;

impl UsageView for FreshUsage {
    fn admits(&self, charge: &ThrottleCharge, _now: Timestamp) -> bool {
        match &charge.limit {
            ChargeLimit::Window { cap, weight, .. } => weight <= cap,
            ChargeLimit::Distinct { cap, .. } => *cap >= 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub verdict: Verdict,
    pub applied_policies: Vec<PolicyId>,
    /// Quota to consume when the verdict is not a denial.
    pub charges: Vec<ThrottleCharge>,
    pub snapshot_version: u64,
    pub audit_ref: Option<u64>,
}

impl Decision {
    fn deny(reason: DenyReason, ids: impl IntoIterator<Item = PolicyId>, version: u64) -> Self {
        let mut applied: Vec<PolicyId> = ids.into_iter().collect();
        applied.sort();
        applied.dedup();
        Decision {
            verdict: Verdict::Deny(reason),
            applied_policies: applied,
            charges: Vec::new(),
            snapshot_version: version,
            audit_ref: None,
        }
    }
}

fn validate_ctx(ctx: &RequestContext) -> Result<(), PolicyError> {
    if ctx.model_id.is_empty() {
        return Err(PolicyError::MalformedContext("model_id is empty".into()));
    }
    if ctx.session_id.is_empty() {
        return Err(PolicyError::MalformedContext("session_id is empty".into()));
    }
    ctx.principal.validate().map_err(PolicyError::MalformedContext)
}

/// Whether `p` applies to the request. Allowlisted principals are exempt from
/// every policy not aimed at them directly, except those that override the
/// allowlist.
fn applies(p: &CorrectionPolicy, ctx: &RequestContext) -> bool {
    if !p.scope.matches(&ctx.principal, ctx.use_case.as_deref()) {
        return false;
    }
    let targeted = matches!(p.scope, Scope::Principal(_));
    !(ctx.principal.allowlisted && !targeted && !p.kind.overrides_allowlist())
}

fn ids_of<'a>(
    policies: &'a [(&'a CorrectionPolicy, Rule)],
    pred: impl Fn(&CorrectionPolicy) -> bool + 'a,
) -> impl Iterator<Item = PolicyId> + 'a {
    policies.iter().filter(move |(p, _)| pred(p)).map(|(p, _)| p.id.clone())
}

/// Picks the most specific applicable policies of one kind.
fn most_specific<'a>(matching: Vec<(&'a CorrectionPolicy, &'a Rule)>) -> Vec<(&'a CorrectionPolicy, &'a Rule)> {
    let Some(top) = matching.iter().map(|(p, _)| p.scope.specificity()).max() else {
        return Vec::new();
    };
    matching.into_iter().filter(|(p, _)| p.scope.specificity() == top).collect()
}

/// Resolves one request against a policy snapshot.
pub fn resolve_access(
    ctx: &RequestContext,
    snap: &PolicySnapshot,
    usage: &dyn UsageView,
) -> Result<Decision, PolicyError> {
    validate_ctx(ctx)?;
    if ctx.model_id != snap.deployment.model_id {
        return Err(PolicyError::UnknownDeployment(ctx.model_id.clone()));
    }
    let version = snap.version;
    let mut rules = Vec::with_capacity(snap.policies.len());
    for p in snap.policies.values().filter(|p| p.is_active()) {
        rules.push((p, p.rule()?));
    }
    let effective = snap.deployment.derived(rules.iter().map(|(p, _)| *p));
    let of_kind = |k: CorrectionKind| move |p: &CorrectionPolicy| p.kind == k;

    // Deployment state.
    match effective.state {
        DeploymentStatus::Decommissioned => {
            return Ok(Decision::deny(
                DenyReason::Decommissioned,
                ids_of(&rules, of_kind(CorrectionKind::Decommission)),
                version,
            ));
        }
        DeploymentStatus::PoweredOff => {
            return Ok(Decision::deny(
                DenyReason::PoweredOff,
                ids_of(&rules, of_kind(CorrectionKind::PowerOff)),
                version,
            ));
        }
        DeploymentStatus::MarketRemoved => {
            let removal: Vec<_> = ids_of(&rules, of_kind(CorrectionKind::MarketRemoval)).collect();
            let raw_removed = snap.deployment.state == DeploymentStatus::MarketRemoved && !effective.moratorium;
            if !removal.is_empty() || raw_removed {
                return Ok(Decision::deny(DenyReason::MarketRemoved, removal, version));
            }
        }
        _ => {}
    }

    // Moratorium.
    if effective.moratorium {
        return Ok(Decision::deny(
            DenyReason::Moratorium,
            ids_of(&rules, of_kind(CorrectionKind::Moratorium)),
            version,
        ));
    }

    let principal = &ctx.principal;

    // Blocklist.
    if principal.blocklisted {
        return Ok(Decision::deny(DenyReason::Blocklisted, [], version));
    }
    let blocked: Vec<_> = rules
        .iter()
        .filter(|(p, r)| *r == Rule::Blocklist && applies(p, ctx))
        .map(|(p, _)| p.id.clone())
        .collect();
    if !blocked.is_empty() {
        return Ok(Decision::deny(DenyReason::Blocklisted, blocked, version));
    }

    // Allowlist mode.
    if !principal.allowlisted {
        let modes: Vec<_> = rules
            .iter()
            .filter(|(p, r)| *r == Rule::AllowlistOnly && p.scope.matches(principal, ctx.use_case.as_deref()))
            .map(|(p, _)| p.id.clone())
            .collect();
        if !modes.is_empty() || effective.state == DeploymentStatus::AllowlistOnly {
            return Ok(Decision::deny(DenyReason::NotAllowlisted, modes, version));
        }
    }

    // Use-case prohibition.
    if let Some(use_case) = ctx.use_case.as_deref() {
        let prohibited: Vec<_> = rules
            .iter()
            .filter(|(p, r)| match r {
                Rule::ProhibitUseCases { tags } => applies(p, ctx) && tags.contains(use_case),
                _ => false,
            })
            .map(|(p, _)| p.id.clone())
            .collect();
        if !prohibited.is_empty() {
            return Ok(Decision::deny(DenyReason::UseCaseProhibited, prohibited, version));
        }
    }

    // Throttles.
    let mut charges = Vec::new();
    let mut exhausted: Vec<(PolicyId, DenyReason)> = Vec::new();
    for (p, rule) in rules.iter().filter(|(p, _)| applies(p, ctx)) {
        let charge = match rule {
            Rule::Window { cap, window, aggregate } => {
                let weight = match p.kind {
                    CorrectionKind::ThrottleCalls => ctx.tool_intents.len() as u64,
                    _ => 1,
                };
                if weight == 0 {
                    continue;
                }
                let who = match aggregate {
                    ThrottleAggregate::PerPrincipal => principal.id.as_str(),
                    ThrottleAggregate::Global => "*",
                };
                ThrottleCharge {
                    policy_id: p.id.clone(),
                    kind: p.kind,
                    key: format!("{}|{}", p.id, who),
                    limit: ChargeLimit::Window { cap: *cap, window_ms: window.as_millis() as u64, weight },
                }
            }
            Rule::Distinct { cap, window } => {
                let member = match p.kind {
                    CorrectionKind::ThrottleEndUsers => principal.id.clone(),
                    CorrectionKind::ThrottleApplications => match &principal.application_id {
                        Some(app) => app.clone(),
                        None => continue,
                    },
                    _ => ctx.session_id.clone(),
                };
                ThrottleCharge {
                    policy_id: p.id.clone(),
                    kind: p.kind,
                    key: format!("{}|*", p.id),
                    limit: ChargeLimit::Distinct {
                        cap: *cap,
                        member,
                        window_ms: window.map(|w: Duration| w.as_millis() as u64),
                    },
                }
            }
            _ => continue,
        };
        if !usage.admits(&charge, ctx.now) {
            let reason = match p.kind {
                CorrectionKind::ThrottleEndUsers => DenyReason::EndUserCapReached,
                CorrectionKind::ThrottleApplications => DenyReason::ApplicationCapReached,
                CorrectionKind::GlobalPlanningLimit => DenyReason::PlanningLimitReached,
                _ => DenyReason::Throttled,
            };
            exhausted.push((p.id.clone(), reason));
        }
        charges.push(charge);
    }
    if let Some((_, reason)) = exhausted.first() {
        let reason = *reason;
        return Ok(Decision::deny(reason, exhausted.into_iter().map(|(id, _)| id), version));
    }

    // Capability restrictions.
    let caps = &snap.deployment.capabilities;
    if ctx.operation == Operation::FineTune {
        let locked: Vec<_> = rules
            .iter()
            .filter(|(p, r)| *r == Rule::FineTuneLockout && applies(p, ctx))
            .map(|(p, _)| p.id.clone())
            .collect();
        if !locked.is_empty() || !caps.fine_tune {
            return Ok(Decision::deny(DenyReason::FineTuneLocked, locked, version));
        }
    }
    let tool_policies: Vec<_> = rules
        .iter()
        .filter(|(p, r)| matches!(r, Rule::Tools { .. }) && applies(p, ctx))
        .collect();
    if !ctx.tool_intents.is_empty() {
        let denying: Vec<_> = tool_policies
            .iter()
            .filter(|(_, r)| *r == Rule::Tools { mode: ToolMode::Deny })
            .map(|(p, _)| p.id.clone())
            .collect();
        if !denying.is_empty() || !caps.tool_use {
            return Ok(Decision::deny(DenyReason::ToolUseRestricted, denying, version));
        }
    }

    // Transforms.
    let mut applied: BTreeSet<PolicyId> = charges.iter().map(|c| c.policy_id.clone()).collect();
    let mut transforms = Vec::new();
    let pick = |kinds: &[CorrectionKind]| {
        most_specific(
            rules
                .iter()
                .filter(|(p, _)| kinds.contains(&p.kind) && applies(p, ctx))
                .map(|(p, r)| (*p, r))
                .collect(),
        )
    };

    let versions = pick(&[CorrectionKind::CapabilityRemoval, CorrectionKind::NarrowModel]);
    if let Some((p, Rule::RouteVersion { version: v })) = versions.iter().min_by(|a, b| a.0.id.cmp(&b.0.id)) {
        applied.insert(p.id.clone());
        transforms.push(Transform::RouteVersion { version: v.clone() });
    }

    let truncs = pick(&[CorrectionKind::ReduceContextWindow]);
    let policy_max = truncs
        .iter()
        .filter_map(|(_, r)| match r {
            Rule::Truncate { max_tokens } => Some(*max_tokens),
            _ => None,
        })
        .min();
    if let Some(max) = policy_max {
        applied.extend(truncs.iter().map(|(p, _)| p.id.clone()));
        transforms.push(Transform::TruncateContext { max_tokens: max.min(caps.context_window_max.max(1)) });
    } else if ctx.prompt_tokens > caps.context_window_max {
        transforms.push(Transform::TruncateContext { max_tokens: caps.context_window_max.max(1) });
    }

    let resets = pick(&[CorrectionKind::SessionReset]);
    if let Some(max_prompts) = resets
        .iter()
        .filter_map(|(_, r)| match r {
            Rule::SessionReset { max_prompts } => Some(*max_prompts),
            _ => None,
        })
        .min()
    {
        applied.extend(resets.iter().map(|(p, _)| p.id.clone()));
        transforms.push(Transform::SessionReset { max_prompts });
    }

    let strips: Vec<_> = tool_policies
        .iter()
        .filter(|(_, r)| *r == Rule::Tools { mode: ToolMode::Strip })
        .map(|(p, _)| p.id.clone())
        .collect();
    if !strips.is_empty() {
        applied.extend(strips);
        transforms.push(Transform::StripTools);
    }

    let autonomy = pick(&[CorrectionKind::AutonomyLimit]);
    let steps = autonomy
        .iter()
        .filter_map(|(_, r)| match r {
            Rule::Autonomy { max_steps } => Some(*max_steps),
            _ => None,
        })
        .min();
    if let Some(max_steps) = steps {
        applied.extend(autonomy.iter().map(|(p, _)| p.id.clone()));
        transforms.push(Transform::LimitAutonomy { max_steps: if caps.autonomy { max_steps } else { 0 } });
    } else if !caps.autonomy {
        transforms.push(Transform::LimitAutonomy { max_steps: 0 });
    }

    let filters = pick(&[CorrectionKind::OutputFilter]);
    let mut sets: Vec<String> = filters
        .iter()
        .filter_map(|(_, r)| match r {
            Rule::Filter { pattern_set } => Some(pattern_set.clone()),
            _ => None,
        })
        .collect();
    sets.sort();
    sets.dedup();
    if !sets.is_empty() {
        applied.extend(filters.iter().map(|(p, _)| p.id.clone()));
        transforms.push(Transform::FilterOutput { pattern_sets: sets });
    }

    let verdict = if transforms.is_empty() { Verdict::Allow } else { Verdict::Transform(transforms) };
    Ok(Decision {
        verdict,
        applied_policies: applied.into_iter().collect(),
        charges,
        snapshot_version: version,
        audit_ref: None,
    })
}
