//! Incident lifecycle, escalation and the redeployment gate.

pub mod playbook;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::audit::{AuditError, AuditEvent, AuditFilter, AuditLog};
use crate::authority::{AuthorityContext, Devolution};
use crate::clock::{Clock, Timestamp};
use crate::policy::{
    Activation, AppliedPolicy, DeploymentStatus, PolicyDraft, PolicyError, PolicyId, PolicyParams, PolicyStore,
    RedeployApproval, Scope,
};
use crate::role::Role;
pub use playbook::{
    ChainStep, DynamicScope, Escalation, GatewayConfig, MonitorConfig, Playbook, PlaybookError, RedeployRequirements,
    Template, TemplateScope,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Severity {
    Low,
    Medium,
    High,
    Critical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IncidentState {
    Open,
    Analyzing,
    Executing,
    Contained,
    Remediating,
    Recovering,
    UnderReview,
    Closed,
}

impl IncidentState {
    pub const ALL: [IncidentState; 8] = [
        IncidentState::Open,
        IncidentState::Analyzing,
        IncidentState::Executing,
        IncidentState::Contained,
        IncidentState::Remediating,
        IncidentState::Recovering,
        IncidentState::UnderReview,
        IncidentState::Closed,
    ];
}

/// Whether a correction record belongs to containment or remediation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Containment,
    Remediation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncidentOp {
    BeginAnalysis,
    ExecuteCorrection,
    MarkContained,
    BeginRemediation,
    BeginRecovery,
    SubmitReview,
    ApproveRedeployment,
    Close,
    Escalate,
    AssessSeverity,
    Acknowledge,
}

impl IncidentOp {
    pub const ALL: [IncidentOp; 11] = [
        IncidentOp::BeginAnalysis,
        IncidentOp::ExecuteCorrection,
        IncidentOp::MarkContained,
        IncidentOp::BeginRemediation,
        IncidentOp::BeginRecovery,
        IncidentOp::SubmitReview,
        IncidentOp::ApproveRedeployment,
        IncidentOp::Close,
        IncidentOp::Escalate,
        IncidentOp::AssessSeverity,
        IncidentOp::Acknowledge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IncidentOp::BeginAnalysis => "begin_analysis",
            IncidentOp::ExecuteCorrection => "execute_correction",
            IncidentOp::MarkContained => "mark_contained",
            IncidentOp::BeginRemediation => "begin_remediation",
            IncidentOp::BeginRecovery => "begin_recovery",
            IncidentOp::SubmitReview => "submit_review",
            IncidentOp::ApproveRedeployment => "approve_redeployment",
            IncidentOp::Close => "close",
            IncidentOp::Escalate => "escalate",
            IncidentOp::AssessSeverity => "assess_severity",
            IncidentOp::Acknowledge => "acknowledge",
        }
    }
}

/// The legal-transition table. `None` means the pair is illegal.
pub fn next_state(state: IncidentState, op: IncidentOp) -> Option<IncidentState> {
    use IncidentOp as O;
    use IncidentState as S;
    match (state, op) {
        (S::Closed, _) => None,
        (s, O::Escalate | O::AssessSeverity | O::Acknowledge) => Some(s),
        (S::Open, O::BeginAnalysis) => Some(S::Analyzing),
        (S::Open | S::Analyzing | S::Executing, O::ExecuteCorrection) => Some(S::Executing),
        (S::Remediating, O::ExecuteCorrection) => Some(S::Remediating),
        (S::Executing, O::MarkContained) => Some(S::Contained),
        (S::Executing | S::Contained, O::BeginRemediation) => Some(S::Remediating),
        (S::Remediating, O::BeginRecovery) => Some(S::Recovering),
        (S::Recovering | S::UnderReview, O::SubmitReview) => Some(S::UnderReview),
        (S::UnderReview, O::ApproveRedeployment | O::Close) => Some(S::Closed),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum IncidentSource {
    Alert { alert_id: String },
    Manual { report: String },
}

impl IncidentSource {
    pub fn label(&self) -> String {
        match self {
            IncidentSource::Alert { alert_id } => format!("alert:{alert_id}"),
            IncidentSource::Manual { report } => format!("manual:{report}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub policy_id: PolicyId,
    pub kind: crate::policy::CorrectionKind,
    pub actor: Role,
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AfterActionReview {
    pub root_cause: String,
    pub root_cause_category: String,
    pub why_not_caught_earlier: String,
    pub lessons: Vec<String>,
    pub threat_model_updates: Vec<String>,
    /// Recorded but not enforced, e.g. industry-wide training-cost rules.
    pub advisory_notes: Vec<String>,
    pub reviewed_by: Vec<Role>,
    pub approved: bool,
}

impl AfterActionReview {
    pub fn validate(&self) -> Result<(), String> {
        if self.approved && (self.root_cause.trim().is_empty() || self.why_not_caught_earlier.trim().is_empty()) {
            return Err("an approved review needs a root cause and why it was not caught earlier".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Approvals {
    pub roles: Vec<Role>,
    pub external_signoff: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingEscalation {
    pub from: Role,
    pub to: Role,
    pub since: Timestamp,
    pub emergency: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incident {
    pub id: String,
    pub model_id: String,
    pub state: IncidentState,
    pub severity: Severity,
    pub source: IncidentSource,
    pub playbook: Option<String>,
    pub opened_at: Timestamp,
    pub opened_by: Role,
    pub owner: Role,
    pub linked_alerts: Vec<String>,
    pub corrections_applied: Vec<PolicyId>,
    pub containment_records: Vec<CorrectionRecord>,
    pub remediation_records: Vec<CorrectionRecord>,
    pub stakeholder_notices: Vec<String>,
    pub review: Option<AfterActionReview>,
    pub pending_escalation: Option<PendingEscalation>,
    pub devolution: Option<Devolution>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub seq: u64,
    pub at: Timestamp,
    pub actor: Role,
    pub kind: String,
    pub detail: Value,
}

/// A correction requested against an incident, by template or inline.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionOrder {
    pub template: Option<String>,
    pub kind: Option<crate::policy::CorrectionKind>,
    pub scope: Option<Scope>,
    pub params: Option<PolicyParams>,
    pub stage: Option<Stage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedeployOutcome {
    pub incident_id: String,
    pub model_id: String,
    pub snapshot_version: u64,
    pub revoked: Vec<PolicyId>,
    pub state: DeploymentStatus,
}

#[derive(Debug, Error)]
pub enum IncidentError {
    #[error("unknown incident `{0}`")]
    UnknownIncident(String),
    #[error("unknown source: {0}")]
    UnknownSource(String),
    #[error("operation {op} is illegal in state {state:?}")]
    IllegalState { state: IncidentState, op: &'static str },
    #[error("invalid escalation step {from} -> {to}")]
    InvalidChainStep { from: Role, to: Role },
    #[error("no pending escalation to {0}")]
    NoPendingEscalation(Role),
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("invalid correction order: {0}")]
    InvalidOrder(String),
    #[error("{0} may not perform this operation")]
    Forbidden(Role),
    #[error("no after-action review on record")]
    ReviewMissing,
    #[error("after-action review is not approved")]
    ReviewNotApproved,
    #[error("invalid review: {0}")]
    InvalidReview(String),
    #[error("insufficient approvers: {0}")]
    InsufficientApprovers(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

pub struct IncidentEngine {
    clock: Arc<dyn Clock>,
    audit: Arc<AuditLog>,
    policies: Arc<PolicyStore>,
    playbook: RwLock<Arc<Playbook>>,
    incidents: RwLock<BTreeMap<String, Arc<Mutex<Incident>>>>,
    by_alert: Mutex<BTreeMap<String, String>>,
    next_id: AtomicU64,
}

impl IncidentEngine {
    pub fn new(clock: Arc<dyn Clock>, audit: Arc<AuditLog>, policies: Arc<PolicyStore>, playbook: Playbook) -> Self {
        Self {
            clock,
            audit,
            policies,
            playbook: RwLock::new(Arc::new(playbook)),
            incidents: RwLock::new(BTreeMap::new()),
            by_alert: Mutex::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
        }
    }

    pub fn playbook(&self) -> Arc<Playbook> {
        self.playbook.read().clone()
    }

    pub fn set_playbook(&self, playbook: Playbook) {
        *self.playbook.write() = Arc::new(playbook);
    }

    fn slot(&self, id: &str) -> Result<Arc<Mutex<Incident>>, IncidentError> {
        self.incidents.read().get(id).cloned().ok_or_else(|| IncidentError::UnknownIncident(id.into()))
    }

    pub fn get(&self, id: &str) -> Option<Incident> {
        self.incidents.read().get(id).map(|i| i.lock().clone())
    }

    pub fn list(&self) -> Vec<Incident> {
        self.incidents.read().values().map(|i| i.lock().clone()).collect()
    }

    pub fn by_alert(&self, alert_id: &str) -> Option<String> {
        self.by_alert.lock().get(alert_id).cloned()
    }

    fn record(&self, inc: &Incident, actor: Role, ev: &AuditEvent) -> Result<u64, AuditError> {
        self.audit.append(actor, Some(&inc.id), ev)
    }

    fn move_to(&self, inc: &mut Incident, op: IncidentOp, actor: Role) -> Result<(), IncidentError> {
        let to = next_state(inc.state, op).ok_or(IncidentError::IllegalState { state: inc.state, op: op.as_str() })?;
        if to != inc.state {
            self.record(inc, actor, &AuditEvent::IncidentTransition { from: inc.state, to, op: op.as_str().into() })?;
            inc.state = to;
        }
        Ok(())
    }

    fn check(inc: &Incident, op: IncidentOp) -> Result<IncidentState, IncidentError> {
        next_state(inc.state, op).ok_or(IncidentError::IllegalState { state: inc.state, op: op.as_str() })
    }

    /// Opens an incident. Opening twice from the same alert returns the first.
    pub fn open_incident(
        &self,
        source: IncidentSource,
        model_id: &str,
        severity: Severity,
        actor: Role,
    ) -> Result<(Incident, bool), IncidentError> {
        if let IncidentSource::Manual { report } = &source {
            if report.trim().is_empty() {
                return Err(IncidentError::UnknownSource("empty manual report".into()));
            }
        }
        self.policies.snapshot(model_id)?;
        let mut by_alert = self.by_alert.lock();
        if let IncidentSource::Alert { alert_id } = &source {
            if let Some(existing) = by_alert.get(alert_id) {
                return Ok((self.get(existing).expect("indexed incident exists"), false));
            }
        }
        let n = self.next_id.fetch_add(1, Ordering::SeqCst);
        let pb = self.playbook();
        let owner = if actor.is_human() { actor } else { pb.escalation.chain.first().map_or(Role::Analyst, |s| s.role) };
        let mut inc = Incident {
            id: format!("inc-{n:04}"),
            model_id: model_id.into(),
            state: IncidentState::Open,
            severity,
            source: source.clone(),
            playbook: Some(pb.id.clone()),
            opened_at: self.clock.now(),
            opened_by: actor,
            owner,
            linked_alerts: Vec::new(),
            corrections_applied: Vec::new(),
            containment_records: Vec::new(),
            remediation_records: Vec::new(),
            stakeholder_notices: Vec::new(),
            review: None,
            pending_escalation: None,
            devolution: None,
        };
        self.record(
            &inc,
            actor,
            &AuditEvent::IncidentOpened {
                severity,
                source: source.label(),
                model_id: model_id.into(),
                playbook: inc.playbook.clone(),
            },
        )?;
        if let IncidentSource::Alert { alert_id } = &source {
            self.record(&inc, actor, &AuditEvent::AlertLinked { alert_id: alert_id.clone() })?;
            inc.linked_alerts.push(alert_id.clone());
            by_alert.insert(alert_id.clone(), inc.id.clone());
        }
        self.incidents.write().insert(inc.id.clone(), Arc::new(Mutex::new(inc.clone())));
        Ok((inc, true))
    }

    pub fn link_alert(&self, id: &str, alert_id: &str, actor: Role) -> Result<Incident, IncidentError> {
        let slot = self.slot(id)?;
        let mut inc = slot.lock();
        let mut by_alert = self.by_alert.lock();
        if inc.linked_alerts.iter().any(|a| a == alert_id) {
            return Ok(inc.clone());
        }
        if inc.state == IncidentState::Closed {
            return Err(IncidentError::IllegalState { state: inc.state, op: "link_alert" });
        }
        self.record(&inc, actor, &AuditEvent::AlertLinked { alert_id: alert_id.into() })?;
        inc.linked_alerts.push(alert_id.into());
        by_alert.entry(alert_id.into()).or_insert_with(|| id.into());
        Ok(inc.clone())
    }

    /// Moves along the lifecycle for operations without side effects.
    pub fn transition(&self, id: &str, op: IncidentOp, actor: Role) -> Result<Incident, IncidentError> {
        if !actor.is_human() {
            return Err(IncidentError::Forbidden(actor));
        }
        let slot = self.slot(id)?;
        let mut inc = slot.lock();
        match op {
            IncidentOp::BeginAnalysis | IncidentOp::MarkContained | IncidentOp::BeginRemediation | IncidentOp::BeginRecovery => {
                self.move_to(&mut inc, op, actor)?
            }
            IncidentOp::Close => {
                Self::check(&inc, op)?;
                if inc.review.is_none() {
                    return Err(IncidentError::ReviewMissing);
                }
                self.move_to(&mut inc, op, actor)?
            }
            other => {
                return Err(IncidentError::IllegalState { state: inc.state, op: other.as_str() });
            }
        }
        Ok(inc.clone())
    }

    pub fn assess_severity(&self, id: &str, severity: Severity, actor: Role) -> Result<Incident, IncidentError> {
        if !actor.is_human() {
            return Err(IncidentError::Forbidden(actor));
        }
        let slot = self.slot(id)?;
        let mut inc = slot.lock();
        Self::check(&inc, IncidentOp::AssessSeverity)?;
        if inc.severity != severity {
            self.record(&inc, actor, &AuditEvent::SeverityAssessed { from: inc.severity, to: severity })?;
            inc.severity = severity;
        }
        Ok(inc.clone())
    }

    pub fn escalate(&self, id: &str, from: Role, to: Role, emergency: bool) -> Result<Incident, IncidentError> {
        let pb = self.playbook();
        let slot = self.slot(id)?;
        let mut inc = slot.lock();
        Self::check(&inc, IncidentOp::Escalate)?;
        let pos = |r: Role| pb.escalation.chain.iter().position(|s| s.role == r);
        let bad = IncidentError::InvalidChainStep { from, to };
        let (Some(f), Some(t)) = (pos(from), pos(to)) else { return Err(bad) };
        let skip_ok = emergency && pb.authority.emergency_clause.enabled;
        if !(t == f + 1 || (t > f + 1 && skip_ok)) {
            return Err(bad);
        }
        self.record(&inc, from, &AuditEvent::Escalated { from, to, emergency })?;
        let contact = pb.escalation.chain[t].contact.clone();
        self.record(&inc, from, &AuditEvent::EscalationNotice { to, contact })?;
        inc.pending_escalation = Some(PendingEscalation { from, to, since: self.clock.now(), emergency });
        Ok(inc.clone())
    }

    pub fn acknowledge(&self, id: &str, role: Role) -> Result<Incident, IncidentError> {
        let slot = self.slot(id)?;
        let mut inc = slot.lock();
        Self::check(&inc, IncidentOp::Acknowledge)?;
        match &inc.pending_escalation {
            Some(p) if p.to == role => {}
            _ => return Err(IncidentError::NoPendingEscalation(role)),
        }
        self.record(&inc, role, &AuditEvent::EscalationAcknowledged { role })?;
        inc.pending_escalation = None;
        inc.owner = role;
        Ok(inc.clone())
    }

    /// Devolves authority on incidents whose escalation went unanswered past
    /// the emergency timeout. At most once per incident.
    pub fn check_devolution(&self, now: Timestamp) -> Result<Vec<Devolution>, IncidentError> {
        let pb = self.playbook();
        let clause = &pb.authority.emergency_clause;
        if !clause.enabled {
            return Ok(Vec::new());
        }
        let slots: Vec<_> = self.incidents.read().values().cloned().collect();
        let mut out = Vec::new();
        for slot in slots {
            let mut inc = slot.lock();
            if inc.state == IncidentState::Closed || inc.devolution.is_some() {
                continue;
            }
            let Some(p) = inc.pending_escalation.clone() else { continue };
            if now.since(p.since) < clause.unavailable_timeout {
                continue;
            }
            let dev = Devolution { incident_id: inc.id.clone(), role: clause.fallback_role, kinds: clause.kinds.clone() };
            self.record(
                &inc,
                Role::System,
                &AuditEvent::AuthorityDevolved {
                    unavailable: p.to,
                    to: dev.role,
                    kinds: dev.kinds.iter().copied().collect(),
                },
            )?;
            inc.devolution = Some(dev.clone());
            out.push(dev);
        }
        Ok(out)
    }

    fn draft_for(&self, order: &CorrectionOrder) -> Result<(PolicyDraft, Option<Stage>), IncidentError> {
        if let Some(tid) = &order.template {
            let pb = self.playbook();
            let t = pb.templates.iter().find(|t| &t.id == tid).ok_or_else(|| IncidentError::UnknownTemplate(tid.clone()))?;
            let scope = match (&order.scope, &t.scope) {
                (Some(s), _) => s.clone(),
                (None, TemplateScope::Fixed(s)) => s.clone(),
                (None, TemplateScope::Dynamic(_)) => {
                    return Err(IncidentError::InvalidOrder(format!(
                        "template `{tid}` targets flagged principals; supply an explicit scope"
                    )))
                }
            };
            let params = order.params.clone().unwrap_or_else(|| t.params.clone());
            return Ok((PolicyDraft::new(t.kind, scope, params), order.stage.or(Some(t.stage))));
        }
        let kind = order.kind.ok_or_else(|| IncidentError::InvalidOrder("either template or kind is required".into()))?;
        Ok((
            PolicyDraft::new(kind, order.scope.clone().unwrap_or(Scope::Global), order.params.clone().unwrap_or_default()),
            order.stage,
        ))
    }

    /// Applies a correction on behalf of an incident.
    pub fn execute_correction(
        &self,
        id: &str,
        order: &CorrectionOrder,
        actor: Role,
    ) -> Result<AppliedPolicy, IncidentError> {
        let (draft, stage) = self.draft_for(order)?;
        self.apply_for_incident(id, draft, stage, actor, Activation::Manual { role: actor }, false)
    }

    /// Applies an automatic binding's correction under an incident.
    pub(crate) fn apply_for_incident(
        &self,
        id: &str,
        draft: PolicyDraft,
        stage: Option<Stage>,
        actor: Role,
        activation: Activation,
        code_red: bool,
    ) -> Result<AppliedPolicy, IncidentError> {
        let pb = self.playbook();
        let slot = self.slot(id)?;
        let mut inc = slot.lock();
        Self::check(&inc, IncidentOp::ExecuteCorrection)?;
        let ctx = AuthorityContext { code_red, devolution: inc.devolution.as_ref() };
        let auth = pb.authority.authorize(actor, draft.kind, &ctx)?;
        let applied = self.policies.apply(&inc.model_id.clone(), draft, activation, Some(inc.id.clone()), &auth)?;
        let stage = stage.unwrap_or(if inc.state == IncidentState::Remediating { Stage::Remediation } else { Stage::Containment });
        self.record(&inc, actor, &AuditEvent::CorrectionLinked { policy_id: applied.policy.id.clone(), stage })?;
        let rec = CorrectionRecord { policy_id: applied.policy.id.clone(), kind: applied.policy.kind, actor, at: self.clock.now() };
        inc.corrections_applied.push(applied.policy.id.clone());
        match stage {
            Stage::Containment => inc.containment_records.push(rec),
            Stage::Remediation => inc.remediation_records.push(rec),
        }
        self.move_to(&mut inc, IncidentOp::ExecuteCorrection, actor)?;
        Ok(applied)
    }

    pub fn submit_review(&self, id: &str, review: AfterActionReview, actor: Role) -> Result<Incident, IncidentError> {
        if !actor.is_human() {
            return Err(IncidentError::Forbidden(actor));
        }
        review.validate().map_err(IncidentError::InvalidReview)?;
        let slot = self.slot(id)?;
        let mut inc = slot.lock();
        Self::check(&inc, IncidentOp::SubmitReview)?;
        self.record(
            &inc,
            actor,
            &AuditEvent::ReviewSubmitted { approved: review.approved, root_cause: review.root_cause.clone() },
        )?;
        inc.review = Some(review);
        self.move_to(&mut inc, IncidentOp::SubmitReview, actor)?;
        Ok(inc.clone())
    }

    /// The only path that lowers a shutdown state.
    pub fn approve_redeployment(
        &self,
        id: &str,
        review: Option<AfterActionReview>,
        approvals: &Approvals,
        actor: Role,
    ) -> Result<RedeployOutcome, IncidentError> {
        let pb = self.playbook();
        let slot = self.slot(id)?;
        let mut inc = slot.lock();
        let Some(effective) = review.clone().or_else(|| inc.review.clone()) else {
            return Err(IncidentError::ReviewMissing);
        };
        Self::check(&inc, IncidentOp::ApproveRedeployment)?;
        effective.validate().map_err(IncidentError::InvalidReview)?;
        if !effective.approved {
            return Err(IncidentError::ReviewNotApproved);
        }
        if !actor.is_human() {
            return Err(IncidentError::Forbidden(actor));
        }
        pb.redeploy.check(approvals).map_err(IncidentError::InsufficientApprovers)?;
        let snap = self.policies.snapshot(&inc.model_id)?;
        if snap.deployment.state == DeploymentStatus::Decommissioned {
            return Err(PolicyError::TerminalState(inc.model_id.clone()).into());
        }
        if let Some(r) = review {
            self.record(&inc, actor, &AuditEvent::ReviewSubmitted { approved: r.approved, root_cause: r.root_cause.clone() })?;
            inc.review = Some(r);
        }
        let own: Vec<PolicyId> =
            inc.corrections_applied.iter().filter(|p| snap.policies.contains_key(*p)).cloned().collect();
        let approval = RedeployApproval::new(inc.id.clone());
        let (version, _, revoked) = self.policies.restore(&inc.model_id, &own, &approval, actor)?;
        self.move_to(&mut inc, IncidentOp::ApproveRedeployment, actor)?;
        Ok(RedeployOutcome {
            incident_id: inc.id.clone(),
            model_id: inc.model_id.clone(),
            snapshot_version: version,
            revoked,
            state: self.policies.snapshot(&inc.model_id)?.deployment.state,
        })
    }

    pub fn note_stakeholder(&self, id: &str, note: String) -> Result<(), IncidentError> {
        self.slot(id)?.lock().stakeholder_notices.push(note);
        Ok(())
    }

    /// Every audit record tagged with this incident, in order.
    pub fn timeline(&self, id: &str) -> Result<Vec<TimelineEntry>, IncidentError> {
        self.slot(id)?;
        let filter = AuditFilter { incident_id: Some(id.into()), ..Default::default() };
        Ok(self
            .audit
            .query(&filter)
            .into_iter()
            .map(|r| TimelineEntry {
                seq: r.seq,
                at: r.timestamp,
                actor: r.actor,
                kind: r.payload.get("event").and_then(Value::as_str).unwrap_or("unknown").to_owned(),
                detail: r.payload,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests;
