//! The fully wired system: gateway, policy store, monitor, incident engine,
//! comms and audit log sharing one clock.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::audit::replay::{IncidentSummary, ReplayState};
use crate::audit::{AuditCategory, AuditError, AuditEvent, AuditFilter, AuditLog};
use crate::authority::{AuthorityContext, AuthorityMatrix};
use crate::clock::{Clock, Timestamp};
use crate::comms::{
    Audience, Comms, CommsError, FallbackDirectory, FallbackRoute, NotificationBatch, NotifyMode, Receipt,
    RecordingTransport, Remedy, SeededSink, StakeholderMessage,
};
use crate::gateway::backend::{Cue, MockBackend};
use crate::gateway::filter::{FilterHit, OutputFilter, PatternFilter};
use crate::gateway::limiter::Limiter;
use crate::gateway::session::SessionTracker;
use crate::gateway::{Gateway, GatewayError, GatewayParts, InferenceRequest, InferenceResponse};
use crate::incident::{
    AfterActionReview, Approvals, CorrectionOrder, DynamicScope, Incident, IncidentEngine, IncidentError, IncidentOp,
    IncidentSource, Playbook, PlaybookError, RedeployOutcome, Severity, TemplateScope, TimelineEntry,
};
use crate::monitor::{
    Alert, Binding, BindingResult, Grade, MetricEvent, MetricFlags, MetricKind, Monitor, MonitorError, PendingMetric,
    TriageOutcome,
};
use crate::policy::{
    Activation, AppliedPolicy, Capabilities, CorrectionKind, CorrectionPolicy, DeploymentState, DeploymentStatus,
    PolicyDraft, PolicyError, PolicyId, PolicyStore, Principal, RevokedPolicy, Scope,
};
use crate::registry::PrincipalRegistry;
use crate::role::Role;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeploymentSpec {
    pub model_id: String,
    pub version: String,
    /// Further versions the backend can serve, e.g. for rollback.
    #[serde(default)]
    pub other_versions: Vec<String>,
    #[serde(default)]
    pub capabilities: Capabilities,
}

pub struct StackConfig {
    pub seed: u64,
    pub playbook: Playbook,
    pub deployments: Vec<DeploymentSpec>,
    pub principals: Vec<Principal>,
    pub audit_path: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum StackError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Incident(#[from] IncidentError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    Comms(#[from] CommsError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Playbook(#[from] PlaybookError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("unknown principal `{0}`")]
    UnknownPrincipal(String),
    #[error("{0}")]
    Invalid(String),
}

/// Broad error classes, mapped one-to-one onto HTTP statuses by the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorClass {
    NotFound,
    Forbidden,
    Conflict,
    Invalid,
    Unavailable,
    Internal,
}

fn audit_code(e: &AuditError) -> &'static str {
    match e {
        AuditError::StorageFailure(_) => "StorageFailure",
        AuditError::MalformedPayload(_) => "MalformedPayload",
        AuditError::ChainBroken { .. } => "ChainBroken",
    }
}

fn policy_code(e: &PolicyError) -> (&'static str, ErrorClass) {
    use ErrorClass::*;
    match e {
        PolicyError::UnknownDeployment(_) => ("UnknownDeployment", NotFound),
        PolicyError::DuplicateDeployment(_) => ("DuplicateDeployment", Conflict),
        PolicyError::MalformedContext(_) => ("MalformedContext", Invalid),
        PolicyError::UnauthorizedActor { .. } => ("UnauthorizedActor", Forbidden),
        PolicyError::InvalidParams { .. } => ("InvalidParams", Invalid),
        PolicyError::TerminalState(_) => ("TerminalState", Conflict),
        PolicyError::NotFound(_) => ("PolicyNotFound", NotFound),
        PolicyError::AlreadyRevoked(_) => ("AlreadyRevoked", Conflict),
        PolicyError::Import(_) => ("ImportFailed", Invalid),
        PolicyError::Audit(a) => (audit_code(a), Internal),
    }
}

impl StackError {
    /// Stable machine-readable code and error class.
    pub fn classify(&self) -> (&'static str, ErrorClass) {
        use ErrorClass::*;
        match self {
            StackError::Policy(e) => policy_code(e),
            StackError::Incident(e) => match e {
                IncidentError::UnknownIncident(_) => ("UnknownIncident", NotFound),
                IncidentError::UnknownSource(_) => ("UnknownSource", Invalid),
                IncidentError::IllegalState { .. } => ("IllegalState", Conflict),
                IncidentError::InvalidChainStep { .. } => ("InvalidChainStep", Invalid),
                IncidentError::NoPendingEscalation(_) => ("NoPendingEscalation", Conflict),
                IncidentError::UnknownTemplate(_) => ("UnknownTemplate", Invalid),
                IncidentError::InvalidOrder(_) => ("InvalidOrder", Invalid),
                IncidentError::Forbidden(_) => ("Forbidden", Forbidden),
                IncidentError::ReviewMissing => ("ReviewMissing", Conflict),
                IncidentError::ReviewNotApproved => ("ReviewNotApproved", Conflict),
                IncidentError::InvalidReview(_) => ("InvalidReview", Invalid),
                IncidentError::InsufficientApprovers(_) => ("InsufficientApprovers", Forbidden),
                IncidentError::Policy(p) => policy_code(p),
                IncidentError::Audit(a) => (audit_code(a), Internal),
            },
            StackError::Monitor(e) => match e {
                MonitorError::MalformedEvent(_) => ("MalformedEvent", Invalid),
                MonitorError::AlreadyTriaged(_) => ("AlreadyTriaged", Conflict),
                MonitorError::UnknownAlert(_) => ("UnknownAlert", NotFound),
                MonitorError::UnauthorizedActor(_) => ("UnauthorizedActor", Forbidden),
                MonitorError::MissingIncident => ("MissingIncident", Invalid),
                MonitorError::Audit(a) => (audit_code(a), Internal),
            },
            StackError::Comms(e) => match e {
                CommsError::NoPlan(_) => ("NoPlan", Invalid),
                CommsError::TargetMissing(_) => ("TargetMissing", Conflict),
                CommsError::NoSlaConfigured(_) => ("NoSLAConfigured", Invalid),
                CommsError::NoEndpoint(_) => ("NoEndpoint", Invalid),
                CommsError::Audit(a) => (audit_code(a), Internal),
            },
            StackError::Gateway(e) => match e {
                GatewayError::Denied(d) if d.reason_code.is_shutdown() => ("Denied", Unavailable),
                GatewayError::Denied(_) => ("Denied", Forbidden),
                GatewayError::BackendUnavailable(_) => ("BackendUnavailable", Unavailable),
                GatewayError::UnknownSession(_) => ("UnknownSession", NotFound),
                GatewayError::Policy(p) => policy_code(p),
                GatewayError::Audit(a) => (audit_code(a), Internal),
            },
            StackError::Playbook(e) => (e.code(), Invalid),
            StackError::Audit(a) => (audit_code(a), Internal),
            StackError::UnknownPrincipal(_) => ("UnknownPrincipal", NotFound),
            StackError::Invalid(_) => ("Invalid", Invalid),
        }
    }

    pub fn code(&self) -> &'static str {
        self.classify().0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedEvent {
    pub id: u64,
    pub at: Timestamp,
    pub kind: String,
    pub data: Value,
}

/// Append-only event feed with monotonic ids; clients de-duplicate on id.
#[derive(Default)]
pub struct EventFeed {
    events: RwLock<Vec<FeedEvent>>,
}

impl EventFeed {
    pub fn push(&self, at: Timestamp, kind: &str, data: Value) {
        let mut ev = self.events.write();
        let id = ev.len() as u64 + 1;
        ev.push(FeedEvent { id, at, kind: kind.into(), data });
    }

    pub fn since(&self, cursor: u64) -> Vec<FeedEvent> {
        self.events.read().iter().filter(|e| e.id > cursor).cloned().collect()
    }

    pub fn last_id(&self) -> u64 {
        self.events.read().len() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionSummary {
    pub id: PolicyId,
    pub kind: CorrectionKind,
    pub scope: Scope,
    pub provenance: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentStatusDoc {
    pub model_id: String,
    pub state: DeploymentStatus,
    pub version: String,
    pub moratorium: bool,
    pub snapshot_version: u64,
    pub active_corrections: Vec<CorrectionSummary>,
    pub notice: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusDoc {
    pub deployments: Vec<DeploymentStatusDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickReport {
    pub at: Timestamp,
    pub fired: Vec<Alert>,
    pub devolutions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageResult {
    pub alert: Alert,
    pub incident_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrantPreview {
    pub kind: CorrectionKind,
    pub allowed: bool,
    pub basis: Option<String>,
    pub requires: Option<Role>,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackRequest {
    pub principal_id: String,
    pub model_id: String,
    #[serde(default)]
    pub request_id: Option<String>,
    pub unsatisfactory: bool,
}

struct SharedFilter(RwLock<PatternFilter>);

impl OutputFilter for SharedFilter {
    fn check(&self, pattern_set: &str, text: &str) -> Option<FilterHit> {
        self.0.read().check(pattern_set, text)
    }
}

pub struct Stack {
    pub clock: Arc<dyn Clock>,
    pub audit: Arc<AuditLog>,
    pub policies: Arc<PolicyStore>,
    pub registry: Arc<PrincipalRegistry>,
    pub backend: Arc<MockBackend>,
    pub monitor: Arc<Monitor>,
    pub incidents: Arc<IncidentEngine>,
    pub comms: Arc<Comms>,
    pub transport: Arc<RecordingTransport>,
    pub gateway: Gateway,
    pub feed: EventFeed,
    filter: Arc<SharedFilter>,
    requests: AtomicU64,
    last_states: Mutex<BTreeMap<String, DeploymentStatus>>,
    // serializes control-plane mutations that span modules
    control: Mutex<()>,
}

impl Stack {
    pub fn new(clock: Arc<dyn Clock>, cfg: StackConfig) -> Result<Stack, StackError> {
        cfg.playbook.validate(Some(&cfg.principals))?;
        let audit = Arc::new(match &cfg.audit_path {
            Some(p) => AuditLog::open_file(p, clock.clone())?,
            None => AuditLog::in_memory(clock.clone()),
        });
        let policies = Arc::new(PolicyStore::new(clock.clone(), audit.clone()));
        let registry = Arc::new(PrincipalRegistry::new(cfg.principals.clone()).map_err(StackError::Invalid)?);
        let backend = Arc::new(MockBackend::new(cfg.seed));
        for d in &cfg.deployments {
            let mut ds = DeploymentState::new(d.model_id.clone(), d.version.clone());
            ds.capabilities = d.capabilities.clone();
            policies.register(ds)?;
            backend.add_model(&d.model_id, std::iter::once(d.version.clone()).chain(d.other_versions.iter().cloned()));
        }
        let pb = cfg.playbook;
        let monitor = Arc::new(Monitor::new(clock.clone(), audit.clone(), pb.triggers.clone()));
        let fallbacks = Arc::new(FallbackDirectory::new(pb.fallbacks.clone()));
        let transport = Arc::new(RecordingTransport::default());
        let comms = Arc::new(Comms::new(
            clock.clone(),
            audit.clone(),
            pb.comms.clone(),
            Arc::new(SeededSink::new(cfg.seed, Duration::from_secs(120))),
            transport.clone(),
            fallbacks.clone(),
        ));
        let filter = Arc::new(SharedFilter(RwLock::new(
            PatternFilter::new(&pb.filters).map_err(|e| StackError::Invalid(e.to_string()))?,
        )));
        let gateway = Gateway::new(GatewayParts {
            clock: clock.clone(),
            audit: audit.clone(),
            policies: policies.clone(),
            registry: registry.clone(),
            limiter: Arc::new(Limiter::new()),
            sessions: Arc::new(SessionTracker::new()),
            backend: backend.clone(),
            filter: filter.clone(),
            metrics: monitor.clone(),
            fallbacks,
            injection_set: pb.gateway.injection_set.clone(),
            strip_tools_instead_of_deny: pb.gateway.strip_tools,
        });
        let incidents = Arc::new(IncidentEngine::new(clock.clone(), audit.clone(), policies.clone(), pb));
        let stack = Stack {
            clock,
            audit,
            policies,
            registry,
            backend,
            monitor,
            incidents,
            comms,
            transport,
            gateway,
            feed: EventFeed::default(),
            filter,
            requests: AtomicU64::new(0),
            last_states: Mutex::new(BTreeMap::new()),
            control: Mutex::new(()),
        };
        stack.publish_states();
        Ok(stack)
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn playbook(&self) -> Arc<Playbook> {
        self.incidents.playbook()
    }

    fn publish(&self, kind: &str, data: Value) {
        self.feed.push(self.now(), kind, data);
    }

    fn publish_states(&self) {
        let mut last = self.last_states.lock();
        for snap in self.policies.snapshots() {
            let state = snap.deployment.state;
            if last.get(&snap.deployment.model_id) != Some(&state) {
                last.insert(snap.deployment.model_id.clone(), state);
                self.publish(
                    "deployment_state",
                    json!({"model_id": snap.deployment.model_id, "state": state, "snapshot_version": snap.version}),
                );
            }
        }
    }

    fn publish_incident(&self, kind: &str, id: &str) {
        if let Some(inc) = self.incidents.get(id) {
            self.publish(kind, json!({"incident_id": inc.id, "state": inc.state, "severity": inc.severity}));
        }
    }

    // Data plane ------------------------------------------------------------

    pub fn handle(&self, req: &InferenceRequest) -> Result<InferenceResponse, GatewayError> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        self.gateway.handle_request(req)
    }

    pub fn requests_handled(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn feedback(&self, fb: &FeedbackRequest) -> Result<(), StackError> {
        if !self.registry.contains(&fb.principal_id) {
            return Err(StackError::UnknownPrincipal(fb.principal_id.clone()));
        }
        self.policies.snapshot(&fb.model_id)?;
        self.monitor.ingest_now(PendingMetric {
            kind: MetricKind::Feedback,
            deployment: fb.model_id.clone(),
            principal: Some(fb.principal_id.clone()),
            value: 1.0,
            flags: MetricFlags { user_unsatisfactory: fb.unsatisfactory, ..Default::default() },
            source: "feedback".into(),
            note: fb.request_id.clone(),
        })?;
        Ok(())
    }

    pub fn ingest(&self, event: MetricEvent) -> Result<(), StackError> {
        Ok(self.monitor.ingest(event)?)
    }

    pub fn ingest_now(&self, m: PendingMetric) -> Result<(), StackError> {
        Ok(self.monitor.ingest_now(m)?)
    }

    pub fn script_backend(&self, model_id: &str, cue: Cue) {
        self.backend.script(model_id, cue);
    }

    // Monitoring --------------------------------------------------------------

    /// One evaluation pass: fire alerts, run their bindings, then check for
    /// unanswered escalations.
    pub fn tick(&self) -> Result<TickReport, StackError> {
        let _g = self.control.lock();
        let now = self.now();
        let fired = self.monitor.evaluate(now)?;
        let mut out = Vec::new();
        for alert in fired {
            self.publish(
                "alert_fired",
                json!({"alert_id": alert.id, "trigger_id": alert.trigger_id, "severity": alert.severity, "grade": alert.grade}),
            );
            let result = self.run_binding(&alert)?;
            if let Some(r) = result {
                self.monitor.record_binding(&alert.id, r)?;
            }
            out.push(self.monitor.alert(&alert.id).expect("alert just fired"));
        }
        let devs = self.incidents.check_devolution(now)?;
        for d in &devs {
            self.publish(
                "authority_devolved",
                json!({"incident_id": d.incident_id, "role": d.role, "kinds": d.kinds}),
            );
        }
        self.publish_states();
        Ok(TickReport { at: now, fired: out, devolutions: devs.into_iter().map(|d| d.incident_id).collect() })
    }

    fn binding_model(&self, alert: &Alert) -> Option<String> {
        alert.model_id.clone().or_else(|| self.policies.model_ids().into_iter().next())
    }

    fn expand(&self, alert: &Alert, template_id: &str) -> Result<(Vec<PolicyDraft>, crate::incident::Stage), String> {
        let pb = self.playbook();
        let t = pb.template(template_id).ok_or_else(|| format!("unknown template `{template_id}`"))?;
        let drafts = match &t.scope {
            TemplateScope::Fixed(s) => vec![PolicyDraft::new(t.kind, s.clone(), t.params.clone())],
            TemplateScope::Dynamic(DynamicScope::FlaggedPrincipals) => alert
                .flagged_principals
                .iter()
                .map(|p| PolicyDraft::new(t.kind, Scope::Principal(p.clone()), t.params.clone()))
                .collect(),
        };
        Ok((drafts, t.stage))
    }

    fn run_binding(&self, alert: &Alert) -> Result<Option<BindingResult>, StackError> {
        let Some(model_id) = self.binding_model(alert) else { return Ok(None) };
        let code_red = alert.grade == Grade::CodeRed;
        match &alert.binding {
            Binding::AlertOnly => Ok(None),
            Binding::AutoIncident { .. } => {
                let id = self.open_for_alert(alert, &model_id)?;
                Ok(Some(BindingResult { policies: vec![], incident_id: Some(id), error: None }))
            }
            Binding::AutoCorrection { template, open_incident } => {
                let (drafts, stage) = match self.expand(alert, template) {
                    Ok(d) => d,
                    Err(e) => return Ok(Some(BindingResult { policies: vec![], incident_id: None, error: Some(e) })),
                };
                let incident_id = if *open_incident { Some(self.open_for_alert(alert, &model_id)?) } else { None };
                let mut policies = Vec::new();
                let mut errors = Vec::new();
                let activation = Activation::Automatic { trigger_id: alert.trigger_id.clone() };
                for draft in drafts {
                    let res = match &incident_id {
                        Some(id) => self
                            .incidents
                            .apply_for_incident(id, draft, Some(stage), Role::System, activation.clone(), code_red)
                            .map_err(|e| e.to_string()),
                        None => {
                            let pb = self.playbook();
                            let ctx = AuthorityContext { code_red, devolution: None };
                            pb.authority
                                .authorize(Role::System, draft.kind, &ctx)
                                .and_then(|auth| self.policies.apply(&model_id, draft, activation.clone(), None, &auth))
                                .map_err(|e| e.to_string())
                        }
                    };
                    match res {
                        Ok(applied) => {
                            self.after_apply(&applied)?;
                            policies.push(applied.policy.id);
                        }
                        Err(e) => errors.push(e),
                    }
                }
                let error = (!errors.is_empty()).then(|| errors.join("; "));
                Ok(Some(BindingResult { policies, incident_id, error }))
            }
        }
    }

    fn open_for_alert(&self, alert: &Alert, model_id: &str) -> Result<String, StackError> {
        let (inc, created) = self.incidents.open_incident(
            IncidentSource::Alert { alert_id: alert.id.clone() },
            model_id,
            alert.severity,
            Role::System,
        )?;
        self.monitor.link_incident(&alert.id, &inc.id)?;
        if created {
            self.publish_incident("incident_opened", &inc.id);
        }
        Ok(inc.id)
    }

    fn after_apply(&self, applied: &AppliedPolicy) -> Result<(), StackError> {
        let p = &applied.policy;
        match p.kind {
            CorrectionKind::PowerOff => {
                let snap = self.policies.snapshot(&p.model_id)?;
                self.backend.set_version_reachable(&p.model_id, &snap.deployment.version, false);
            }
            CorrectionKind::Decommission => {
                let versions = self.backend.tombstone(&p.model_id);
                self.audit.append(
                    Role::System,
                    p.provenance.as_deref(),
                    &AuditEvent::ArtifactsTombstoned { model_id: p.model_id.clone(), versions },
                )?;
            }
            _ => {}
        }
        self.publish(
            "correction_applied",
            json!({"policy_id": p.id, "kind": p.kind, "model_id": p.model_id, "incident_id": p.provenance}),
        );
        self.publish_states();
        Ok(())
    }

    pub fn alerts_queue(&self) -> Vec<Alert> {
        self.monitor.queue()
    }

    pub fn triage(&self, alert_id: &str, outcome: TriageOutcome, actor: Role) -> Result<TriageResult, StackError> {
        let _g = self.control.lock();
        let alert = self.monitor.check_triage(alert_id, actor)?;
        let incident_id = if outcome == TriageOutcome::TruePositive {
            let existing = alert.incident_id.clone().or_else(|| self.incidents.by_alert(alert_id));
            Some(match existing {
                Some(id) => id,
                None => {
                    let model = self
                        .binding_model(&alert)
                        .ok_or_else(|| StackError::Invalid("no deployment to attach the incident to".into()))?;
                    let (inc, _) = self.incidents.open_incident(
                        IncidentSource::Alert { alert_id: alert_id.into() },
                        &model,
                        alert.severity,
                        actor,
                    )?;
                    self.publish_incident("incident_opened", &inc.id);
                    inc.id
                }
            })
        } else {
            None
        };
        let alert = self.monitor.triage(alert_id, outcome, actor, incident_id.as_deref())?;
        self.publish("alert_triaged", json!({"alert_id": alert.id, "outcome": outcome, "incident_id": incident_id}));
        Ok(TriageResult { alert, incident_id })
    }

    // Incidents ---------------------------------------------------------------

    pub fn open_manual_incident(
        &self,
        model_id: &str,
        report: &str,
        severity: Severity,
        actor: Role,
    ) -> Result<Incident, StackError> {
        if !actor.is_human() {
            return Err(IncidentError::Forbidden(actor).into());
        }
        let _g = self.control.lock();
        let (inc, _) = self.incidents.open_incident(
            IncidentSource::Manual { report: report.into() },
            model_id,
            severity,
            actor,
        )?;
        self.publish_incident("incident_opened", &inc.id);
        Ok(inc)
    }

    pub fn execute_correction(
        &self,
        incident_id: &str,
        order: &CorrectionOrder,
        actor: Role,
    ) -> Result<AppliedPolicy, StackError> {
        if !actor.is_human() {
            return Err(IncidentError::Forbidden(actor).into());
        }
        let _g = self.control.lock();
        let applied = self.incidents.execute_correction(incident_id, order, actor)?;
        self.after_apply(&applied)?;
        self.publish_incident("incident_updated", incident_id);
        Ok(applied)
    }

    pub fn revoke_policy(&self, id: &PolicyId, actor: Role) -> Result<RevokedPolicy, StackError> {
        let _g = self.control.lock();
        let policy = self.policies.find(id).ok_or_else(|| PolicyError::NotFound(id.clone()))?;
        let devolution = policy.provenance.as_deref().and_then(|i| self.incidents.get(i)).and_then(|i| i.devolution);
        let ctx = AuthorityContext { code_red: false, devolution: devolution.as_ref() };
        let auth = self.playbook().authority.authorize(actor, policy.kind, &ctx)?;
        let revoked = self.policies.revoke(id, &auth)?;
        self.publish("policy_revoked", json!({"policy_id": id, "model_id": revoked.policy.model_id}));
        self.publish_states();
        Ok(revoked)
    }

    pub fn transition(&self, incident_id: &str, op: IncidentOp, actor: Role) -> Result<Incident, StackError> {
        let _g = self.control.lock();
        let inc = self.incidents.transition(incident_id, op, actor)?;
        self.publish_incident("incident_updated", incident_id);
        Ok(inc)
    }

    pub fn assess_severity(&self, incident_id: &str, severity: Severity, actor: Role) -> Result<Incident, StackError> {
        let _g = self.control.lock();
        let inc = self.incidents.assess_severity(incident_id, severity, actor)?;
        self.publish_incident("incident_updated", incident_id);
        Ok(inc)
    }

    pub fn escalate(
        &self,
        incident_id: &str,
        from: Role,
        to: Role,
        emergency: bool,
    ) -> Result<Incident, StackError> {
        if !from.is_human() {
            return Err(IncidentError::Forbidden(from).into());
        }
        let _g = self.control.lock();
        let inc = self.incidents.escalate(incident_id, from, to, emergency)?;
        self.publish("incident_escalated", json!({"incident_id": incident_id, "from": from, "to": to, "emergency": emergency}));
        Ok(inc)
    }

    pub fn acknowledge(&self, incident_id: &str, role: Role) -> Result<Incident, StackError> {
        let _g = self.control.lock();
        let inc = self.incidents.acknowledge(incident_id, role)?;
        self.publish_incident("incident_updated", incident_id);
        Ok(inc)
    }

    pub fn submit_review(
        &self,
        incident_id: &str,
        review: AfterActionReview,
        actor: Role,
    ) -> Result<Incident, StackError> {
        let _g = self.control.lock();
        let inc = self.incidents.submit_review(incident_id, review, actor)?;
        self.publish_incident("incident_updated", incident_id);
        Ok(inc)
    }

    pub fn approve_redeployment(
        &self,
        incident_id: &str,
        review: Option<AfterActionReview>,
        approvals: &Approvals,
        actor: Role,
    ) -> Result<RedeployOutcome, StackError> {
        let _g = self.control.lock();
        let out = self.incidents.approve_redeployment(incident_id, review, approvals, actor)?;
        let snap = self.policies.snapshot(&out.model_id)?;
        self.backend.set_version_reachable(&out.model_id, &snap.deployment.version, true);
        for principal in self.comms.fallbacks().active().keys() {
            self.comms.deactivate_fallback(principal, Some(incident_id))?;
        }
        self.publish_incident("incident_updated", incident_id);
        self.publish_states();
        Ok(out)
    }

    pub fn timeline(&self, incident_id: &str) -> Result<Vec<TimelineEntry>, StackError> {
        Ok(self.incidents.timeline(incident_id)?)
    }

    /// Dry-run of the authority matrix for `role`, optionally in an incident's context.
    pub fn authority_preview(&self, role: Role, incident_id: Option<&str>) -> Result<Vec<GrantPreview>, StackError> {
        let devolution = match incident_id {
            Some(id) => self.incidents.get(id).ok_or_else(|| IncidentError::UnknownIncident(id.into()))?.devolution,
            None => None,
        };
        let matrix: AuthorityMatrix = self.playbook().authority.clone();
        let ctx = AuthorityContext { code_red: false, devolution: devolution.as_ref() };
        Ok(CorrectionKind::ALL
            .into_iter()
            .map(|kind| match matrix.authorize(role, kind, &ctx) {
                Ok(a) => GrantPreview {
                    kind,
                    allowed: true,
                    basis: Some(serde_json::to_value(a.basis()).ok().and_then(|v| v["basis"].as_str().map(str::to_owned)).unwrap_or_default()),
                    requires: None,
                    message: None,
                },
                Err(e) => GrantPreview {
                    kind,
                    allowed: false,
                    basis: None,
                    requires: matrix.minimum_role(kind),
                    message: Some(match e {
                        PolicyError::UnauthorizedActor { message, .. } => message,
                        other => other.to_string(),
                    }),
                },
            })
            .collect())
    }

    // Comms -------------------------------------------------------------------

    pub fn notify(
        &self,
        incident_id: &str,
        affected: Option<&[String]>,
        mode: NotifyMode,
        message: &str,
    ) -> Result<NotificationBatch, StackError> {
        let inc = self.incidents.get(incident_id).ok_or_else(|| IncidentError::UnknownIncident(incident_id.into()))?;
        let principals: Vec<Principal> = match affected {
            None => self.registry.all(),
            Some(ids) => ids
                .iter()
                .map(|id| self.registry.get(id).ok_or_else(|| StackError::UnknownPrincipal(id.clone())))
                .collect::<Result<_, _>>()?,
        };
        let batch = self.comms.notify(incident_id, &inc.model_id, &principals, mode, message)?;
        self.publish("notification_batch", json!({"incident_id": incident_id, "sends": batch.sends.len()}));
        Ok(batch)
    }

    pub fn alert_stakeholders(
        &self,
        incident_id: &str,
        audiences: &[Audience],
        summary: &str,
    ) -> Result<Vec<Receipt>, StackError> {
        let inc = self.incidents.get(incident_id).ok_or_else(|| IncidentError::UnknownIncident(incident_id.into()))?;
        let msg = StakeholderMessage {
            incident_id: inc.id.clone(),
            severity: inc.severity,
            corrections: inc.corrections_applied.clone(),
            summary: summary.into(),
            timestamp: self.now(),
        };
        let receipts = self.comms.alert_stakeholders(&msg, audiences)?;
        for r in &receipts {
            self.incidents.note_stakeholder(incident_id, format!("{:?}:{:?}", r.audience, r.status))?;
        }
        Ok(receipts)
    }

    pub fn activate_fallback(&self, principal_id: &str, incident_id: Option<&str>) -> Result<FallbackRoute, StackError> {
        let model = match incident_id {
            Some(id) => self.incidents.get(id).ok_or_else(|| IncidentError::UnknownIncident(id.into()))?.model_id,
            None => self.policies.model_ids().into_iter().next().unwrap_or_default(),
        };
        let route = self.comms.activate_fallback(principal_id, incident_id, &model, &*self.backend)?;
        self.publish("fallback_activated", json!({"principal_id": principal_id, "route": route}));
        Ok(route)
    }

    pub fn deactivate_fallback(&self, principal_id: &str, incident_id: Option<&str>) -> Result<bool, StackError> {
        Ok(self.comms.deactivate_fallback(principal_id, incident_id)?)
    }

    pub fn record_remedy(
        &self,
        principal_id: &str,
        downtime: Duration,
        incident_id: Option<&str>,
    ) -> Result<Remedy, StackError> {
        let p = self.registry.get(principal_id).ok_or_else(|| StackError::UnknownPrincipal(principal_id.into()))?;
        let remedy = self.comms.compute_remedy(&p, downtime)?;
        self.comms.record_remedy(&remedy, incident_id)?;
        Ok(remedy)
    }

    // Configuration -----------------------------------------------------------

    /// Validates and installs a new playbook. Nothing changes on failure.
    pub fn upload_playbook(&self, text: &str) -> Result<Playbook, StackError> {
        let pb = Playbook::load(text, Some(&self.registry.all()))?;
        let filter = PatternFilter::new(&pb.filters).map_err(|e| StackError::Invalid(e.to_string()))?;
        let _g = self.control.lock();
        *self.filter.0.write() = filter;
        self.monitor.set_triggers(pb.triggers.clone());
        self.comms.set_config(pb.comms.clone());
        self.comms.fallbacks().set_plans(pb.fallbacks.clone());
        self.incidents.set_playbook(pb.clone());
        self.publish("playbook_loaded", json!({"id": pb.id}));
        Ok(pb)
    }

    // Views -------------------------------------------------------------------

    pub fn status(&self) -> StatusDoc {
        StatusDoc {
            deployments: self
                .policies
                .snapshots()
                .iter()
                .map(|s| DeploymentStatusDoc {
                    model_id: s.deployment.model_id.clone(),
                    state: s.deployment.state,
                    version: s.deployment.version.clone(),
                    moratorium: s.deployment.moratorium,
                    snapshot_version: s.version,
                    active_corrections: s.active().map(summary).collect(),
                    notice: self.comms.portal_notice(&s.deployment.model_id),
                })
                .collect(),
        }
    }

    pub fn policies(&self) -> Vec<CorrectionPolicy> {
        self.policies.all_policies()
    }

    /// The state an audit replay must reproduce.
    pub fn live_state(&self) -> ReplayState {
        let records = self.audit.records();
        let mut timeline: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &records {
            if let Some(i) = &r.incident_id {
                *timeline.entry(i.as_str()).or_default() += 1;
            }
        }
        ReplayState {
            deployments: self
                .policies
                .snapshots()
                .iter()
                .map(|s| (s.deployment.model_id.clone(), (**s).clone()))
                .collect(),
            incidents: self
                .incidents
                .list()
                .into_iter()
                .map(|i| {
                    let len = timeline.get(i.id.as_str()).copied().unwrap_or(0);
                    (
                        i.id.clone(),
                        IncidentSummary {
                            id: i.id,
                            model_id: i.model_id,
                            state: i.state,
                            severity: i.severity,
                            linked_alerts: i.linked_alerts,
                            corrections_applied: i.corrections_applied,
                            review_approved: i.review.map(|r| r.approved),
                            devolved_to: i.devolution.map(|d| d.role),
                            timeline_len: len,
                        },
                    )
                })
                .collect(),
            decisions: self.audit.count(&AuditFilter { category: Some(AuditCategory::Decision), ..Default::default() })
                as u64,
            alerts_fired: self.monitor.alerts().len() as u64,
            last_seq: records.last().map_or(0, |r| r.seq),
        }
    }
}

fn summary(p: &CorrectionPolicy) -> CorrectionSummary {
    CorrectionSummary { id: p.id.clone(), kind: p.kind, scope: p.scope.clone(), provenance: p.provenance.clone() }
}
