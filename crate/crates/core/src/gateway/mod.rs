//! Data-plane enforcement.
//!
//! Pipeline per request: principal resolution, fallback routing, decision,
//! throttle consumption, input transforms, backend call, output filter, then
//! exactly one audit record and one metric event.

pub mod backend;
pub mod filter;
pub mod limiter;
pub mod session;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{AuditError, AuditEvent, AuditLog};
use crate::clock::{Clock, Timestamp};
use crate::comms::{FallbackDirectory, FallbackRoute};
use crate::monitor::{MetricFlags, MetricKind, MetricSink, PendingMetric};
use crate::policy::{
    resolve_access, DenyReason, DeploymentStatus, Operation, PolicyError, PolicyId, PolicyStore, RequestContext,
    Transform, Verdict,
};
use crate::registry::PrincipalRegistry;
use crate::role::Role;
use backend::{BackendCall, ModelBackend};
use filter::{OutputFilter, REFUSAL_TEXT};
use limiter::Limiter;
use session::SessionTracker;

/// Wire body of `POST /v1/infer`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub principal_id: String,
    pub session_id: String,
    pub model_id: String,
    pub prompt: String,
    #[serde(default)]
    pub tool_intents: Vec<String>,
    #[serde(default)]
    pub use_case: Option<String>,
    #[serde(default = "yes")]
    pub user_feedback_channel: bool,
    #[serde(default)]
    pub operation: Operation,
}

fn yes() -> bool {
    true
}

impl InferenceRequest {
    pub fn new(principal: &str, session: &str, model: &str, prompt: &str) -> Self {
        Self {
            principal_id: principal.into(),
            session_id: session.into(),
            model_id: model.into(),
            prompt: prompt.into(),
            tool_intents: Vec::new(),
            use_case: None,
            user_feedback_channel: true,
            operation: Operation::Infer,
        }
    }

    /// Whitespace-approximated token count.
    pub fn prompt_tokens(&self) -> u64 {
        self.prompt.split_whitespace().count() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceResponse {
    pub request_id: String,
    pub session_id: String,
    pub model_id: String,
    pub version: String,
    pub output: String,
    pub filtered: bool,
    pub refusal_reason: Option<String>,
    pub transforms_applied: Vec<String>,
    pub prompt_tokens_used: u64,
    pub latency_ms: u64,
    pub route: Option<String>,
    pub audit_ref: u64,
}

/// Structured denial surfaced to the caller.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayDenial {
    pub request_id: String,
    pub reason_code: DenyReason,
    pub policy_ids: Vec<PolicyId>,
    pub state: Option<DeploymentStatus>,
    pub audit_ref: u64,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("denied: {:?}", .0.reason_code)]
    Denied(GatewayDenial),
    #[error("backend for `{0}` is unavailable")]
    BackendUnavailable(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

impl GatewayError {
    pub fn denial(&self) -> Option<&GatewayDenial> {
        match self {
            GatewayError::Denied(d) => Some(d),
            _ => None,
        }
    }
}

pub struct GatewayParts {
    pub clock: Arc<dyn Clock>,
    pub audit: Arc<AuditLog>,
    pub policies: Arc<PolicyStore>,
    pub registry: Arc<PrincipalRegistry>,
    pub limiter: Arc<Limiter>,
    pub sessions: Arc<SessionTracker>,
    pub backend: Arc<dyn ModelBackend>,
    pub filter: Arc<dyn OutputFilter>,
    pub metrics: Arc<dyn MetricSink>,
    pub fallbacks: Arc<FallbackDirectory>,
    /// Pattern set screening prompts for injection attempts.
    pub injection_set: Option<String>,
    /// Strip tool intents instead of denying when a deny-mode limit applies.
    pub strip_tools_instead_of_deny: bool,
}

pub struct Gateway {
    p: GatewayParts,
    next_request: AtomicU64,
}

struct Outcome<'a> {
    request_id: &'a str,
    req: &'a InferenceRequest,
    session_id: &'a str,
    outcome: &'static str,
    reason: Option<String>,
    transforms: Vec<String>,
    policies: Vec<PolicyId>,
    snapshot_version: u64,
    route: Option<String>,
    filtered: bool,
}

impl Gateway {
    pub fn new(parts: GatewayParts) -> Self {
        Self { p: parts, next_request: AtomicU64::new(1) }
    }

    pub fn limiter(&self) -> &Limiter {
        &self.p.limiter
    }

    pub fn sessions(&self) -> &SessionTracker {
        &self.p.sessions
    }

    fn audit(&self, o: Outcome<'_>) -> Result<u64, AuditError> {
        self.p.audit.append(
            Role::System,
            None,
            &AuditEvent::Decision {
                request_id: o.request_id.to_owned(),
                model_id: o.req.model_id.clone(),
                principal_id: o.req.principal_id.clone(),
                session_id: o.session_id.to_owned(),
                outcome: o.outcome.to_owned(),
                reason: o.reason,
                transforms: o.transforms,
                policies: o.policies,
                snapshot_version: o.snapshot_version,
                route: o.route,
                filtered: o.filtered,
            },
        )
    }

    fn emit(&self, req: &InferenceRequest, kind: MetricKind, flags: MetricFlags) {
        self.p.metrics.record(PendingMetric {
            kind,
            deployment: req.model_id.clone(),
            principal: Some(req.principal_id.clone()),
            value: 1.0,
            flags,
            source: "gateway".into(),
            note: None,
        });
    }

    fn injection_flag(&self, req: &InferenceRequest) -> bool {
        self.p.injection_set.as_deref().is_some_and(|set| self.p.filter.check(set, &req.prompt).is_some())
    }

    #[allow(clippy::too_many_arguments)]
    fn deny(
        &self,
        request_id: &str,
        req: &InferenceRequest,
        session: &str,
        reason: DenyReason,
        policies: Vec<PolicyId>,
        state: Option<DeploymentStatus>,
        version: u64,
    ) -> GatewayError {
        let flags = MetricFlags { injection_suspected: self.injection_flag(req), ..Default::default() };
        let seq = self.audit(Outcome {
            request_id,
            req,
            session_id: session,
            outcome: "deny",
            reason: Some(format!("{reason:?}")),
            transforms: Vec::new(),
            policies: policies.clone(),
            snapshot_version: version,
            route: None,
            filtered: false,
        });
        self.emit(req, MetricKind::Denied, flags);
        match seq {
            Ok(seq) => GatewayError::Denied(GatewayDenial {
                request_id: request_id.to_owned(),
                reason_code: reason,
                policy_ids: policies,
                state,
                audit_ref: seq,
            }),
            Err(e) => GatewayError::Audit(e),
        }
    }

    pub fn handle_request(&self, req: &InferenceRequest) -> Result<InferenceResponse, GatewayError> {
        let n = self.next_request.fetch_add(1, Ordering::SeqCst);
        let request_id = format!("req-{n:08}");
        let now = self.p.clock.now();

        let Some(principal) = self.p.registry.get(&req.principal_id) else {
            return Err(self.deny(&request_id, req, &req.session_id, DenyReason::UnknownPrincipal, vec![], None, 0));
        };

        if let Some(route) = self.p.fallbacks.active_route(&principal.id) {
            return self.serve_fallback(&request_id, req, route, now);
        }

        let snap = match self.p.policies.snapshot(&req.model_id) {
            Ok(s) => s,
            Err(e) => {
                // unknown deployment still gets its audit record
                let _ = self.audit(Outcome {
                    request_id: &request_id,
                    req,
                    session_id: &req.session_id,
                    outcome: "error",
                    reason: Some(e.to_string()),
                    transforms: Vec::new(),
                    policies: Vec::new(),
                    snapshot_version: 0,
                    route: None,
                    filtered: false,
                })?;
                return Err(e.into());
            }
        };
        let session = self.p.sessions.resolve(&req.session_id);
        let prompt_tokens = req.prompt_tokens();
        let ctx = RequestContext {
            principal: principal.clone(),
            model_id: req.model_id.clone(),
            session_id: session.clone(),
            use_case: req.use_case.clone(),
            prompt_tokens,
            tool_intents: req.tool_intents.clone(),
            operation: req.operation,
            now,
        };
        let decision = resolve_access(&ctx, &snap, &*self.p.limiter)?;
        let state = snap.deployment.derived(snap.active()).state;
        if let Verdict::Deny(reason) = decision.verdict {
            let shown_state = reason.is_shutdown().then_some(state);
            if reason == DenyReason::ToolUseRestricted && self.p.strip_tools_instead_of_deny {
                // fall through with tools stripped
            } else {
                return Err(self.deny(
                    &request_id,
                    req,
                    &session,
                    reason,
                    decision.applied_policies,
                    shown_state,
                    snap.version,
                ));
            }
        }
        if let Err(exhausted) = self.p.limiter.commit(&decision.charges, now) {
            let reason = decision
                .charges
                .iter()
                .find(|c| c.policy_id == exhausted)
                .map(|c| match c.kind {
                    crate::policy::CorrectionKind::ThrottleEndUsers => DenyReason::EndUserCapReached,
                    crate::policy::CorrectionKind::ThrottleApplications => DenyReason::ApplicationCapReached,
                    crate::policy::CorrectionKind::GlobalPlanningLimit => DenyReason::PlanningLimitReached,
                    _ => DenyReason::Throttled,
                })
                .unwrap_or(DenyReason::Throttled);
            return Err(self.deny(&request_id, req, &session, reason, vec![exhausted], None, snap.version));
        }

        // Input transforms.
        let mut tokens: Vec<String> = req.prompt.split_whitespace().map(str::to_owned).collect();
        let mut tools = req.tool_intents.clone();
        let mut version = snap.deployment.version.clone();
        let mut max_agent_steps = None;
        let mut reset_at = None;
        let mut pattern_sets: Vec<String> = Vec::new();
        let mut applied: Vec<String> = Vec::new();
        if decision.verdict.deny_reason() == Some(DenyReason::ToolUseRestricted) {
            tools.clear();
            applied.push(Transform::StripTools.label());
        }
        for t in decision.verdict.transforms() {
            match t {
                Transform::RouteVersion { version: v } => version = v.clone(),
                Transform::TruncateContext { max_tokens } => {
                    let keep = (*max_tokens).min(tokens.len() as u64) as usize;
                    tokens.drain(..tokens.len() - keep);
                }
                Transform::SessionReset { max_prompts } => reset_at = Some(*max_prompts),
                Transform::StripTools => tools.clear(),
                Transform::LimitAutonomy { max_steps } => max_agent_steps = Some(*max_steps),
                Transform::FilterOutput { pattern_sets: sets } => pattern_sets.extend(sets.iter().cloned()),
            }
            applied.push(t.label());
        }

        let call = BackendCall {
            model_id: req.model_id.clone(),
            version: version.clone(),
            session_id: session.clone(),
            prompt: tokens,
            tool_intents: tools,
            max_agent_steps,
        };
        let output = match self.p.backend.generate(&call) {
            Ok(o) => o,
            Err(e) => {
                self.audit(Outcome {
                    request_id: &request_id,
                    req,
                    session_id: &session,
                    outcome: "backend_unavailable",
                    reason: Some(e.to_string()),
                    transforms: applied,
                    policies: decision.applied_policies.clone(),
                    snapshot_version: snap.version,
                    route: None,
                    filtered: false,
                })?;
                return Err(e);
            }
        };

        // Output filter.
        let hit = pattern_sets.iter().find_map(|set| self.p.filter.check(set, &output.text));
        let (text, filtered, refusal_reason) = match &hit {
            Some(h) => (REFUSAL_TEXT.to_owned(), true, Some(format!("output matched pattern set `{}`", h.pattern_set))),
            None => (output.text.clone(), false, None),
        };

        self.p.sessions.record_prompt(&session)?;
        let mut session_out = session.clone();
        if let Some(rot) = self.p.sessions.rotate_session(&session, reset_at)? {
            self.p.backend.clear_session(&req.model_id, &rot.old);
            session_out = rot.new;
        }

        let seq = self.audit(Outcome {
            request_id: &request_id,
            req,
            session_id: &session,
            outcome: if applied.is_empty() { "allow" } else { "transform" },
            reason: None,
            transforms: applied.clone(),
            policies: decision.applied_policies.clone(),
            snapshot_version: snap.version,
            route: None,
            filtered,
        })?;
        let flags = MetricFlags {
            filter_hit: filtered,
            filter_critical: hit.as_ref().is_some_and(|h| h.critical),
            injection_suspected: self.injection_flag(req),
            ..Default::default()
        };
        self.emit(req, MetricKind::Response, flags);

        Ok(InferenceResponse {
            request_id,
            session_id: session_out,
            model_id: req.model_id.clone(),
            version,
            output: text,
            filtered,
            refusal_reason,
            transforms_applied: applied,
            prompt_tokens_used: call.prompt.len() as u64,
            latency_ms: 20 + output.tokens + call.prompt.len() as u64 / 100,
            route: None,
            audit_ref: seq,
        })
    }

    fn serve_fallback(
        &self,
        request_id: &str,
        req: &InferenceRequest,
        route: FallbackRoute,
        now: Timestamp,
    ) -> Result<InferenceResponse, GatewayError> {
        let (version, output) = match &route {
            FallbackRoute::PreviousModelVersion { version } => {
                let call = BackendCall {
                    model_id: req.model_id.clone(),
                    version: version.clone(),
                    session_id: req.session_id.clone(),
                    prompt: req.prompt.split_whitespace().map(str::to_owned).collect(),
                    tool_intents: Vec::new(),
                    max_agent_steps: None,
                };
                (version.clone(), self.p.backend.generate(&call)?.text)
            }
            FallbackRoute::NonAiStub => (
                "non-ai".to_owned(),
                "Automated assistance is temporarily provided by a rule-based system.".to_owned(),
            ),
            FallbackRoute::HumanOperatorQueue => {
                let ticket = self.p.fallbacks.enqueue_for_operator(&req.principal_id, &req.prompt, now);
                ("human".to_owned(), format!("Your request was queued for a human operator (ticket {ticket})."))
            }
        };
        let label = route.label();
        let seq = self.audit(Outcome {
            request_id,
            req,
            session_id: &req.session_id,
            outcome: "fallback",
            reason: None,
            transforms: Vec::new(),
            policies: Vec::new(),
            snapshot_version: 0,
            route: Some(label.clone()),
            filtered: false,
        })?;
        Ok(InferenceResponse {
            request_id: request_id.to_owned(),
            session_id: req.session_id.clone(),
            model_id: req.model_id.clone(),
            version,
            output,
            filtered: false,
            refusal_reason: None,
            transforms_applied: Vec::new(),
            prompt_tokens_used: req.prompt_tokens(),
            latency_ms: 20,
            route: Some(label),
            audit_ref: seq,
        })
    }
}
