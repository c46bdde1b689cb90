//! HTTP front end over a `Stack`: the token-authenticated control plane and
//! the open data plane.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use deployguard_core::comms::{Audience, NotifyMode};
use deployguard_core::gateway::{GatewayError, InferenceRequest};
use deployguard_core::incident::{
    AfterActionReview, Approvals, CorrectionOrder, IncidentError, IncidentOp, Severity,
};
use deployguard_core::monitor::{PendingMetric, TriageOutcome};
use deployguard_core::policy::{AppliedPolicy, PolicyError, PolicyId, RevokedPolicy};
use deployguard_core::role::Role;
use deployguard_core::stack::{ErrorClass, FeedbackRequest, Stack, StackError};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{AuthFailure, Sessions};

/// Longest a `GET /events` call will hold the connection open.
pub const MAX_WAIT_MS: u64 = 30_000;
const POLL_EVERY: Duration = Duration::from_millis(25);

#[derive(Clone)]
pub struct AppState {
    pub stack: Arc<Stack>,
    pub sessions: Arc<Sessions>,
}

impl AppState {
    pub fn new(stack: Arc<Stack>, sessions: Sessions) -> Self {
        Self { stack, sessions: Arc::new(sessions) }
    }
}

/// Error body shared by every endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub details: Value,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { code: code.into(), message: message.into(), details: json!({}) } }
    }

    fn details(mut self, details: Value) -> Self {
        self.body.details = details;
        self
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "Invalid", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

pub fn status_of(class: ErrorClass) -> StatusCode {
    match class {
        ErrorClass::NotFound => StatusCode::NOT_FOUND,
        ErrorClass::Forbidden => StatusCode::FORBIDDEN,
        ErrorClass::Conflict => StatusCode::CONFLICT,
        ErrorClass::Invalid => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorClass::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
        ErrorClass::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn policy_details(e: &PolicyError) -> Value {
    match e {
        PolicyError::UnauthorizedActor { role, kind, message } => {
            json!({"role": role, "kind": kind, "reason": message})
        }
        PolicyError::InvalidParams { kind, .. } => json!({"kind": kind}),
        PolicyError::NotFound(id) | PolicyError::AlreadyRevoked(id) => json!({"policy_id": id}),
        _ => json!({}),
    }
}

fn details_of(e: &StackError) -> Value {
    match e {
        StackError::Policy(p) | StackError::Incident(IncidentError::Policy(p)) => policy_details(p),
        StackError::Incident(IncidentError::IllegalState { state, op }) => json!({"state": state, "op": op}),
        StackError::Incident(IncidentError::Forbidden(role)) => json!({"role": role}),
        StackError::Gateway(GatewayError::Denied(d)) => json!(d),
        _ => json!({}),
    }
}

impl From<StackError> for ApiError {
    fn from(e: StackError) -> Self {
        let (code, class) = e.classify();
        ApiError::new(status_of(class), code, e.to_string()).details(details_of(&e))
    }
}

/// The authenticated caller of a control-plane endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Caller(pub Role);

impl Caller {
    /// Endpoint-level gate, applied before anything is delegated.
    fn require(self, min: Role) -> Result<Role, ApiError> {
        if self.0 >= min {
            Ok(self.0)
        } else {
            Err(ApiError::new(
                StatusCode::FORBIDDEN,
                "UnauthorizedActor",
                format!("{} may not call this endpoint; requires {min} or above", self.0),
            )
            .details(json!({"role": self.0, "requires": min})))
        }
    }
}

impl FromRequestParts<AppState> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim);
        state.sessions.authenticate(token, state.stack.now()).map(Caller).map_err(|f| {
            let (code, msg) = match f {
                AuthFailure::Missing => ("MissingToken", "an `Authorization: Bearer <token>` header is required"),
                AuthFailure::Unknown => ("InvalidToken", "token not recognised"),
                AuthFailure::Expired => ("ExpiredToken", "token has expired"),
                AuthFailure::NotYetValid => ("InvalidToken", "token is not valid yet"),
            };
            ApiError::new(StatusCode::UNAUTHORIZED, code, msg)
        })
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let bytes: &[u8] = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    serde_json::from_slice(bytes).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "MalformedBody", e.to_string()))
}

type ApiResult = Result<Response, ApiError>;

fn reply<T: Serialize>(status: StatusCode, body: &T) -> ApiResult {
    Ok((status, Json(body)).into_response())
}

fn applied_json(a: &AppliedPolicy) -> Value {
    json!({"policy": a.policy, "snapshot_version": a.snapshot_version, "audit_seq": a.audit_seq})
}

fn revoked_json(r: &RevokedPolicy) -> Value {
    json!({"policy": r.policy, "snapshot_version": r.snapshot_version, "audit_seq": r.audit_seq})
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/infer", post(infer))
        .route("/v1/feedback", post(feedback))
        .route("/internal/events", post(ingest))
        .route("/alerts", get(list_alerts))
        .route("/alerts/{id}/triage", post(triage))
        .route("/incidents", get(list_incidents).post(open_incident))
        .route("/incidents/{id}", get(get_incident))
        .route("/incidents/{id}/timeline", get(timeline))
        .route("/incidents/{id}/escalate", post(escalate))
        .route("/incidents/{id}/acknowledge", post(acknowledge))
        .route("/incidents/{id}/transition", post(transition))
        .route("/incidents/{id}/severity", post(severity))
        .route("/incidents/{id}/corrections", post(correction))
        .route("/incidents/{id}/review", post(review))
        .route("/incidents/{id}/notify", post(notify))
        .route("/incidents/{id}/stakeholders", post(stakeholders))
        .route("/deployments/{id}/redeploy-approval", post(redeploy))
        .route("/policies", get(list_policies))
        .route("/policies/{id}", delete(revoke))
        .route("/playbooks", post(upload_playbook))
        .route("/authority", get(authority))
        .route("/status", get(status))
        .route("/events", get(events))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such endpoint") })
        .with_state(state)
}

// Data plane ------------------------------------------------------------------

async fn infer(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let req: InferenceRequest = parse(&body)?;
    match s.stack.handle(&req) {
        Ok(resp) => reply(StatusCode::OK, &resp),
        Err(GatewayError::Denied(d)) if d.reason_code.is_shutdown() => reply(
            StatusCode::SERVICE_UNAVAILABLE,
            &json!({"state": d.state, "reason_code": d.reason_code, "policy_ids": d.policy_ids,
                    "request_id": d.request_id, "audit_ref": d.audit_ref}),
        ),
        Err(GatewayError::Denied(d)) => reply(
            StatusCode::FORBIDDEN,
            &json!({"reason_code": d.reason_code, "policy_ids": d.policy_ids,
                    "request_id": d.request_id, "audit_ref": d.audit_ref}),
        ),
        Err(GatewayError::BackendUnavailable(model)) => {
            let state = s.stack.policies.snapshot(&model).ok().map(|snap| snap.deployment.state);
            reply(StatusCode::SERVICE_UNAVAILABLE, &json!({"state": state, "reason_code": "BackendUnavailable"}))
        }
        Err(e) => Err(StackError::from(e).into()),
    }
}

async fn feedback(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let fb: FeedbackRequest = parse(&body)?;
    s.stack.feedback(&fb)?;
    reply(StatusCode::ACCEPTED, &json!({"accepted": true}))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    Many(Vec<PendingMetric>),
    One(PendingMetric),
}

async fn ingest(State(s): State<AppState>, _caller: Caller, body: Bytes) -> ApiResult {
    let events = match parse::<OneOrMany>(&body)? {
        OneOrMany::Many(v) => v,
        OneOrMany::One(m) => vec![m],
    };
    let n = events.len();
    for m in events {
        s.stack.ingest_now(m)?;
    }
    reply(StatusCode::ACCEPTED, &json!({"accepted": n}))
}

// Alerts --------------------------------------------------------------------

async fn list_alerts(State(s): State<AppState>, _caller: Caller) -> ApiResult {
    reply(StatusCode::OK, &s.stack.alerts_queue())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TriageBody {
    outcome: TriageOutcome,
}

async fn triage(State(s): State<AppState>, caller: Caller, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let b: TriageBody = parse(&body)?;
    reply(StatusCode::OK, &s.stack.triage(&id, b.outcome, caller.0)?)
}

// Incidents -----------------------------------------------------------------

async fn list_incidents(State(s): State<AppState>, _caller: Caller) -> ApiResult {
    reply(StatusCode::OK, &s.stack.incidents.list())
}

async fn get_incident(State(s): State<AppState>, _caller: Caller, Path(id): Path<String>) -> ApiResult {
    let inc = s.stack.incidents.get(&id).ok_or_else(|| StackError::from(IncidentError::UnknownIncident(id)))?;
    reply(StatusCode::OK, &inc)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OpenBody {
    model_id: String,
    report: String,
    severity: Severity,
}

async fn open_incident(State(s): State<AppState>, caller: Caller, body: Bytes) -> ApiResult {
    let b: OpenBody = parse(&body)?;
    reply(StatusCode::CREATED, &s.stack.open_manual_incident(&b.model_id, &b.report, b.severity, caller.0)?)
}

async fn timeline(State(s): State<AppState>, _caller: Caller, Path(id): Path<String>) -> ApiResult {
    reply(StatusCode::OK, &s.stack.timeline(&id)?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EscalateBody {
    to: Role,
    #[serde(default)]
    emergency: bool,
}

async fn escalate(State(s): State<AppState>, caller: Caller, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let b: EscalateBody = parse(&body)?;
    reply(StatusCode::OK, &s.stack.escalate(&id, caller.0, b.to, b.emergency)?)
}

async fn acknowledge(State(s): State<AppState>, caller: Caller, Path(id): Path<String>) -> ApiResult {
    reply(StatusCode::OK, &s.stack.acknowledge(&id, caller.0)?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TransitionBody {
    op: IncidentOp,
}

async fn transition(State(s): State<AppState>, caller: Caller, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let b: TransitionBody = parse(&body)?;
    reply(StatusCode::OK, &s.stack.transition(&id, b.op, caller.0)?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SeverityBody {
    severity: Severity,
}

async fn severity(State(s): State<AppState>, caller: Caller, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let b: SeverityBody = parse(&body)?;
    reply(StatusCode::OK, &s.stack.assess_severity(&id, b.severity, caller.0)?)
}

async fn correction(State(s): State<AppState>, caller: Caller, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let order: CorrectionOrder = parse(&body)?;
    let applied = s.stack.execute_correction(&id, &order, caller.0)?;
    reply(StatusCode::CREATED, &applied_json(&applied))
}

async fn review(State(s): State<AppState>, caller: Caller, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let r: AfterActionReview = parse(&body)?;
    reply(StatusCode::OK, &s.stack.submit_review(&id, r, caller.0)?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NotifyBody {
    #[serde(default = "default_mode")]
    mode: NotifyMode,
    message: String,
    #[serde(default)]
    affected: Option<Vec<String>>,
}

fn default_mode() -> NotifyMode {
    NotifyMode::Standard
}

async fn notify(State(s): State<AppState>, caller: Caller, Path(id): Path<String>, body: Bytes) -> ApiResult {
    caller.require(Role::SocLead)?;
    let b: NotifyBody = parse(&body)?;
    reply(StatusCode::OK, &s.stack.notify(&id, b.affected.as_deref(), b.mode, &b.message)?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StakeholderBody {
    audiences: Vec<Audience>,
    summary: String,
}

async fn stakeholders(State(s): State<AppState>, caller: Caller, Path(id): Path<String>, body: Bytes) -> ApiResult {
    caller.require(Role::SocLead)?;
    let b: StakeholderBody = parse(&body)?;
    reply(StatusCode::OK, &s.stack.alert_stakeholders(&id, &b.audiences, &b.summary)?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RedeployBody {
    incident_id: String,
    #[serde(default)]
    review: Option<AfterActionReview>,
    #[serde(default)]
    approvals: Approvals,
}

async fn redeploy(State(s): State<AppState>, caller: Caller, Path(model): Path<String>, body: Bytes) -> ApiResult {
    let mut b: RedeployBody = parse(&body)?;
    // a token can only vouch for its own role or a junior one
    if let Some(r) = b.approvals.roles.iter().find(|r| **r > caller.0) {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "UnauthorizedActor",
            format!("{} cannot sign off as {r}", caller.0),
        )
        .details(json!({"role": caller.0, "claimed": r})));
    }
    if !b.approvals.roles.contains(&caller.0) {
        b.approvals.roles.push(caller.0);
    }
    let inc = s
        .stack
        .incidents
        .get(&b.incident_id)
        .ok_or_else(|| StackError::from(IncidentError::UnknownIncident(b.incident_id.clone())))?;
    if inc.model_id != model {
        return Err(ApiError::invalid(format!("incident `{}` concerns `{}`, not `{model}`", inc.id, inc.model_id))
            .details(json!({"incident_model": inc.model_id, "deployment": model})));
    }
    reply(StatusCode::OK, &s.stack.approve_redeployment(&b.incident_id, b.review, &b.approvals, caller.0)?)
}

// Policies and configuration ------------------------------------------------

async fn list_policies(State(s): State<AppState>, _caller: Caller) -> ApiResult {
    reply(StatusCode::OK, &s.stack.policies())
}

async fn revoke(State(s): State<AppState>, caller: Caller, Path(id): Path<String>) -> ApiResult {
    let r = s.stack.revoke_policy(&PolicyId(id), caller.0)?;
    reply(StatusCode::OK, &revoked_json(&r))
}

async fn upload_playbook(State(s): State<AppState>, caller: Caller, body: Bytes) -> ApiResult {
    caller.require(Role::Ciso)?;
    let text = std::str::from_utf8(&body).map_err(|_| ApiError::invalid("playbook must be UTF-8 JSON"))?;
    let pb = s.stack.upload_playbook(text)?;
    reply(StatusCode::CREATED, &json!({"id": pb.id}))
}

#[derive(Deserialize)]
struct AuthorityQuery {
    #[serde(default)]
    role: Option<String>,
    #[serde(default)]
    incident: Option<String>,
}

/// Dry run of the authority matrix; defaults to the caller's own role.
async fn authority(State(s): State<AppState>, caller: Caller, Query(q): Query<AuthorityQuery>) -> ApiResult {
    let role = match q.role {
        Some(r) => r.parse::<Role>().map_err(ApiError::invalid)?,
        None => caller.0,
    };
    let grants = s.stack.authority_preview(role, q.incident.as_deref())?;
    reply(StatusCode::OK, &json!({"role": role, "incident": q.incident, "grants": grants}))
}

async fn status(State(s): State<AppState>, _caller: Caller) -> ApiResult {
    reply(StatusCode::OK, &s.stack.status())
}

#[derive(Deserialize)]
struct EventsQuery {
    #[serde(default)]
    since: u64,
    #[serde(default)]
    wait_ms: Option<u64>,
}

/// Long poll: returns as soon as anything newer than `since` exists, or
/// empty once `wait_ms` runs out.
async fn events(State(s): State<AppState>, _caller: Caller, Query(q): Query<EventsQuery>) -> ApiResult {
    let wait = Duration::from_millis(q.wait_ms.unwrap_or(MAX_WAIT_MS).min(MAX_WAIT_MS));
    let deadline = tokio::time::Instant::now() + wait;
    loop {
        let evs = s.stack.feed.since(q.since);
        if !evs.is_empty() || tokio::time::Instant::now() >= deadline {
            let cursor = evs.last().map(|e| e.id).unwrap_or(q.since);
            return reply(StatusCode::OK, &json!({"events": evs, "cursor": cursor}));
        }
        tokio::time::sleep(POLL_EVERY).await;
    }
}
