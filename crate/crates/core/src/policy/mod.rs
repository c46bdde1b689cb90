//! The correction taxonomy, the policy store and the decision function.

mod kind;
mod model;
mod resolve;
mod store;

use thiserror::Error;

pub use kind::{CorrectionKind, KindCategory};
pub use model::*;
pub use resolve::{resolve_access, ChargeLimit, Decision, FreshUsage, ThrottleCharge, UsageView};
pub use store::{AppliedPolicy, PolicySnapshot, PolicyStore, RedeployApproval, RevokedPolicy};

use crate::audit::AuditError;
use crate::role::Role;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("unknown deployment `{0}`")]
    UnknownDeployment(String),
    #[error("deployment `{0}` already registered")]
    DuplicateDeployment(String),
    #[error("malformed context: {0}")]
    MalformedContext(String),
    #[error("{role} is not authorized for {kind}: {message}")]
    UnauthorizedActor { role: Role, kind: CorrectionKind, message: String },
    #[error("invalid params for {kind}: {message}")]
    InvalidParams { kind: CorrectionKind, message: String },
    #[error("deployment `{0}` is decommissioned")]
    TerminalState(String),
    #[error("policy `{0}` not found")]
    NotFound(PolicyId),
    #[error("policy `{0}` already revoked")]
    AlreadyRevoked(PolicyId),
    #[error("bad snapshot document: {0}")]
    Import(String),
    #[error(transparent)]
    Audit(#[from] AuditError),
}
