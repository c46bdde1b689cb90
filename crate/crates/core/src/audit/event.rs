use serde::{Deserialize, Serialize};

use super::AuditCategory;
use crate::authority::AuthorityBasis;
use crate::clock::Timestamp;
use crate::comms::{Audience, Channel, FallbackRoute, Remedy};
use crate::incident::{IncidentState, Severity};
use crate::monitor::{Grade, TriageOutcome};
use crate::policy::{CorrectionPolicy, DeploymentState, PolicyId, PolicySnapshot, Tier};
use crate::role::Role;

/// Typed audit payloads. The variant determines the record category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEvent {
    Decision {
        request_id: String,
        model_id: String,
        principal_id: String,
        session_id: String,
        outcome: String,
        reason: Option<String>,
        transforms: Vec<String>,
        policies: Vec<PolicyId>,
        snapshot_version: u64,
        route: Option<String>,
        filtered: bool,
    },
    DeploymentRegistered {
        deployment: DeploymentState,
        snapshot_version: u64,
    },
    SnapshotImported {
        snapshot: PolicySnapshot,
    },
    PolicyApplied {
        snapshot_version: u64,
        policy: CorrectionPolicy,
        authority: AuthorityBasis,
    },
    PolicyRevoked {
        model_id: String,
        snapshot_version: u64,
        policy_id: PolicyId,
    },
    DeploymentRestored {
        model_id: String,
        snapshot_version: u64,
        revoked: Vec<PolicyId>,
    },
    ArtifactsTombstoned {
        model_id: String,
        versions: Vec<String>,
    },
    AlertFired {
        alert_id: String,
        trigger_id: String,
        observed: f64,
        samples: u64,
        severity: Severity,
        grade: Grade,
    },
    AlertCleared {
        trigger_id: String,
    },
    AlertTriaged {
        alert_id: String,
        outcome: TriageOutcome,
    },
    BindingExecuted {
        alert_id: String,
        policies: Vec<PolicyId>,
        error: Option<String>,
    },
    IncidentOpened {
        severity: Severity,
        source: String,
        model_id: String,
        playbook: Option<String>,
    },
    IncidentTransition {
        from: IncidentState,
        to: IncidentState,
        op: String,
    },
    AlertLinked {
        alert_id: String,
    },
    SeverityAssessed {
        from: Severity,
        to: Severity,
    },
    Escalated {
        from: Role,
        to: Role,
        emergency: bool,
    },
    EscalationAcknowledged {
        role: Role,
    },
    AuthorityDevolved {
        unavailable: Role,
        to: Role,
        kinds: Vec<crate::policy::CorrectionKind>,
    },
    CorrectionLinked {
        policy_id: PolicyId,
        stage: crate::incident::Stage,
    },
    ReviewSubmitted {
        approved: bool,
        root_cause: String,
    },
    NotificationSent {
        principal_id: String,
        tier: Tier,
        channel: Channel,
        sent_at: Timestamp,
        acked_at: Option<Timestamp>,
    },
    NotificationTimedOut {
        principal_id: String,
        channel: Channel,
    },
    PortalStatus {
        model_id: String,
        message: String,
    },
    PublicAnnouncement {
        model_id: String,
        message: String,
    },
    StakeholderAlerted {
        audience: Audience,
        delivered: bool,
        attempts: u32,
    },
    EscalationNotice {
        to: Role,
        contact: String,
    },
    RemedyRecorded {
        remedy: Remedy,
    },
    FallbackActivated {
        principal_id: String,
        route: FallbackRoute,
    },
    FallbackDeactivated {
        principal_id: String,
    },
}

impl AuditEvent {
    pub fn category(&self) -> AuditCategory {
        use AuditEvent::*;
        match self {
            Decision { .. } => AuditCategory::Decision,
            DeploymentRegistered { .. }
            | SnapshotImported { .. }
            | PolicyApplied { .. }
            | PolicyRevoked { .. }
            | DeploymentRestored { .. }
            | ArtifactsTombstoned { .. } => AuditCategory::PolicyChange,
            AlertFired { .. } | AlertCleared { .. } | AlertTriaged { .. } | BindingExecuted { .. } => {
                AuditCategory::Alert
            }
            IncidentOpened { .. }
            | IncidentTransition { .. }
            | AlertLinked { .. }
            | SeverityAssessed { .. }
            | Escalated { .. }
            | EscalationAcknowledged { .. }
            | AuthorityDevolved { .. }
            | CorrectionLinked { .. }
            | ReviewSubmitted { .. } => AuditCategory::IncidentEvent,
            NotificationSent { .. }
            | NotificationTimedOut { .. }
            | PortalStatus { .. }
            | PublicAnnouncement { .. }
            | StakeholderAlerted { .. }
            | EscalationNotice { .. }
            | RemedyRecorded { .. } => AuditCategory::Notification,
            FallbackActivated { .. } | FallbackDeactivated { .. } => AuditCategory::FallbackRouting,
        }
    }
}
