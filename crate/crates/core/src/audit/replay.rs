//! Rebuilds policy, deployment and incident state from a verified log.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{verify_chain, AuditCategory, AuditError, AuditEvent, AuditRecord};
use crate::incident::{next_state, IncidentOp, IncidentState, Severity};
use crate::policy::{PolicyId, PolicySnapshot};
use crate::role::Role;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncidentSummary {
    pub id: String,
    pub model_id: String,
    pub state: IncidentState,
    pub severity: Severity,
    pub linked_alerts: Vec<String>,
    pub corrections_applied: Vec<PolicyId>,
    pub review_approved: Option<bool>,
    pub devolved_to: Option<Role>,
    pub timeline_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReplayState {
    pub deployments: BTreeMap<String, PolicySnapshot>,
    pub incidents: BTreeMap<String, IncidentSummary>,
    pub decisions: u64,
    pub alerts_fired: u64,
    pub last_seq: u64,
}

fn op_from_str(s: &str) -> Option<IncidentOp> {
    IncidentOp::ALL.into_iter().find(|o| o.as_str() == s)
}

fn bad(seq: u64, msg: impl Into<String>) -> AuditError {
    AuditError::MalformedPayload(format!("seq {seq}: {}", msg.into()))
}

/// Verifies the chain, then folds every record into [`ReplayState`].
pub fn replay(records: &[AuditRecord]) -> Result<ReplayState, AuditError> {
    verify_chain(records)?;
    let mut st = ReplayState::default();
    for r in records {
        st.last_seq = r.seq;
        if let Some(id) = &r.incident_id {
            if let Some(inc) = st.incidents.get_mut(id) {
                inc.timeline_len += 1;
            }
        }
        if r.category == AuditCategory::Decision {
            st.decisions += 1;
            continue;
        }
        match r.event()? {
            AuditEvent::DeploymentRegistered { deployment, snapshot_version } => {
                let mut snap = PolicySnapshot::new(deployment);
                snap.version = snapshot_version;
                st.deployments.insert(snap.deployment.model_id.clone(), snap);
            }
            AuditEvent::SnapshotImported { snapshot } => {
                st.deployments.insert(snapshot.deployment.model_id.clone(), snapshot);
            }
            AuditEvent::PolicyApplied { snapshot_version, policy, .. } => {
                let snap = st.deployments.get_mut(&policy.model_id).ok_or_else(|| bad(r.seq, "unknown deployment"))?;
                snap.version = snapshot_version;
                snap.policies.insert(policy.id.clone(), policy);
                snap.deployment = snap.deployment.derived(snap.policies.values());
            }
            AuditEvent::PolicyRevoked { model_id, snapshot_version, policy_id } => {
                let snap = st.deployments.get_mut(&model_id).ok_or_else(|| bad(r.seq, "unknown deployment"))?;
                snap.version = snapshot_version;
                snap.policies.remove(&policy_id);
                snap.deployment = snap.deployment.derived(snap.policies.values());
            }
            AuditEvent::DeploymentRestored { model_id, snapshot_version, revoked } => {
                let snap = st.deployments.get_mut(&model_id).ok_or_else(|| bad(r.seq, "unknown deployment"))?;
                snap.version = snapshot_version;
                for id in &revoked {
                    snap.policies.remove(id);
                }
                snap.deployment = snap.deployment.restored(snap.policies.values());
            }
            AuditEvent::AlertFired { .. } => st.alerts_fired += 1,
            AuditEvent::IncidentOpened { severity, model_id, .. } => {
                let id = r.incident_id.clone().ok_or_else(|| bad(r.seq, "incident record without id"))?;
                st.incidents.insert(
                    id.clone(),
                    IncidentSummary {
                        id,
                        model_id,
                        state: IncidentState::Open,
                        severity,
                        linked_alerts: vec![],
                        corrections_applied: vec![],
                        review_approved: None,
                        devolved_to: None,
                        timeline_len: 1,
                    },
                );
            }
            ev => {
                let Some(inc) = r.incident_id.as_ref().and_then(|id| st.incidents.get_mut(id)) else { continue };
                match ev {
                    AuditEvent::IncidentTransition { from, to, op } => {
                        let op = op_from_str(&op).ok_or_else(|| bad(r.seq, format!("unknown op {op}")))?;
                        if inc.state != from || next_state(from, op) != Some(to) {
                            return Err(bad(r.seq, format!("illegal transition {from:?} -> {to:?}")));
                        }
                        inc.state = to;
                    }
                    AuditEvent::AlertLinked { alert_id } => inc.linked_alerts.push(alert_id),
                    AuditEvent::SeverityAssessed { to, .. } => inc.severity = to,
                    AuditEvent::CorrectionLinked { policy_id, .. } => inc.corrections_applied.push(policy_id),
                    AuditEvent::ReviewSubmitted { approved, .. } => inc.review_approved = Some(approved),
                    AuditEvent::AuthorityDevolved { to, .. } => inc.devolved_to = Some(to),
                    _ => {}
                }
            }
        }
    }
    Ok(st)
}
