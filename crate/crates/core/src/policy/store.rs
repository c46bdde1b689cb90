use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::model::*;
use super::PolicyError;
use crate::audit::{canonical, AuditEvent, AuditLog};
use crate::authority::Authorization;
use crate::clock::Clock;
use crate::role::Role;

/// Immutable view of one deployment's active policies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub version: u64,
    pub deployment: DeploymentState,
    pub policies: BTreeMap<PolicyId, CorrectionPolicy>,
}

impl PolicySnapshot {
    pub fn new(deployment: DeploymentState) -> Self {
        Self { version: 1, deployment, policies: BTreeMap::new() }
    }

    pub fn active(&self) -> impl Iterator<Item = &CorrectionPolicy> {
        self.policies.values().filter(|p| p.is_active())
    }
}

#[derive(Debug, Clone)]
pub struct AppliedPolicy {
    pub policy: CorrectionPolicy,
    pub snapshot_version: u64,
    pub audit_seq: u64,
}

#[derive(Debug, Clone)]
pub struct RevokedPolicy {
    pub policy: CorrectionPolicy,
    pub snapshot_version: u64,
    pub audit_seq: u64,
}

/// Proof that a redeployment gate passed; issued by the incident engine.
#[derive(Debug)]
pub struct RedeployApproval {
    pub(crate) incident_id: String,
}

impl RedeployApproval {
    pub(crate) fn new(incident_id: impl Into<String>) -> Self {
        Self { incident_id: incident_id.into() }
    }

    pub fn incident_id(&self) -> &str {
        &self.incident_id
    }
}

struct Slot {
    current: RwLock<Arc<PolicySnapshot>>,
    /// Every policy ever applied to this deployment; the writer lock.
    history: Mutex<Vec<CorrectionPolicy>>,
}

#[derive(Serialize, Deserialize)]
struct ExportDoc {
    next_policy_id: u64,
    deployments: Vec<PolicySnapshot>,
}

/// Per-deployment snapshot store with a single logical writer each.
pub struct PolicyStore {
    clock: Arc<dyn Clock>,
    audit: Arc<AuditLog>,
    next_id: AtomicU64,
    slots: RwLock<BTreeMap<String, Arc<Slot>>>,
}

impl PolicyStore {
    pub fn new(clock: Arc<dyn Clock>, audit: Arc<AuditLog>) -> Self {
        Self { clock, audit, next_id: AtomicU64::new(1), slots: RwLock::new(BTreeMap::new()) }
    }

    pub fn register(&self, deployment: DeploymentState) -> Result<u64, PolicyError> {
        let mut slots = self.slots.write();
        if slots.contains_key(&deployment.model_id) {
            return Err(PolicyError::DuplicateDeployment(deployment.model_id));
        }
        let snap = PolicySnapshot::new(deployment.clone());
        self.audit.append(
            Role::System,
            None,
            &AuditEvent::DeploymentRegistered { deployment: deployment.clone(), snapshot_version: snap.version },
        )?;
        slots.insert(
            deployment.model_id,
            Arc::new(Slot { current: RwLock::new(Arc::new(snap)), history: Mutex::new(Vec::new()) }),
        );
        Ok(1)
    }

    fn slot(&self, model_id: &str) -> Result<Arc<Slot>, PolicyError> {
        self.slots
            .read()
            .get(model_id)
            .cloned()
            .ok_or_else(|| PolicyError::UnknownDeployment(model_id.to_owned()))
    }

    pub fn snapshot(&self, model_id: &str) -> Result<Arc<PolicySnapshot>, PolicyError> {
        Ok(self.slot(model_id)?.current.read().clone())
    }

    pub fn snapshots(&self) -> Vec<Arc<PolicySnapshot>> {
        self.slots.read().values().map(|s| s.current.read().clone()).collect()
    }

    pub fn model_ids(&self) -> Vec<String> {
        self.slots.read().keys().cloned().collect()
    }

    /// Every policy ever created, active or revoked, in id order.
    pub fn all_policies(&self) -> Vec<CorrectionPolicy> {
        let mut out: Vec<_> = self.slots.read().values().flat_map(|s| s.history.lock().clone()).collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }

    pub fn find(&self, id: &PolicyId) -> Option<CorrectionPolicy> {
        self.slots
            .read()
            .values()
            .find_map(|s| s.history.lock().iter().find(|p| &p.id == id).cloned())
    }

    /// Activates a correction. The deployment state moves atomically with the
    /// new snapshot.
    pub fn apply(
        &self,
        model_id: &str,
        draft: PolicyDraft,
        activation: Activation,
        provenance: Option<String>,
        auth: &Authorization,
    ) -> Result<AppliedPolicy, PolicyError> {
        if auth.kind() != draft.kind {
            return Err(PolicyError::UnauthorizedActor {
                role: auth.role(),
                kind: draft.kind,
                message: format!("authorization was issued for {}", auth.kind()),
            });
        }
        draft.validate()?;
        let slot = self.slot(model_id)?;
        let mut history = slot.history.lock();
        let cur = slot.current.read().clone();
        if cur.deployment.state == DeploymentStatus::Decommissioned {
            return Err(PolicyError::TerminalState(model_id.to_owned()));
        }
        let policy = CorrectionPolicy {
            id: PolicyId::from_counter(self.next_id.fetch_add(1, Ordering::SeqCst)),
            model_id: model_id.to_owned(),
            kind: draft.kind,
            scope: draft.scope,
            params: draft.params,
            activation,
            status: PolicyStatus::Active,
            provenance: provenance.clone(),
            created_at: self.clock.now(),
            revoked_at: None,
        };
        let mut next = (*cur).clone();
        next.version += 1;
        next.policies.insert(policy.id.clone(), policy.clone());
        next.deployment = cur.deployment.derived(next.policies.values());
        let seq = self.audit.append(
            auth.role(),
            provenance.as_deref(),
            &AuditEvent::PolicyApplied {
                snapshot_version: next.version,
                policy: policy.clone(),
                authority: auth.basis().clone(),
            },
        )?;
        history.push(policy.clone());
        let version = next.version;
        *slot.current.write() = Arc::new(next);
        Ok(AppliedPolicy { policy, snapshot_version: version, audit_seq: seq })
    }

    /// Revokes an active policy. Shutdown states stay in place; only an
    /// approved redeployment lifts them.
    pub fn revoke(&self, id: &PolicyId, auth: &Authorization) -> Result<RevokedPolicy, PolicyError> {
        let slot = {
            let slots = self.slots.read();
            slots
                .values()
                .find(|s| s.history.lock().iter().any(|p| &p.id == id))
                .cloned()
                .ok_or_else(|| PolicyError::NotFound(id.clone()))?
        };
        let mut history = slot.history.lock();
        let entry = history.iter_mut().find(|p| &p.id == id).ok_or_else(|| PolicyError::NotFound(id.clone()))?;
        if !entry.is_active() {
            return Err(PolicyError::AlreadyRevoked(id.clone()));
        }
        if auth.kind() != entry.kind {
            return Err(PolicyError::UnauthorizedActor {
                role: auth.role(),
                kind: entry.kind,
                message: format!("authorization was issued for {}", auth.kind()),
            });
        }
        let cur = slot.current.read().clone();
        let mut next = (*cur).clone();
        next.version += 1;
        next.policies.remove(id);
        next.deployment = cur.deployment.derived(next.policies.values());
        let seq = self.audit.append(
            auth.role(),
            entry.provenance.as_deref(),
            &AuditEvent::PolicyRevoked {
                model_id: entry.model_id.clone(),
                snapshot_version: next.version,
                policy_id: id.clone(),
            },
        )?;
        entry.status = PolicyStatus::Revoked;
        entry.revoked_at = Some(self.clock.now());
        let revoked = entry.clone();
        let version = next.version;
        *slot.current.write() = Arc::new(next);
        Ok(RevokedPolicy { policy: revoked, snapshot_version: version, audit_seq: seq })
    }

    /// Returns a deployment to service after an approved review: revokes the
    /// given policies plus every shutdown-class policy and clears the
    /// moratorium.
    pub fn restore(
        &self,
        model_id: &str,
        also_revoke: &[PolicyId],
        approval: &RedeployApproval,
        actor: Role,
    ) -> Result<(u64, u64, Vec<PolicyId>), PolicyError> {
        let slot = self.slot(model_id)?;
        let mut history = slot.history.lock();
        let cur = slot.current.read().clone();
        if cur.deployment.state == DeploymentStatus::Decommissioned {
            return Err(PolicyError::TerminalState(model_id.to_owned()));
        }
        let mut next = (*cur).clone();
        let revoked: Vec<PolicyId> = cur
            .active()
            .filter(|p| p.kind.category() == super::KindCategory::Shutdown || also_revoke.contains(&p.id))
            .map(|p| p.id.clone())
            .collect();
        for id in &revoked {
            next.policies.remove(id);
        }
        next.version += 1;
        next.deployment = cur.deployment.restored(next.policies.values());
        let seq = self.audit.append(
            actor,
            Some(approval.incident_id()),
            &AuditEvent::DeploymentRestored {
                model_id: model_id.to_owned(),
                snapshot_version: next.version,
                revoked: revoked.clone(),
            },
        )?;
        let now = self.clock.now();
        for p in history.iter_mut().filter(|p| revoked.contains(&p.id)) {
            p.status = PolicyStatus::Revoked;
            p.revoked_at = Some(now);
        }
        let version = next.version;
        *slot.current.write() = Arc::new(next);
        Ok((version, seq, revoked))
    }

    /// Canonical JSON export of every deployment snapshot (sorted keys).
    pub fn export(&self) -> Value {
        let doc = ExportDoc {
            next_policy_id: self.next_id.load(Ordering::SeqCst),
            deployments: self.snapshots().iter().map(|s| (**s).clone()).collect(),
        };
        canonical(&serde_json::to_value(doc).expect("snapshot serializes"))
    }

    /// Replaces the store contents with an exported document.
    pub fn import(&self, doc: &Value) -> Result<(), PolicyError> {
        let doc: ExportDoc = serde_json::from_value(doc.clone()).map_err(|e| PolicyError::Import(e.to_string()))?;
        let mut max_id = 0;
        for snap in &doc.deployments {
            for (id, p) in &snap.policies {
                if id != &p.id || !p.is_active() || p.model_id != snap.deployment.model_id {
                    return Err(PolicyError::Import(format!("inconsistent policy `{id}`")));
                }
                p.rule()?;
                let n: u64 = id.0.trim_start_matches("pol-").parse().map_err(|_| PolicyError::Import(format!("bad policy id `{id}`")))?;
                max_id = max_id.max(n);
            }
        }
        let mut slots = self.slots.write();
        // an import is not a redeployment
        for snap in &doc.deployments {
            if let Some(cur) = slots.get(&snap.deployment.model_id) {
                let cur = cur.current.read().deployment.clone();
                let lowered = cur.state.is_shutdown() && snap.deployment.state < cur.state;
                if lowered || (cur.moratorium && !snap.deployment.moratorium) {
                    return Err(PolicyError::Import(format!(
                        "`{}` is {:?}; only an approved redeployment lowers it",
                        cur.model_id, cur.state
                    )));
                }
            }
        }
        slots.clear();
        for snap in doc.deployments {
            self.audit.append(Role::System, None, &AuditEvent::SnapshotImported { snapshot: snap.clone() })?;
            let history = snap.policies.values().cloned().collect();
            slots.insert(
                snap.deployment.model_id.clone(),
                Arc::new(Slot { current: RwLock::new(Arc::new(snap)), history: Mutex::new(history) }),
            );
        }
        self.next_id.store(doc.next_policy_id.max(max_id + 1), Ordering::SeqCst);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use crate::policy::CorrectionKind;

    fn store() -> PolicyStore {
        let clock: Arc<dyn Clock> = Arc::new(VirtualClock::default());
        let audit = Arc::new(AuditLog::in_memory(clock.clone()));
        let s = PolicyStore::new(clock, audit);
        s.register(DeploymentState::new("m", "v1")).unwrap();
        s
    }

    fn apply(s: &PolicyStore, kind: CorrectionKind) -> Result<AppliedPolicy, PolicyError> {
        s.apply(
            "m",
            PolicyDraft::new(kind, Scope::Global, PolicyParams::default()),
            Activation::Manual { role: Role::Ceo },
            None,
            &Authorization::for_tests(Role::Ceo, kind),
        )
    }

    #[test]
    fn versions_are_gap_free() {
        let s = store();
        let a = apply(&s, CorrectionKind::FineTuneLockout).unwrap();
        assert_eq!(a.snapshot_version, 2);
        let r = s.revoke(&a.policy.id, &Authorization::for_tests(Role::Ceo, CorrectionKind::FineTuneLockout)).unwrap();
        assert_eq!(r.snapshot_version, 3);
        assert_eq!(s.snapshot("m").unwrap().version, 3);
    }

    #[test]
    fn revoke_errors() {
        let s = store();
        let auth = Authorization::for_tests(Role::Ceo, CorrectionKind::FineTuneLockout);
        assert!(matches!(s.revoke(&PolicyId("pol-999999".into()), &auth), Err(PolicyError::NotFound(_))));
        let a = apply(&s, CorrectionKind::FineTuneLockout).unwrap();
        s.revoke(&a.policy.id, &auth).unwrap();
        assert!(matches!(s.revoke(&a.policy.id, &auth), Err(PolicyError::AlreadyRevoked(_))));
    }

    #[test]
    fn decommission_is_terminal() {
        let s = store();
        apply(&s, CorrectionKind::Decommission).unwrap();
        assert_eq!(s.snapshot("m").unwrap().deployment.state, DeploymentStatus::Decommissioned);
        assert!(matches!(apply(&s, CorrectionKind::FineTuneLockout), Err(PolicyError::TerminalState(_))));
        let approval = RedeployApproval::new("inc");
        assert!(matches!(s.restore("m", &[], &approval, Role::Ceo), Err(PolicyError::TerminalState(_))));
    }

    #[test]
    fn moratorium_sticks_until_restore() {
        let s = store();
        let a = apply(&s, CorrectionKind::Moratorium).unwrap();
        let snap = s.snapshot("m").unwrap();
        assert!(snap.deployment.moratorium);
        assert_eq!(snap.deployment.state, DeploymentStatus::MarketRemoved);
        s.revoke(&a.policy.id, &Authorization::for_tests(Role::Ceo, CorrectionKind::Moratorium)).unwrap();
        let snap = s.snapshot("m").unwrap();
        assert!(snap.deployment.moratorium);
        assert_eq!(snap.deployment.state, DeploymentStatus::MarketRemoved);
        s.restore("m", &[], &RedeployApproval::new("inc"), Role::Ciso).unwrap();
        let snap = s.snapshot("m").unwrap();
        assert!(!snap.deployment.moratorium);
        assert_eq!(snap.deployment.state, DeploymentStatus::Active);
    }

    #[test]
    fn policy_ids_never_reused() {
        let s = store();
        let a = apply(&s, CorrectionKind::FineTuneLockout).unwrap();
        let doc = s.export();
        s.import(&doc).unwrap();
        let b = apply(&s, CorrectionKind::FineTuneLockout).unwrap();
        assert!(b.policy.id > a.policy.id);
    }

    #[test]
    fn export_is_stable() {
        let s = store();
        apply(&s, CorrectionKind::OutputFilter).unwrap_err();
        apply(&s, CorrectionKind::FineTuneLockout).unwrap();
        let a = serde_json::to_string(&s.export()).unwrap();
        let b = serde_json::to_string(&s.export()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn import_cannot_lower_a_shutdown() {
        let s = store();
        let before = s.export();
        apply(&s, CorrectionKind::MarketRemoval).unwrap();
        assert!(matches!(s.import(&before), Err(PolicyError::Import(_))));
        assert_eq!(s.snapshot("m").unwrap().deployment.state, DeploymentStatus::MarketRemoved);
        let removed = s.export();
        s.import(&removed).unwrap();
    }
}
