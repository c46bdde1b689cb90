//! Who may activate which correction.
//!
//! The default matrix is cumulative by seniority; playbooks may replace it
//! wholesale. An emergency clause lets a fallback role act for a configured set
//! of kinds once the escalation target has been unreachable past a timeout.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::duration_secs;
use crate::policy::{CorrectionKind, PolicyError};
use crate::role::Role;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmergencyClause {
    pub enabled: bool,
    #[serde(rename = "unavailable_timeout_secs", with = "duration_secs")]
    pub unavailable_timeout: Duration,
    pub fallback_role: Role,
    /// Kinds the fallback role gains after devolution.
    #[serde(default)]
    pub kinds: BTreeSet<CorrectionKind>,
}

impl Default for EmergencyClause {
    fn default() -> Self {
        Self {
            enabled: true,
            unavailable_timeout: Duration::from_secs(30 * 60),
            fallback_role: Role::SocLead,
            kinds: [CorrectionKind::PowerOff, CorrectionKind::MarketRemoval].into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthorityMatrix {
    pub grants: BTreeMap<Role, BTreeSet<CorrectionKind>>,
    #[serde(default)]
    pub emergency_clause: EmergencyClause,
}

/// Why an actor was allowed to apply a correction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "basis", rename_all = "snake_case")]
pub enum AuthorityBasis {
    Grant,
    EmergencyDevolution { incident_id: String },
}

/// Proof that an authority check passed. Only [`AuthorityMatrix::authorize`]
/// constructs one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Authorization {
    role: Role,
    kind: CorrectionKind,
    basis: AuthorityBasis,
}

impl Authorization {
    pub fn role(&self) -> Role {
        self.role
    }

    pub fn kind(&self) -> CorrectionKind {
        self.kind
    }

    pub fn basis(&self) -> &AuthorityBasis {
        &self.basis
    }

    #[cfg(test)]
    pub(crate) fn for_tests(role: Role, kind: CorrectionKind) -> Self {
        Self { role, kind, basis: AuthorityBasis::Grant }
    }
}

/// Devolved authority recorded on an incident.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Devolution {
    pub incident_id: String,
    pub role: Role,
    pub kinds: BTreeSet<CorrectionKind>,
}

#[derive(Debug, Clone, Default)]
pub struct AuthorityContext<'a> {
    /// The triggering alert is CodeRed grade (automatic activations only).
    pub code_red: bool,
    pub devolution: Option<&'a Devolution>,
}

/// Kinds that may ever be applied without a human in the loop.
pub fn automatic_permitted(kind: CorrectionKind) -> bool {
    !matches!(kind, CorrectionKind::Decommission | CorrectionKind::Moratorium)
}

impl Default for AuthorityMatrix {
    fn default() -> Self {
        use CorrectionKind::*;
        let throttles = [ThrottleCalls, ThrottlePrompts, ThrottleEndUsers, ThrottleApplications];
        let system: BTreeSet<_> = throttles
            .iter()
            .copied()
            .chain([OutputFilter, BlocklistPrincipal, AllowlistMode])
            .collect();
        let analyst: BTreeSet<_> = throttles.iter().copied().chain([BlocklistPrincipal]).collect();
        let mut soc_lead = analyst.clone();
        soc_lead.extend([
            AllowlistMode,
            ReduceContextWindow,
            SessionReset,
            FineTuneLockout,
            OutputFilter,
            CapabilityRemoval,
            GlobalPlanningLimit,
            AutonomyLimit,
            ProhibitUseCase,
            NarrowModel,
            ToolUseLimit,
        ]);
        let mut ciso = soc_lead.clone();
        ciso.extend([MarketRemoval, Moratorium, PowerOff]);
        let mut ceo = ciso.clone();
        ceo.insert(Decommission);
        let grants = [
            (Role::System, system),
            (Role::Analyst, analyst),
            (Role::SocLead, soc_lead),
            (Role::Ciso, ciso),
            (Role::Ceo, ceo),
        ]
        .into_iter()
        .collect();
        Self { grants, emergency_clause: EmergencyClause::default() }
    }
}

impl AuthorityMatrix {
    pub fn granted(&self, role: Role, kind: CorrectionKind) -> bool {
        self.grants.get(&role).is_some_and(|g| g.contains(&kind))
    }

    /// Least senior human role holding `kind` by grant.
    pub fn minimum_role(&self, kind: CorrectionKind) -> Option<Role> {
        Role::HUMAN.into_iter().find(|r| self.granted(*r, kind))
    }

    pub fn validate(&self) -> Result<(), String> {
        if let Some(bad) = self.grants.get(&Role::System).into_iter().flatten().find(|k| !automatic_permitted(**k)) {
            return Err(format!("System may not be granted {bad}"));
        }
        if let Some(orphan) = CorrectionKind::ALL.into_iter().find(|k| self.minimum_role(*k).is_none()) {
            return Err(format!("{orphan} is not granted to any human role"));
        }
        let clause = &self.emergency_clause;
        if clause.enabled {
            if !clause.fallback_role.is_human() {
                return Err("emergency fallback role must be human".into());
            }
            if clause.unavailable_timeout.is_zero() {
                return Err("emergency unavailable timeout must be > 0".into());
            }
        }
        Ok(())
    }

    pub fn authorize(
        &self,
        role: Role,
        kind: CorrectionKind,
        ctx: &AuthorityContext<'_>,
    ) -> Result<Authorization, PolicyError> {
        if self.granted(role, kind) {
            if role == Role::System && kind.requires_code_red() && !ctx.code_red {
                return Err(PolicyError::UnauthorizedActor {
                    role,
                    kind,
                    message: "automatic activation of this kind requires a CodeRed trigger".into(),
                });
            }
            return Ok(Authorization { role, kind, basis: AuthorityBasis::Grant });
        }
        if let Some(dev) = ctx.devolution {
            if self.emergency_clause.enabled && dev.role == role && dev.kinds.contains(&kind) {
                return Ok(Authorization {
                    role,
                    kind,
                    basis: AuthorityBasis::EmergencyDevolution { incident_id: dev.incident_id.clone() },
                });
            }
        }
        let message = match self.minimum_role(kind) {
            Some(r) => format!("requires: {r}"),
            None => "no role holds this grant".into(),
        };
        Err(PolicyError::UnauthorizedActor { role, kind, message })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_matrix_is_valid() {
        AuthorityMatrix::default().validate().unwrap();
    }

    #[test]
    fn analyst_excludes_shutdown_kinds() {
        let m = AuthorityMatrix::default();
        for k in CorrectionKind::ALL.into_iter().filter(|k| k.row().starts_with('5')) {
            assert!(m.authorize(Role::Analyst, k, &AuthorityContext::default()).is_err(), "{k}");
        }
    }

    #[test]
    fn system_allowlist_needs_code_red() {
        let m = AuthorityMatrix::default();
        let k = CorrectionKind::AllowlistMode;
        assert!(m.authorize(Role::System, k, &AuthorityContext::default()).is_err());
        let ctx = AuthorityContext { code_red: true, devolution: None };
        assert!(m.authorize(Role::System, k, &ctx).is_ok());
    }

    #[test]
    fn devolution_widens_only_listed_kinds() {
        let m = AuthorityMatrix::default();
        let dev = Devolution {
            incident_id: "inc-1".into(),
            role: Role::SocLead,
            kinds: [CorrectionKind::PowerOff].into_iter().collect(),
        };
        let ctx = AuthorityContext { code_red: false, devolution: Some(&dev) };
        let a = m.authorize(Role::SocLead, CorrectionKind::PowerOff, &ctx).unwrap();
        assert!(matches!(a.basis(), AuthorityBasis::EmergencyDevolution { .. }));
        assert!(m.authorize(Role::SocLead, CorrectionKind::Decommission, &ctx).is_err());
        assert!(m.authorize(Role::Analyst, CorrectionKind::PowerOff, &ctx).is_err());
    }

    #[test]
    fn system_cannot_hold_decommission() {
        let mut m = AuthorityMatrix::default();
        m.grants.get_mut(&Role::System).unwrap().insert(CorrectionKind::Decommission);
        assert!(m.validate().is_err());
    }
}
