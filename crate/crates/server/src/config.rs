//! `serve` configuration: what to deploy, who the principals are, and which
//! static tokens map to which roles.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use deployguard_core::clock::Timestamp;
use deployguard_core::policy::{Principal, Tier};
use deployguard_core::role::Role;
use deployguard_core::stack::DeploymentSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenGrant {
    pub token: String,
    pub role: Role,
    #[serde(default)]
    pub issued_at: Option<Timestamp>,
    /// Milliseconds since the epoch; absent means no expiry.
    #[serde(default)]
    pub expires_at: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default)]
    pub seed: u64,
    pub deployments: Vec<DeploymentSpec>,
    #[serde(default)]
    pub principals: Vec<Principal>,
    pub tokens: Vec<TokenGrant>,
    #[serde(default)]
    pub audit_log: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("ConfigInvalid: {0}")]
    Invalid(String),
}

impl ServerConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ServerConfig = serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.into(), e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.deployments.is_empty() {
            return bad("at least one deployment is required".into());
        }
        let mut seen = BTreeMap::new();
        for g in &self.tokens {
            if g.token.trim().is_empty() {
                return bad("empty token".into());
            }
            if !g.role.is_human() {
                return bad(format!("token for role {} is not allowed", g.role));
            }
            if seen.insert(g.token.as_str(), g.role).is_some() {
                return bad("duplicate token".into());
            }
        }
        for p in &self.principals {
            p.validate().map_err(ConfigError::Invalid)?;
        }
        Ok(())
    }

    /// Local-development defaults: one deployment, a small roster and one
    /// token per role. Not for anything reachable from a network.
    pub fn development() -> Self {
        let principal = |id: &str, tier: Tier, allowlisted: bool| Principal {
            id: id.into(),
            tier,
            allowlisted,
            blocklisted: false,
            kyc_verified: tier == Tier::SafetyCritical,
            application_id: None,
        };
        let token = |t: &str, role: Role| TokenGrant { token: t.into(), role, issued_at: None, expires_at: None };
        ServerConfig {
            seed: 0,
            deployments: vec![DeploymentSpec {
                model_id: "model-a".into(),
                version: "a-1".into(),
                other_versions: vec![],
                capabilities: Default::default(),
            }],
            principals: vec![
                principal("grid-operator", Tier::SafetyCritical, true),
                principal("clinic-net", Tier::SafetyCritical, false),
                principal("acme-apps", Tier::Commercial, false),
                principal("jo", Tier::Individual, false),
            ],
            tokens: vec![
                token("dev-analyst", Role::Analyst),
                token("dev-soclead", Role::SocLead),
                token("dev-ciso", Role::Ciso),
                token("dev-ceo", Role::Ceo),
            ],
            audit_log: None,
        }
    }
}

/// Token lookup with expiry.
#[derive(Debug, Clone, Default)]
pub struct Sessions {
    grants: BTreeMap<String, TokenGrant>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuthFailure {
    Missing,
    Unknown,
    Expired,
    NotYetValid,
}

impl Sessions {
    pub fn new(grants: &[TokenGrant]) -> Self {
        Self { grants: grants.iter().map(|g| (g.token.clone(), g.clone())).collect() }
    }

    pub fn authenticate(&self, token: Option<&str>, now: Timestamp) -> Result<Role, AuthFailure> {
        let token = token.ok_or(AuthFailure::Missing)?;
        let g = self.grants.get(token).ok_or(AuthFailure::Unknown)?;
        if g.expires_at.is_some_and(|e| now >= e) {
            return Err(AuthFailure::Expired);
        }
        if g.issued_at.is_some_and(|i| now < i) {
            return Err(AuthFailure::NotYetValid);
        }
        Ok(g.role)
    }
}
