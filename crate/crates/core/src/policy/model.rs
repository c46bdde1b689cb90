use std::collections::BTreeSet;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::kind::CorrectionKind;
use super::PolicyError;
use crate::clock::Timestamp;
use crate::role::Role;

/// Generated policy identifier, never reused.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PolicyId(pub String);

impl PolicyId {
    pub fn from_counter(n: u64) -> Self {
        PolicyId(format!("pol-{n:06}"))
    }
}

impl fmt::Display for PolicyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    Individual,
    Commercial,
    SafetyCritical,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Individual, Tier::Commercial, Tier::SafetyCritical];
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scope {
    Global,
    Tier(Tier),
    Principal(String),
    UseCase(String),
}

impl Scope {
    /// Higher is more specific: Principal > UseCase > Tier > Global.
    pub fn specificity(&self) -> u8 {
        match self {
            Scope::Global => 0,
            Scope::Tier(_) => 1,
            Scope::UseCase(_) => 2,
            Scope::Principal(_) => 3,
        }
    }

    pub fn matches(&self, principal: &Principal, use_case: Option<&str>) -> bool {
        match self {
            Scope::Global => true,
            Scope::Tier(t) => principal.tier == *t,
            Scope::Principal(id) => principal.id == *id,
            Scope::UseCase(tag) => use_case == Some(tag.as_str()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThrottleAggregate {
    #[default]
    PerPrincipal,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ToolMode {
    #[default]
    Deny,
    Strip,
}

/// Kind-specific parameters. Numeric fields are signed so that invalid
/// documents surface as [`PolicyError::InvalidParams`] instead of parse errors.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_secs: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<ThrottleAggregate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_prompts: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern_set: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_cases: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_mode: Option<ToolMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Automatic { trigger_id: String },
    Manual { role: Role },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyStatus {
    Active,
    Revoked,
}

/// An activated correction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionPolicy {
    pub id: PolicyId,
    pub model_id: String,
    pub kind: CorrectionKind,
    pub scope: Scope,
    pub params: PolicyParams,
    pub activation: Activation,
    pub status: PolicyStatus,
    pub provenance: Option<String>,
    pub created_at: Timestamp,
    pub revoked_at: Option<Timestamp>,
}

/// A policy before it has been assigned an id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDraft {
    pub kind: CorrectionKind,
    #[serde(default = "global_scope")]
    pub scope: Scope,
    #[serde(default)]
    pub params: PolicyParams,
}

fn global_scope() -> Scope {
    Scope::Global
}

impl PolicyDraft {
    pub fn new(kind: CorrectionKind, scope: Scope, params: PolicyParams) -> Self {
        Self { kind, scope, params }
    }

    pub fn validate(&self) -> Result<Rule, PolicyError> {
        Rule::from_parts(self.kind, &self.scope, &self.params)
    }
}

impl CorrectionPolicy {
    pub fn rule(&self) -> Result<Rule, PolicyError> {
        Rule::from_parts(self.kind, &self.scope, &self.params)
    }

    pub fn is_active(&self) -> bool {
        self.status == PolicyStatus::Active
    }
}

/// Validated, typed view of a policy's parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rule {
    Blocklist,
    AllowlistOnly,
    /// Sliding-window cap (2a calls, 2b prompts).
    Window { cap: u64, window: Duration, aggregate: ThrottleAggregate },
    /// Cap on distinct members (2c end users, 2d applications, 3f sessions).
    Distinct { cap: u64, window: Option<Duration> },
    Truncate { max_tokens: u64 },
    SessionReset { max_prompts: u64 },
    FineTuneLockout,
    Filter { pattern_set: String },
    RouteVersion { version: String },
    Autonomy { max_steps: u64 },
    ProhibitUseCases { tags: BTreeSet<String> },
    Tools { mode: ToolMode },
    Shutdown,
}

fn invalid(kind: CorrectionKind, msg: impl Into<String>) -> PolicyError {
    PolicyError::InvalidParams { kind, message: msg.into() }
}

fn non_negative(kind: CorrectionKind, name: &str, v: Option<i64>) -> Result<u64, PolicyError> {
    let v = v.ok_or_else(|| invalid(kind, format!("`{name}` is required")))?;
    u64::try_from(v).map_err(|_| invalid(kind, format!("`{name}` must be >= 0, got {v}")))
}

fn positive(kind: CorrectionKind, name: &str, v: Option<i64>) -> Result<u64, PolicyError> {
    let n = non_negative(kind, name, v)?;
    if n == 0 {
        return Err(invalid(kind, format!("`{name}` must be >= 1")));
    }
    Ok(n)
}

impl Rule {
    pub fn from_parts(kind: CorrectionKind, scope: &Scope, p: &PolicyParams) -> Result<Rule, PolicyError> {
        use CorrectionKind::*;
        let rule = match kind {
            BlocklistPrincipal => Rule::Blocklist,
            AllowlistMode => Rule::AllowlistOnly,
            ThrottleCalls | ThrottlePrompts => Rule::Window {
                cap: non_negative(kind, "cap", p.cap)?,
                window: Duration::from_secs(positive(kind, "window_secs", p.window_secs)?),
                aggregate: p.aggregate.unwrap_or_default(),
            },
            ThrottleEndUsers | ThrottleApplications => Rule::Distinct {
                cap: non_negative(kind, "cap", p.cap)?,
                window: None,
            },
            GlobalPlanningLimit => Rule::Distinct {
                cap: non_negative(kind, "cap", p.cap)?,
                window: Some(Duration::from_secs(positive(kind, "window_secs", p.window_secs)?)),
            },
            ReduceContextWindow => Rule::Truncate { max_tokens: positive(kind, "max_tokens", p.max_tokens)? },
            SessionReset => Rule::SessionReset { max_prompts: positive(kind, "max_prompts", p.max_prompts)? },
            FineTuneLockout => Rule::FineTuneLockout,
            OutputFilter => Rule::Filter {
                pattern_set: p
                    .pattern_set
                    .clone()
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| invalid(kind, "`pattern_set` is required"))?,
            },
            CapabilityRemoval | NarrowModel => Rule::RouteVersion {
                version: p
                    .version
                    .clone()
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| invalid(kind, "`version` is required"))?,
            },
            AutonomyLimit => Rule::Autonomy {
                max_steps: match p.max_steps {
                    None => 0,
                    v => non_negative(kind, "max_steps", v)?,
                },
            },
            ProhibitUseCase => {
                let mut tags: BTreeSet<String> = p.use_cases.iter().flatten().cloned().collect();
                if let Scope::UseCase(tag) = scope {
                    tags.insert(tag.clone());
                }
                if tags.is_empty() {
                    return Err(invalid(kind, "needs `use_cases` or a UseCase scope"));
                }
                Rule::ProhibitUseCases { tags }
            }
            ToolUseLimit => Rule::Tools { mode: p.tool_mode.unwrap_or_default() },
            MarketRemoval | PowerOff | Decommission | Moratorium => {
                if *scope != Scope::Global {
                    return Err(invalid(kind, "shutdown corrections must be Global"));
                }
                Rule::Shutdown
            }
        };
        Ok(rule)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub id: String,
    pub tier: Tier,
    #[serde(default)]
    pub allowlisted: bool,
    #[serde(default)]
    pub blocklisted: bool,
    #[serde(default)]
    pub kyc_verified: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub application_id: Option<String>,
}

impl Principal {
    pub fn new(id: impl Into<String>, tier: Tier) -> Self {
        Self {
            id: id.into(),
            tier,
            allowlisted: false,
            blocklisted: false,
            kyc_verified: tier == Tier::SafetyCritical,
            application_id: None,
        }
    }

    pub fn allowlisted(mut self) -> Self {
        self.allowlisted = true;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("principal id is empty".into());
        }
        if self.allowlisted && self.blocklisted {
            return Err(format!("principal `{}` is both allowlisted and blocklisted", self.id));
        }
        if self.tier == Tier::SafetyCritical && !self.kyc_verified {
            return Err(format!("safety-critical principal `{}` must be KYC verified", self.id));
        }
        Ok(())
    }
}

/// Deployment lifecycle, ordered from most to least available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DeploymentStatus {
    Active,
    Restricted,
    AllowlistOnly,
    MarketRemoved,
    PoweredOff,
    Decommissioned,
}

impl DeploymentStatus {
    pub fn is_shutdown(self) -> bool {
        self >= DeploymentStatus::MarketRemoved
    }

    pub fn is_serving(self) -> bool {
        !self.is_shutdown()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Capabilities {
    pub fine_tune: bool,
    pub tool_use: bool,
    pub autonomy: bool,
    pub internet_access: bool,
    pub context_window_max: u64,
}

impl Default for Capabilities {
    fn default() -> Self {
        Self {
            fine_tune: true,
            tool_use: true,
            autonomy: true,
            internet_access: true,
            context_window_max: 1 << 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentState {
    pub model_id: String,
    pub version: String,
    pub state: DeploymentStatus,
    #[serde(default)]
    pub moratorium: bool,
    #[serde(default)]
    pub capabilities: Capabilities,
}

impl DeploymentState {
    pub fn new(model_id: impl Into<String>, version: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            version: version.into(),
            state: DeploymentStatus::Active,
            moratorium: false,
            capabilities: Capabilities::default(),
        }
    }

    /// Recomputes status and moratorium from the active policy set.
    ///
    /// Shutdown states are sticky: only [`DeploymentState::restored`] lowers
    /// them. Serving states track the policy set.
    pub fn derived<'a>(&self, active: impl IntoIterator<Item = &'a CorrectionPolicy>) -> DeploymentState {
        let mut next = self.clone();
        if self.state == DeploymentStatus::Decommissioned {
            return next;
        }
        let mut shutdown: Option<DeploymentStatus> = None;
        let mut allowlist_only = false;
        let mut any = false;
        for p in active.into_iter().filter(|p| p.is_active()) {
            any = true;
            let target = match p.kind {
                CorrectionKind::MarketRemoval | CorrectionKind::Moratorium => Some(DeploymentStatus::MarketRemoved),
                CorrectionKind::PowerOff => Some(DeploymentStatus::PoweredOff),
                CorrectionKind::Decommission => Some(DeploymentStatus::Decommissioned),
                CorrectionKind::AllowlistMode if p.scope == Scope::Global => {
                    allowlist_only = true;
                    None
                }
                _ => None,
            };
            if p.kind == CorrectionKind::Moratorium {
                next.moratorium = true;
            }
            shutdown = shutdown.max(target);
        }
        next.state = if self.state.is_shutdown() {
            self.state.max(shutdown.unwrap_or(self.state))
        } else if let Some(s) = shutdown {
            s
        } else if allowlist_only {
            DeploymentStatus::AllowlistOnly
        } else if any {
            DeploymentStatus::Restricted
        } else {
            DeploymentStatus::Active
        };
        next
    }

    /// State after an approved redeployment with `remaining` policies still active.
    pub fn restored<'a>(&self, remaining: impl IntoIterator<Item = &'a CorrectionPolicy>) -> DeploymentState {
        let mut base = self.clone();
        if self.state == DeploymentStatus::Decommissioned {
            return base;
        }
        base.state = DeploymentStatus::Active;
        base.moratorium = false;
        base.derived(remaining)
    }
}

/// Why a request was denied. Exactly one per denial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DenyReason {
    UnknownPrincipal,
    Decommissioned,
    PoweredOff,
    MarketRemoved,
    Moratorium,
    Blocklisted,
    NotAllowlisted,
    UseCaseProhibited,
    Throttled,
    EndUserCapReached,
    ApplicationCapReached,
    PlanningLimitReached,
    FineTuneLocked,
    ToolUseRestricted,
}

impl DenyReason {
    /// Shutdown-class denials surface as 503 on the wire.
    pub fn is_shutdown(self) -> bool {
        matches!(
            self,
            DenyReason::Decommissioned | DenyReason::PoweredOff | DenyReason::MarketRemoved | DenyReason::Moratorium
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Transform {
    RouteVersion { version: String },
    TruncateContext { max_tokens: u64 },
    SessionReset { max_prompts: u64 },
    StripTools,
    LimitAutonomy { max_steps: u64 },
    FilterOutput { pattern_sets: Vec<String> },
}

impl Transform {
    pub fn label(&self) -> String {
        match self {
            Transform::RouteVersion { version } => format!("route_version({version})"),
            Transform::TruncateContext { max_tokens } => format!("truncate_context({max_tokens})"),
            Transform::SessionReset { max_prompts } => format!("session_reset({max_prompts})"),
            Transform::StripTools => "strip_tools".into(),
            Transform::LimitAutonomy { max_steps } => format!("limit_autonomy({max_steps})"),
            Transform::FilterOutput { pattern_sets } => format!("filter_output({})", pattern_sets.join(",")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "detail")]
pub enum Verdict {
    Deny(DenyReason),
    Transform(Vec<Transform>),
    Allow,
}

impl Verdict {
    /// Position in the permissiveness lattice `Deny < Transform < Allow`.
    pub fn rank(&self) -> u8 {
        match self {
            Verdict::Deny(_) => 0,
            Verdict::Transform(_) => 1,
            Verdict::Allow => 2,
        }
    }

    pub fn transforms(&self) -> &[Transform] {
        match self {
            Verdict::Transform(t) => t,
            _ => &[],
        }
    }

    pub fn deny_reason(&self) -> Option<DenyReason> {
        match self {
            Verdict::Deny(r) => Some(*r),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    #[default]
    Infer,
    FineTune,
}

/// Everything `resolve_access` needs to know about one request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestContext {
    pub principal: Principal,
    pub model_id: String,
    pub session_id: String,
    pub use_case: Option<String>,
    pub prompt_tokens: u64,
    pub tool_intents: Vec<String>,
    #[serde(default)]
    pub operation: Operation,
    pub now: Timestamp,
}
