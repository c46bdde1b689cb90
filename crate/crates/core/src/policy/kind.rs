use std::fmt;

use serde::{Deserialize, Serialize};

/// Category grouping of the correction taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum KindCategory {
    UserBased,
    AccessFrequency,
    Capability,
    UseCase,
    Shutdown,
}

/// One deployment correction, one variant per row of the taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CorrectionKind {
    BlocklistPrincipal,
    AllowlistMode,
    ThrottleCalls,
    ThrottlePrompts,
    ThrottleEndUsers,
    ThrottleApplications,
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
    MarketRemoval,
    PowerOff,
    Decommission,
    Moratorium,
}

impl CorrectionKind {
    pub const ALL: [CorrectionKind; 20] = [
        CorrectionKind::BlocklistPrincipal,
        CorrectionKind::AllowlistMode,
        CorrectionKind::ThrottleCalls,
        CorrectionKind::ThrottlePrompts,
        CorrectionKind::ThrottleEndUsers,
        CorrectionKind::ThrottleApplications,
        CorrectionKind::ReduceContextWindow,
        CorrectionKind::SessionReset,
        CorrectionKind::FineTuneLockout,
        CorrectionKind::OutputFilter,
        CorrectionKind::CapabilityRemoval,
        CorrectionKind::GlobalPlanningLimit,
        CorrectionKind::AutonomyLimit,
        CorrectionKind::ProhibitUseCase,
        CorrectionKind::NarrowModel,
        CorrectionKind::ToolUseLimit,
        CorrectionKind::MarketRemoval,
        CorrectionKind::PowerOff,
        CorrectionKind::Decommission,
        CorrectionKind::Moratorium,
    ];

    /// Taxonomy row code, e.g. `"2b"`.
    pub fn row(self) -> &'static str {
        use CorrectionKind::*;
        match self {
            BlocklistPrincipal => "1a",
            AllowlistMode => "1b",
            ThrottleCalls => "2a",
            ThrottlePrompts => "2b",
            ThrottleEndUsers => "2c",
            ThrottleApplications => "2d",
            ReduceContextWindow => "3a",
            SessionReset => "3b",
            FineTuneLockout => "3c",
            OutputFilter => "3d",
            CapabilityRemoval => "3e",
            GlobalPlanningLimit => "3f",
            AutonomyLimit => "3g",
            ProhibitUseCase => "4a",
            NarrowModel => "4b",
            ToolUseLimit => "4c",
            MarketRemoval => "5a",
            PowerOff => "5b",
            Decommission => "5c",
            Moratorium => "5d",
        }
    }

    pub fn from_row(row: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.row() == row)
    }

    pub fn category(self) -> KindCategory {
        match self.row().as_bytes()[0] {
            b'1' => KindCategory::UserBased,
            b'2' => KindCategory::AccessFrequency,
            b'3' => KindCategory::Capability,
            b'4' => KindCategory::UseCase,
            _ => KindCategory::Shutdown,
        }
    }

    pub fn is_throttle(self) -> bool {
        self.category() == KindCategory::AccessFrequency
    }

    /// Kinds that move the deployment state machine when applied.
    pub fn transitions_deployment(self) -> bool {
        matches!(
            self,
            CorrectionKind::AllowlistMode
                | CorrectionKind::MarketRemoval
                | CorrectionKind::PowerOff
                | CorrectionKind::Decommission
                | CorrectionKind::Moratorium
        )
    }

    /// Kinds that override allowlist exemptions.
    pub fn overrides_allowlist(self) -> bool {
        matches!(
            self,
            CorrectionKind::MarketRemoval | CorrectionKind::PowerOff | CorrectionKind::Decommission
        )
    }

    /// Kinds that may only be bound automatically by a CodeRed trigger.
    pub fn requires_code_red(self) -> bool {
        matches!(
            self,
            CorrectionKind::MarketRemoval | CorrectionKind::PowerOff | CorrectionKind::AllowlistMode
        )
    }
}

impl fmt::Display for CorrectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}
