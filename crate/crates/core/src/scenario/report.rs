use serde::{Deserialize, Serialize};

use crate::policy::DenyReason;
use crate::stack::StatusDoc;

/// What one request through the gateway came back with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub at_ms: u64,
    pub status: u16,
    pub reason: Option<DenyReason>,
    pub route: Option<String>,
    pub version: Option<String>,
    pub filtered: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub records: u64,
    pub head_digest: String,
    pub path: Option<String>,
}

/// Machine-readable run report. Byte-identical across runs with equal seeds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub passed: bool,
    pub steps_total: usize,
    pub steps_run: usize,
    pub requests_handled: u64,
    pub final_time_ms: u64,
    pub checks: Vec<CheckResult>,
    pub audit: AuditSummary,
    pub final_status: StatusDoc,
}

impl ScenarioReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}
