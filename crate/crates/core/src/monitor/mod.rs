//! Metric ingestion, trigger evaluation and alert triage.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{AuditError, AuditEvent, AuditLog};
use crate::clock::{duration_secs, Clock, Timestamp};
use crate::incident::Severity;
use crate::role::Role;

/// Alert intensity. Only `CodeRed` may drive the most disruptive automatic responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Grade {
    Gentle,
    Elevated,
    CodeRed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TriageOutcome {
    TruePositive,
    BenignPositive,
    FalsePositive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TriageState {
    Untriaged,
    TruePositive,
    BenignPositive,
    FalsePositive,
}

impl From<TriageOutcome> for TriageState {
    fn from(o: TriageOutcome) -> Self {
        match o {
            TriageOutcome::TruePositive => TriageState::TruePositive,
            TriageOutcome::BenignPositive => TriageState::BenignPositive,
            TriageOutcome::FalsePositive => TriageState::FalsePositive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Response,
    Denied,
    Feedback,
    ExternalReport,
    ThreatIntel,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricFlags {
    pub user_unsatisfactory: bool,
    pub filter_hit: bool,
    pub filter_critical: bool,
    pub injection_suspected: bool,
    pub external_report: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEvent {
    pub timestamp: Timestamp,
    pub kind: MetricKind,
    pub deployment: String,
    #[serde(default)]
    pub principal: Option<String>,
    #[serde(default = "one")]
    pub value: f64,
    #[serde(default)]
    pub flags: MetricFlags,
    #[serde(default = "default_source")]
    pub source: String,
    #[serde(default)]
    pub note: Option<String>,
}

fn one() -> f64 {
    1.0
}

fn default_source() -> String {
    "external".into()
}

/// A metric event not yet stamped by the monitor's clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingMetric {
    pub kind: MetricKind,
    pub deployment: String,
    #[serde(default)]
    pub principal: Option<String>,
    #[serde(default = "one")]
    pub value: f64,
    #[serde(default)]
    pub flags: MetricFlags,
    #[serde(default = "default_source")]
    pub source: String,
    #[serde(default)]
    pub note: Option<String>,
}

pub trait MetricSink: Send + Sync {
    fn record(&self, m: PendingMetric);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    UnsatisfactoryRate,
    FilterHitRate,
    CriticalFilterHits,
    PromptInjectionFlags,
    ExternalReportCount,
    DenialCount,
    RequestCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub op: Comparison,
    pub value: f64,
}

impl Threshold {
    pub fn holds(&self, observed: f64) -> bool {
        match self.op {
            Comparison::Gt => observed > self.value,
            Comparison::Ge => observed >= self.value,
            Comparison::Lt => observed < self.value,
            Comparison::Le => observed <= self.value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Binding {
    AlertOnly,
    AutoCorrection {
        template: String,
        #[serde(default)]
        open_incident: bool,
    },
    AutoIncident {
        playbook: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trigger {
    pub id: String,
    /// Restricts the trigger to one deployment; `None` watches all.
    #[serde(default)]
    pub model_id: Option<String>,
    pub metric: MetricName,
    #[serde(rename = "window_secs", with = "duration_secs")]
    pub window: Duration,
    pub threshold: Threshold,
    pub min_samples: u64,
    pub severity: Severity,
    pub grade: Grade,
    #[serde(default = "alert_only")]
    pub binding: Binding,
}

fn alert_only() -> Binding {
    Binding::AlertOnly
}

impl Trigger {
    pub fn validate(&self) -> Result<(), String> {
        if self.min_samples < 1 {
            return Err(format!("trigger `{}`: min_samples must be >= 1", self.id));
        }
        if self.window.is_zero() {
            return Err(format!("trigger `{}`: window must be > 0", self.id));
        }
        if !self.threshold.value.is_finite() {
            return Err(format!("trigger `{}`: threshold must be finite", self.id));
        }
        Ok(())
    }
}

/// What a trigger's metric looked like over one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub value: f64,
    pub samples: u64,
    pub flagged_principals: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingResult {
    pub policies: Vec<crate::policy::PolicyId>,
    pub incident_id: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub id: String,
    pub trigger_id: String,
    pub model_id: Option<String>,
    pub observed_value: f64,
    pub samples: u64,
    pub window_start: Timestamp,
    pub window_end: Timestamp,
    pub fired_at: Timestamp,
    pub severity: Severity,
    pub grade: Grade,
    pub triage: TriageState,
    pub incident_id: Option<String>,
    pub flagged_principals: Vec<String>,
    pub binding: Binding,
    pub binding_result: Option<BindingResult>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuningCounters {
    pub true_positive: u64,
    pub benign_positive: u64,
    pub false_positive: u64,
}

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("malformed event: {0}")]
    MalformedEvent(String),
    #[error("alert `{0}` already triaged")]
    AlreadyTriaged(String),
    #[error("unknown alert `{0}`")]
    UnknownAlert(String),
    #[error("{0} may not triage alerts")]
    UnauthorizedActor(Role),
    #[error("a true positive must be linked to an incident")]
    MissingIncident,
    #[error(transparent)]
    Audit(#[from] AuditError),
}

#[derive(Default)]
struct Firing {
    active: BTreeMap<String, String>,
}

pub struct Monitor {
    clock: Arc<dyn Clock>,
    audit: Arc<AuditLog>,
    stream: RwLock<BTreeMap<(Timestamp, u64), MetricEvent>>,
    last_by_source: Mutex<BTreeMap<String, Timestamp>>,
    next_event: AtomicU64,
    triggers: RwLock<Vec<Trigger>>,
    // evaluation and triage serialize here
    state: Mutex<MonitorState>,
}

#[derive(Default)]
struct MonitorState {
    firing: Firing,
    alerts: BTreeMap<String, Alert>,
    tuning: BTreeMap<String, TuningCounters>,
    next_alert: u64,
}

impl Monitor {
    pub fn new(clock: Arc<dyn Clock>, audit: Arc<AuditLog>, triggers: Vec<Trigger>) -> Self {
        Self {
            clock,
            audit,
            stream: RwLock::new(BTreeMap::new()),
            last_by_source: Mutex::new(BTreeMap::new()),
            next_event: AtomicU64::new(0),
            triggers: RwLock::new(triggers),
            state: Mutex::new(MonitorState::default()),
        }
    }

    pub fn triggers(&self) -> Vec<Trigger> {
        self.triggers.read().clone()
    }

    pub fn set_triggers(&self, triggers: Vec<Trigger>) {
        let ids: BTreeSet<&str> = triggers.iter().map(|t| t.id.as_str()).collect();
        self.state.lock().firing.active.retain(|k, _| ids.contains(k.as_str()));
        *self.triggers.write() = triggers;
    }

    pub fn ingest(&self, event: MetricEvent) -> Result<(), MonitorError> {
        if event.deployment.is_empty() {
            return Err(MonitorError::MalformedEvent("deployment must be set".into()));
        }
        if !event.value.is_finite() {
            return Err(MonitorError::MalformedEvent("value must be finite".into()));
        }
        {
            let mut last = self.last_by_source.lock();
            let prev = last.entry(event.source.clone()).or_insert(Timestamp(0));
            if event.timestamp < *prev {
                return Err(MonitorError::MalformedEvent(format!(
                    "timestamp {} precedes {} from source `{}`",
                    event.timestamp, prev, event.source
                )));
            }
            *prev = event.timestamp;
            let n = self.next_event.fetch_add(1, Ordering::SeqCst);
            self.stream.write().insert((event.timestamp, n), event);
        }
        Ok(())
    }

    /// Stamps `m` with the monitor clock and ingests it.
    pub fn ingest_now(&self, m: PendingMetric) -> Result<(), MonitorError> {
        let now = self.clock.now();
        self.ingest(MetricEvent {
            timestamp: now,
            kind: m.kind,
            deployment: m.deployment,
            principal: m.principal,
            value: m.value,
            flags: m.flags,
            source: m.source,
            note: m.note,
        })
    }

    pub fn event_count(&self) -> usize {
        self.stream.read().len()
    }

    pub fn observe(&self, trigger: &Trigger, t: Timestamp) -> Observation {
        let from = t.minus(trigger.window);
        let stream = self.stream.read();
        let events = stream
            .range((from, 0)..=(t, u64::MAX))
            .map(|(_, e)| e)
            .filter(|e| trigger.model_id.as_ref().is_none_or(|m| *m == e.deployment));
        observe_events(trigger.metric, events)
    }

    /// Runs every trigger at `t`; returns newly fired alerts.
    pub fn evaluate(&self, t: Timestamp) -> Result<Vec<Alert>, MonitorError> {
        let triggers = self.triggers.read().clone();
        let mut st = self.state.lock();
        let mut fired = Vec::new();
        for trig in &triggers {
            let obs = self.observe(trig, t);
            let breach = obs.samples >= trig.min_samples && trig.threshold.holds(obs.value);
            let firing = st.firing.active.contains_key(&trig.id);
            if breach && !firing {
                st.next_alert += 1;
                let id = format!("alert-{:04}", st.next_alert);
                let alert = Alert {
                    id: id.clone(),
                    trigger_id: trig.id.clone(),
                    model_id: trig.model_id.clone(),
                    observed_value: obs.value,
                    samples: obs.samples,
                    window_start: t.minus(trig.window),
                    window_end: t,
                    fired_at: t,
                    severity: trig.severity,
                    grade: trig.grade,
                    triage: TriageState::Untriaged,
                    incident_id: None,
                    flagged_principals: obs.flagged_principals,
                    binding: trig.binding.clone(),
                    binding_result: None,
                };
                self.audit.append(
                    Role::System,
                    None,
                    &AuditEvent::AlertFired {
                        alert_id: id.clone(),
                        trigger_id: trig.id.clone(),
                        observed: obs.value,
                        samples: obs.samples,
                        severity: trig.severity,
                        grade: trig.grade,
                    },
                )?;
                st.firing.active.insert(trig.id.clone(), id.clone());
                st.alerts.insert(id, alert.clone());
                fired.push(alert);
            } else if !breach && firing {
                st.firing.active.remove(&trig.id);
                self.audit.append(Role::System, None, &AuditEvent::AlertCleared { trigger_id: trig.id.clone() })?;
            }
        }
        Ok(fired)
    }

    pub fn record_binding(&self, alert_id: &str, result: BindingResult) -> Result<(), MonitorError> {
        let mut st = self.state.lock();
        let alert = st.alerts.get_mut(alert_id).ok_or_else(|| MonitorError::UnknownAlert(alert_id.into()))?;
        self.audit.append(
            Role::System,
            result.incident_id.as_deref(),
            &AuditEvent::BindingExecuted {
                alert_id: alert_id.into(),
                policies: result.policies.clone(),
                error: result.error.clone(),
            },
        )?;
        if alert.incident_id.is_none() {
            alert.incident_id = result.incident_id.clone();
        }
        alert.binding_result = Some(result);
        Ok(())
    }

    /// Attaches an incident without changing triage state.
    pub fn link_incident(&self, alert_id: &str, incident_id: &str) -> Result<(), MonitorError> {
        let mut st = self.state.lock();
        let alert = st.alerts.get_mut(alert_id).ok_or_else(|| MonitorError::UnknownAlert(alert_id.into()))?;
        alert.incident_id.get_or_insert_with(|| incident_id.to_owned());
        Ok(())
    }

    /// Fails unless `alert_id` may be triaged by `actor`.
    pub fn check_triage(&self, alert_id: &str, actor: Role) -> Result<Alert, MonitorError> {
        let st = self.state.lock();
        let alert = st.alerts.get(alert_id).ok_or_else(|| MonitorError::UnknownAlert(alert_id.into()))?;
        if !actor.is_human() {
            return Err(MonitorError::UnauthorizedActor(actor));
        }
        if alert.triage != TriageState::Untriaged {
            return Err(MonitorError::AlreadyTriaged(alert_id.into()));
        }
        Ok(alert.clone())
    }

    pub fn triage(
        &self,
        alert_id: &str,
        outcome: TriageOutcome,
        actor: Role,
        incident_id: Option<&str>,
    ) -> Result<Alert, MonitorError> {
        self.check_triage(alert_id, actor)?;
        if outcome == TriageOutcome::TruePositive && incident_id.is_none() {
            return Err(MonitorError::MissingIncident);
        }
        let mut st = self.state.lock();
        let alert = st.alerts.get_mut(alert_id).ok_or_else(|| MonitorError::UnknownAlert(alert_id.into()))?;
        if alert.triage != TriageState::Untriaged {
            return Err(MonitorError::AlreadyTriaged(alert_id.into()));
        }
        self.audit.append(
            actor,
            incident_id.filter(|_| outcome == TriageOutcome::TruePositive),
            &AuditEvent::AlertTriaged { alert_id: alert_id.into(), outcome },
        )?;
        alert.triage = outcome.into();
        if outcome == TriageOutcome::TruePositive {
            alert.incident_id = incident_id.map(str::to_owned);
        }
        let alert = alert.clone();
        let counters = st.tuning.entry(alert.trigger_id.clone()).or_default();
        match outcome {
            TriageOutcome::TruePositive => counters.true_positive += 1,
            TriageOutcome::BenignPositive => counters.benign_positive += 1,
            TriageOutcome::FalsePositive => counters.false_positive += 1,
        }
        Ok(alert)
    }

    pub fn alert(&self, id: &str) -> Option<Alert> {
        self.state.lock().alerts.get(id).cloned()
    }

    pub fn alerts(&self) -> Vec<Alert> {
        self.state.lock().alerts.values().cloned().collect()
    }

    /// Untriaged alerts in priority order.
    pub fn queue(&self) -> Vec<Alert> {
        let pending: Vec<Alert> =
            self.state.lock().alerts.values().filter(|a| a.triage == TriageState::Untriaged).cloned().collect();
        prioritize(pending)
    }

    pub fn tuning(&self) -> BTreeMap<String, TuningCounters> {
        self.state.lock().tuning.clone()
    }

    /// Triggers whose benign plus false positives outnumber true positives.
    pub fn retuning_report(&self) -> Vec<(String, TuningCounters)> {
        self.tuning()
            .into_iter()
            .filter(|(_, c)| c.benign_positive + c.false_positive > c.true_positive)
            .collect()
    }
}

impl MetricSink for Monitor {
    fn record(&self, m: PendingMetric) {
        // gateway events are well formed by construction
        let _ = self.ingest_now(m);
    }
}

pub fn observe_events<'a>(metric: MetricName, events: impl Iterator<Item = &'a MetricEvent>) -> Observation {
    let mut responses = 0u64;
    let mut denied = 0u64;
    let mut unsatisfactory = 0u64;
    let mut hits = 0u64;
    let mut critical = 0u64;
    let mut injections = 0u64;
    let mut reports = 0u64;
    let mut flagged = BTreeSet::new();
    for e in events {
        match e.kind {
            MetricKind::Response => {
                responses += 1;
                hits += e.flags.filter_hit as u64;
                critical += e.flags.filter_critical as u64;
            }
            MetricKind::Denied => denied += 1,
            MetricKind::Feedback => unsatisfactory += e.flags.user_unsatisfactory as u64,
            MetricKind::ExternalReport | MetricKind::ThreatIntel => {}
        }
        if e.kind == MetricKind::ExternalReport || e.flags.external_report {
            reports += 1;
        }
        if e.flags.injection_suspected && matches!(e.kind, MetricKind::Response | MetricKind::Denied) {
            injections += 1;
            if let Some(p) = &e.principal {
                flagged.insert(p.clone());
            }
        }
    }
    let requests = responses + denied;
    let rate = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let (value, samples) = match metric {
        MetricName::UnsatisfactoryRate => (rate(unsatisfactory, responses), responses),
        MetricName::FilterHitRate => (rate(hits, responses), responses),
        MetricName::CriticalFilterHits => (critical as f64, responses),
        MetricName::PromptInjectionFlags => (injections as f64, requests),
        MetricName::ExternalReportCount => (reports as f64, reports),
        MetricName::DenialCount => (denied as f64, requests),
        MetricName::RequestCount => (requests as f64, requests),
    };
    let flagged_principals = if metric == MetricName::PromptInjectionFlags { flagged.into_iter().collect() } else { vec![] };
    Observation { value, samples, flagged_principals }
}

/// Orders by severity desc, grade desc, fired_at asc; stable for ties.
pub fn prioritize(mut alerts: Vec<Alert>) -> Vec<Alert> {
    alerts.sort_by_key(|a| (Reverse(a.severity), Reverse(a.grade), a.fired_at));
    alerts
}
