//! Customer notification, fallback routing, remedies and stakeholder webhooks.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audit::{AuditError, AuditEvent, AuditLog};
use crate::clock::{duration_secs, Clock, Timestamp};
use crate::gateway::backend::ModelBackend;
use crate::incident::Severity;
use crate::policy::{PolicyId, Principal, Tier};
use crate::role::Role;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FallbackRoute {
    PreviousModelVersion { version: String },
    NonAiStub,
    HumanOperatorQueue,
}

impl FallbackRoute {
    pub fn label(&self) -> String {
        match self {
            FallbackRoute::PreviousModelVersion { version } => format!("previous_model_version:{version}"),
            FallbackRoute::NonAiStub => "non_ai_stub".into(),
            FallbackRoute::HumanOperatorQueue => "human_operator_queue".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallbackPlan {
    pub principal_id: String,
    pub route: FallbackRoute,
    #[serde(default)]
    pub agreed_in_contract: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorTicket {
    pub ticket: String,
    pub principal_id: String,
    pub prompt: String,
    pub queued_at: Timestamp,
}

/// Routing directives the gateway consults before touching a deployment.
#[derive(Default)]
pub struct FallbackDirectory {
    plans: RwLock<BTreeMap<String, FallbackPlan>>,
    active: RwLock<BTreeMap<String, FallbackRoute>>,
    queue: Mutex<Vec<OperatorTicket>>,
}

impl FallbackDirectory {
    pub fn new(plans: impl IntoIterator<Item = FallbackPlan>) -> Self {
        let d = Self::default();
        d.set_plans(plans);
        d
    }

    pub fn set_plans(&self, plans: impl IntoIterator<Item = FallbackPlan>) {
        *self.plans.write() = plans.into_iter().map(|p| (p.principal_id.clone(), p)).collect();
    }

    pub fn plan(&self, principal_id: &str) -> Option<FallbackPlan> {
        self.plans.read().get(principal_id).cloned()
    }

    pub fn active_route(&self, principal_id: &str) -> Option<FallbackRoute> {
        self.active.read().get(principal_id).cloned()
    }

    pub fn active(&self) -> BTreeMap<String, FallbackRoute> {
        self.active.read().clone()
    }

    pub fn enqueue_for_operator(&self, principal_id: &str, prompt: &str, now: Timestamp) -> String {
        let mut q = self.queue.lock();
        let ticket = format!("op-{:04}", q.len() + 1);
        q.push(OperatorTicket {
            ticket: ticket.clone(),
            principal_id: principal_id.into(),
            prompt: prompt.into(),
            queued_at: now,
        });
        ticket
    }

    pub fn operator_queue(&self) -> Vec<OperatorTicket> {
        self.queue.lock().clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    DirectContact,
    Email,
    PortalBanner,
    PublicAnnouncement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Audience {
    Regulator,
    IndustryForum,
    ComputeProvider,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlaTerms {
    #[serde(default)]
    pub credit_rate_per_hour: Option<f64>,
    #[serde(default)]
    pub monetary_note: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StakeholderEndpoint {
    pub audience: Audience,
    pub url: String,
    pub severity_floor: Severity,
    #[serde(default = "three")]
    pub max_attempts: u32,
    #[serde(default = "thirty", rename = "backoff_secs", with = "duration_secs")]
    pub backoff: Duration,
}

fn three() -> u32 {
    3
}

fn thirty() -> Duration {
    Duration::from_secs(30)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommsConfig {
    pub tier_order: Vec<Tier>,
    pub channels: BTreeMap<Tier, Vec<Channel>>,
    #[serde(rename = "ack_timeout_secs", with = "duration_secs")]
    pub ack_timeout: Duration,
    pub sla: BTreeMap<Tier, SlaTerms>,
    pub stakeholders: Vec<StakeholderEndpoint>,
}

impl Default for CommsConfig {
    fn default() -> Self {
        Self {
            tier_order: vec![Tier::SafetyCritical, Tier::Commercial, Tier::Individual],
            channels: [
                (Tier::SafetyCritical, vec![Channel::DirectContact, Channel::Email, Channel::PortalBanner]),
                (Tier::Commercial, vec![Channel::Email, Channel::PortalBanner]),
                (Tier::Individual, vec![Channel::Email, Channel::PortalBanner]),
            ]
            .into_iter()
            .collect(),
            ack_timeout: Duration::from_secs(15 * 60),
            sla: BTreeMap::new(),
            stakeholders: Vec::new(),
        }
    }
}

impl CommsConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.tier_order.first() != Some(&Tier::SafetyCritical) {
            return Err("tier order must start with SafetyCritical".into());
        }
        let mut seen = self.tier_order.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.tier_order.len() {
            return Err("tier order lists a tier twice".into());
        }
        if self.ack_timeout.is_zero() {
            return Err("ack timeout must be > 0".into());
        }
        for (tier, t) in &self.sla {
            if t.credit_rate_per_hour.is_some_and(|r| !(r >= 0.0 && r.is_finite())) {
                return Err(format!("{tier:?} credit rate must be a finite non-negative number"));
            }
        }
        if self.stakeholders.iter().any(|s| s.max_attempts == 0) {
            return Err("stakeholder max_attempts must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NotifyMode {
    /// Tier channels; direct contact only for non-allowlisted safety-critical principals.
    Standard,
    /// Every configured channel plus a public announcement.
    AllChannels,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dispatch {
    pub principal_id: String,
    pub tier: Tier,
    pub channel: Channel,
    pub sent_at: Timestamp,
    pub acked_at: Option<Timestamp>,
    pub timed_out: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NotificationBatch {
    pub incident_id: String,
    pub model_id: String,
    pub tier_order: Vec<Tier>,
    pub sends: Vec<Dispatch>,
    pub released_at: Timestamp,
    pub portal_message: String,
    pub public_announcement: bool,
}

impl NotificationBatch {
    pub fn first_send(&self, pred: impl Fn(Tier) -> bool) -> Option<Timestamp> {
        self.sends.iter().filter(|s| pred(s.tier)).map(|s| s.sent_at).min()
    }

    /// Safety-critical recipients were reached before anyone else.
    pub fn ordering_holds(&self) -> bool {
        match (self.first_send(|t| t == Tier::SafetyCritical), self.first_send(|t| t != Tier::SafetyCritical)) {
            (Some(sc), Some(other)) => sc < other,
            _ => true,
        }
    }
}

/// Delivery stub for customer notifications. Returns the acknowledgement
/// latency, or `None` if the recipient never acknowledges.
pub trait NotificationSink: Send + Sync {
    fn deliver(&self, principal_id: &str, channel: Channel, at: Timestamp) -> Option<Duration>;
}

/// Deterministic sink: latency derived from a seed and the recipient.
pub struct SeededSink {
    seed: u64,
    max_latency: Duration,
}

impl SeededSink {
    pub fn new(seed: u64, max_latency: Duration) -> Self {
        Self { seed, max_latency }
    }
}

impl NotificationSink for SeededSink {
    fn deliver(&self, principal_id: &str, channel: Channel, _at: Timestamp) -> Option<Duration> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(principal_id.as_bytes());
        h.update([channel as u8]);
        let d = h.finalize();
        let r = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
        let span = self.max_latency.as_millis().max(1) as u64;
        Some(Duration::from_millis(1 + r % span))
    }
}

pub trait WebhookTransport: Send + Sync {
    fn post(&self, url: &str, body: &Value) -> Result<(), String>;
}

/// In-process transport that records every post. URLs listed as down fail.
#[derive(Default)]
pub struct RecordingTransport {
    posts: Mutex<Vec<(String, Value)>>,
    down: RwLock<BTreeMap<String, u32>>,
}

impl RecordingTransport {
    /// Fails the next `failures` posts to `url` (`u32::MAX` for always).
    pub fn set_down(&self, url: &str, failures: u32) {
        self.down.write().insert(url.into(), failures);
    }

    pub fn posts(&self) -> Vec<(String, Value)> {
        self.posts.lock().clone()
    }

    pub fn hits(&self, url: &str) -> usize {
        self.posts.lock().iter().filter(|(u, _)| u == url).count()
    }
}

impl WebhookTransport for RecordingTransport {
    fn post(&self, url: &str, body: &Value) -> Result<(), String> {
        if let Some(n) = self.down.write().get_mut(url) {
            if *n > 0 {
                if *n != u32::MAX {
                    *n -= 1;
                }
                return Err(format!("{url} unreachable"));
            }
        }
        self.posts.lock().push((url.into(), body.clone()));
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RemedyKind {
    ServiceCredit { credits: f64 },
    MonetaryNote,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Remedy {
    pub principal_id: String,
    pub tier: Tier,
    pub downtime_secs: u64,
    pub kind: RemedyKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReceiptStatus {
    Delivered,
    BelowFloor,
    Parked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub audience: Audience,
    pub url: String,
    pub status: ReceiptStatus,
    pub attempts: u32,
    /// Simulated retry times after the first attempt.
    pub retry_at: Vec<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StakeholderMessage {
    pub incident_id: String,
    pub severity: Severity,
    pub corrections: Vec<PolicyId>,
    pub summary: String,
    pub timestamp: Timestamp,
}

#[derive(Debug, Error)]
pub enum CommsError {
    #[error("no fallback plan for `{0}`")]
    NoPlan(String),
    #[error("fallback target unavailable: {0}")]
    TargetMissing(String),
    #[error("no SLA terms configured for {0:?}")]
    NoSlaConfigured(Tier),
    #[error("no stakeholder endpoint for {0:?}")]
    NoEndpoint(Audience),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

pub struct Comms {
    clock: Arc<dyn Clock>,
    audit: Arc<AuditLog>,
    config: RwLock<CommsConfig>,
    sink: Arc<dyn NotificationSink>,
    transport: Arc<dyn WebhookTransport>,
    fallbacks: Arc<FallbackDirectory>,
    portal: RwLock<BTreeMap<String, String>>,
    batches: Mutex<Vec<NotificationBatch>>,
    release_guard: AtomicU64,
}

impl Comms {
    pub fn new(
        clock: Arc<dyn Clock>,
        audit: Arc<AuditLog>,
        config: CommsConfig,
        sink: Arc<dyn NotificationSink>,
        transport: Arc<dyn WebhookTransport>,
        fallbacks: Arc<FallbackDirectory>,
    ) -> Self {
        Self {
            clock,
            audit,
            config: RwLock::new(config),
            sink,
            transport,
            fallbacks,
            portal: RwLock::new(BTreeMap::new()),
            batches: Mutex::new(Vec::new()),
            release_guard: AtomicU64::new(0),
        }
    }

    pub fn set_config(&self, config: CommsConfig) {
        *self.config.write() = config;
    }

    pub fn config(&self) -> CommsConfig {
        self.config.read().clone()
    }

    pub fn fallbacks(&self) -> &FallbackDirectory {
        &self.fallbacks
    }

    pub fn portal_notice(&self, model_id: &str) -> Option<String> {
        self.portal.read().get(model_id).cloned()
    }

    pub fn batches(&self) -> Vec<NotificationBatch> {
        self.batches.lock().clone()
    }

    /// Sends tiered notices. Safety-critical recipients go first; other tiers
    /// are released only once every safety-critical send is acknowledged or
    /// has timed out.
    pub fn notify(
        &self,
        incident_id: &str,
        model_id: &str,
        affected: &[Principal],
        mode: NotifyMode,
        message: &str,
    ) -> Result<NotificationBatch, CommsError> {
        let cfg = self.config();
        let now = self.clock.now();
        // never release two batches at the same instant out of order
        let start = Timestamp(now.0.max(self.release_guard.load(Ordering::SeqCst)));
        self.audit.append(
            Role::System,
            Some(incident_id),
            &AuditEvent::PortalStatus { model_id: model_id.into(), message: message.into() },
        )?;
        self.portal.write().insert(model_id.into(), message.into());
        if mode == NotifyMode::AllChannels {
            self.audit.append(
                Role::System,
                Some(incident_id),
                &AuditEvent::PublicAnnouncement { model_id: model_id.into(), message: message.into() },
            )?;
        }
        let mut sends = Vec::new();
        let mut release = start;
        for (rank, tier) in cfg.tier_order.iter().enumerate() {
            let mut recipients: Vec<&Principal> = affected.iter().filter(|p| p.tier == *tier).collect();
            recipients.sort_by(|a, b| a.id.cmp(&b.id));
            let sent_at = if rank == 0 { start } else { release };
            let mut resolved = sent_at;
            for p in recipients {
                for ch in self.channels_for(&cfg, p, mode) {
                    let latency = self.sink.deliver(&p.id, ch, sent_at);
                    let (acked_at, timed_out) = match latency {
                        Some(l) if l <= cfg.ack_timeout => (Some(sent_at.plus(l)), false),
                        _ => (None, true),
                    };
                    resolved = resolved.max(acked_at.unwrap_or(sent_at.plus(cfg.ack_timeout)));
                    self.audit.append(
                        Role::System,
                        Some(incident_id),
                        &AuditEvent::NotificationSent {
                            principal_id: p.id.clone(),
                            tier: p.tier,
                            channel: ch,
                            sent_at,
                            acked_at,
                        },
                    )?;
                    if timed_out {
                        self.audit.append(
                            Role::System,
                            Some(incident_id),
                            &AuditEvent::NotificationTimedOut { principal_id: p.id.clone(), channel: ch },
                        )?;
                    }
                    sends.push(Dispatch { principal_id: p.id.clone(), tier: p.tier, channel: ch, sent_at, acked_at, timed_out });
                }
            }
            if *tier == Tier::SafetyCritical {
                // strictly after the last acknowledgement or timeout
                release = if resolved > start { resolved.plus(Duration::from_millis(1)) } else { start.plus(Duration::from_millis(1)) };
            }
        }
        self.release_guard.fetch_max(release.0, Ordering::SeqCst);
        let batch = NotificationBatch {
            incident_id: incident_id.into(),
            model_id: model_id.into(),
            tier_order: cfg.tier_order.clone(),
            sends,
            released_at: release,
            portal_message: message.into(),
            public_announcement: mode == NotifyMode::AllChannels,
        };
        self.batches.lock().push(batch.clone());
        Ok(batch)
    }

    fn channels_for(&self, cfg: &CommsConfig, p: &Principal, mode: NotifyMode) -> Vec<Channel> {
        let mut chans = cfg.channels.get(&p.tier).cloned().unwrap_or_default();
        if mode == NotifyMode::Standard && p.tier == Tier::SafetyCritical && p.allowlisted {
            chans.retain(|c| *c != Channel::DirectContact);
        }
        if mode == NotifyMode::AllChannels {
            for c in [Channel::DirectContact, Channel::Email, Channel::PortalBanner] {
                if !chans.contains(&c) && (c != Channel::DirectContact || p.tier == Tier::SafetyCritical) {
                    chans.push(c);
                }
            }
        }
        chans.sort();
        chans.dedup();
        chans
    }

    pub fn activate_fallback(
        &self,
        principal_id: &str,
        incident_id: Option<&str>,
        model_id: &str,
        backend: &dyn ModelBackend,
    ) -> Result<FallbackRoute, CommsError> {
        let plan = self.fallbacks.plan(principal_id).ok_or_else(|| CommsError::NoPlan(principal_id.into()))?;
        if let FallbackRoute::PreviousModelVersion { version } = &plan.route {
            if !backend.has_version(model_id, version) {
                return Err(CommsError::TargetMissing(format!("{model_id}@{version}")));
            }
        }
        self.audit.append(
            Role::System,
            incident_id,
            &AuditEvent::FallbackActivated { principal_id: principal_id.into(), route: plan.route.clone() },
        )?;
        self.fallbacks.active.write().insert(principal_id.into(), plan.route.clone());
        Ok(plan.route)
    }

    pub fn deactivate_fallback(&self, principal_id: &str, incident_id: Option<&str>) -> Result<bool, CommsError> {
        if !self.fallbacks.active.read().contains_key(principal_id) {
            return Ok(false);
        }
        self.audit.append(
            Role::System,
            incident_id,
            &AuditEvent::FallbackDeactivated { principal_id: principal_id.into() },
        )?;
        self.fallbacks.active.write().remove(principal_id);
        Ok(true)
    }

    pub fn compute_remedy(&self, principal: &Principal, downtime: Duration) -> Result<Remedy, CommsError> {
        compute_remedy(&self.config.read().sla, principal, downtime)
    }

    pub fn record_remedy(&self, remedy: &Remedy, incident_id: Option<&str>) -> Result<u64, CommsError> {
        Ok(self.audit.append(Role::System, incident_id, &AuditEvent::RemedyRecorded { remedy: remedy.clone() })?)
    }

    /// Posts the incident summary to each audience's webhook, retrying with
    /// backoff and parking the message when every attempt fails.
    pub fn alert_stakeholders(
        &self,
        message: &StakeholderMessage,
        audiences: &[Audience],
    ) -> Result<Vec<Receipt>, CommsError> {
        let cfg = self.config();
        let body = json!({
            "incident_id": message.incident_id,
            "severity": message.severity,
            "corrections": message.corrections,
            "summary": message.summary,
            "timestamp": message.timestamp,
        });
        let mut receipts = Vec::new();
        for audience in audiences {
            let ep = cfg
                .stakeholders
                .iter()
                .find(|e| e.audience == *audience)
                .ok_or(CommsError::NoEndpoint(*audience))?;
            if message.severity < ep.severity_floor {
                receipts.push(Receipt {
                    audience: *audience,
                    url: ep.url.clone(),
                    status: ReceiptStatus::BelowFloor,
                    attempts: 0,
                    retry_at: vec![],
                });
                continue;
            }
            let mut attempts = 0;
            let mut delivered = false;
            let mut retry_at = Vec::new();
            let mut at = self.clock.now();
            let mut backoff = ep.backoff;
            while attempts < ep.max_attempts && !delivered {
                if attempts > 0 {
                    at = at.plus(backoff);
                    backoff *= 2;
                    retry_at.push(at);
                }
                attempts += 1;
                delivered = self.transport.post(&ep.url, &body).is_ok();
            }
            self.audit.append(
                Role::System,
                Some(&message.incident_id),
                &AuditEvent::StakeholderAlerted { audience: *audience, delivered, attempts },
            )?;
            receipts.push(Receipt {
                audience: *audience,
                url: ep.url.clone(),
                status: if delivered { ReceiptStatus::Delivered } else { ReceiptStatus::Parked },
                attempts,
                retry_at,
            });
        }
        Ok(receipts)
    }
}

pub fn compute_remedy(
    sla: &BTreeMap<Tier, SlaTerms>,
    principal: &Principal,
    downtime: Duration,
) -> Result<Remedy, CommsError> {
    let terms = sla.get(&principal.tier).ok_or(CommsError::NoSlaConfigured(principal.tier))?;
    let kind = if downtime.is_zero() {
        RemedyKind::None
    } else if terms.monetary_note {
        RemedyKind::MonetaryNote
    } else if let Some(rate) = terms.credit_rate_per_hour {
        RemedyKind::ServiceCredit { credits: downtime.as_secs_f64() / 3600.0 * rate }
    } else {
        RemedyKind::None
    };
    Ok(Remedy { principal_id: principal.id.clone(), tier: principal.tier, downtime_secs: downtime.as_secs(), kind })
}
