use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::report::{AuditSummary, CheckResult, RequestOutcome, ScenarioReport};
use super::{Action, Assertion, Op, Scenario, ScenarioError, Step};
use crate::audit::replay::replay;
use crate::clock::{Clock, Timestamp, VirtualClock};
use crate::gateway::{GatewayError, InferenceRequest};
use crate::incident::Playbook;
use crate::monitor::{MetricFlags, MetricKind, PendingMetric};
use crate::policy::{DeploymentStatus, Tier};
use crate::stack::{FeedbackRequest, Stack, StackConfig, StackError};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the scenario's seed.
    pub seed: Option<u64>,
    /// Persist the audit log here instead of in memory.
    pub audit_path: Option<PathBuf>,
}

/// A finished run: the report plus the stack it ran against.
pub struct ScenarioRun {
    pub report: ScenarioReport,
    pub stack: Stack,
    pub requests: BTreeMap<String, Vec<RequestOutcome>>,
}

struct TickRecord {
    at: Timestamp,
    states: BTreeMap<String, DeploymentStatus>,
}

struct Runner {
    clock: Arc<VirtualClock>,
    stack: Stack,
    tick: Duration,
    next_tick: Timestamp,
    rng: ChaCha8Rng,
    requests: BTreeMap<String, Vec<RequestOutcome>>,
    ramps: BTreeMap<String, Vec<(Timestamp, bool)>>,
    ticks: Vec<TickRecord>,
    names: BTreeMap<String, String>,
    sessions: u64,
}

pub fn run(scenario: &Scenario, playbook: Playbook, opts: &RunOptions) -> Result<ScenarioRun, ScenarioError> {
    scenario.validate(&playbook)?;
    let seed = opts.seed.unwrap_or(scenario.seed);
    let clock = Arc::new(VirtualClock::new(Timestamp(0)));
    let tick = Duration::from_secs(playbook.monitor.tick_secs);
    let stack = Stack::new(
        clock.clone(),
        StackConfig {
            seed,
            playbook,
            deployments: scenario.deployments.clone(),
            principals: scenario.principals.clone(),
            audit_path: opts.audit_path.clone(),
        },
    )
    .map_err(|e| ScenarioError::StackInit(e.to_string()))?;
    let mut r = Runner {
        clock,
        stack,
        tick,
        next_tick: Timestamp(0).plus(tick),
        rng: ChaCha8Rng::seed_from_u64(seed),
        requests: BTreeMap::new(),
        ramps: BTreeMap::new(),
        ticks: Vec::new(),
        names: BTreeMap::new(),
        sessions: 0,
    };
    let mut checks = Vec::new();
    let mut steps_run = 0;
    for (i, step) in scenario.steps.iter().enumerate() {
        let n = i + 1;
        match r.step(step) {
            Ok(Some(check)) => checks.push(CheckResult { name: format!("step {n}: {}", check.name), ..check }),
            Ok(None) => {}
            Err(e) => {
                checks.push(CheckResult {
                    name: format!("step {n}: {}", step_name(step)),
                    passed: false,
                    detail: format!("{}: {e}", e.code()),
                });
                steps_run = n;
                break;
            }
        }
        steps_run = n;
    }
    for a in &scenario.assertions {
        checks.push(r.check(a));
    }
    let passed = checks.iter().all(|c| c.passed);
    let records = r.stack.audit.records();
    let report = ScenarioReport {
        scenario: scenario.id.clone(),
        seed,
        passed,
        steps_total: scenario.steps.len(),
        steps_run,
        requests_handled: r.stack.requests_handled(),
        final_time_ms: r.clock.now().as_millis(),
        checks,
        audit: AuditSummary {
            records: records.len() as u64,
            head_digest: records.last().map_or_else(|| "0".repeat(64), |rec| rec.digest.clone()),
            path: opts.audit_path.as_ref().map(|p| p.display().to_string()),
        },
        final_status: r.stack.status(),
    };
    Ok(ScenarioRun { report, stack: r.stack, requests: r.requests })
}

fn step_name(step: &Step) -> String {
    let v = serde_json::to_value(&step.action).expect("action serializes");
    let kind = v["type"].as_str().unwrap_or("step").to_owned();
    match v.get("op").and_then(|o| o["op"].as_str()) {
        Some(op) => format!("{kind} {op}"),
        None => kind,
    }
}

fn outcome(at: Timestamp, res: &Result<crate::gateway::InferenceResponse, GatewayError>) -> RequestOutcome {
    match res {
        Ok(resp) => RequestOutcome {
            at_ms: at.as_millis(),
            status: 200,
            reason: None,
            route: resp.route.clone(),
            version: Some(resp.version.clone()),
            filtered: resp.filtered,
        },
        Err(e) => {
            let (status, reason) = match e {
                GatewayError::Denied(d) => (if d.reason_code.is_shutdown() { 503 } else { 403 }, Some(d.reason_code)),
                GatewayError::BackendUnavailable(_) => (503, None),
                GatewayError::UnknownSession(_) => (404, None),
                _ => (500, None),
            };
            RequestOutcome { at_ms: at.as_millis(), status, reason, route: None, version: None, filtered: false }
        }
    }
}

impl Runner {
    /// Advances to `t`, running an evaluation tick at every boundary passed.
    fn advance_to(&mut self, t: Timestamp, quiet: bool) -> Result<(), StackError> {
        if quiet {
            self.clock.advance_to(t);
            while self.next_tick <= t {
                self.next_tick = self.next_tick.plus(self.tick);
            }
            return Ok(());
        }
        while self.next_tick <= t {
            self.clock.advance_to(self.next_tick);
            self.run_tick()?;
            self.next_tick = self.next_tick.plus(self.tick);
        }
        self.clock.advance_to(t);
        Ok(())
    }

    fn run_tick(&mut self) -> Result<(), StackError> {
        self.stack.tick()?;
        let states = self.stack.status().deployments.into_iter().map(|d| (d.model_id, d.state)).collect();
        self.ticks.push(TickRecord { at: self.clock.now(), states });
        Ok(())
    }

    fn incident(&self, reference: &str) -> Result<String, StackError> {
        if let Some(id) = self.names.get(reference) {
            return Ok(id.clone());
        }
        if let Some(trigger) = reference.strip_prefix("alert:") {
            return self
                .stack
                .monitor
                .alerts()
                .into_iter()
                .filter(|a| a.trigger_id == trigger)
                .filter_map(|a| a.incident_id)
                .next_back()
                .ok_or_else(|| StackError::Invalid(format!("no incident linked to trigger `{trigger}`")));
        }
        Ok(reference.to_owned())
    }

    fn send(&mut self, label: &str, req: &InferenceRequest) -> RequestOutcome {
        let res = self.stack.handle(req);
        let o = outcome(self.clock.now(), &res);
        self.requests.entry(label.to_owned()).or_default().push(o.clone());
        o
    }

    fn step(&mut self, step: &Step) -> Result<Option<CheckResult>, StackError> {
        if let Some(at) = step.at_secs {
            let t = Timestamp::from_secs(at);
            if t > self.clock.now() {
                self.advance_to(t, false)?;
            }
        }
        let res = self.act(&step.action);
        match (&step.expect_error, res) {
            (None, r) => r,
            (Some(code), Ok(_)) => Ok(Some(CheckResult {
                name: format!("{} fails with {code}", step_name(step)),
                passed: false,
                detail: "step succeeded".into(),
            })),
            (Some(code), Err(e)) => Ok(Some(CheckResult {
                name: format!("{} fails with {code}", step_name(step)),
                passed: e.code() == code,
                detail: format!("{}: {e}", e.code()),
            })),
        }
    }

    fn act(&mut self, action: &Action) -> Result<Option<CheckResult>, StackError> {
        match action {
            Action::AdvanceClock { secs, quiet } => {
                let t = self.clock.now().plus(Duration::from_secs(*secs));
                self.advance_to(t, *quiet)?;
            }
            Action::Tick => self.run_tick()?,
            Action::SendRequest { label, principal, model, prompt, repeat, session, tool_intents, use_case, cue } => {
                if let Some(c) = cue {
                    self.stack.script_backend(model, c.clone());
                }
                for _ in 0..*repeat {
                    let sid = session.clone().unwrap_or_else(|| format!("{principal}-s"));
                    let mut req =
                        InferenceRequest::new(principal, &sid, model, prompt.as_deref().unwrap_or("summarize the report"));
                    req.tool_intents = tool_intents.clone();
                    req.use_case = use_case.clone();
                    self.send(label, &req);
                }
            }
            Action::Feedback { principal, model, unsatisfactory, repeat } => {
                for _ in 0..*repeat {
                    self.stack.feedback(&FeedbackRequest {
                        principal_id: principal.clone(),
                        model_id: model.clone(),
                        request_id: None,
                        unsatisfactory: *unsatisfactory,
                    })?;
                }
            }
            Action::EmitExternalReport { model, principal, note } => {
                self.stack.ingest_now(PendingMetric {
                    kind: MetricKind::ExternalReport,
                    deployment: model.clone(),
                    principal: principal.clone(),
                    value: 1.0,
                    flags: MetricFlags { external_report: true, ..Default::default() },
                    source: "analyst".into(),
                    note: note.clone(),
                })?;
            }
            Action::Ramp { label, model, principals, from_pct, to_pct, duration_secs, requests_per_tick } => {
                self.ramp(label, model, principals, *from_pct, *to_pct, *duration_secs, *requests_per_tick)?;
            }
            Action::OperatorAction { role, op } => self.operator(*role, op)?,
            Action::Expect { check } => return Ok(Some(self.check(check))),
        }
        Ok(None)
    }

    #[allow(clippy::too_many_arguments)]
    fn ramp(
        &mut self,
        label: &str,
        model: &str,
        principals: &[String],
        from_pct: f64,
        to_pct: f64,
        duration_secs: u64,
        per_tick: u32,
    ) -> Result<(), StackError> {
        let start = self.clock.now();
        let end = start.plus(Duration::from_secs(duration_secs));
        let span = (end.as_millis() - start.as_millis()) as f64;
        let mut idx = 0usize;
        while self.clock.now() < end {
            let from = self.clock.now();
            let to = self.next_tick.min(end);
            let gap = to.as_millis() - from.as_millis();
            for j in 0..per_tick {
                let t = Timestamp(from.as_millis() + gap * (j as u64 + 1) / (per_tick as u64 + 1));
                self.advance_to(t, false)?;
                let pct = from_pct + (to_pct - from_pct) * (t.as_millis() - start.as_millis()) as f64 / span;
                let principal = &principals[idx % principals.len()];
                idx += 1;
                self.sessions += 1;
                let req = InferenceRequest::new(principal, &format!("ramp-{}", self.sessions), model, "describe the scan");
                if self.send(label, &req).status != 200 {
                    continue;
                }
                let unsatisfactory = self.rng.random::<f64>() * 100.0 < pct;
                self.ramps.entry(label.to_owned()).or_default().push((t, unsatisfactory));
                self.stack.feedback(&FeedbackRequest {
                    principal_id: principal.clone(),
                    model_id: model.into(),
                    request_id: None,
                    unsatisfactory,
                })?;
            }
            self.advance_to(to, false)?;
        }
        Ok(())
    }

    fn operator(&mut self, role: crate::role::Role, op: &Op) -> Result<(), StackError> {
        let s = &self.stack;
        match op {
            Op::OpenIncident { model, severity, report, name } => {
                let inc = s.open_manual_incident(model, report, *severity, role)?;
                if let Some(n) = name {
                    self.names.insert(n.clone(), inc.id);
                }
            }
            Op::Triage { trigger, outcome } => {
                let alert = s
                    .monitor
                    .alerts()
                    .into_iter()
                    .rfind(|a| &a.trigger_id == trigger)
                    .ok_or_else(|| StackError::Invalid(format!("no alert from trigger `{trigger}`")))?;
                s.triage(&alert.id, *outcome, role)?;
            }
            Op::Escalate { incident, to, emergency } => {
                s.escalate(&self.incident(incident)?, role, *to, *emergency)?;
            }
            Op::Acknowledge { incident } => {
                s.acknowledge(&self.incident(incident)?, role)?;
            }
            Op::Transition { incident, to } => {
                s.transition(&self.incident(incident)?, *to, role)?;
            }
            Op::AssessSeverity { incident, severity } => {
                s.assess_severity(&self.incident(incident)?, *severity, role)?;
            }
            Op::ExecuteCorrection { incident, order } => {
                s.execute_correction(&self.incident(incident)?, order, role)?;
            }
            Op::RevokePolicy { model, kind } => {
                let snap = s.policies.snapshot(model)?;
                let id = snap
                    .active()
                    .filter(|p| p.kind == *kind)
                    .map(|p| p.id.clone())
                    .last()
                    .ok_or_else(|| StackError::Invalid(format!("no active {kind} on `{model}`")))?;
                s.revoke_policy(&id, role)?;
            }
            Op::SubmitReview { incident, review } => {
                s.submit_review(&self.incident(incident)?, review.clone(), role)?;
            }
            Op::ApproveRedeployment { incident, review, approvals } => {
                s.approve_redeployment(&self.incident(incident)?, review.clone(), approvals, role)?;
            }
            Op::Notify { incident, mode, message, affected } => {
                s.notify(&self.incident(incident)?, affected.as_deref(), *mode, message)?;
            }
            Op::AlertStakeholders { incident, audiences, summary } => {
                s.alert_stakeholders(&self.incident(incident)?, audiences, summary)?;
            }
            Op::ActivateFallback { principal, incident } => {
                let inc = incident.as_deref().map(|i| self.incident(i)).transpose()?;
                s.activate_fallback(principal, inc.as_deref())?;
            }
            Op::RecordRemedy { principal, downtime_secs, incident } => {
                let inc = incident.as_deref().map(|i| self.incident(i)).transpose()?;
                s.record_remedy(principal, Duration::from_secs(*downtime_secs), inc.as_deref())?;
            }
        }
        Ok(())
    }

    fn check(&self, a: &Assertion) -> CheckResult {
        let (passed, detail) = match self.evaluate(a) {
            Ok(r) => r,
            Err(e) => (false, e),
        };
        CheckResult { name: a.name(), passed, detail }
    }

    fn evaluate(&self, a: &Assertion) -> Result<(bool, String), String> {
        let s = &self.stack;
        let snap = |m: &str| s.policies.snapshot(m).map_err(|e| e.to_string());
        Ok(match a {
            Assertion::DeploymentState { model, state } => {
                let got = snap(model)?.deployment.state;
                (got == *state, format!("state {got:?}"))
            }
            Assertion::Moratorium { model, set } => {
                let got = snap(model)?.deployment.moratorium;
                (got == *set, format!("moratorium {got}"))
            }
            Assertion::ActivePolicies { model, kind, scope, count } => {
                let n = snap(model)?
                    .active()
                    .filter(|p| p.kind == *kind && scope.as_ref().is_none_or(|sc| &p.scope == sc))
                    .count();
                (n == *count, format!("{n} active"))
            }
            Assertion::Request { label, nth, status, reason, route } => {
                let all = self.requests.get(label).ok_or_else(|| format!("no requests under `{label}`"))?;
                let picked: Vec<&RequestOutcome> = match nth {
                    Some(n) => vec![all.get(n.wrapping_sub(1)).ok_or_else(|| format!("only {} requests", all.len()))?],
                    None => all.iter().collect(),
                };
                let bad = picked.iter().find(|o| {
                    o.status != *status
                        || reason.is_some_and(|r| o.reason != Some(r))
                        || route.as_ref().is_some_and(|r| o.route.as_ref() != Some(r))
                });
                match bad {
                    None => (true, format!("{} matched", picked.len())),
                    Some(o) => (false, format!("got status {} reason {:?} route {:?}", o.status, o.reason, o.route)),
                }
            }
            Assertion::RequestCount { label, status, count } => {
                let n = self.requests.get(label).map_or(0, |v| v.iter().filter(|o| o.status == *status).count());
                (n == *count, format!("{n} with status {status}"))
            }
            Assertion::WebhookHits { audience, count } => {
                let cfg = s.comms.config();
                let ep = cfg
                    .stakeholders
                    .iter()
                    .find(|e| e.audience == *audience)
                    .ok_or_else(|| format!("no endpoint for {audience:?}"))?;
                let n = s.transport.hits(&ep.url);
                (n == *count, format!("{n} hits"))
            }
            Assertion::IncidentState { incident, state } => {
                let id = self.incident(incident).map_err(|e| e.to_string())?;
                let inc = s.incidents.get(&id).ok_or_else(|| format!("unknown incident `{id}`"))?;
                (inc.state == *state, format!("state {:?}", inc.state))
            }
            Assertion::Devolved { incident, role } => {
                let id = self.incident(incident).map_err(|e| e.to_string())?;
                let inc = s.incidents.get(&id).ok_or_else(|| format!("unknown incident `{id}`"))?;
                let got = inc.devolution.map(|d| d.role);
                (got == Some(*role), format!("devolved to {got:?}"))
            }
            Assertion::AlertCount { trigger, count } => {
                let n = s.monitor.alerts().iter().filter(|al| &al.trigger_id == trigger).count();
                (n == *count, format!("{n} alerts"))
            }
            Assertion::FlipWithinTicks { ramp, model, state, window_secs, min_samples, threshold, ticks } => {
                let trace = self.ramps.get(ramp).ok_or_else(|| format!("no ramp `{ramp}`"))?;
                let w = window_secs * 1000;
                let breach = trace.iter().map(|(t, _)| *t).find(|t| {
                    let lo = t.as_millis().saturating_sub(w);
                    let in_window = trace.iter().filter(|(e, _)| e.as_millis() >= lo && e <= t);
                    let (n, u) = in_window.fold((0u64, 0u64), |(n, u), (_, bad)| (n + 1, u + u64::from(*bad)));
                    n >= *min_samples && (u as f64 / n as f64) > *threshold
                });
                let Some(breach) = breach else { return Ok((false, "ramp never breached".into())) };
                let flip = self.ticks.iter().position(|r| r.states.get(model) == Some(state));
                let Some(flip) = flip else { return Ok((false, format!("never reached {state:?}"))) };
                let flip_at = self.ticks[flip].at;
                let n = self.ticks[..=flip].iter().filter(|r| r.at >= breach).count();
                (
                    n == *ticks,
                    format!("breach at {} ms, flip at tick {} ms, {n} ticks", breach.as_millis(), flip_at.as_millis()),
                )
            }
            Assertion::NotificationOrder => {
                let batches = s.comms.batches();
                let bad = batches.iter().filter(|b| !b.ordering_holds()).count();
                let sc_first = batches
                    .iter()
                    .filter(|b| b.sends.iter().any(|d| d.tier == Tier::SafetyCritical))
                    .count();
                (bad == 0 && !batches.is_empty(), format!("{} batches, {sc_first} with safety-critical, {bad} out of order", batches.len()))
            }
            Assertion::AuditReplay => {
                let replayed = replay(&s.audit.records()).map_err(|e| e.to_string())?;
                let live = s.live_state();
                let same = replayed == live;
                (same, if same { format!("{} records", live.last_seq) } else { diff(&replayed, &live) })
            }
            Assertion::DecisionsEqualRequests => {
                let decisions = s.live_state().decisions;
                let handled = s.requests_handled();
                (decisions == handled, format!("{decisions} decisions, {handled} requests"))
            }
        })
    }
}

fn diff(a: &crate::audit::replay::ReplayState, b: &crate::audit::replay::ReplayState) -> String {
    let a = serde_json::to_value(a).expect("state serializes");
    let b = serde_json::to_value(b).expect("state serializes");
    let keys = ["deployments", "incidents", "decisions", "alerts_fired", "last_seq"];
    let differing: Vec<_> = keys.iter().filter(|k| a[**k] != b[**k]).collect();
    format!("replay differs in {differing:?}")
}
