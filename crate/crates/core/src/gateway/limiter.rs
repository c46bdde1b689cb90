//! Sliding-window and distinct-member limiters.
//!
//! A window of length `w` evaluated at time `t` covers the half-open interval
//! `(t - w, t]`: an event exactly `w` old has expired.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;

use crate::clock::Timestamp;
use crate::policy::{ChargeLimit, PolicyId, ThrottleCharge, UsageView};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Allowed,
    Exhausted,
}

/// Timestamps of admitted events inside the window.
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    cap: u64,
    window_ms: u64,
    events: VecDeque<(u64, u64)>,
    in_window: u64,
    last_seen: u64,
}

impl SlidingWindow {
    pub fn new(cap: u64, window: Duration) -> Self {
        Self { cap, window_ms: window.as_millis() as u64, events: VecDeque::new(), in_window: 0, last_seen: 0 }
    }

    fn expire(&mut self, t: u64) {
        let horizon = t.saturating_sub(self.window_ms);
        while let Some(&(ts, w)) = self.events.front() {
            if t >= self.window_ms && ts <= horizon {
                self.events.pop_front();
                self.in_window -= w;
            } else {
                break;
            }
        }
    }

    /// Count inside the window at `t`. Earlier-than-seen `t` is clamped.
    pub fn count_at(&mut self, t: Timestamp) -> u64 {
        let t = t.0.max(self.last_seen);
        self.expire(t);
        self.in_window
    }

    pub fn would_admit(&mut self, t: Timestamp, weight: u64) -> bool {
        self.count_at(t).saturating_add(weight) <= self.cap
    }

    pub fn check_and_consume(&mut self, t: Timestamp) -> Admission {
        self.check_and_consume_n(t, 1)
    }

    /// Consumes `weight` units iff the window stays within the cap.
    pub fn check_and_consume_n(&mut self, t: Timestamp, weight: u64) -> Admission {
        if !self.would_admit(t, weight) {
            return Admission::Exhausted;
        }
        let t = t.0.max(self.last_seen);
        self.last_seen = t;
        if weight > 0 {
            self.events.push_back((t, weight));
            self.in_window += weight;
        }
        Admission::Allowed
    }
}

/// Distinct members, optionally forgotten after a window of inactivity.
#[derive(Debug, Clone, Default)]
pub struct DistinctSet {
    members: BTreeMap<String, u64>,
    last_seen: u64,
}

impl DistinctSet {
    fn live(&mut self, t: u64, window_ms: Option<u64>) {
        if let Some(w) = window_ms {
            if t >= w {
                let horizon = t - w;
                self.members.retain(|_, seen| *seen > horizon);
            }
        }
    }

    pub fn would_admit(&mut self, member: &str, cap: u64, window_ms: Option<u64>, t: Timestamp) -> bool {
        let t = t.0.max(self.last_seen);
        self.live(t, window_ms);
        self.members.contains_key(member) || (self.members.len() as u64) < cap
    }

    fn consume(&mut self, member: &str, t: Timestamp) {
        let t = t.0.max(self.last_seen);
        self.last_seen = t;
        self.members.insert(member.to_owned(), t);
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Debug)]
enum KeyState {
    Window(SlidingWindow),
    Distinct(DistinctSet),
}

impl KeyState {
    fn for_limit(limit: &ChargeLimit) -> Self {
        match limit {
            ChargeLimit::Window { cap, window_ms, .. } => {
                KeyState::Window(SlidingWindow::new(*cap, Duration::from_millis(*window_ms)))
            }
            ChargeLimit::Distinct { .. } => KeyState::Distinct(DistinctSet::default()),
        }
    }

    fn admits(&mut self, limit: &ChargeLimit, t: Timestamp) -> bool {
        match (self, limit) {
            (KeyState::Window(w), ChargeLimit::Window { cap, window_ms, weight }) => {
                w.cap = *cap;
                w.window_ms = *window_ms;
                w.would_admit(t, *weight)
            }
            (KeyState::Distinct(d), ChargeLimit::Distinct { cap, member, window_ms }) => {
                d.would_admit(member, *cap, *window_ms, t)
            }
            _ => false,
        }
    }

    fn consume(&mut self, limit: &ChargeLimit, t: Timestamp) {
        match (self, limit) {
            (KeyState::Window(w), ChargeLimit::Window { weight, .. }) => {
                w.check_and_consume_n(t, *weight);
            }
            (KeyState::Distinct(d), ChargeLimit::Distinct { member, .. }) => d.consume(member, t),
            _ => {}
        }
    }
}

/// Limiter state for every (policy, scope key). Each key is its own
/// serialization point.
#[derive(Debug, Default)]
pub struct Limiter {
    keys: Mutex<HashMap<String, Arc<Mutex<KeyState>>>>,
}

impl Limiter {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(&self, charge: &ThrottleCharge) -> Arc<Mutex<KeyState>> {
        self.keys
            .lock()
            .entry(charge.key.clone())
            .or_insert_with(|| Arc::new(Mutex::new(KeyState::for_limit(&charge.limit))))
            .clone()
    }

    /// Single-event sliding-window check for `key`.
    pub fn check_and_consume(&self, key: &str, cap: u64, window: Duration, t: Timestamp) -> Admission {
        let charge = ThrottleCharge {
            policy_id: PolicyId(String::new()),
            kind: crate::policy::CorrectionKind::ThrottlePrompts,
            key: key.to_owned(),
            limit: ChargeLimit::Window { cap, window_ms: window.as_millis() as u64, weight: 1 },
        };
        match self.commit(std::slice::from_ref(&charge), t) {
            Ok(()) => Admission::Allowed,
            Err(_) => Admission::Exhausted,
        }
    }

    /// Consumes every charge, or none. Returns the first exhausted policy.
    pub fn commit(&self, charges: &[ThrottleCharge], t: Timestamp) -> Result<(), PolicyId> {
        let mut ordered: Vec<&ThrottleCharge> = charges.iter().collect();
        ordered.sort_by(|a, b| a.key.cmp(&b.key));
        let states: Vec<_> = ordered.iter().map(|c| self.key(c)).collect();
        // keys locked in sorted order
        let mut guards: Vec<_> = states.iter().map(|s| s.lock()).collect();
        for (charge, guard) in ordered.iter().zip(guards.iter_mut()) {
            if !guard.admits(&charge.limit, t) {
                return Err(charge.policy_id.clone());
            }
        }
        for (charge, guard) in ordered.iter().zip(guards.iter_mut()) {
            guard.consume(&charge.limit, t);
        }
        Ok(())
    }

    pub fn reset(&self) {
        self.keys.lock().clear();
    }
}

impl UsageView for Limiter {
    fn admits(&self, charge: &ThrottleCharge, now: Timestamp) -> bool {
        let existing = self.keys.lock().get(&charge.key).cloned();
        match existing {
            Some(state) => state.lock().admits(&charge.limit, now),
            None => KeyState::for_limit(&charge.limit).admits(&charge.limit, now),
        }
    }
}
