use std::collections::HashMap;

use parking_lot::Mutex;

use super::GatewayError;

#[derive(Debug, Default)]
struct Sessions {
    /// Client-facing id -> current effective id.
    alias: HashMap<String, String>,
    /// Prompt counter per effective id.
    counters: HashMap<String, u64>,
    rotations: u64,
}

/// Per-session prompt counters and reset-driven rotation.
#[derive(Debug, Default)]
pub struct SessionTracker {
    inner: Mutex<Sessions>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rotation {
    pub old: String,
    pub new: String,
}

impl SessionTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Maps a client session id to the effective session, tracking it if new.
    pub fn resolve(&self, client_id: &str) -> String {
        let mut s = self.inner.lock();
        let current = s.alias.get(client_id).cloned().unwrap_or_else(|| client_id.to_owned());
        s.counters.entry(current.clone()).or_insert(0);
        current
    }

    pub fn record_prompt(&self, session_id: &str) -> Result<u64, GatewayError> {
        let mut s = self.inner.lock();
        let c = s
            .counters
            .get_mut(session_id)
            .ok_or_else(|| GatewayError::UnknownSession(session_id.to_owned()))?;
        *c += 1;
        Ok(*c)
    }

    pub fn prompts(&self, session_id: &str) -> Option<u64> {
        self.inner.lock().counters.get(session_id).copied()
    }

    /// Issues a fresh session once the counter reaches `max_prompts`.
    /// Returns `None` when no rotation is due.
    pub fn rotate_session(&self, session_id: &str, max_prompts: Option<u64>) -> Result<Option<Rotation>, GatewayError> {
        let mut s = self.inner.lock();
        let count = *s
            .counters
            .get(session_id)
            .ok_or_else(|| GatewayError::UnknownSession(session_id.to_owned()))?;
        let Some(max) = max_prompts else {
            return Ok(None);
        };
        if count < max {
            return Ok(None);
        }
        s.rotations += 1;
        let root = session_id.split('~').next().unwrap_or(session_id).to_owned();
        let new = format!("{root}~r{}", s.rotations);
        s.counters.remove(session_id);
        s.counters.insert(new.clone(), 0);
        for target in s.alias.values_mut().filter(|v| v.as_str() == session_id) {
            *target = new.clone();
        }
        s.alias.insert(session_id.to_owned(), new.clone());
        s.alias.insert(root, new.clone());
        Ok(Some(Rotation { old: session_id.to_owned(), new }))
    }
}
