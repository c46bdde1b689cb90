//! Deterministic stand-in for a model-serving backend.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::GatewayError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCall {
    pub model_id: String,
    pub version: String,
    pub session_id: String,
    pub prompt: Vec<String>,
    pub tool_intents: Vec<String>,
    pub max_agent_steps: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendOutput {
    pub text: String,
    pub tokens: u64,
}

/// Scripted behaviour for upcoming calls to one model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "cue", rename_all = "snake_case")]
pub enum Cue {
    /// Append `text` to the next output.
    Emit { text: String },
    /// Produce an output unrelated to the prompt.
    Unrelated,
}

pub trait ModelBackend: Send + Sync {
    fn generate(&self, call: &BackendCall) -> Result<BackendOutput, GatewayError>;
    fn clear_session(&self, model_id: &str, session_id: &str);
    fn has_version(&self, model_id: &str, version: &str) -> bool;
}

#[derive(Debug, Default)]
struct ModelEntry {
    versions: BTreeSet<String>,
    reachable: bool,
    dark_versions: BTreeSet<String>,
    tombstoned: bool,
    cues: VecDeque<Cue>,
}

#[derive(Debug, Default)]
struct MockState {
    models: BTreeMap<String, ModelEntry>,
    memory: HashMap<(String, String), Vec<String>>,
}

const VOCAB: &[&str] = &[
    "the", "model", "answer", "is", "based", "on", "careful", "analysis", "of", "your", "request", "data",
    "result", "suggests", "that", "we", "consider", "options", "and", "summary",
];

/// Seeded mock backend with per-session conversation memory.
#[derive(Debug)]
pub struct MockBackend {
    seed: u64,
    state: Mutex<MockState>,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self { seed, state: Mutex::new(MockState::default()) }
    }

    pub fn add_model(&self, model_id: &str, versions: impl IntoIterator<Item = String>) {
        let mut s = self.state.lock();
        let entry = s.models.entry(model_id.to_owned()).or_default();
        entry.versions.extend(versions);
        entry.reachable = true;
    }

    pub fn set_reachable(&self, model_id: &str, reachable: bool) {
        if let Some(m) = self.state.lock().models.get_mut(model_id) {
            m.reachable = reachable;
        }
    }

    /// Cuts one version off while leaving the others servable.
    pub fn set_version_reachable(&self, model_id: &str, version: &str, reachable: bool) {
        if let Some(m) = self.state.lock().models.get_mut(model_id) {
            if reachable {
                m.dark_versions.remove(version);
            } else {
                m.dark_versions.insert(version.to_owned());
            }
        }
    }

    /// Drops every artifact of `model_id`; it never serves again.
    pub fn tombstone(&self, model_id: &str) -> Vec<String> {
        let mut s = self.state.lock();
        s.memory.retain(|(m, _), _| m != model_id);
        match s.models.get_mut(model_id) {
            Some(m) => {
                m.tombstoned = true;
                m.reachable = false;
                std::mem::take(&mut m.versions).into_iter().collect()
            }
            None => Vec::new(),
        }
    }

    pub fn script(&self, model_id: &str, cue: Cue) {
        self.state.lock().models.entry(model_id.to_owned()).or_default().cues.push_back(cue);
    }

    pub fn memory_len(&self, model_id: &str, session_id: &str) -> usize {
        self.state
            .lock()
            .memory
            .get(&(model_id.to_owned(), session_id.to_owned()))
            .map_or(0, Vec::len)
    }

    fn rng_for(&self, call: &BackendCall, memory_len: usize) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for part in [&call.model_id, &call.version, &call.session_id] {
            h.update(part.as_bytes());
            h.update([0]);
        }
        for tok in &call.prompt {
            h.update(tok.as_bytes());
            h.update([0]);
        }
        h.update((memory_len as u64).to_le_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }
}

impl ModelBackend for MockBackend {
    fn generate(&self, call: &BackendCall) -> Result<BackendOutput, GatewayError> {
        let mut s = self.state.lock();
        let unavailable = || GatewayError::BackendUnavailable(call.model_id.clone());
        let entry = s.models.get_mut(&call.model_id).ok_or_else(unavailable)?;
        if !entry.reachable
            || entry.tombstoned
            || entry.dark_versions.contains(&call.version)
            || !entry.versions.contains(&call.version)
        {
            return Err(unavailable());
        }
        let cue = entry.cues.pop_front();
        let key = (call.model_id.clone(), call.session_id.clone());
        let memory_len = s.memory.get(&key).map_or(0, Vec::len);
        let mut rng = self.rng_for(call, memory_len);
        let mut words: Vec<String> = vec![format!("[{}@{}]", call.model_id, call.version)];
        match cue {
            Some(Cue::Unrelated) => words.push("unrelated: protein folding sequence analysis".into()),
            _ => {
                if let Some(last) = call.prompt.last() {
                    words.push(format!("re:{last}"));
                }
            }
        }
        let n = rng.random_range(6..12);
        words.extend((0..n).map(|_| VOCAB[rng.random_range(0..VOCAB.len())].to_owned()));
        if let Some(steps) = call.max_agent_steps {
            words.push(format!("(agent steps <= {steps})"));
        }
        if !call.tool_intents.is_empty() {
            words.push(format!("calls:{}", call.tool_intents.join(",")));
        }
        if let Some(Cue::Emit { text }) = cue {
            words.push(text);
        }
        let text = words.join(" ");
        let tokens = text.split_whitespace().count() as u64;
        s.memory.entry(key).or_default().extend(call.prompt.iter().cloned());
        Ok(BackendOutput { text, tokens })
    }

    fn clear_session(&self, model_id: &str, session_id: &str) {
        self.state.lock().memory.remove(&(model_id.to_owned(), session_id.to_owned()));
    }

    fn has_version(&self, model_id: &str, version: &str) -> bool {
        self.state.lock().models.get(model_id).is_some_and(|m| m.versions.contains(version))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call() -> BackendCall {
        BackendCall {
            model_id: "m".into(),
            version: "v1".into(),
            session_id: "s".into(),
            prompt: vec!["hello".into(), "there".into()],
            tool_intents: vec![],
            max_agent_steps: None,
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = MockBackend::new(7);
        let b = MockBackend::new(7);
        a.add_model("m", ["v1".to_owned()]);
        b.add_model("m", ["v1".to_owned()]);
        assert_eq!(a.generate(&call()).unwrap(), b.generate(&call()).unwrap());
    }

    #[test]
    fn scripted_cue_is_emitted() {
        let b = MockBackend::new(1);
        b.add_model("m", ["v1".to_owned()]);
        b.script("m", Cue::Emit { text: "MALWARE_PAYLOAD".into() });
        assert!(b.generate(&call()).unwrap().text.contains("MALWARE_PAYLOAD"));
        assert!(!b.generate(&call()).unwrap().text.contains("MALWARE_PAYLOAD"));
    }

    #[test]
    fn unreachable_backend() {
        let b = MockBackend::new(1);
        b.add_model("m", ["v1".to_owned()]);
        b.set_reachable("m", false);
        assert!(matches!(b.generate(&call()), Err(GatewayError::BackendUnavailable(_))));
    }

    #[test]
    fn dark_version_leaves_others_up() {
        let b = MockBackend::new(1);
        b.add_model("m", ["v1".to_owned(), "v2".to_owned()]);
        b.set_version_reachable("m", "v2", false);
        assert!(b.generate(&call()).is_ok());
        let mut c = call();
        c.version = "v2".into();
        assert!(b.generate(&c).is_err());
    }

    #[test]
    fn clearing_memory() {
        let b = MockBackend::new(1);
        b.add_model("m", ["v1".to_owned()]);
        b.generate(&call()).unwrap();
        assert_eq!(b.memory_len("m", "s"), 2);
        b.clear_session("m", "s");
        assert_eq!(b.memory_len("m", "s"), 0);
    }
}
