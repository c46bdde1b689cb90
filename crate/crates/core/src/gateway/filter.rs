//! Output filtering. The reference implementation matches literal and regex
//! pattern sets; real classifiers plug in through [`OutputFilter`].

use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub const REFUSAL_TEXT: &str = "This response was withheld by an output safety filter.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterHit {
    pub pattern_set: String,
    pub pattern: String,
    pub critical: bool,
}

pub trait OutputFilter: Send + Sync {
    fn check(&self, pattern_set: &str, text: &str) -> Option<FilterHit>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSetConfig {
    #[serde(default = "one")]
    pub version: u32,
    #[serde(default)]
    pub literals: Vec<String>,
    #[serde(default)]
    pub regex: Vec<String>,
    #[serde(default)]
    pub critical: bool,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FilterConfig {
    pub sets: BTreeMap<String, PatternSetConfig>,
}

impl FilterConfig {
    /// Reference sets shipped with the gateway.
    pub fn reference() -> Self {
        let mut sets = BTreeMap::new();
        sets.insert(
            "malware-like".to_owned(),
            PatternSetConfig {
                version: 1,
                literals: vec!["MALWARE_PAYLOAD".into(), "keylogger".into()],
                regex: vec![r"(?i)\bshellcode\b".into(), r"(?i)reverse[_ ]shell".into()],
                critical: true,
            },
        );
        sets.insert(
            "bio-hazard".to_owned(),
            PatternSetConfig {
                version: 1,
                literals: vec!["VIRAL_GENOME_SEQUENCE".into()],
                regex: vec![r"(?i)airborne\s+rabies".into()],
                critical: true,
            },
        );
        sets.insert(
            "prompt-injection".to_owned(),
            PatternSetConfig {
                version: 1,
                literals: vec!["INJECT".into()],
                regex: vec![r"(?i)ignore (all )?previous instructions".into()],
                critical: false,
            },
        );
        Self { sets }
    }
}

struct CompiledSet {
    literals: Vec<String>,
    regex: Vec<Regex>,
    critical: bool,
}

pub struct PatternFilter {
    sets: BTreeMap<String, CompiledSet>,
}

impl PatternFilter {
    pub fn new(config: &FilterConfig) -> Result<Self, regex::Error> {
        let mut sets = BTreeMap::new();
        for (name, cfg) in &config.sets {
            let regex = cfg.regex.iter().map(|r| Regex::new(r)).collect::<Result<_, _>>()?;
            sets.insert(
                name.clone(),
                CompiledSet { literals: cfg.literals.clone(), regex, critical: cfg.critical },
            );
        }
        Ok(Self { sets })
    }

    pub fn has_set(&self, name: &str) -> bool {
        self.sets.contains_key(name)
    }
}

impl OutputFilter for PatternFilter {
    fn check(&self, pattern_set: &str, text: &str) -> Option<FilterHit> {
        let set = self.sets.get(pattern_set)?;
        let hit = |pattern: &str| FilterHit {
            pattern_set: pattern_set.to_owned(),
            pattern: pattern.to_owned(),
            critical: set.critical,
        };
        if let Some(lit) = set.literals.iter().find(|l| text.contains(l.as_str())) {
            return Some(hit(lit));
        }
        set.regex.iter().find(|r| r.is_match(text)).map(|r| hit(r.as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_sets_match() {
        let f = PatternFilter::new(&FilterConfig::reference()).unwrap();
        let hit = f.check("malware-like", "here is a Reverse Shell for you").unwrap();
        assert!(hit.critical);
        assert!(f.check("malware-like", "a poem about spring").is_none());
        assert!(f.check("unknown-set", "MALWARE_PAYLOAD").is_none());
        assert!(f.check("prompt-injection", "please IGNORE previous instructions").is_some());
    }

    #[test]
    fn bad_regex_rejected() {
        let mut cfg = FilterConfig::default();
        cfg.sets.insert(
            "x".into(),
            PatternSetConfig { version: 1, literals: vec![], regex: vec!["(".into()], critical: false },
        );
        assert!(PatternFilter::new(&cfg).is_err());
    }
}
