use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Organisational roles that can act on the system.
///
/// Ordering follows seniority: `System < Analyst < SocLead < Ciso < Ceo`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    System,
    Analyst,
    #[serde(rename = "SOCLead")]
    SocLead,
    #[serde(rename = "CISO")]
    Ciso,
    #[serde(rename = "CEO")]
    Ceo,
}

impl Role {
    pub const ALL: [Role; 5] = [Role::System, Role::Analyst, Role::SocLead, Role::Ciso, Role::Ceo];
    pub const HUMAN: [Role; 4] = [Role::Analyst, Role::SocLead, Role::Ciso, Role::Ceo];

    pub fn is_human(self) -> bool {
        self != Role::System
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "System",
            Role::Analyst => "Analyst",
            Role::SocLead => "SOCLead",
            Role::Ciso => "CISO",
            Role::Ceo => "CEO",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown role `{s}`"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip() {
        for r in Role::ALL {
            assert_eq!(r.as_str().parse::<Role>().unwrap(), r);
            let json = serde_json::to_string(&r).unwrap();
            assert_eq!(json, format!("\"{}\"", r.as_str()));
        }
        assert!("janitor".parse::<Role>().is_err());
    }
}
