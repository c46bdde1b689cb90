use std::collections::BTreeMap;

use parking_lot::RwLock;

use crate::policy::Principal;

/// Known principals, resolved upstream of the gateway.
#[derive(Debug, Default)]
pub struct PrincipalRegistry {
    principals: RwLock<BTreeMap<String, Principal>>,
}

impl PrincipalRegistry {
    pub fn new(principals: impl IntoIterator<Item = Principal>) -> Result<Self, String> {
        let reg = Self::default();
        for p in principals {
            reg.upsert(p)?;
        }
        Ok(reg)
    }

    pub fn upsert(&self, p: Principal) -> Result<(), String> {
        p.validate()?;
        self.principals.write().insert(p.id.clone(), p);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<Principal> {
        self.principals.read().get(id).cloned()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.principals.read().contains_key(id)
    }

    pub fn all(&self) -> Vec<Principal> {
        self.principals.read().values().cloned().collect()
    }
}
