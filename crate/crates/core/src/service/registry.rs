//! Append-only model registry.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::store::{Store, MODELS};
use super::{ModelDescriptor, ModelKey, ModelStatus};
use crate::error::{Error, ErrorCode, Result};

#[derive(Default)]
pub struct ModelRegistry {
    models: BTreeMap<ModelKey, ModelDescriptor>,
    store: Option<Arc<Store>>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_store(store: Arc<Store>) -> Result<Self> {
        let models = store
            .all::<ModelDescriptor>(MODELS)?
            .into_iter()
            .map(|(_, d)| (d.key(), d))
            .collect();
        Ok(ModelRegistry {
            models,
            store: Some(store),
        })
    }

    fn persist(&self, d: &ModelDescriptor) -> Result<()> {
        match &self.store {
            Some(s) => s.put(MODELS, &d.key().to_string(), d),
            None => Ok(()),
        }
    }

    /// Versions are never replaced or removed.
    pub fn register(&mut self, mut d: ModelDescriptor) -> Result<()> {
        let key = d.key();
        if self.models.contains_key(&key) {
            return Err(Error::new(ErrorCode::DuplicateVersion, format!("model {key} is already registered")));
        }
        d.status = ModelStatus::Registered;
        self.persist(&d)?;
        self.models.insert(key, d);
        Ok(())
    }

    pub fn get(&self, key: &ModelKey) -> Option<&ModelDescriptor> {
        self.models.get(key)
    }

    pub fn list(&self) -> Vec<ModelDescriptor> {
        self.models.values().cloned().collect()
    }

    pub fn set_status(&mut self, key: &ModelKey, status: ModelStatus) -> Result<()> {
        let d = self
            .models
            .get_mut(key)
            .ok_or_else(|| Error::new(ErrorCode::UnknownModel, format!("model {key} is not registered")))?;
        if d.status == ModelStatus::Retired {
            return Ok(());
        }
        d.status = status;
        let d = d.clone();
        self.persist(&d)
    }

    pub fn retire(&mut self, key: &ModelKey) -> Result<()> {
        self.set_status(key, ModelStatus::Retired)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::ChannelMode;
    use crate::service::Scope;

    pub(crate) fn desc(id: &str, v: &str) -> ModelDescriptor {
        ModelDescriptor {
            model_id: id.into(),
            version: v.into(),
            scope: Scope::new("A", "X"),
            mode: ChannelMode::Rgb,
            artifact: format!("{id}-{v}.bin"),
            detector_artifact: None,
            layout: None,
            status: ModelStatus::Registered,
        }
    }

    #[test]
    fn duplicate_version_is_rejected() {
        let mut r = ModelRegistry::new();
        r.register(desc("m", "1")).unwrap();
        r.register(desc("m", "2")).unwrap();
        assert_eq!(r.register(desc("m", "1")).unwrap_err().code, ErrorCode::DuplicateVersion);
        assert_eq!(r.list().len(), 2);
    }

    #[test]
    fn retire_is_a_status_change() {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(Store::open(&dir.path().join("s.redb")).unwrap());
        let mut r = ModelRegistry::with_store(store.clone()).unwrap();
        r.register(desc("m", "1")).unwrap();
        r.retire(&ModelKey::new("m", "1")).unwrap();
        r.set_status(&ModelKey::new("m", "1"), ModelStatus::Loaded).unwrap();
        let r2 = ModelRegistry::with_store(store).unwrap();
        assert_eq!(r2.get(&ModelKey::new("m", "1")).unwrap().status, ModelStatus::Retired);
        assert_eq!(r2.list().len(), 1);
    }
}
