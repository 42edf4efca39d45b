//! Exemplar memory over previously completed datasets.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DataSample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BufferConfig {
    pub capacity_per_dataset: usize,
    pub exemplars_per_identity: usize,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self { capacity_per_dataset: 500, exemplars_per_identity: 2 }
    }
}

impl BufferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.exemplars_per_identity == 0 {
            return Err(Error::Config { key: "buffer.exemplars_per_identity".into(), msg: "must be positive".into() });
        }
        if self.capacity_per_dataset < self.exemplars_per_identity {
            return Err(Error::Config {
                key: "buffer.capacity_per_dataset".into(),
                msg: "must hold at least one identity's exemplars".into(),
            });
        }
        Ok(())
    }
}

/// What one [`MemoryBuffer::update`] call stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BufferUpdate {
    pub identities_seen: usize,
    pub identities_kept: usize,
    pub entries_added: usize,
}

#[derive(Clone, Debug, Default)]
pub struct MemoryBuffer {
    pub config: BufferConfig,
    entries: Vec<DataSample>,
}

impl MemoryBuffer {
    pub fn new(config: BufferConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, entries: Vec::new() })
    }

    pub fn entries(&self) -> &[DataSample] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_for(&self, dataset: &str) -> usize {
        self.entries.iter().filter(|e| e.dataset == dataset).count()
    }

    pub fn datasets(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.dataset) {
                out.push(e.dataset.clone());
            }
        }
        out
    }

    /// Stores exemplars of a dataset whose training just finished.
    ///
    /// Each identity contributes up to `exemplars_per_identity` samples chosen uniformly at random.
    /// If all identities would overflow the per-dataset capacity, `capacity / exemplars_per_identity`
    /// identities are drawn uniformly at random and the rest are dropped.
    pub fn update<R: Rng + ?Sized>(&mut self, dataset: &str, samples: &[DataSample], rng: &mut R) -> Result<BufferUpdate> {
        if self.entries.iter().any(|e| e.dataset == dataset) {
            return Err(Error::invalid(format!("dataset {dataset} is already in the buffer")));
        }
        if let Some(s) = samples.iter().find(|s| s.dataset != dataset) {
            return Err(Error::invalid(format!("sample from {} offered as part of {dataset}", s.dataset)));
        }
        let mut by_identity: BTreeMap<usize, Vec<&DataSample>> = BTreeMap::new();
        for s in samples {
            by_identity.entry(s.identity).or_default().push(s);
        }
        let per_id = self.config.exemplars_per_identity;
        let cap = self.config.capacity_per_dataset;
        let mut ids: Vec<usize> = by_identity.keys().copied().collect();
        let seen = ids.len();
        if seen * per_id > cap {
            let keep = cap / per_id;
            warn!("buffer capacity {cap} too small for {seen} identities x {per_id}; keeping {keep} identities of {dataset}");
            ids.shuffle(rng);
            ids.truncate(keep);
            ids.sort_unstable();
        }
        let before = self.entries.len();
        for id in &ids {
            let pool = &by_identity[id];
            let chosen: Vec<&&DataSample> = pool.choose_multiple(rng, per_id.min(pool.len())).collect();
            self.entries.extend(chosen.into_iter().map(|s| (*s).clone()));
        }
        Ok(BufferUpdate { identities_seen: seen, identities_kept: ids.len(), entries_added: self.entries.len() - before })
    }
}
