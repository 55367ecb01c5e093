//! Training methods, registered by name.
//!
//! A method fixes three things: how collected trajectories are aggregated
//! into the store, what data collection it expects, and how training batches
//! are drawn.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::RngCore;

use crate::datastore::{DatasetStore, IngestRule};
use crate::error::{Error, Result};
use crate::policy::Batch;

/// What the orchestrator collects for a method after the initial demos.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Collection {
    /// Gated operator interventions on top of the current policy.
    Interventions,
    /// One extra batch of full demonstrations, no rounds.
    FullDemos,
    /// Pure policy rollouts relabeled by the scripted expert.
    OracleRelabel,
}

pub trait TrainingMethod: Send + Sync {
    fn name(&self) -> &str;
    fn label(&self) -> &str;
    fn collection(&self) -> Collection;
    fn ingest_rule(&self) -> IngestRule;
    /// Fails when the store cannot support this method's sampling.
    fn check(&self, store: &DatasetStore) -> Result<()>;
    /// Samples that make up one epoch.
    fn epoch_samples(&self, store: &DatasetStore) -> usize;
    fn sample_batch(&self, store: &DatasetStore, batch_size: usize, rng: &mut dyn RngCore) -> Result<Batch>;
}

impl fmt::Debug for dyn TrainingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn need_interventions(store: &DatasetStore) -> Result<()> {
    if store.is_empty() {
        Err(Error::EmptyStore)
    } else if store.n_interventions() == 0 {
        Err(Error::EmptyBucket("intervention"))
    } else {
        Ok(())
    }
}

/// Behavioral cloning on full demonstrations.
pub struct FullDemos;

impl TrainingMethod for FullDemos {
    fn name(&self) -> &str {
        "full-demos"
    }
    fn label(&self) -> &str {
        "Full Demos"
    }
    fn collection(&self) -> Collection {
        Collection::FullDemos
    }
    fn ingest_rule(&self) -> IngestRule {
        IngestRule::AllHuman
    }
    fn check(&self, store: &DatasetStore) -> Result<()> {
        need_interventions(store)
    }
    fn epoch_samples(&self, store: &DatasetStore) -> usize {
        store.len()
    }
    fn sample_batch(&self, store: &DatasetStore, b: usize, rng: &mut dyn RngCore) -> Result<Batch> {
        store.sample_uniform(b, rng)
    }
}

/// Aggregates intervention samples only; on-policy samples are discarded.
pub struct HgDagger;

impl TrainingMethod for HgDagger {
    fn name(&self) -> &str {
        "hg-dagger"
    }
    fn label(&self) -> &str {
        "HG-DAgger"
    }
    fn collection(&self) -> Collection {
        Collection::Interventions
    }
    fn ingest_rule(&self) -> IngestRule {
        IngestRule::DiscardPolicy
    }
    fn check(&self, store: &DatasetStore) -> Result<()> {
        need_interventions(store)
    }
    fn epoch_samples(&self, store: &DatasetStore) -> usize {
        store.n_interventions()
    }
    fn sample_batch(&self, store: &DatasetStore, b: usize, rng: &mut dyn RngCore) -> Result<Batch> {
        store.sample_interventions(b, rng)
    }
}

/// Keeps both buckets but samples uniformly over their union.
pub struct IwrNoBalance;

impl TrainingMethod for IwrNoBalance {
    fn name(&self) -> &str {
        "iwr-nb"
    }
    fn label(&self) -> &str {
        "IWR-NB"
    }
    fn collection(&self) -> Collection {
        Collection::Interventions
    }
    fn ingest_rule(&self) -> IngestRule {
        IngestRule::Split
    }
    fn check(&self, store: &DatasetStore) -> Result<()> {
        need_interventions(store)
    }
    fn epoch_samples(&self, store: &DatasetStore) -> usize {
        store.len()
    }
    fn sample_batch(&self, store: &DatasetStore, b: usize, rng: &mut dyn RngCore) -> Result<Batch> {
        store.sample_uniform(b, rng)
    }
}

/// Intervention weighted regression: equal-size draws from both buckets.
pub struct Iwr;

impl TrainingMethod for Iwr {
    fn name(&self) -> &str {
        "iwr"
    }
    fn label(&self) -> &str {
        "IWR"
    }
    fn collection(&self) -> Collection {
        Collection::Interventions
    }
    fn ingest_rule(&self) -> IngestRule {
        IngestRule::Split
    }
    fn check(&self, store: &DatasetStore) -> Result<()> {
        need_interventions(store)?;
        if store.n_on_policy() == 0 {
            return Err(Error::EmptyBucket("on-policy"));
        }
        Ok(())
    }
    fn epoch_samples(&self, store: &DatasetStore) -> usize {
        store.len()
    }
    fn sample_batch(&self, store: &DatasetStore, b: usize, rng: &mut dyn RngCore) -> Result<Batch> {
        store.sample_balanced(b, rng)
    }
}

/// DAgger with the scripted expert relabeling every visited state.
pub struct DaggerOracle;

impl TrainingMethod for DaggerOracle {
    fn name(&self) -> &str {
        "dagger-oracle"
    }
    fn label(&self) -> &str {
        "DAgger (oracle)"
    }
    fn collection(&self) -> Collection {
        Collection::OracleRelabel
    }
    fn ingest_rule(&self) -> IngestRule {
        IngestRule::AllHuman
    }
    fn check(&self, store: &DatasetStore) -> Result<()> {
        need_interventions(store)
    }
    fn epoch_samples(&self, store: &DatasetStore) -> usize {
        store.n_interventions()
    }
    fn sample_batch(&self, store: &DatasetStore, b: usize, rng: &mut dyn RngCore) -> Result<Batch> {
        store.sample_interventions(b, rng)
    }
}

#[derive(Clone)]
pub struct MethodRegistry {
    methods: BTreeMap<String, Arc<dyn TrainingMethod>>,
}

impl Default for MethodRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl MethodRegistry {
    pub fn empty() -> Self {
        MethodRegistry {
            methods: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(FullDemos));
        r.register(Arc::new(HgDagger));
        r.register(Arc::new(IwrNoBalance));
        r.register(Arc::new(Iwr));
        r.register(Arc::new(DaggerOracle));
        r
    }

    /// Adds or replaces a method under its own name.
    pub fn register(&mut self, method: Arc<dyn TrainingMethod>) -> Option<Arc<dyn TrainingMethod>> {
        self.methods.insert(method.name().to_string(), method)
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn TrainingMethod>> {
        self.methods
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownMethod(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.methods.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_registered_by_name() {
        let r = MethodRegistry::builtin();
        let names: Vec<&str> = r.names().collect();
        assert_eq!(names, vec!["dagger-oracle", "full-demos", "hg-dagger", "iwr", "iwr-nb"]);
        assert_eq!(r.get("iwr").unwrap().ingest_rule(), IngestRule::Split);
        assert_eq!(r.get("hg-dagger").unwrap().ingest_rule(), IngestRule::DiscardPolicy);
        assert!(matches!(r.get("bc"), Err(Error::UnknownMethod(_))));
    }

    #[test]
    fn custom_methods_can_be_registered() {
        struct Alias;
        impl TrainingMethod for Alias {
            fn name(&self) -> &str {
                "alias"
            }
            fn label(&self) -> &str {
                "Alias"
            }
            fn collection(&self) -> Collection {
                Collection::Interventions
            }
            fn ingest_rule(&self) -> IngestRule {
                IngestRule::Split
            }
            fn check(&self, s: &DatasetStore) -> Result<()> {
                Iwr.check(s)
            }
            fn epoch_samples(&self, s: &DatasetStore) -> usize {
                s.len()
            }
            fn sample_batch(&self, s: &DatasetStore, b: usize, rng: &mut dyn RngCore) -> Result<Batch> {
                Iwr.sample_batch(s, b, rng)
            }
        }
        let mut r = MethodRegistry::builtin();
        assert!(r.register(Arc::new(Alias)).is_none());
        assert_eq!(r.get("alias").unwrap().label(), "Alias");
    }
}
