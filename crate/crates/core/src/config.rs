//! Experiment configuration: one TOML document with a table per subsystem.
//!
//! ```toml
//! [task]
//! gap_half_width = 0.04
//!
//! [expert]
//! demo_noise_std = 0.02
//!
//! [gate]
//! deviate_on = 0.08
//!
//! [train]
//! epochs = 200
//!
//! [experiment]
//! seeds = [0, 1, 2]
//! methods = ["full-demos", "hg-dagger", "iwr"]
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::TaskConfig;
use crate::error::{Error, Result};
use crate::methods::MethodRegistry;
use crate::operator::{ExpertConfig, GateConfig};
use crate::trainer::TrainConfig;

/// Env seeds reserved per experiment seed for collection episodes.
pub const SEED_STRIDE: u64 = 10_000_000;
/// Env seeds reserved per round within one experiment seed.
pub const ROUND_STRIDE: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_initial_demos: usize,
    pub rounds: u32,
    /// Per-round intervention quota as a fraction of the initial sample count.
    pub round_quota_fraction: f64,
    /// One round with a quota equal to the initial sample count.
    pub single_round_variant: bool,
    pub eval_rollouts: usize,
    pub seeds: Vec<u64>,
    pub methods: Vec<String>,
    pub collect_seed_base: u64,
    pub eval_seed_base: u64,
    pub operator_id: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_initial_demos: 30,
            rounds: 3,
            round_quota_fraction: 0.33,
            single_round_variant: false,
            eval_rollouts: 50,
            seeds: vec![0, 1, 2],
            methods: ["full-demos", "hg-dagger", "iwr-nb", "iwr"].map(String::from).to_vec(),
            collect_seed_base: 0,
            eval_seed_base: 1 << 40,
            operator_id: "scripted".to_string(),
        }
    }
}

impl ExperimentConfig {
    pub fn effective_rounds(&self) -> u32 {
        if self.single_round_variant {
            1
        } else {
            self.rounds
        }
    }

    pub fn quota_fraction(&self) -> f64 {
        if self.single_round_variant {
            1.0
        } else {
            self.round_quota_fraction
        }
    }

    /// Env seed of collection episode `k` in `round` for experiment `seed`.
    pub fn collect_seed(&self, seed: u64, round: u32, k: u64) -> u64 {
        self.collect_seed_base + seed * SEED_STRIDE + u64::from(round) * ROUND_STRIDE + k
    }

    pub fn eval_seed(&self, k: u64) -> u64 {
        self.eval_seed_base + k
    }

    pub fn validate(&self, registry: &MethodRegistry) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.n_initial_demos == 0 {
            return bad("experiment.n_initial_demos must be positive".into());
        }
        if !(self.round_quota_fraction > 0.0) {
            return bad("experiment.round_quota_fraction must be positive".into());
        }
        if self.eval_rollouts == 0 {
            return bad("experiment.eval_rollouts must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("experiment.seeds must not be empty".into());
        }
        if u64::from(self.rounds) + 2 > SEED_STRIDE / ROUND_STRIDE {
            return bad(format!("experiment.rounds must be below {}", SEED_STRIDE / ROUND_STRIDE - 1));
        }
        for m in &self.methods {
            registry.get(m).map_err(|_| Error::ConfigInvalid(format!("unknown method `{m}`")))?;
        }
        let max_seed = *self.seeds.iter().max().unwrap();
        let collect_lo = self.collect_seed_base;
        let collect_hi = max_seed
            .checked_add(1)
            .and_then(|s| s.checked_mul(SEED_STRIDE))
            .and_then(|s| s.checked_add(collect_lo))
            .ok_or_else(|| Error::ConfigInvalid("collection seed range overflows".into()))?;
        let eval_lo = self.eval_seed_base;
        let eval_hi = eval_lo + self.eval_rollouts as u64;
        if eval_lo < collect_hi && collect_lo < eval_hi {
            return bad(format!(
                "evaluation seeds [{eval_lo}, {eval_hi}) overlap collection seeds [{collect_lo}, {collect_hi})"
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub task: TaskConfig,
    pub expert: ExpertConfig,
    pub gate: GateConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.message().to_string()))?;
        cfg.validate(&MethodRegistry::builtin())?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Fully resolved document, every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self, registry: &MethodRegistry) -> Result<()> {
        self.task.validate().map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        self.expert.validate()?;
        self.gate.validate()?;
        self.train.validate()?;
        registry
            .get(&self.train.method)
            .map_err(|_| Error::ConfigInvalid(format!("unknown method `{}`", self.train.method)))?;
        self.experiment.validate(registry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = Config::default();
        c.train.steps_per_epoch = Some(5);
        c.experiment.seeds = vec![4];
        let back = Config::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(Config::from_toml(&Config::default().to_toml()).unwrap(), Config::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::from_toml("[gate]\ndeviate_onn = 0.1\n").unwrap_err();
        match err {
            Error::ConfigInvalid(m) => assert!(m.contains("deviate_onn"), "{m}"),
            other => panic!("{other:?}"),
        }
        let err = Config::from_toml("[gates]\n").unwrap_err();
        assert!(err.to_string().contains("gates"));
    }

    #[test]
    fn overlapping_seed_ranges_rejected() {
        let text = "[experiment]\neval_seed_base = 5\n";
        assert!(matches!(Config::from_toml(text), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn unknown_method_rejected() {
        assert!(Config::from_toml("[train]\nmethod = \"bc\"\n").is_err());
        assert!(Config::from_toml("[experiment]\nmethods = [\"iwr\", \"x\"]\n").is_err());
    }

    #[test]
    fn single_round_variant_overrides_rounds_and_quota() {
        let e = ExperimentConfig {
            single_round_variant: true,
            ..ExperimentConfig::default()
        };
        assert_eq!(e.effective_rounds(), 1);
        assert_eq!(e.quota_fraction(), 1.0);
    }
}
