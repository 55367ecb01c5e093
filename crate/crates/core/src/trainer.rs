//! Behavioral cloning under each registered method.

use serde::{Deserialize, Serialize};

use crate::datastore::{bucket_batch, DatasetStore, IngestRule};
use crate::env::{TaskConfig, ThreadEnv};
use crate::error::{Error, Result};
use crate::methods::MethodRegistry;
use crate::operator::{Expert, Source, Step, Trajectory};
use crate::policy::{AdamConfig, OptimizerState, PolicyParams};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Defaults to `ceil(epoch samples / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: "iwr".to_string(),
            epochs: 200,
            batch_size: 64,
            checkpoint_every: 10,
            seed: 0,
            steps_per_epoch: None,
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::ConfigInvalid(format!(
                "train.batch_size must be even and positive, got {}",
                self.batch_size
            )));
        }
        if self.checkpoint_every == 0 || self.epochs < self.checkpoint_every {
            return Err(Error::ConfigInvalid(format!(
                "train.epochs ({}) must be >= train.checkpoint_every ({}) >= 1",
                self.epochs, self.checkpoint_every
            )));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::ConfigInvalid("train.steps_per_epoch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub params: PolicyParams,
    /// Mean batch loss over the epoch that ended here.
    pub training_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointSet {
    pub checkpoints: Vec<Checkpoint>,
    /// Loss of the initial parameters on the first batch.
    pub initial_loss: f64,
}

impl CheckpointSet {
    pub fn last(&self) -> &Checkpoint {
        self.checkpoints.last().expect("training yields at least one checkpoint")
    }
}

pub fn train(store: &DatasetStore, cfg: &TrainConfig, registry: &MethodRegistry) -> Result<CheckpointSet> {
    cfg.validate()?;
    let method = registry.get(&cfg.method)?;
    method.check(store)?;
    let b = cfg.batch_size;
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| method.epoch_samples(store).div_ceil(b))
        .max(1);

    let mut params = PolicyParams::init(cfg.seed);
    let mut opt = OptimizerState::new(&params, cfg.optimizer.clone());
    let mut r = rng::keyed(cfg.seed, rng::stream::BATCHES);
    let mut checkpoints = Vec::with_capacity(cfg.epochs / cfg.checkpoint_every + 1);
    let mut initial_loss = None;

    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for _ in 0..steps {
            let batch = method.sample_batch(store, b, &mut r)?;
            let (loss, grads) = params.loss_and_grad(&batch);
            initial_loss.get_or_insert(loss);
            opt.apply(&mut params, &grads);
            total += loss;
        }
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs {
            checkpoints.push(Checkpoint {
                epoch,
                params: params.clone(),
                training_loss: total / steps as f64,
            });
        }
    }
    Ok(CheckpointSet {
        checkpoints,
        initial_loss: initial_loss.unwrap_or(f64::NAN),
    })
}

fn check_buckets(store: &DatasetStore) -> Result<()> {
    if store.n_interventions() == 0 {
        return Err(Error::EmptyBucket("intervention"));
    }
    if store.n_on_policy() == 0 {
        return Err(Error::EmptyBucket("on-policy"));
    }
    Ok(())
}

/// Full-dataset objective under `q(s, a) ∝ α·ρ_I + ρ_R`, with `ρ_I`, `ρ_R`
/// the empirical (unnormalized) sample measures of the two buckets:
///
/// `(α·Σ_{D_I} ℓ + Σ_{D_R} ℓ) / (α·|D_I| + |D_R|)`.
///
/// With `α = |D_R| / |D_I|` this is `(L_I + L_R) / 2`, the expected loss of a
/// balanced batch.
pub fn iwr_weighted_loss(params: &PolicyParams, store: &DatasetStore, alpha: f64) -> Result<f64> {
    check_buckets(store)?;
    let li = params.loss(&bucket_batch(store.interventions()));
    let lr = params.loss(&bucket_batch(store.on_policy()));
    let (ni, nr) = (store.n_interventions() as f64, store.n_on_policy() as f64);
    Ok((alpha * ni * li + nr * lr) / (alpha * ni + nr))
}

/// [`iwr_weighted_loss`] together with its gradient.
pub fn iwr_weighted_loss_and_grad(
    params: &PolicyParams,
    store: &DatasetStore,
    alpha: f64,
) -> Result<(f64, PolicyParams)> {
    check_buckets(store)?;
    let (li, gi) = params.loss_and_grad(&bucket_batch(store.interventions()));
    let (lr, gr) = params.loss_and_grad(&bucket_batch(store.on_policy()));
    let (ni, nr) = (store.n_interventions() as f64, store.n_on_policy() as f64);
    let z = alpha * ni + nr;
    let (wi, wr) = (alpha * ni / z, nr / z);
    let mut g = gi;
    for (a, b) in g.slices_mut().zip(gr.slices()) {
        for (x, y) in a.iter_mut().zip(b) {
            *x = wi * *x + wr * y;
        }
    }
    Ok((wi * li + wr * lr, g))
}

/// Replays each trajectory and pairs every visited state with the expert's
/// action there. The result is all-Human and lands in `D_I`.
pub fn dagger_relabel(
    trajectories: &[Trajectory],
    expert: &Expert,
    task: &TaskConfig,
) -> Result<DatasetStore> {
    let mut env = ThreadEnv::new(task.clone())?;
    let mut store = DatasetStore::new(task.name.clone());
    for traj in trajectories {
        env.reset(traj.seed);
        let mut steps = Vec::with_capacity(traj.steps.len());
        for (k, s) in traj.steps.iter().enumerate() {
            if env.is_done() || env.observation() != s.obs {
                return Err(Error::ReplayMismatch { step: k });
            }
            steps.push(Step {
                t: s.t,
                obs: s.obs,
                action: expert.action(env.state(), env.params()),
                source: Source::Human,
            });
            env.step(s.action)?;
        }
        store.ingest(
            &Trajectory {
                steps,
                ..traj.clone()
            },
            IngestRule::AllHuman,
        );
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Action, Observation, OBS_DIM};
    use crate::operator::{collect_full_demos, ExpertConfig};

    fn small_store(seed: u64, with_policy: bool) -> DatasetStore {
        let mut s = DatasetStore::new("t");
        let mut r = rng::keyed(seed, 77);
        use rand::Rng;
        let mut steps = Vec::new();
        for t in 0..40u32 {
            let mut o = [0.0; OBS_DIM];
            o.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
            let action = Action::new(r.random_range(-0.03..0.03), r.random_range(-0.03..0.03), 1.0);
            let human = t % 4 == 0;
            if !human && !with_policy {
                continue;
            }
            steps.push(Step {
                t,
                obs: Observation(o),
                action,
                source: if human { Source::Human } else { Source::Policy },
            });
        }
        s.ingest(
            &Trajectory {
                steps,
                success: false,
                seed,
                round: 1,
                operator_id: "o".into(),
            },
            IngestRule::Split,
        );
        s
    }

    fn quick(method: &str) -> TrainConfig {
        TrainConfig {
            method: method.into(),
            epochs: 6,
            checkpoint_every: 4,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn checkpoints_at_rate_plus_final() {
        let set = train(&small_store(0, true), &quick("iwr"), &MethodRegistry::builtin()).unwrap();
        let epochs: Vec<usize> = set.checkpoints.iter().map(|c| c.epoch).collect();
        assert_eq!(epochs, vec![4, 6]);
    }

    #[test]
    fn hg_dagger_ignores_on_policy_bucket() {
        let reg = MethodRegistry::builtin();
        let a = train(&small_store(1, true), &quick("hg-dagger"), &reg).unwrap();
        let b = train(&small_store(1, false), &quick("hg-dagger"), &reg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn iwr_needs_on_policy_samples() {
        let r = train(&small_store(1, false), &quick("iwr"), &MethodRegistry::builtin());
        assert!(matches!(r, Err(Error::EmptyBucket(_))));
        let r = train(&DatasetStore::new("t"), &quick("iwr-nb"), &MethodRegistry::builtin());
        assert!(matches!(r, Err(Error::EmptyStore)));
    }

    #[test]
    fn training_is_deterministic() {
        let reg = MethodRegistry::builtin();
        let s = small_store(2, true);
        assert_eq!(train(&s, &quick("iwr"), &reg).unwrap(), train(&s, &quick("iwr"), &reg).unwrap());
    }

    #[test]
    fn odd_batch_rejected_by_config() {
        let cfg = TrainConfig {
            batch_size: 7,
            ..quick("iwr")
        };
        assert!(matches!(cfg.validate(), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn weighted_loss_alpha_one_identical_buckets() {
        let base = small_store(3, false);
        let mut s = base.clone();
        let human: Vec<Step> = base
            .interventions()
            .iter()
            .map(|st| Step {
                t: st.t,
                obs: st.obs,
                action: st.action,
                source: Source::Policy,
            })
            .collect();
        s.ingest(
            &Trajectory {
                steps: human,
                success: false,
                seed: 0,
                round: 1,
                operator_id: "o".into(),
            },
            IngestRule::Split,
        );
        let p = PolicyParams::init(5);
        let w = iwr_weighted_loss(&p, &s, 1.0).unwrap();
        let plain = p.loss(&bucket_batch(s.interventions()));
        assert!((w - plain).abs() < 1e-15);
    }

    #[test]
    fn weighted_loss_zero_at_perfect_fit() {
        let mut s = small_store(4, true);
        let p = PolicyParams::init(6);
        let fitted: Vec<Trajectory> = s
            .records()
            .into_iter()
            .map(|r| {
                let mut t = r.into_trajectory();
                for st in &mut t.steps {
                    st.action = p.forward(&st.obs);
                }
                t
            })
            .collect();
        s = DatasetStore::new("t");
        s.ingest_all(&fitted, IngestRule::Split);
        assert_eq!(iwr_weighted_loss(&p, &s, s.alpha().unwrap()).unwrap(), 0.0);
        assert!(matches!(
            iwr_weighted_loss(&p, &small_store(1, false), 1.0),
            Err(Error::EmptyBucket(_))
        ));
    }

    #[test]
    fn relabeling_expert_trajectories_is_identity() {
        let task = TaskConfig::default();
        let mut env = ThreadEnv::new(task.clone()).unwrap();
        let expert = Expert::new(ExpertConfig {
            demo_noise_std: 0.0,
            ..ExpertConfig::default()
        });
        let demos = collect_full_demos(3, &expert, &mut env, 500, 0, "x").unwrap();
        let store = dagger_relabel(&demos.trajectories, &expert, &task).unwrap();
        let total: usize = demos.trajectories.iter().map(Trajectory::len).sum();
        assert_eq!(store.n_interventions(), total);
        assert_eq!(store.n_on_policy(), 0);
        let recorded: Vec<Action> = demos.trajectories.iter().flat_map(|t| t.steps.iter().map(|s| s.action)).collect();
        let relabeled: Vec<Action> = store.interventions().iter().map(|s| s.action).collect();
        assert_eq!(recorded, relabeled);
    }

    #[test]
    fn relabel_detects_divergent_replay() {
        let task = TaskConfig::default();
        let mut env = ThreadEnv::new(task.clone()).unwrap();
        let expert = Expert::default();
        let mut demos = collect_full_demos(1, &expert, &mut env, 0, 0, "x").unwrap().trajectories;
        demos[0].steps[3].obs.0[0] += 1e-9;
        assert!(matches!(
            dagger_relabel(&demos, &expert, &task),
            Err(Error::ReplayMismatch { step: 3 })
        ));
    }
}
