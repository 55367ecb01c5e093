//! Iterative collection protocol: initial demonstrations, base policy,
//! intervention rounds under a sample quota, checkpoint evaluation and
//! cross-dataset training.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::datastore::{DatasetStore, IngestRule};
use crate::env::{TaskConfig, ThreadEnv};
use crate::error::{Error, Result};
use crate::methods::{Collection, MethodRegistry, TrainingMethod};
use crate::operator::{
    collect_full_demos, run_mixture_episode, ConstantGate, Controller, EpisodeTags, Expert, Gate,
    ScriptedGate, Trajectory,
};
use crate::policy::PolicyParams;
use crate::rng;
use crate::trainer::{dagger_relabel, train, CheckpointSet, TrainConfig};

/// Fraction of `n` pure-policy episodes that succeed. Episode `k` uses env
/// seed `seed_base + k`.
pub fn evaluate(policy: &dyn Controller, task: &TaskConfig, n: usize, seed_base: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::ZeroRollouts);
    }
    let mut env = ThreadEnv::new(task.clone())?;
    let mut successes = 0usize;
    for k in 0..n as u64 {
        env.reset(seed_base + k);
        while !env.is_done() {
            let a = policy.act(&env);
            env.step(a)?;
        }
        successes += usize::from(env.state().success);
    }
    Ok(successes as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScore {
    pub epoch: usize,
    pub success: f64,
    pub training_loss: f64,
}

pub fn evaluate_checkpoints(
    set: &CheckpointSet,
    task: &TaskConfig,
    n: usize,
    seed_base: u64,
) -> Result<Vec<CheckpointScore>> {
    set.checkpoints
        .iter()
        .map(|c| {
            Ok(CheckpointScore {
                epoch: c.epoch,
                success: evaluate(&c.params, task, n, seed_base)?,
                training_loss: c.training_loss,
            })
        })
        .collect()
}

pub fn best_success(scores: &[CheckpointScore]) -> f64 {
    scores.iter().map(|s| s.success).fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct RoundCollection {
    pub trajectories: Vec<Trajectory>,
    pub human_samples: usize,
}

/// Runs mixture episodes until the Human-labeled step count reaches
/// `quota`. Episode `k` uses env seed `seed_of(k)`.
#[allow(clippy::too_many_arguments)]
pub fn collect_round(
    policy: &dyn Controller,
    expert: &Expert,
    gate: &mut dyn Gate,
    env: &mut ThreadEnv,
    quota: usize,
    seed_of: impl Fn(u64) -> u64,
    round: u32,
    operator_id: &str,
) -> Result<RoundCollection> {
    if quota == 0 {
        return Err(Error::Precondition("collect_round needs a quota of at least 1".into()));
    }
    let max_episodes = 10 * quota;
    let mut trajectories = Vec::new();
    let mut human_samples = 0;
    while human_samples < quota {
        if trajectories.len() >= max_episodes {
            return Err(Error::QuotaUnreachable {
                quota,
                episodes: trajectories.len(),
                collected: human_samples,
            });
        }
        let tags = EpisodeTags {
            seed: seed_of(trajectories.len() as u64),
            round,
            operator_id,
        };
        let traj = run_mixture_episode(policy, expert, gate, env, tags);
        human_samples += traj.human_steps();
        trajectories.push(traj);
    }
    Ok(RoundCollection {
        trajectories,
        human_samples,
    })
}

/// Pure-policy rollouts until `quota` states have been visited, relabeled
/// by the expert.
fn collect_relabel_round(
    policy: &dyn Controller,
    expert: &Expert,
    env: &mut ThreadEnv,
    quota: usize,
    seed_of: impl Fn(u64) -> u64,
    round: u32,
    operator_id: &str,
) -> Result<RoundCollection> {
    let mut rollouts = Vec::new();
    let mut visited = 0;
    while visited < quota {
        let tags = EpisodeTags {
            seed: seed_of(rollouts.len() as u64),
            round,
            operator_id,
        };
        let traj = run_mixture_episode(policy, expert, &mut ConstantGate(false), env, tags);
        visited += traj.len();
        rollouts.push(traj);
    }
    let relabeled = dagger_relabel(&rollouts, expert, env.config())?;
    let trajectories = relabeled
        .records()
        .into_iter()
        .map(|r| r.into_trajectory())
        .collect();
    Ok(RoundCollection {
        trajectories,
        human_samples: visited,
    })
}

/// Full demonstrations until at least `samples` steps are collected.
fn collect_demo_samples(
    samples: usize,
    expert: &Expert,
    env: &mut ThreadEnv,
    seed_base: u64,
    round: u32,
    operator_id: &str,
) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    let mut total = 0;
    let mut next = seed_base;
    while total < samples {
        let batch = collect_full_demos(1, expert, env, next, round, operator_id)?;
        next = batch.next_seed;
        for t in batch.trajectories {
            total += t.len();
            out.push(t);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 0 is the base policy trained on the initial demonstrations.
    pub round: u32,
    pub trajectories: usize,
    pub intervention_trajectories: usize,
    pub intervention_samples: usize,
    pub checkpoints: Vec<CheckpointScore>,
    pub best_success: f64,
    pub n_interventions: usize,
    pub n_on_policy: usize,
    /// Set when collection gave up short of the quota. The round then adds
    /// no data and carries the previous policy and score forward.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quota_unmet: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub rounds: Vec<RoundReport>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Column {
    Base,
    Round(u32),
    Final,
}

impl Column {
    pub fn label(&self) -> String {
        match self {
            Column::Base => "base".into(),
            Column::Round(k) => k.to_string(),
            Column::Final => "final".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Column> {
        match s {
            "base" => Some(Column::Base),
            "final" => Some(Column::Final),
            k => k.parse().ok().map(Column::Round),
        }
    }

    pub fn title(&self) -> String {
        match self {
            Column::Base => "Base".into(),
            Column::Round(k) => format!("Round {k}"),
            Column::Final => "Final".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub column: Column,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: String,
    pub label: String,
    pub runs: Vec<SeedRun>,
    pub summary: Vec<SummaryCell>,
}

/// Mean and sample standard deviation; the deviation of one value is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn column_of(round: u32, last: u32) -> Column {
    match round {
        0 => Column::Base,
        r if r == last => Column::Final,
        r => Column::Round(r),
    }
}

impl ExperimentReport {
    pub fn new(method: &str, label: &str, runs: Vec<SeedRun>) -> Self {
        let mut cols: BTreeMap<Column, Vec<f64>> = BTreeMap::new();
        for run in &runs {
            let last = run.rounds.last().map_or(0, |r| r.round);
            for r in &run.rounds {
                cols.entry(column_of(r.round, last)).or_default().push(r.best_success);
            }
        }
        let summary = cols
            .into_iter()
            .map(|(column, xs)| {
                let (mean, std) = mean_std(&xs);
                SummaryCell {
                    column,
                    mean,
                    std,
                    n_seeds: xs.len(),
                }
            })
            .collect();
        ExperimentReport {
            method: method.to_string(),
            label: label.to_string(),
            runs,
            summary,
        }
    }

    pub fn cell(&self, column: &Column) -> Option<&SummaryCell> {
        self.summary.iter().find(|c| &c.column == column)
    }
}

/// Everything one experiment seed produced for one method.
#[derive(Clone, Debug)]
pub struct MethodRun {
    pub run: SeedRun,
    /// Everything collected, ingested with [`IngestRule::Split`].
    pub collected: DatasetStore,
    /// What the method actually trained on in its last round.
    pub aggregated: DatasetStore,
    pub final_policy: PolicyParams,
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub initial: DatasetStore,
    pub base_policy: PolicyParams,
    pub base: RoundReport,
    pub methods: BTreeMap<String, MethodRun>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub reports: Vec<ExperimentReport>,
    pub seeds: Vec<SeedOutcome>,
}

/// Training seed for `round` of experiment `seed`; shared by all methods.
pub fn train_seed(seed: u64, round: u32) -> u64 {
    rng::mix(seed, u64::from(round))
}

struct Protocol<'a> {
    cfg: &'a Config,
    registry: &'a MethodRegistry,
    expert: Expert,
}

impl Protocol<'_> {
    fn env(&self) -> Result<ThreadEnv> {
        ThreadEnv::new(self.cfg.task.clone())
    }

    fn train_and_score(
        &self,
        store: &DatasetStore,
        method: &str,
        seed: u64,
        round: u32,
    ) -> Result<(CheckpointSet, Vec<CheckpointScore>)> {
        let tc = TrainConfig {
            method: method.to_string(),
            seed: train_seed(seed, round),
            ..self.cfg.train.clone()
        };
        let set = train(store, &tc, self.registry)?;
        let e = &self.cfg.experiment;
        let scores = evaluate_checkpoints(&set, &self.cfg.task, e.eval_rollouts, e.eval_seed(0))?;
        Ok((set, scores))
    }

    fn gate(&self) -> ScriptedGate {
        ScriptedGate::new(self.cfg.gate.clone())
    }

    fn round_report(
        round: u32,
        collection: &[Trajectory],
        scores: Vec<CheckpointScore>,
        store: &DatasetStore,
    ) -> RoundReport {
        RoundReport {
            round,
            trajectories: collection.len(),
            intervention_trajectories: collection.iter().filter(|t| t.human_steps() > 0).count(),
            intervention_samples: collection.iter().map(Trajectory::human_steps).sum(),
            best_success: best_success(&scores),
            checkpoints: scores,
            n_interventions: store.n_interventions(),
            n_on_policy: store.n_on_policy(),
            quota_unmet: None,
        }
    }

    fn carried_over(round: u32, prev: &RoundReport, collected: usize) -> RoundReport {
        RoundReport {
            round,
            trajectories: 0,
            intervention_trajectories: 0,
            intervention_samples: 0,
            checkpoints: Vec::new(),
            quota_unmet: Some(collected),
            ..prev.clone()
        }
    }

    fn run_seed(&self, seed: u64) -> Result<SeedOutcome> {
        let e = &self.cfg.experiment;
        let op = e.operator_id.as_str();
        let mut env = self.env()?;

        let demos = collect_full_demos(
            e.n_initial_demos,
            &self.expert,
            &mut env,
            e.collect_seed(seed, 0, 0),
            0,
            op,
        )?;
        let mut initial = DatasetStore::new(self.cfg.task.name.clone());
        initial.ingest_all(&demos.trajectories, IngestRule::AllHuman);
        let initial_samples = initial.len();

        let (base_set, base_scores) = self.train_and_score(&initial, "full-demos", seed, 0)?;
        let base_policy = base_set.last().params.clone();
        let base_report = Self::round_report(0, &demos.trajectories, base_scores, &initial);

        let rounds = e.effective_rounds();
        let quota = ((e.quota_fraction() * initial_samples as f64).ceil() as usize).max(1);
        let collect_seed = |round: u32| move |k: u64| e.collect_seed(seed, round, k);

        let mut shared_round1: Option<Vec<Trajectory>> = None;
        let mut methods = BTreeMap::new();
        for name in &e.methods {
            let method = self.registry.get(name)?;
            let mut collected = initial.clone();
            collected.method = Some(name.clone());
            let mut aggregated = collected.clone();
            let mut reports = vec![base_report.clone()];
            let mut policy = base_policy.clone();

            match method.collection() {
                Collection::FullDemos => {
                    let extra = collect_demo_samples(
                        initial_samples,
                        &self.expert,
                        &mut env,
                        e.collect_seed(seed, rounds + 1, 0),
                        1,
                        op,
                    )?;
                    collected.ingest_all(&extra, IngestRule::AllHuman);
                    aggregated.ingest_all(&extra, method.ingest_rule());
                    let (set, scores) = self.train_and_score(&aggregated, name, seed, rounds.max(1))?;
                    policy = set.last().params.clone();
                    reports.push(Self::round_report(rounds.max(1), &extra, scores, &aggregated));
                }
                Collection::Interventions | Collection::OracleRelabel => {
                    let mut unmet = None;
                    for round in 1..=rounds {
                        if let Some(collected) = unmet {
                            let prev = reports.last().expect("base report");
                            reports.push(Self::carried_over(round, prev, collected));
                            continue;
                        }
                        let batch = match self.collect_for(
                            method.as_ref(),
                            &policy,
                            &mut env,
                            quota,
                            &collect_seed(round),
                            round,
                            &mut shared_round1,
                        ) {
                            Ok(b) => b,
                            // The gate stopped firing: the operator has nothing left to
                            // correct, so this and later rounds add no data.
                            Err(Error::QuotaUnreachable { collected, .. }) => {
                                unmet = Some(collected);
                                let prev = reports.last().expect("base report");
                                reports.push(Self::carried_over(round, prev, collected));
                                continue;
                            }
                            Err(err) => return Err(err),
                        };
                        collected.ingest_all(&batch, IngestRule::Split);
                        aggregated.ingest_all(&batch, method.ingest_rule());
                        let (set, scores) = self.train_and_score(&aggregated, name, seed, round)?;
                        policy = set.last().params.clone();
                        reports.push(Self::round_report(round, &batch, scores, &aggregated));
                    }
                }
            }
            methods.insert(
                name.clone(),
                MethodRun {
                    run: SeedRun { seed, rounds: reports },
                    collected,
                    aggregated,
                    final_policy: policy,
                },
            );
        }
        Ok(SeedOutcome {
            seed,
            initial,
            base_policy,
            base: base_report,
            methods,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn collect_for(
        &self,
        method: &dyn TrainingMethod,
        policy: &PolicyParams,
        env: &mut ThreadEnv,
        quota: usize,
        seed_of: &dyn Fn(u64) -> u64,
        round: u32,
        shared_round1: &mut Option<Vec<Trajectory>>,
    ) -> Result<Vec<Trajectory>> {
        let op = self.cfg.experiment.operator_id.as_str();
        match method.collection() {
            Collection::OracleRelabel => {
                Ok(collect_relabel_round(policy, &self.expert, env, quota, seed_of, round, op)?.trajectories)
            }
            _ => {
                if round == 1 {
                    if let Some(shared) = shared_round1 {
                        return Ok(shared.clone());
                    }
                }
                let mut gate = self.gate();
                let c = collect_round(policy, &self.expert, &mut gate, env, quota, seed_of, round, op)?;
                if round == 1 {
                    *shared_round1 = Some(c.trajectories.clone());
                }
                Ok(c.trajectories)
            }
        }
    }
}

/// Runs the full protocol for every configured seed and method.
pub fn run_experiment(cfg: &Config, registry: &MethodRegistry) -> Result<ExperimentOutcome> {
    cfg.validate(registry)?;
    let proto = Protocol {
        cfg,
        registry,
        expert: Expert::new(cfg.expert.clone()),
    };
    let seeds: Vec<SeedOutcome> = cfg
        .experiment
        .seeds
        .par_iter()
        .map(|&s| proto.run_seed(s))
        .collect::<Result<_>>()?;
    let reports = cfg
        .experiment
        .methods
        .iter()
        .map(|name| {
            let method = registry.get(name)?;
            let runs = seeds.iter().map(|s| s.methods[name].run.clone()).collect();
            Ok(ExperimentReport::new(name, method.label(), runs))
        })
        .collect::<Result<_>>()?;
    Ok(ExperimentOutcome { reports, seeds })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossCell {
    pub trainer: String,
    pub collector: String,
    /// `None` when the trainer cannot use the collector's data.
    pub best_success: Option<f64>,
    pub error: Option<String>,
}

/// Trains every method in `trainers` on every collector's final dataset and
/// records the best checkpoint success. Uses the final-round training seed
/// so diagonal cells repeat the protocol's final numbers.
pub fn cross_train(
    cfg: &Config,
    registry: &MethodRegistry,
    stores: &BTreeMap<String, DatasetStore>,
    trainers: &[String],
    seed: u64,
) -> Result<Vec<CrossCell>> {
    let proto = Protocol {
        cfg,
        registry,
        expert: Expert::new(cfg.expert.clone()),
    };
    let round = cfg.experiment.effective_rounds().max(1);
    let jobs: Vec<(&String, &String, &DatasetStore)> = trainers
        .iter()
        .flat_map(|t| stores.iter().map(move |(c, s)| (t, c, s)))
        .collect();
    jobs.par_iter()
        .map(|&(trainer, collector, store)| {
            registry.get(trainer)?;
            let (best_success, error) = match proto.train_and_score(store, trainer, seed, round) {
                Ok((_, scores)) => (Some(best_success(&scores)), None),
                Err(e @ (Error::EmptyBucket(_) | Error::EmptyStore)) => (None, Some(e.to_string())),
                Err(e) => return Err(e),
            };
            Ok(CrossCell {
                trainer: trainer.clone(),
                collector: collector.clone(),
                best_success,
                error,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::Idle;

    #[test]
    fn idle_policy_never_succeeds() {
        let rate = evaluate(&Idle, &TaskConfig::default(), 20, 1000).unwrap();
        assert_eq!(rate, 0.0);
    }

    #[test]
    fn expert_policy_succeeds() {
        let rate = evaluate(&Expert::default(), &TaskConfig::default(), 200, 1 << 40).unwrap();
        assert!(rate >= 0.95, "{rate}");
    }

    #[test]
    fn evaluation_is_deterministic_and_needs_rollouts() {
        let p = PolicyParams::init(2);
        let t = TaskConfig::default();
        assert_eq!(evaluate(&p, &t, 10, 7).unwrap(), evaluate(&p, &t, 10, 7).unwrap());
        assert!(matches!(evaluate(&p, &t, 0, 7), Err(Error::ZeroRollouts)));
    }

    #[test]
    fn always_on_gate_meets_quota_quickly() {
        let mut env = ThreadEnv::new(TaskConfig::default()).unwrap();
        let policy = PolicyParams::init(0);
        let c = collect_round(&policy, &Expert::default(), &mut ConstantGate(true), &mut env, 100, |k| k, 1, "x")
            .unwrap();
        assert!(c.human_samples >= 100);
        let before_last: usize = c.trajectories[..c.trajectories.len() - 1].iter().map(|t| t.len()).sum();
        assert!(before_last < 100);
        assert_eq!(c.human_samples, c.trajectories.iter().map(|t| t.human_steps()).sum::<usize>());
    }

    #[test]
    fn never_on_gate_cannot_meet_quota() {
        let mut env = ThreadEnv::new(TaskConfig::default()).unwrap();
        let r = collect_round(&Idle, &Expert::default(), &mut ConstantGate(false), &mut env, 2, |k| k, 1, "x");
        assert!(matches!(r, Err(Error::QuotaUnreachable { quota: 2, episodes: 20, collected: 0 })));
    }

    #[test]
    fn policy_steps_never_count_toward_quota() {
        let mut env = ThreadEnv::new(TaskConfig::default()).unwrap();
        let mut gate = crate::operator::RandomGate::new(0.05, 0.2, 3);
        let c = collect_round(&Idle, &Expert::default(), &mut gate, &mut env, 150, |k| k, 1, "x").unwrap();
        let human: usize = c.trajectories.iter().map(|t| t.human_steps()).sum();
        let total: usize = c.trajectories.iter().map(|t| t.len()).sum();
        assert_eq!(c.human_samples, human);
        assert!(total > human);
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[0.5, 0.6, 0.7]);
        assert!((m - 0.6).abs() < 1e-12);
        assert!((s - 0.1).abs() < 1e-12);
    }

    #[test]
    fn best_success_is_monotone_in_checkpoints() {
        let mut scores = vec![CheckpointScore {
            epoch: 10,
            success: 0.4,
            training_loss: 1.0,
        }];
        let before = best_success(&scores);
        scores.push(CheckpointScore {
            epoch: 20,
            success: 0.1,
            training_loss: 0.5,
        });
        assert!(best_success(&scores) >= before);
    }

    #[test]
    fn columns_map_rounds() {
        assert_eq!(column_of(0, 3), Column::Base);
        assert_eq!(column_of(2, 3), Column::Round(2));
        assert_eq!(column_of(3, 3), Column::Final);
        for c in [Column::Base, Column::Round(4), Column::Final] {
            assert_eq!(Column::parse(&c.label()), Some(c));
        }
    }
}
