//! Two-bucket dataset: intervention samples `D_I` and on-policy samples
//! `D_R`.
//!
//! Balanced sampling draws half of every batch from each bucket, which is
//! the same as sampling from `q(s, a) ∝ α·ρ_I + ρ_R` with
//! `α = |D_R| / |D_I|`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Observation, ACT_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::operator::{Source, Step, Trajectory};
use crate::policy::Batch;

/// How a trajectory's steps are assigned to buckets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestRule {
    /// Human steps to `D_I`, Policy steps to `D_R`.
    Split,
    /// Every step to `D_I`, relabeled Human. Used for full demonstrations.
    AllHuman,
    /// Human steps to `D_I`; Policy steps are dropped.
    DiscardPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub operator_id: String,
    pub round: u32,
    pub seed: u64,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredStep {
    /// Index into [`DatasetStore::trajectories`].
    pub trajectory: usize,
    pub t: u32,
    pub obs: Observation,
    pub action: Action,
    pub source: Source,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStore {
    task: String,
    /// Free-form label of the collecting method. Not persisted.
    pub method: Option<String>,
    trajectories: Vec<TrajectoryMeta>,
    interventions: Vec<StoredStep>,
    on_policy: Vec<StoredStep>,
}

impl DatasetStore {
    pub fn new(task: impl Into<String>) -> Self {
        DatasetStore {
            task: task.into(),
            method: None,
            trajectories: Vec::new(),
            interventions: Vec::new(),
            on_policy: Vec::new(),
        }
    }

    pub fn task(&self) -> &str {
        &self.task
    }

    pub fn trajectories(&self) -> &[TrajectoryMeta] {
        &self.trajectories
    }

    /// `D_I`.
    pub fn interventions(&self) -> &[StoredStep] {
        &self.interventions
    }

    /// `D_R`.
    pub fn on_policy(&self) -> &[StoredStep] {
        &self.on_policy
    }

    pub fn n_interventions(&self) -> usize {
        self.interventions.len()
    }

    pub fn n_on_policy(&self) -> usize {
        self.on_policy.len()
    }

    pub fn len(&self) -> usize {
        self.interventions.len() + self.on_policy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Highest round recorded, if any trajectory is present.
    pub fn round_count(&self) -> Option<u32> {
        self.trajectories.iter().map(|t| t.round).max()
    }

    pub fn operators(&self) -> Vec<&str> {
        let mut ops: Vec<&str> = self.trajectories.iter().map(|t| t.operator_id.as_str()).collect();
        ops.sort_unstable();
        ops.dedup();
        ops
    }

    pub fn ingest(&mut self, traj: &Trajectory, rule: IngestRule) {
        let id = self.trajectories.len();
        self.trajectories.push(TrajectoryMeta {
            operator_id: traj.operator_id.clone(),
            round: traj.round,
            seed: traj.seed,
            success: traj.success,
        });
        for s in &traj.steps {
            let stored = |source| StoredStep {
                trajectory: id,
                t: s.t,
                obs: s.obs,
                action: s.action,
                source,
            };
            match (rule, s.source) {
                (IngestRule::AllHuman, _) | (_, Source::Human) => {
                    self.interventions.push(stored(Source::Human))
                }
                (IngestRule::Split, Source::Policy) => self.on_policy.push(stored(Source::Policy)),
                (IngestRule::DiscardPolicy, Source::Policy) => {}
            }
        }
    }

    pub fn ingest_all<'a>(&mut self, trajs: impl IntoIterator<Item = &'a Trajectory>, rule: IngestRule) {
        for t in trajs {
            self.ingest(t, rule);
        }
    }

    /// `|D_R| / |D_I|`.
    pub fn alpha(&self) -> Result<f64> {
        if self.interventions.is_empty() {
            return Err(Error::EmptyInterventionBucket);
        }
        Ok(self.on_policy.len() as f64 / self.interventions.len() as f64)
    }

    /// `b/2` rows uniformly with replacement from each bucket, shuffled.
    pub fn sample_balanced<R: Rng + ?Sized>(&self, b: usize, rng: &mut R) -> Result<Batch> {
        if !b.is_multiple_of(2) {
            return Err(Error::OddBatch(b));
        }
        if self.interventions.is_empty() {
            return Err(Error::EmptyBucket("intervention"));
        }
        if self.on_policy.is_empty() {
            return Err(Error::EmptyBucket("on-policy"));
        }
        let half = b / 2;
        let mut rows: Vec<&StoredStep> = Vec::with_capacity(b);
        for _ in 0..half {
            rows.push(&self.interventions[rng.random_range(0..self.interventions.len())]);
        }
        for _ in 0..half {
            rows.push(&self.on_policy[rng.random_range(0..self.on_policy.len())]);
        }
        rows.shuffle(rng);
        Ok(to_batch(rows))
    }

    /// `b` rows uniformly with replacement over `D_I ++ D_R`.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, b: usize, rng: &mut R) -> Result<Batch> {
        let n = self.len();
        if n == 0 {
            return Err(Error::EmptyStore);
        }
        let ni = self.interventions.len();
        let rows = (0..b).map(|_| {
            let k = rng.random_range(0..n);
            if k < ni {
                &self.interventions[k]
            } else {
                &self.on_policy[k - ni]
            }
        });
        Ok(to_batch(rows))
    }

    /// `b` rows uniformly with replacement over `D_I` alone.
    pub fn sample_interventions<R: Rng + ?Sized>(&self, b: usize, rng: &mut R) -> Result<Batch> {
        if self.interventions.is_empty() {
            return Err(Error::EmptyBucket("intervention"));
        }
        let rows = (0..b).map(|_| &self.interventions[rng.random_range(0..self.interventions.len())]);
        Ok(to_batch(rows))
    }

    /// Bucket-wise concatenation. An empty store with an empty task name
    /// merges with any task.
    pub fn merge<'a>(stores: impl IntoIterator<Item = &'a DatasetStore>) -> Result<DatasetStore> {
        let mut out = DatasetStore::new("");
        for s in stores {
            if out.task.is_empty() {
                out.task = s.task.clone();
            } else if !s.task.is_empty() && s.task != out.task {
                return Err(Error::TaskMismatch {
                    expected: out.task.clone(),
                    found: s.task.clone(),
                });
            }
            if out.method.is_none() {
                out.method = s.method.clone();
            }
            let offset = out.trajectories.len();
            out.trajectories.extend(s.trajectories.iter().cloned());
            let shift = |st: &StoredStep| StoredStep {
                trajectory: st.trajectory + offset,
                ..st.clone()
            };
            out.interventions.extend(s.interventions.iter().map(shift));
            out.on_policy.extend(s.on_policy.iter().map(shift));
        }
        Ok(out)
    }

    /// One record per trajectory, steps in time order.
    pub fn records(&self) -> Vec<TrajectoryRecord> {
        let mut recs: Vec<TrajectoryRecord> = self
            .trajectories
            .iter()
            .map(|m| TrajectoryRecord {
                task: self.task.clone(),
                operator: m.operator_id.clone(),
                round: m.round,
                seed: m.seed,
                success: m.success,
                steps: Vec::new(),
            })
            .collect();
        for s in self.interventions.iter().chain(&self.on_policy) {
            recs[s.trajectory].steps.push(StepRecord {
                t: s.t,
                obs: s.obs.0,
                action: s.action.to_array(),
                source: s.source,
            });
        }
        for r in &mut recs {
            r.steps.sort_by_key(|s| s.t);
        }
        recs
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for r in self.records() {
            serde_json::to_writer(&mut w, &r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads JSON Lines; every record is ingested with [`IngestRule::Split`].
    pub fn read_jsonl(r: impl BufRead) -> Result<DatasetStore> {
        let mut store = DatasetStore::new("");
        for (i, line) in r.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::SchemaViolation {
                line: lineno,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TrajectoryRecord = serde_json::from_str(&line).map_err(|e| Error::SchemaViolation {
                line: lineno,
                message: e.to_string(),
            })?;
            if store.trajectories.is_empty() && store.task.is_empty() {
                store.task = rec.task.clone();
            } else if rec.task != store.task {
                return Err(Error::SchemaViolation {
                    line: lineno,
                    message: format!("task `{}` differs from `{}`", rec.task, store.task),
                });
            }
            store.ingest(&rec.into_trajectory(), IngestRule::Split);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_jsonl(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<DatasetStore> {
        let path = path.as_ref();
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(BufReader::new(f))
    }
}

fn to_batch<'a>(rows: impl IntoIterator<Item = &'a StoredStep>) -> Batch {
    let mut b = Batch::default();
    for s in rows {
        b.push(&s.obs, &s.action, s.source);
    }
    b
}

/// Whole-bucket batch, used for full-dataset objectives.
pub fn bucket_batch(steps: &[StoredStep]) -> Batch {
    to_batch(steps)
}

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub task: String,
    pub operator: String,
    pub round: u32,
    pub seed: u64,
    pub success: bool,
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub t: u32,
    pub obs: [f64; OBS_DIM],
    pub action: [f64; ACT_DIM],
    pub source: Source,
}

impl TrajectoryRecord {
    pub fn from_trajectory(task: &str, traj: &Trajectory) -> Self {
        TrajectoryRecord {
            task: task.to_string(),
            operator: traj.operator_id.clone(),
            round: traj.round,
            seed: traj.seed,
            success: traj.success,
            steps: traj
                .steps
                .iter()
                .map(|s| StepRecord {
                    t: s.t,
                    obs: s.obs.0,
                    action: s.action.to_array(),
                    source: s.source,
                })
                .collect(),
        }
    }

    pub fn into_trajectory(self) -> Trajectory {
        Trajectory {
            steps: self
                .steps
                .into_iter()
                .map(|s| Step {
                    t: s.t,
                    obs: Observation(s.obs),
                    action: Action::from_array(s.action),
                    source: s.source,
                })
                .collect(),
            success: self.success,
            seed: self.seed,
            round: self.round,
            operator_id: self.operator,
        }
    }

    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("records serialize");
        s.push('\n');
        s
    }
}
