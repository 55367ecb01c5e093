use std::path::{Path, PathBuf};

use iwr_core::env::{render_primitives, Action, TaskConfig, ThreadEnv};
use iwr_core::operator::{Source, Step, Trajectory};
use iwr_core::policy::{load_checkpoint, PolicyParams};

use crate::wire::{ClientMsg, StateFrame};
use crate::TeleopError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunState {
    Paused,
    Running,
    Done,
}

/// Checkpoints in one directory, addressed by file name with or without a
/// `.ckpt` extension.
#[derive(Clone, Debug)]
pub struct PolicyDir(pub PathBuf);

impl PolicyDir {
    pub fn load(&self, name: &str) -> Result<PolicyParams, TeleopError> {
        let unknown = || TeleopError::UnknownPolicy(name.to_string());
        if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(unknown());
        }
        let candidates = [self.0.join(name), self.0.join(format!("{name}.ckpt"))];
        let path = candidates.iter().find(|p| p.is_file()).ok_or_else(unknown)?;
        load_checkpoint(path).map_err(TeleopError::Core)
    }

    pub fn path(&self) -> &Path {
        &self.0
    }
}

struct Episode {
    env: ThreadEnv,
    policy: PolicyParams,
    policy_id: String,
    seed: u64,
    steps: Vec<Step>,
}

/// One operator's view of one rollout. Message handling and ticking are
/// plain method calls; the server decides when they happen.
pub struct Session {
    pub id: u64,
    task: TaskConfig,
    episode: Option<Episode>,
    run: RunState,
    button: bool,
    last_action: Option<Action>,
}

/// A finished rollout, ready to be written out.
#[derive(Clone, Debug)]
pub struct Finished {
    pub policy_id: String,
    pub trajectory: Trajectory,
}

impl Session {
    pub fn new(id: u64, task: TaskConfig) -> Self {
        Session {
            id,
            task,
            episode: None,
            run: RunState::Paused,
            button: false,
            last_action: None,
        }
    }

    pub fn run_state(&self) -> RunState {
        self.run
    }

    pub fn button(&self) -> bool {
        self.button
    }

    pub fn handle(&mut self, msg: ClientMsg, policies: &PolicyDir) -> Result<(), TeleopError> {
        match msg {
            ClientMsg::Start { policy, seed } => {
                let params = policies.load(&policy)?;
                let mut env = ThreadEnv::new(self.task.clone()).map_err(TeleopError::Core)?;
                env.reset(seed);
                self.episode = Some(Episode {
                    env,
                    policy: params,
                    policy_id: policy,
                    seed,
                    steps: Vec::new(),
                });
                self.run = RunState::Paused;
                self.last_action = None;
            }
            ClientMsg::Pause => {
                if self.run == RunState::Running {
                    self.run = RunState::Paused;
                }
            }
            ClientMsg::Resume => {
                if self.run == RunState::Paused && self.episode.is_some() {
                    self.run = RunState::Running;
                }
            }
            ClientMsg::Button { down } => self.button = down,
            ClientMsg::Action { dx, dy, grip } => self.last_action = Some(Action::new(dx, dy, grip)),
        }
        Ok(())
    }

    /// Action and label for the next step: the operator's latest command
    /// while the button is held, the policy otherwise.
    pub fn arbitrate(&self) -> Option<(Action, Source)> {
        let ep = self.episode.as_ref()?;
        Some(if self.button {
            (self.last_action.unwrap_or(Action::new(0.0, 0.0, -1.0)), Source::Human)
        } else {
            (ep.policy.forward(&ep.env.observation()), Source::Policy)
        })
    }

    /// Advances one step when running. Returns the finished rollout on the
    /// step that ends the episode.
    pub fn tick(&mut self) -> Option<Finished> {
        if self.run != RunState::Running {
            return None;
        }
        let (action, source) = self.arbitrate()?;
        let ep = self.episode.as_mut()?;
        ep.steps.push(Step {
            t: ep.env.state().t,
            obs: ep.env.observation(),
            action,
            source,
        });
        ep.env.step(action).expect("running episode is not done");
        if !ep.env.is_done() {
            return None;
        }
        self.run = RunState::Done;
        Some(Finished {
            policy_id: ep.policy_id.clone(),
            trajectory: Trajectory {
                steps: std::mem::take(&mut ep.steps),
                success: ep.env.state().success,
                seed: ep.seed,
                round: 0,
                operator_id: format!("teleop-{}", self.id),
            },
        })
    }

    pub fn frame(&self) -> Option<StateFrame> {
        let ep = self.episode.as_ref()?;
        let s = ep.env.state();
        Some(StateFrame {
            t: s.t,
            primitives: render_primitives(s, ep.env.params()),
            phase: s.phase.as_str().to_string(),
            intervening: self.button && self.run == RunState::Running,
            done: ep.env.is_done(),
            success: s.success,
        })
    }
}
