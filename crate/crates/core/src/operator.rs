//! Synthetic operator: a scripted expert, an intervention gate, and the
//! gated mixture executor used to collect labeled trajectories.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{Action, EnvState, Observation, TaskParams, ThreadEnv, Vec2};
use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::rng;

/// Horizontal offset of the waypoints placed on either side of the gap.
pub const GAP_APPROACH: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Policy,
    Human,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub t: u32,
    pub obs: Observation,
    /// The action that was executed, pre-clip.
    pub action: Action,
    pub source: Source,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub success: bool,
    pub seed: u64,
    pub round: u32,
    pub operator_id: String,
}

impl Trajectory {
    pub fn human_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.source == Source::Human).count()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Maximal runs of Human-sourced steps as inclusive `(first_t, last_t)`.
    pub fn intervention_segments(&self) -> Vec<(u32, u32)> {
        let mut out: Vec<(u32, u32)> = Vec::new();
        for s in self.steps.iter().filter(|s| s.source == Source::Human) {
            match out.last_mut() {
                Some((_, end)) if *end + 1 == s.t => *end = s.t,
                _ => out.push((s.t, s.t)),
            }
        }
        out
    }
}

/// Anything that can drive the environment.
pub trait Controller: Sync {
    fn act(&self, env: &ThreadEnv) -> Action;
}

impl Controller for PolicyParams {
    fn act(&self, env: &ThreadEnv) -> Action {
        self.forward(&env.observation())
    }
}

/// Emits `(0, 0, open)` forever.
pub struct Idle;

impl Controller for Idle {
    fn act(&self, _env: &ThreadEnv) -> Action {
        Action::new(0.0, 0.0, -1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub waypoint_tolerance: f64,
    pub pd_gain: f64,
    /// Std of Gaussian noise added to demonstration displacements.
    pub demo_noise_std: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            waypoint_tolerance: 0.015,
            pd_gain: 1.0,
            // At 0.01 base policies rarely succeed at all.
            demo_noise_std: 0.02,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.waypoint_tolerance > 0.0) || !(self.pd_gain > 0.0) || !(self.demo_noise_std >= 0.0) {
            return Err(Error::ConfigInvalid(format!("expert parameters out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Scripted demonstrator following the route
/// object → pre-gap → post-gap → goal.
#[derive(Clone, Debug, Default)]
pub struct Expert {
    pub config: ExpertConfig,
}

impl Expert {
    pub fn new(config: ExpertConfig) -> Self {
        Expert { config }
    }

    pub fn waypoint(&self, s: &EnvState, p: &TaskParams) -> Vec2 {
        let tol = self.config.waypoint_tolerance;
        let [_, pre, post, goal] = route(s, p);
        if !s.attached {
            s.object_pos
        } else if s.agent_pos.x < p.wall_x {
            let aligned = (s.agent_pos.y - p.gap_center_y).abs() <= tol && s.agent_pos.x >= pre.x - tol;
            if aligned {
                post
            } else {
                pre
            }
        } else {
            goal
        }
    }

    pub fn action(&self, s: &EnvState, p: &TaskParams) -> Action {
        let target = self.waypoint(s, p);
        let d = (target - s.agent_pos).scale(self.config.pd_gain);
        let m = p.max_step;
        let close = s.attached || s.agent_pos.dist(s.object_pos) <= p.grasp_radius;
        Action::new(d.x.clamp(-m, m), d.y.clamp(-m, m), if close { 1.0 } else { -1.0 })
    }
}

impl Controller for Expert {
    fn act(&self, env: &ThreadEnv) -> Action {
        self.action(env.state(), env.params())
    }
}

/// Expert route polyline. Before the grasp it starts at the object; after,
/// at the object's start position.
pub fn route(s: &EnvState, p: &TaskParams) -> [Vec2; 4] {
    let gy = p.gap_center_y;
    [
        if s.attached { p.object_start } else { s.object_pos },
        Vec2::new(p.wall_x - GAP_APPROACH, gy),
        Vec2::new(p.wall_x + GAP_APPROACH, gy),
        p.goal_center,
    ]
}

pub fn distance_to_polyline(q: Vec2, pts: &[Vec2]) -> f64 {
    pts.windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let ab = b - a;
            let len2 = ab.dot(ab);
            let s = if len2 == 0.0 { 0.0 } else { ((q - a).dot(ab) / len2).clamp(0.0, 1.0) };
            q.dist(a + ab.scale(s))
        })
        .fold(f64::INFINITY, f64::min)
}

/// Length of the expert route still ahead of the agent: straight to the
/// object before the grasp, then along the route from the agent's nearest
/// point on it.
pub fn route_remaining(s: &EnvState, p: &TaskParams) -> f64 {
    let pts = route(s, p);
    let seg = |i: usize| pts[i].dist(pts[i + 1]);
    if !s.attached {
        return s.agent_pos.dist(s.object_pos) + (0..3).map(seg).sum::<f64>();
    }
    let q = s.agent_pos;
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..3 {
        let (a, b) = (pts[i], pts[i + 1]);
        let ab = b - a;
        let len2 = ab.dot(ab);
        let t = if len2 == 0.0 { 0.0 } else { ((q - a).dot(ab) / len2).clamp(0.0, 1.0) };
        let proj = a + ab.scale(t);
        let d = q.dist(proj);
        if d < best.0 {
            best = (d, proj.dist(b) + (i + 1..3).map(seg).sum::<f64>());
        }
    }
    best.1
}

/// Decides per step whether the operator takes control.
pub trait Gate: Send {
    fn reset(&mut self, episode_seed: u64);
    fn update(&mut self, state: &EnvState, params: &TaskParams) -> bool;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub deviate_on: f64,
    pub deviate_off: f64,
    /// Half-width of the band around the wall where deviation triggers.
    pub bottleneck_band: f64,
    pub stall_window: usize,
    pub stall_progress_eps: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            deviate_on: 0.08,
            deviate_off: 0.02,
            bottleneck_band: 0.10,
            stall_window: 30,
            stall_progress_eps: 0.005,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.deviate_off < self.deviate_on) || self.deviate_off <= 0.0 {
            return Err(Error::ConfigInvalid("gate needs 0 < deviate_off < deviate_on".into()));
        }
        if self.stall_window == 0 || !(self.bottleneck_band > 0.0) || !(self.stall_progress_eps >= 0.0) {
            return Err(Error::ConfigInvalid(format!("gate parameters out of range: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bottleneck {
    Grasp,
    Gap,
    Goal,
}

impl Bottleneck {
    pub fn upcoming(s: &EnvState, p: &TaskParams) -> Self {
        if !s.attached {
            Bottleneck::Grasp
        } else if s.agent_pos.x < p.wall_x + GAP_APPROACH {
            Bottleneck::Gap
        } else {
            Bottleneck::Goal
        }
    }

    pub fn cleared(self, s: &EnvState, p: &TaskParams) -> bool {
        match self {
            Bottleneck::Grasp => s.attached,
            Bottleneck::Gap => s.attached && s.agent_pos.x >= p.wall_x + GAP_APPROACH,
            Bottleneck::Goal => s.success,
        }
    }
}

/// Hysteresis gate combining bottleneck-local path deviation with stall
/// detection.
#[derive(Clone, Debug)]
pub struct ScriptedGate {
    pub config: GateConfig,
    on: bool,
    active: Option<Bottleneck>,
    /// Agent position and remaining route length, newest last.
    history: VecDeque<(Vec2, f64)>,
}

impl ScriptedGate {
    pub fn new(config: GateConfig) -> Self {
        ScriptedGate {
            config,
            on: false,
            active: None,
            history: VecDeque::new(),
        }
    }

    pub fn is_on(&self) -> bool {
        self.on
    }

    pub fn active_bottleneck(&self) -> Option<Bottleneck> {
        self.active
    }

    /// No net displacement, or no progress along the route, across the
    /// window. The second catches policies circling a spot.
    fn stalled(&self, pos: Vec2, remaining: f64) -> bool {
        let eps = self.config.stall_progress_eps;
        match self.history.front() {
            Some(&(p0, r0)) if self.history.len() > self.config.stall_window => {
                pos.dist(p0) < eps || r0 - remaining < eps
            }
            _ => false,
        }
    }
}

impl Gate for ScriptedGate {
    fn reset(&mut self, _episode_seed: u64) {
        self.on = false;
        self.active = None;
        self.history.clear();
    }

    fn update(&mut self, s: &EnvState, p: &TaskParams) -> bool {
        let c = &self.config;
        let pos = s.agent_pos;
        let remaining = route_remaining(s, p);
        self.history.push_back((pos, remaining));
        while self.history.len() > c.stall_window + 1 {
            self.history.pop_front();
        }
        let deviation = distance_to_polyline(pos, &route(s, p));
        if self.on {
            let cleared = self.active.is_none_or(|b| b.cleared(s, p));
            if deviation < c.deviate_off && cleared {
                self.on = false;
                self.active = None;
                self.history.clear();
                self.history.push_back((pos, remaining));
            }
        } else {
            let in_band = (pos.x - p.wall_x).abs() < c.bottleneck_band;
            if (deviation > c.deviate_on && in_band) || self.stalled(pos, remaining) {
                self.on = true;
                self.active = Some(Bottleneck::upcoming(s, p));
                self.history.clear();
                self.history.push_back((pos, remaining));
            }
        }
        self.on
    }
}

/// `G ≡ 1` or `G ≡ 0`.
#[derive(Clone, Copy, Debug)]
pub struct ConstantGate(pub bool);

impl Gate for ConstantGate {
    fn reset(&mut self, _episode_seed: u64) {}
    fn update(&mut self, _s: &EnvState, _p: &TaskParams) -> bool {
        self.0
    }
}

/// Two-state Markov gate switching with fixed per-step probabilities,
/// seeded per episode.
#[derive(Clone, Debug)]
pub struct RandomGate {
    pub p_on: f64,
    pub p_off: f64,
    salt: u64,
    on: bool,
    rng: rng::KeyedRng,
}

impl RandomGate {
    pub fn new(p_on: f64, p_off: f64, salt: u64) -> Self {
        RandomGate {
            p_on,
            p_off,
            salt,
            on: false,
            rng: rng::keyed(salt, rng::stream::GATE),
        }
    }
}

impl Gate for RandomGate {
    fn reset(&mut self, episode_seed: u64) {
        self.on = false;
        self.rng = rng::keyed(rng::mix(self.salt, episode_seed), rng::stream::GATE);
    }

    fn update(&mut self, _s: &EnvState, _p: &TaskParams) -> bool {
        let u: f64 = self.rng.random();
        self.on = if self.on { u >= self.p_off } else { u < self.p_on };
        self.on
    }
}

/// Labels for one mixture episode.
pub struct EpisodeTags<'a> {
    pub seed: u64,
    pub round: u32,
    pub operator_id: &'a str,
}

/// Runs one episode under `π = G·π_H + (1 − G)·π_θ`, recording which
/// controller produced every executed action.
pub fn run_mixture_episode(
    policy: &dyn Controller,
    expert: &Expert,
    gate: &mut dyn Gate,
    env: &mut ThreadEnv,
    tags: EpisodeTags<'_>,
) -> Trajectory {
    env.reset(tags.seed);
    gate.reset(tags.seed);
    let mut steps = Vec::with_capacity(env.params().horizon as usize);
    while !env.is_done() {
        let obs = env.observation();
        let on = gate.update(env.state(), env.params());
        let (action, source) = if on {
            (expert.action(env.state(), env.params()), Source::Human)
        } else {
            (policy.act(env), Source::Policy)
        };
        steps.push(Step {
            t: env.state().t,
            obs,
            action,
            source,
        });
        env.step(action).expect("episode is not done");
    }
    Trajectory {
        steps,
        success: env.state().success,
        seed: tags.seed,
        round: tags.round,
        operator_id: tags.operator_id.to_string(),
    }
}

#[derive(Clone, Debug)]
pub struct DemoBatch {
    pub trajectories: Vec<Trajectory>,
    pub attempts: usize,
    /// Env seeds consumed, `seed_base..seed_base + attempts`.
    pub next_seed: u64,
}

/// Collects `n` successful expert demonstrations with Gaussian displacement
/// noise. Episode `k` uses env seed `seed_base + k`; failed episodes are
/// discarded and counted. Gives up once success falls below 20% of
/// `5n` attempts.
pub fn collect_full_demos(
    n: usize,
    expert: &Expert,
    env: &mut ThreadEnv,
    seed_base: u64,
    round: u32,
    operator_id: &str,
) -> Result<DemoBatch> {
    if n == 0 {
        return Err(Error::Precondition("collect_full_demos needs n >= 1".into()));
    }
    let noise_std = expert.config.demo_noise_std;
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("finite std");
    let max_attempts = 5 * n;
    let mut trajectories = Vec::with_capacity(n);
    let mut attempts = 0;
    while trajectories.len() < n && attempts < max_attempts {
        let seed = seed_base + attempts as u64;
        attempts += 1;
        env.reset(seed);
        let mut steps = Vec::new();
        while !env.is_done() {
            let t = env.state().t;
            let mut a = expert.action(env.state(), env.params());
            if noise_std > 0.0 {
                let mut r = rng::keyed_at(seed, rng::stream::DEMO_NOISE, u64::from(t));
                a.dx += noise.sample(&mut r);
                a.dy += noise.sample(&mut r);
            }
            steps.push(Step {
                t,
                obs: env.observation(),
                action: a,
                source: Source::Human,
            });
            env.step(a)?;
        }
        if env.state().success {
            trajectories.push(Trajectory {
                steps,
                success: true,
                seed,
                round,
                operator_id: operator_id.to_string(),
            });
        }
    }
    if trajectories.len() < n {
        return Err(Error::DemoFailure {
            successes: trajectories.len(),
            attempts,
        });
    }
    Ok(DemoBatch {
        trajectories,
        attempts,
        next_seed: seed_base + attempts as u64,
    })
}
