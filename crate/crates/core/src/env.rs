//! Planar grasp-and-thread task.
//!
//! The agent starts on the left of a vertical wall, must grasp a rod-like
//! object, carry it through a narrow gap in the wall and bring it into a goal
//! disk on the right. Grasping and the gap are the two bottlenecks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const OBS_DIM: usize = 10;
pub const ACT_DIM: usize = 3;

const GAP_Y_RANGE: (f64, f64) = (0.3, 0.7);
const OBJECT_X_RANGE: (f64, f64) = (0.1, 0.2);
const OBJECT_Y_RANGE: (f64, f64) = (0.2, 0.8);
const AGENT_X_RANGE: (f64, f64) = (0.05, 0.15);
const AGENT_Y_RANGE: (f64, f64) = (0.1, 0.9);

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dist(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn scale(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

/// Fixed geometry of the task family. Per-episode quantities (gap height,
/// start positions) are sampled on reset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub name: String,
    pub gap_half_width: f64,
    pub goal_x: f64,
    pub goal_radius: f64,
    pub wall_x: f64,
    pub horizon: u32,
    pub max_step: f64,
    pub grasp_radius: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            name: "grasp-thread".to_string(),
            gap_half_width: 0.04,
            goal_x: 0.9,
            goal_radius: 0.05,
            wall_x: 0.5,
            horizon: 200,
            max_step: 0.03,
            grasp_radius: 0.02,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidTask(m.to_string()));
        for (name, v) in [
            ("gap_half_width", self.gap_half_width),
            ("goal_radius", self.goal_radius),
            ("max_step", self.max_step),
            ("grasp_radius", self.grasp_radius),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidTask(format!("{name} must be positive, got {v}")));
            }
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(self.wall_x > OBJECT_X_RANGE.1 && self.wall_x < 1.0) {
            return bad("wall_x must lie between the start region and the right edge");
        }
        if GAP_Y_RANGE.0 - self.gap_half_width <= 0.0 || GAP_Y_RANGE.1 + self.gap_half_width >= 1.0 {
            return bad("gap must lie strictly inside the workspace");
        }
        if self.goal_x - self.goal_radius <= self.wall_x || self.goal_x + self.goal_radius > 1.0 {
            return bad("goal disk must lie right of the wall inside the workspace");
        }
        Ok(())
    }

    /// Samples the episode parameters for `seed`.
    pub fn sample(&self, seed: u64) -> TaskParams {
        let mut r = rng::keyed(seed, rng::stream::TASK);
        let mut uni = |(lo, hi): (f64, f64)| lo + (hi - lo) * r.random::<f64>();
        let gap_center_y = uni(GAP_Y_RANGE);
        let object_start = Vec2::new(uni(OBJECT_X_RANGE), uni(OBJECT_Y_RANGE));
        let agent_start = Vec2::new(uni(AGENT_X_RANGE), uni(AGENT_Y_RANGE));
        TaskParams {
            gap_center_y,
            gap_half_width: self.gap_half_width,
            object_start,
            agent_start,
            goal_center: Vec2::new(self.goal_x, gap_center_y),
            goal_radius: self.goal_radius,
            wall_x: self.wall_x,
            horizon: self.horizon,
            max_step: self.max_step,
            grasp_radius: self.grasp_radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub gap_center_y: f64,
    pub gap_half_width: f64,
    pub object_start: Vec2,
    pub agent_start: Vec2,
    pub goal_center: Vec2,
    pub goal_radius: f64,
    pub wall_x: f64,
    pub horizon: u32,
    pub max_step: f64,
    pub grasp_radius: f64,
}

impl TaskParams {
    pub fn in_gap_band(&self, y: f64) -> bool {
        (y - self.gap_center_y).abs() <= self.gap_half_width
    }

    /// True when the closed segment `a → b` touches the solid part of the wall.
    pub fn hits_wall(&self, a: Vec2, b: Vec2) -> bool {
        let w = self.wall_x;
        if a.x == w && b.x == w {
            let (lo, hi) = (a.y.min(b.y), a.y.max(b.y));
            return lo < self.gap_center_y - self.gap_half_width
                || hi > self.gap_center_y + self.gap_half_width;
        }
        if (a.x - w) * (b.x - w) > 0.0 {
            return false;
        }
        let s = (w - a.x) / (b.x - a.x);
        let y = a.y + s * (b.y - a.y);
        !self.in_gap_band(y)
    }

    /// Position reached from `from` under a displacement already clipped to
    /// the step bound. Blocked motion keeps its vertical component when that
    /// alone is admissible.
    pub fn resolve_motion(&self, from: Vec2, disp: Vec2) -> Vec2 {
        let target = Vec2::new((from.x + disp.x).clamp(0.0, 1.0), (from.y + disp.y).clamp(0.0, 1.0));
        if !self.hits_wall(from, target) {
            return target;
        }
        let slide = Vec2::new(from.x, target.y);
        if !self.hits_wall(from, slide) {
            slide
        } else {
            from
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Reach,
    Carry,
    Done,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Reach => "reach",
            Phase::Carry => "carry",
            Phase::Done => "done",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub agent_pos: Vec2,
    pub gripper_closed: bool,
    pub object_pos: Vec2,
    pub attached: bool,
    pub phase: Phase,
    pub t: u32,
    pub success: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn from_state(s: &EnvState, p: &TaskParams) -> Self {
        let rel_obj = s.object_pos - s.agent_pos;
        let rel_goal = p.goal_center - s.agent_pos;
        Observation([
            s.agent_pos.x,
            s.agent_pos.y,
            if s.gripper_closed { 1.0 } else { -1.0 },
            s.object_pos.x,
            s.object_pos.y,
            rel_obj.x,
            rel_obj.y,
            p.gap_center_y,
            rel_goal.x,
            rel_goal.y,
        ])
    }

    pub fn agent_pos(&self) -> Vec2 {
        Vec2::new(self.0[0], self.0[1])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// `(dx, dy, grip)`. Displacements are clipped per axis to the step bound
/// when executed; `grip >= 0` closes the gripper.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
    pub grip: f64,
}

impl Action {
    pub const fn new(dx: f64, dy: f64, grip: f64) -> Self {
        Action { dx, dy, grip }
    }

    pub fn to_array(self) -> [f64; ACT_DIM] {
        [self.dx, self.dy, self.grip]
    }

    pub fn from_array(a: [f64; ACT_DIM]) -> Self {
        Action::new(a[0], a[1], a[2])
    }

    pub fn closes(self) -> bool {
        self.grip >= 0.0
    }

    /// Executed displacement. Non-finite components count as zero.
    pub fn clipped_displacement(self, max_step: f64) -> Vec2 {
        let clip = |v: f64| if v.is_finite() { v.clamp(-max_step, max_step) } else { 0.0 };
        Vec2::new(clip(self.dx), clip(self.dy))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub success: bool,
    pub phase: Phase,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Clone, Debug)]
pub struct ThreadEnv {
    config: TaskConfig,
    params: TaskParams,
    state: EnvState,
    seed: u64,
}

impl ThreadEnv {
    /// Creates an environment already reset with seed 0.
    pub fn new(config: TaskConfig) -> Result<Self> {
        config.validate()?;
        let params = config.sample(0);
        let state = Self::initial_state(&params);
        Ok(ThreadEnv {
            config,
            params,
            state,
            seed: 0,
        })
    }

    fn initial_state(p: &TaskParams) -> EnvState {
        EnvState {
            agent_pos: p.agent_start,
            gripper_closed: false,
            object_pos: p.object_start,
            attached: false,
            phase: Phase::Reach,
            t: 0,
            success: false,
        }
    }

    pub fn reset(&mut self, seed: u64) -> Observation {
        self.params = self.config.sample(seed);
        self.state = Self::initial_state(&self.params);
        self.seed = seed;
        self.observation()
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn params(&self) -> &TaskParams {
        &self.params
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn observation(&self) -> Observation {
        Observation::from_state(&self.state, &self.params)
    }

    pub fn is_done(&self) -> bool {
        self.state.phase == Phase::Done
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::StepAfterDone);
        }
        let p = &self.params;
        let s = &mut self.state;

        let disp = action.clipped_displacement(p.max_step);
        s.agent_pos = p.resolve_motion(s.agent_pos, disp);
        s.gripper_closed = action.closes();

        if s.attached && !s.gripper_closed {
            s.attached = false;
            s.phase = Phase::Reach;
        }
        if s.attached {
            s.object_pos = s.agent_pos;
        } else if s.gripper_closed && s.agent_pos.dist(s.object_pos) <= p.grasp_radius {
            s.attached = true;
            s.object_pos = s.agent_pos;
            s.phase = Phase::Carry;
        }
        s.t += 1;

        let mut reward = 0.0;
        if s.attached && s.object_pos.dist(p.goal_center) <= p.goal_radius {
            s.success = true;
            reward = 1.0;
        }
        if s.success || s.t >= p.horizon {
            s.phase = Phase::Done;
        }
        Ok(StepOutcome {
            obs: self.observation(),
            reward,
            done: self.is_done(),
            info: StepInfo {
                success: self.state.success,
                phase: self.state.phase,
            },
        })
    }

    /// Overwrites the dynamic state. Used by tests and tools that need to
    /// start from a specific configuration.
    pub fn set_state(&mut self, state: EnvState) {
        self.state = state;
    }
}

/// Drawable item in normalized workspace coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Wall { from: Vec2, to: Vec2 },
    Gap { x: f64, y_low: f64, y_high: f64 },
    Goal { center: Vec2, radius: f64 },
    Object { center: Vec2, radius: f64, attached: bool },
    Agent { center: Vec2, radius: f64, gripper_closed: bool },
    Label { at: Vec2, text: String },
}

const OBJECT_DRAW_RADIUS: f64 = 0.015;

/// Scene description for display, back to front.
pub fn render_primitives(state: &EnvState, params: &TaskParams) -> Vec<Primitive> {
    let lo = params.gap_center_y - params.gap_half_width;
    let hi = params.gap_center_y + params.gap_half_width;
    let w = params.wall_x;
    vec![
        Primitive::Wall {
            from: Vec2::new(w, 0.0),
            to: Vec2::new(w, lo),
        },
        Primitive::Wall {
            from: Vec2::new(w, hi),
            to: Vec2::new(w, 1.0),
        },
        Primitive::Gap {
            x: w,
            y_low: lo,
            y_high: hi,
        },
        Primitive::Goal {
            center: params.goal_center,
            radius: params.goal_radius,
        },
        Primitive::Object {
            center: state.object_pos,
            radius: OBJECT_DRAW_RADIUS,
            attached: state.attached,
        },
        Primitive::Agent {
            center: state.agent_pos,
            radius: params.grasp_radius,
            gripper_closed: state.gripper_closed,
        },
        Primitive::Label {
            at: Vec2::new(0.02, 0.97),
            text: format!("t={} {}", state.t, state.phase.as_str()),
        },
    ]
}
