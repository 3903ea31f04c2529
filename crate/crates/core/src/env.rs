//! Small deterministic point-mass environments and their scripted experts.
//!
//! All three share the same dynamics: `pos ← clip_box(pos + clamp(a)·dt)`.
//! They differ in dimension, goals and (for `forked_paths`) a wall that
//! ends the episode on contact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    ForkedPaths,
    MultiGoal,
    LineReach,
}

impl EnvName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "forked_paths" => Ok(Self::ForkedPaths),
            "multi_goal" => Ok(Self::MultiGoal),
            "line_reach" => Ok(Self::LineReach),
            other => Err(Error::param(format!(
                "unknown env {other:?} (forked_paths, multi_goal, line_reach)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::ForkedPaths => "forked_paths",
            Self::MultiGoal => "multi_goal",
            Self::LineReach => "line_reach",
        }
    }
}

/// Horizontal wall segment at height `y` over `x ∈ [x_lo, x_hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub y: f64,
    pub x_lo: f64,
    pub x_hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: EnvName,
    pub d_obs: usize,
    pub d_action: usize,
    pub max_steps: usize,
    pub action_bounds: Vec<(f64, f64)>,
    /// Positions are confined to this box in every dimension.
    pub pos_bounds: (f64, f64),
    pub dt: f64,
    pub tolerance: f64,
    pub start: Vec<f64>,
    /// Reaching any goal ends the episode successfully.
    pub goals: Vec<Vec<f64>>,
    pub wall: Option<Wall>,
    /// Std of the Gaussian jitter the scripted expert adds to its actions.
    pub expert_jitter: f64,
}

const DT: f64 = 0.1;
const TOL: f64 = 0.05;
const MAX_STEPS: usize = 60;
/// 2% of the `[-1, 1]` action range.
const JITTER: f64 = 0.04;
const EXPERT_GAIN: f64 = 5.0;
const WAYPOINT_RADIUS: f64 = 0.1;
/// Lateral offset of the forked_paths detour waypoints.
const FORK_X: f64 = 0.55;

impl EnvSpec {
    pub fn forked_paths() -> Self {
        Self {
            name: EnvName::ForkedPaths,
            d_obs: 2,
            d_action: 2,
            max_steps: MAX_STEPS,
            action_bounds: vec![(-1.0, 1.0); 2],
            pos_bounds: (-1.0, 1.0),
            dt: DT,
            tolerance: TOL,
            start: vec![0.0, -1.0],
            goals: vec![vec![0.0, 1.0]],
            wall: Some(Wall {
                y: 0.0,
                x_lo: -0.3,
                x_hi: 0.3,
            }),
            expert_jitter: JITTER,
        }
    }

    pub fn multi_goal() -> Self {
        Self {
            name: EnvName::MultiGoal,
            d_obs: 2,
            d_action: 2,
            max_steps: MAX_STEPS,
            action_bounds: vec![(-1.0, 1.0); 2],
            pos_bounds: (-1.0, 1.0),
            dt: DT,
            tolerance: TOL,
            start: vec![0.0, -1.0],
            goals: vec![vec![-0.7, 0.7], vec![0.0, 1.0], vec![0.7, 0.7]],
            wall: None,
            expert_jitter: JITTER,
        }
    }

    pub fn line_reach() -> Self {
        Self {
            name: EnvName::LineReach,
            d_obs: 1,
            d_action: 1,
            max_steps: MAX_STEPS,
            action_bounds: vec![(-1.0, 1.0)],
            pos_bounds: (-1.0, 1.5),
            dt: DT,
            tolerance: TOL,
            start: vec![0.0],
            goals: vec![vec![1.0]],
            wall: None,
            expert_jitter: JITTER,
        }
    }

    pub fn by_name(name: EnvName) -> Self {
        match name {
            EnvName::ForkedPaths => Self::forked_paths(),
            EnvName::MultiGoal => Self::multi_goal(),
            EnvName::LineReach => Self::line_reach(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::param("max_steps must be at least 1"));
        }
        if self.action_bounds.len() != self.d_action || self.action_bounds.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::param("action bounds need lo < hi in every dimension"));
        }
        if self.start.len() != self.d_obs || self.goals.iter().any(|g| g.len() != self.d_obs) {
            return Err(Error::param("start and goals must have d_obs entries"));
        }
        if !(self.expert_jitter >= 0.0) {
            return Err(Error::param("expert jitter must be non-negative"));
        }
        Ok(())
    }

    /// Number of expert modes.
    pub fn n_modes(&self) -> usize {
        match self.name {
            EnvName::ForkedPaths => 2,
            EnvName::MultiGoal => 3,
            EnvName::LineReach => 1,
        }
    }

    pub fn mode_name(&self, mode: usize) -> String {
        match (self.name, mode) {
            (EnvName::ForkedPaths, 0) => "left".into(),
            (EnvName::ForkedPaths, 1) => "right".into(),
            (_, m) => m.to_string(),
        }
    }

    pub fn reset(&self) -> EnvState {
        EnvState {
            pos: self.start.clone(),
            step: 0,
            terminal: false,
            success: false,
            wall_hit: false,
        }
    }

    pub fn clamp_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(&self.action_bounds)
            .map(|(&a, &(lo, hi))| a.clamp(lo, hi))
            .collect()
    }

    fn at_goal(&self, pos: &[f64]) -> bool {
        self.goals.iter().any(|g| dist(g, pos) <= self.tolerance)
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub pos: Vec<f64>,
    pub step: usize,
    pub terminal: bool,
    pub success: bool,
    pub wall_hit: bool,
}

impl EnvState {
    pub fn observation(&self) -> Vec<f64> {
        self.pos.clone()
    }
}

/// Point where the move `p → q` first touches the wall, if it does.
fn wall_contact(wall: &Wall, p: &[f64], q: &[f64]) -> Option<Vec<f64>> {
    let (y0, y1) = (p[1] - wall.y, q[1] - wall.y);
    // touching counts; moves that start exactly on the line and leave do not
    if y0 == 0.0 || (y0 < 0.0) == (y1 < 0.0) && y1 != 0.0 {
        return None;
    }
    let t = y0 / (y0 - y1);
    let x = p[0] + t * (q[0] - p[0]);
    (wall.x_lo..=wall.x_hi).contains(&x).then(|| vec![x, wall.y])
}

/// One step of the dynamics. Pure: the result depends only on the inputs.
pub fn env_step(spec: &EnvSpec, state: &EnvState, action: &[f64]) -> Result<(EnvState, Vec<f64>, bool)> {
    if state.terminal {
        return Err(Error::contract("step called on a terminal state"));
    }
    if action.len() != spec.d_action {
        return Err(Error::dim(format!(
            "action has {} dims, env {} expects {}",
            action.len(),
            spec.name.as_str(),
            spec.d_action
        )));
    }
    let a = spec.clamp_action(action);
    let (lo, hi) = spec.pos_bounds;
    let mut pos: Vec<f64> = state
        .pos
        .iter()
        .zip(&a)
        .map(|(&p, &v)| (p + v * spec.dt).clamp(lo, hi))
        .collect();
    let mut next = EnvState {
        pos: Vec::new(),
        step: state.step + 1,
        terminal: false,
        success: false,
        wall_hit: false,
    };
    if let Some(contact) = spec.wall.as_ref().and_then(|w| wall_contact(w, &state.pos, &pos)) {
        pos = contact;
        next.wall_hit = true;
        next.terminal = true;
    } else if spec.at_goal(&pos) {
        next.success = true;
        next.terminal = true;
    }
    if next.step >= spec.max_steps {
        next.terminal = true;
    }
    next.pos = pos;
    let obs = next.observation();
    let done = next.terminal;
    Ok((next, obs, done))
}

/// A recorded episode: `observations[t]` was seen before `actions[t]` ran.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub mode_label: Option<usize>,
    pub success: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Waypoints the expert visits for `mode`, ending at its goal.
fn expert_waypoints(spec: &EnvSpec, mode: usize) -> Result<Vec<Vec<f64>>> {
    if mode >= spec.n_modes() {
        return Err(Error::param(format!(
            "mode {mode} is not valid for {} (0..{})",
            spec.name.as_str(),
            spec.n_modes()
        )));
    }
    Ok(match spec.name {
        EnvName::ForkedPaths => {
            let wall_y = spec.wall.map_or(0.0, |w| w.y);
            let side = if mode == 0 { -FORK_X } else { FORK_X };
            vec![vec![side, wall_y], spec.goals[0].clone()]
        }
        EnvName::MultiGoal => vec![spec.goals[mode].clone()],
        EnvName::LineReach => vec![spec.goals[0].clone()],
    })
}

/// Proportional waypoint follower. Keeps its own waypoint index, so it is
/// the stateful part; the environment stays pure.
#[derive(Clone, Debug)]
pub struct ExpertController {
    waypoints: Vec<Vec<f64>>,
    next: usize,
    jitter: f64,
}

impl ExpertController {
    pub fn new(spec: &EnvSpec, mode: usize) -> Result<Self> {
        Ok(Self {
            waypoints: expert_waypoints(spec, mode)?,
            next: 0,
            jitter: spec.expert_jitter,
        })
    }

    pub fn act(&mut self, spec: &EnvSpec, pos: &[f64], rng: &mut Rng) -> Vec<f64> {
        while self.next + 1 < self.waypoints.len() && dist(&self.waypoints[self.next], pos) < WAYPOINT_RADIUS {
            self.next += 1;
        }
        let target = &self.waypoints[self.next];
        let raw: Vec<f64> = target
            .iter()
            .zip(pos)
            .map(|(t, p)| EXPERT_GAIN * (t - p) + self.jitter * rng.gaussian())
            .collect();
        spec.clamp_action(&raw)
    }
}

/// Roll out the scripted expert for `mode`. Recorded actions are the
/// clamped actions actually applied.
pub fn scripted_expert(spec: &EnvSpec, mode: usize, rng: &mut Rng) -> Result<Episode> {
    spec.validate()?;
    let mut ctl = ExpertController::new(spec, mode)?;
    let mut state = spec.reset();
    let mut ep = Episode {
        observations: Vec::new(),
        actions: Vec::new(),
        mode_label: Some(mode),
        success: false,
    };
    while !state.terminal {
        let a = ctl.act(spec, &state.pos, rng);
        ep.observations.push(state.observation());
        ep.actions.push(a.clone());
        state = env_step(spec, &state, &a)?.0;
    }
    ep.success = state.success;
    Ok(ep)
}

/// Which mode a trajectory of positions realized, if any.
///
/// forked_paths: sign of `x` where the path first crosses the wall's row
/// (left = 0, right = 1). multi_goal: the goal reached at the end.
/// line_reach: 0 if the goal was reached.
pub fn classify_mode(spec: &EnvSpec, trajectory: &[Vec<f64>]) -> Option<usize> {
    match spec.name {
        EnvName::ForkedPaths => {
            let y = spec.wall.map_or(0.0, |w| w.y);
            trajectory.windows(2).find_map(|w| {
                let (p, q) = (&w[0], &w[1]);
                let (y0, y1) = (p[1] - y, q[1] - y);
                if y0 < 0.0 && y1 >= 0.0 {
                    let x = p[0] + y0 / (y0 - y1) * (q[0] - p[0]);
                    if x < 0.0 {
                        Some(0)
                    } else if x > 0.0 {
                        Some(1)
                    } else {
                        None
                    }
                } else {
                    None
                }
            })
        }
        EnvName::MultiGoal | EnvName::LineReach => {
            let last = trajectory.last()?;
            spec.goals.iter().position(|g| dist(g, last) <= spec.tolerance)
        }
    }
}
