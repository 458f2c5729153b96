use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numerics::Rng;

/// Integration step of every point-mass task.
pub const DT: f64 = 0.1;
/// Per-axis velocity bound; actions are velocity commands.
pub const MAX_SPEED: f64 = 1.0;
/// Proportional gain of the scripted experts.
pub const EXPERT_GAIN: f64 = 5.0;
/// Consecutive in-tolerance steps required before success latches.
pub const HOLD_STEPS: usize = 2;

const WORKSPACE: f64 = 1.5;
const GOAL_TOLERANCE: f64 = 0.05;
const CONTACT_RADIUS: f64 = 0.08;
const EXPERT_NOISE: f64 = 0.03;
const LANE_END: f64 = 0.25;
const LANE_LEAD: f64 = 0.4;

/// Task family and layout.
///
/// State layouts:
/// - `Reach`, `Detour`: `[px, py, gx, gy, ox, oy, r]` (position, goal,
///   obstacle centre and radius; reach tasks carry a zero-radius obstacle).
/// - `Drawer`: `[x, handle, target, contact]`.
/// - `Bimodal`: `[x]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TaskKind {
    /// Drive the point mass to `goal` from near `start`.
    Reach { start: [f64; 2], goal: [f64; 2] },
    /// Reach `goal` around a disc obstacle, passing it on either side in a
    /// lane at distance `lane` from its centre. Touching the disc fails.
    Detour {
        goal: [f64; 2],
        obstacle: [f64; 2],
        radius: f64,
        lane: f64,
        /// Distance of the start point behind the obstacle centre.
        approach: f64,
    },
    /// Move to the handle, latch contact, then carry it to `target`.
    Drawer { start: f64, target: f64 },
    /// Move to either of two goals.
    Bimodal { goals: [f64; 2] },
}

/// One task: family, episode budget and start-state jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    /// Position of the task within its suite.
    pub task_id: usize,
    pub kind: TaskKind,
    pub max_steps: usize,
    pub start_jitter: f64,
}

fn clamp_action(a: f64) -> f64 {
    a.clamp(-MAX_SPEED, MAX_SPEED)
}

fn unit(v: [f64; 2]) -> [f64; 2] {
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    [v[0] / n, v[1] / n]
}

impl EnvSpec {
    pub fn state_dim(&self) -> usize {
        match self.kind {
            TaskKind::Reach { .. } | TaskKind::Detour { .. } => 7,
            TaskKind::Drawer { .. } => 4,
            TaskKind::Bimodal { .. } => 1,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self.kind {
            TaskKind::Reach { .. } | TaskKind::Detour { .. } => 2,
            TaskKind::Drawer { .. } | TaskKind::Bimodal { .. } => 1,
        }
    }

    /// Number of distinct expert behaviours (latched per episode).
    pub fn modes(&self) -> usize {
        match self.kind {
            TaskKind::Detour { .. } | TaskKind::Bimodal { .. } => 2,
            _ => 1,
        }
    }

    /// Draws a start state with uniform jitter of the agent position.
    pub fn initial_state(&self, rng: &mut Rng) -> Vec<f64> {
        let mut jitter = || self.start_jitter * (2.0 * rng.uniform() - 1.0);
        match self.kind {
            TaskKind::Reach { start, goal } => {
                vec![start[0] + jitter(), start[1] + jitter(), goal[0], goal[1], 0.0, 0.0, 0.0]
            }
            TaskKind::Detour {
                goal,
                obstacle,
                radius,
                approach,
                ..
            } => {
                let u = unit([goal[0] - obstacle[0], goal[1] - obstacle[1]]);
                let sx = obstacle[0] - approach * u[0];
                let sy = obstacle[1] - approach * u[1];
                vec![sx + jitter(), sy + jitter(), goal[0], goal[1], obstacle[0], obstacle[1], radius]
            }
            TaskKind::Drawer { start, target } => vec![start + jitter(), 0.0, target, 0.0],
            TaskKind::Bimodal { .. } => vec![jitter()],
        }
    }

    /// Deterministic transition under a velocity command.
    pub fn step(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        check_len("state", self.state_dim(), state.len())?;
        check_len("action", self.action_dim(), action.len())?;
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite(format!("action {action:?}")));
        }
        let mut next = state.to_vec();
        match self.kind {
            TaskKind::Reach { .. } | TaskKind::Detour { .. } => {
                for d in 0..2 {
                    next[d] = (state[d] + DT * clamp_action(action[d])).clamp(-WORKSPACE, WORKSPACE);
                }
            }
            TaskKind::Drawer { .. } => {
                next[0] = (state[0] + DT * clamp_action(action[0])).clamp(-WORKSPACE, WORKSPACE);
                if next[3] == 0.0 && (next[0] - next[1]).abs() < CONTACT_RADIUS {
                    next[3] = 1.0;
                }
                if next[3] == 1.0 {
                    next[1] = next[0];
                }
            }
            TaskKind::Bimodal { .. } => {
                next[0] = (state[0] + DT * clamp_action(action[0])).clamp(-WORKSPACE, WORKSPACE);
            }
        }
        Ok(next)
    }

    /// Whether the state is inside the goal tolerance.
    pub fn at_goal(&self, state: &[f64]) -> bool {
        match self.kind {
            TaskKind::Reach { .. } | TaskKind::Detour { .. } => {
                (state[0] - state[2]).hypot(state[1] - state[3]) < GOAL_TOLERANCE
            }
            TaskKind::Drawer { target, .. } => state[3] == 1.0 && (state[1] - target).abs() < GOAL_TOLERANCE,
            TaskKind::Bimodal { goals } => goals.iter().any(|g| (state[0] - g).abs() < GOAL_TOLERANCE),
        }
    }

    /// Whether the state violates a task constraint (episode failure).
    pub fn collided(&self, state: &[f64]) -> bool {
        match self.kind {
            TaskKind::Detour { .. } => (state[0] - state[4]).hypot(state[1] - state[5]) < state[6],
            _ => false,
        }
    }

    /// Noise-free expert command for `state` under the latched `mode`.
    pub fn expert_command(&self, state: &[f64], mode: usize) -> Vec<f64> {
        let toward = |target: &[f64], pos: &[f64]| -> Vec<f64> {
            target
                .iter()
                .zip(pos)
                .map(|(t, p)| clamp_action(EXPERT_GAIN * (t - p)))
                .collect()
        };
        match self.kind {
            TaskKind::Reach { .. } => toward(&state[2..4], &state[..2]),
            TaskKind::Detour { lane, .. } => {
                let u = unit([state[2] - state[4], state[3] - state[5]]);
                let n = [-u[1], u[0]];
                let rel = [state[0] - state[4], state[1] - state[5]];
                let along = rel[0] * u[0] + rel[1] * u[1];
                if along < LANE_END {
                    let side = if mode == 0 { 1.0 } else { -1.0 };
                    let ta = along + LANE_LEAD;
                    let tp = side * lane;
                    let target = [
                        state[4] + ta * u[0] + tp * n[0],
                        state[5] + ta * u[1] + tp * n[1],
                    ];
                    toward(&target, &state[..2])
                } else {
                    toward(&state[2..4], &state[..2])
                }
            }
            TaskKind::Drawer { target, .. } => {
                if state[3] == 1.0 {
                    toward(&[target], &state[..1])
                } else {
                    toward(&state[1..2], &state[..1])
                }
            }
            TaskKind::Bimodal { goals } => toward(&[goals[mode.min(1)]], &state[..1]),
        }
    }

    /// Expert command with small Gaussian perturbation, clamped to bounds.
    pub fn expert_action(&self, state: &[f64], mode: usize, rng: &mut Rng) -> Vec<f64> {
        self.expert_command(state, mode)
            .into_iter()
            .map(|a| clamp_action(a + EXPERT_NOISE * rng.gaussian()))
            .collect()
    }
}

/// Stateful episode wrapper with latched success.
#[derive(Debug, Clone)]
pub struct Env {
    spec: EnvSpec,
    state: Vec<f64>,
    steps: usize,
    streak: usize,
    succeeded: bool,
    failed: bool,
}

/// Result of one environment step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    pub success: bool,
    pub done: bool,
}

impl Env {
    pub fn reset(spec: &EnvSpec, rng: &mut Rng) -> Self {
        Self {
            state: spec.initial_state(rng),
            spec: spec.clone(),
            steps: 0,
            streak: 0,
            succeeded: false,
            failed: false,
        }
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn succeeded(&self) -> bool {
        self.succeeded
    }

    pub fn done(&self) -> bool {
        self.succeeded || self.failed || self.steps >= self.spec.max_steps
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if self.done() {
            return Err(Error::EnvFault {
                step: self.steps,
                reason: "step after episode end".into(),
            });
        }
        self.state = self.spec.step(&self.state, action).map_err(|e| Error::EnvFault {
            step: self.steps,
            reason: e.to_string(),
        })?;
        self.steps += 1;
        if self.spec.collided(&self.state) {
            self.failed = true;
        } else if self.spec.at_goal(&self.state) {
            self.streak += 1;
            if self.streak >= HOLD_STEPS {
                self.succeeded = true;
            }
        } else {
            self.streak = 0;
        }
        Ok(StepOutcome {
            success: self.succeeded,
            done: self.done(),
        })
    }
}
