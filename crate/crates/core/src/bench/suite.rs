use serde::{Deserialize, Serialize};

use super::env::{EnvSpec, TaskKind};
use crate::error::{Error, Result};

/// Names accepted by [`make_suite`]; join several with `+`.
pub const SUITES: [&str; 5] = ["reach4", "pick-side", "drawer-line", "bimodal1d", "continual12"];

/// Angles (degrees) of the continual reach variants in introduction order.
pub const CONTINUAL_ANGLES: [f64; 12] = [
    0.0, 90.0, 180.0, 270.0, 45.0, 135.0, 225.0, 315.0, 30.0, 120.0, 210.0, 300.0,
];

/// Ordered task list sharing one state and action layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub name: String,
    pub tasks: Vec<EnvSpec>,
}

impl Suite {
    /// Builds a suite from explicit tasks, renumbering their ids.
    pub fn from_tasks(name: &str, tasks: Vec<EnvSpec>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Config(format!("suite {name} has no tasks")));
        }
        let (s, a) = (tasks[0].state_dim(), tasks[0].action_dim());
        if let Some(t) = tasks.iter().find(|t| t.state_dim() != s || t.action_dim() != a) {
            return Err(Error::Config(format!(
                "task {} has layout {}x{} but suite {name} uses {s}x{a}",
                t.name,
                t.state_dim(),
                t.action_dim()
            )));
        }
        let tasks = tasks
            .into_iter()
            .enumerate()
            .map(|(i, mut t)| {
                t.task_id = i;
                t
            })
            .collect();
        Ok(Self {
            name: name.to_string(),
            tasks,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.tasks[0].state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.tasks[0].action_dim()
    }

    pub fn task(&self, name: &str) -> Option<&EnvSpec> {
        self.tasks.iter().find(|t| t.name == name)
    }

    /// Tasks `range`, keeping their original ids.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Suite> {
        if range.start >= range.end || range.end > self.tasks.len() {
            return Err(Error::Index {
                what: "suite task range end",
                index: range.end,
                len: self.tasks.len(),
            });
        }
        Ok(Suite {
            name: format!("{}[{}..{}]", self.name, range.start, range.end),
            tasks: self.tasks[range].to_vec(),
        })
    }
}

fn task(name: String, kind: TaskKind, max_steps: usize, start_jitter: f64) -> EnvSpec {
    EnvSpec {
        name,
        task_id: 0,
        kind,
        max_steps,
        start_jitter,
    }
}

fn single(name: &str) -> Option<Vec<EnvSpec>> {
    let tasks = match name {
        "reach4" => [[0.6, 0.6], [-0.6, 0.6], [-0.6, -0.6], [0.6, -0.6]]
            .iter()
            .enumerate()
            .map(|(i, g)| {
                task(
                    format!("reach4/goal-{i}"),
                    TaskKind::Reach {
                        start: [0.0, 0.0],
                        goal: *g,
                    },
                    40,
                    0.1,
                )
            })
            .collect(),
        "pick-side" => [("east", [0.7, 0.0]), ("north", [0.0, 0.7])]
            .iter()
            .map(|(label, g)| {
                task(
                    format!("pick-side/{label}"),
                    TaskKind::Detour {
                        goal: *g,
                        obstacle: [0.0, 0.0],
                        radius: 0.25,
                        lane: 0.45,
                        approach: 0.7,
                    },
                    60,
                    0.05,
                )
            })
            .collect(),
        "drawer-line" => [("push", 0.5), ("pull", -0.5)]
            .iter()
            .map(|(label, t)| {
                task(
                    format!("drawer-line/{label}"),
                    TaskKind::Drawer {
                        start: -0.4,
                        target: *t,
                    },
                    50,
                    0.05,
                )
            })
            .collect(),
        "bimodal1d" => vec![task(
            "bimodal1d/split".into(),
            TaskKind::Bimodal { goals: [0.5, -0.5] },
            20,
            0.02,
        )],
        "continual12" => CONTINUAL_ANGLES
            .iter()
            .map(|deg| {
                let rad = deg.to_radians();
                task(
                    format!("continual12/angle-{:03}", *deg as i64),
                    TaskKind::Reach {
                        start: [0.0, 0.0],
                        goal: [0.6 * rad.cos(), 0.6 * rad.sin()],
                    },
                    40,
                    0.1,
                )
            })
            .collect(),
        _ => return None,
    };
    Some(tasks)
}

/// Builds a named suite. `a+b` concatenates suites with matching layouts.
pub fn make_suite(name: &str) -> Result<Suite> {
    let mut tasks = Vec::new();
    for part in name.split('+') {
        match single(part.trim()) {
            Some(t) => tasks.extend(t),
            None => {
                return Err(Error::UnknownSuite {
                    name: part.trim().to_string(),
                    known: SUITES.join(", "),
                })
            }
        }
    }
    Suite::from_tasks(name, tasks)
}
