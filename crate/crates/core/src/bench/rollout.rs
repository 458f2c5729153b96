use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::stack_history;
use super::env::{Env, EnvSpec};
use super::suite::Suite;
use super::task_stream;
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Live episode handed to an [`Agent`].
#[derive(Debug, Clone)]
pub struct RolloutContext {
    pub env: Env,
    /// Every state observed so far, oldest first.
    pub history: Vec<Vec<f64>>,
    /// Agent-side generator; never shared between episodes.
    pub rng: Rng,
    /// Behaviour mode latched at reset (used by scripted experts).
    pub mode: usize,
}

impl RolloutContext {
    pub fn new(spec: &EnvSpec, env_rng: &mut Rng, mut agent_rng: Rng) -> Self {
        let env = Env::reset(spec, env_rng);
        let mode = agent_rng.below(spec.modes());
        Self {
            history: vec![env.state().to_vec()],
            env,
            rng: agent_rng,
            mode,
        }
    }

    /// The `h` most recent states stacked oldest first.
    pub fn observation(&self, h: usize) -> Vec<f64> {
        stack_history(&self.history, self.history.len() - 1, h)
    }
}

/// Actions to execute open-loop before the next re-plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub actions: Vec<Vec<f64>>,
    /// Routing weights used for this plan, when the agent has any.
    pub weights: Option<Vec<f64>>,
}

/// Anything that plans for a batch of live episodes.
pub trait Agent: Sync {
    fn plan_batch(&self, contexts: &mut [&mut RolloutContext]) -> Result<Vec<Plan>>;
}

/// Scripted proportional controller with a per-episode latched mode.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedExpert;

impl Agent for ScriptedExpert {
    fn plan_batch(&self, contexts: &mut [&mut RolloutContext]) -> Result<Vec<Plan>> {
        Ok(contexts
            .iter_mut()
            .map(|ctx| {
                let a = ctx.env.spec().expert_action(ctx.env.state(), ctx.mode, &mut ctx.rng);
                Plan {
                    actions: vec![a],
                    weights: None,
                }
            })
            .collect())
    }
}

/// Everything recorded about one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub task: String,
    pub success: bool,
    pub steps: usize,
    /// States visited, starting with the initial state.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// Routing weights of every plan, in order.
    pub weight_trace: Vec<Vec<f64>>,
}

/// One episode to run: task, generators and an optional step budget.
#[derive(Debug, Clone)]
pub struct RolloutJob {
    pub spec: EnvSpec,
    pub env_rng: Rng,
    pub agent_rng: Rng,
}

impl RolloutJob {
    /// Episode `episode` under `root`: environment stream `2e`, agent `2e+1`.
    pub fn from_root(spec: &EnvSpec, root: &Rng, episode: usize, max_steps: Option<usize>) -> Self {
        let mut spec = spec.clone();
        if let Some(m) = max_steps {
            spec.max_steps = m;
        }
        Self {
            spec,
            env_rng: root.child(2 * episode as u64),
            agent_rng: root.child(2 * episode as u64 + 1),
        }
    }
}

/// Runs episodes in lockstep: every live episode is re-planned together and
/// executes its plan before the next round.
pub fn rollout_batch(agent: &dyn Agent, jobs: Vec<RolloutJob>) -> Result<Vec<RolloutRecord>> {
    let mut contexts: Vec<RolloutContext> = jobs
        .into_iter()
        .map(|mut j| RolloutContext::new(&j.spec, &mut j.env_rng, j.agent_rng))
        .collect();
    let mut actions: Vec<Vec<Vec<f64>>> = vec![Vec::new(); contexts.len()];
    let mut traces: Vec<Vec<Vec<f64>>> = vec![Vec::new(); contexts.len()];
    loop {
        let mut live: Vec<(usize, &mut RolloutContext)> = contexts
            .iter_mut()
            .enumerate()
            .filter(|(_, c)| !c.env.done())
            .collect();
        if live.is_empty() {
            break;
        }
        let (ids, mut refs): (Vec<usize>, Vec<&mut RolloutContext>) = live.drain(..).unzip();
        let plans = agent.plan_batch(&mut refs)?;
        if plans.len() != refs.len() {
            return Err(Error::Dimension {
                context: "agent plans".into(),
                expected: refs.len(),
                actual: plans.len(),
            });
        }
        for ((id, ctx), plan) in ids.into_iter().zip(refs).zip(plans) {
            if plan.actions.is_empty() {
                return Err(Error::EnvFault {
                    step: ctx.env.steps(),
                    reason: "agent returned an empty plan".into(),
                });
            }
            if let Some(w) = plan.weights {
                traces[id].push(w);
            }
            for a in plan.actions {
                if ctx.env.done() {
                    break;
                }
                ctx.env.step(&a)?;
                ctx.history.push(ctx.env.state().to_vec());
                actions[id].push(a);
            }
        }
    }
    Ok(contexts
        .into_iter()
        .zip(actions)
        .zip(traces)
        .map(|((ctx, actions), weight_trace)| RolloutRecord {
            task: ctx.env.spec().name.clone(),
            success: ctx.env.succeeded(),
            steps: ctx.env.steps(),
            states: ctx.history,
            actions,
            weight_trace,
        })
        .collect())
}

/// A single episode of `spec` under `seed`.
pub fn rollout(agent: &dyn Agent, spec: &EnvSpec, seed: u64, max_steps: Option<usize>) -> Result<RolloutRecord> {
    let job = RolloutJob::from_root(spec, &Rng::new(seed), 0, max_steps);
    Ok(rollout_batch(agent, vec![job])?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub episodes: usize,
    pub seeds: usize,
    pub seed: u64,
    pub max_steps: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            episodes: 40,
            seeds: 5,
            seed: 0,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuccess {
    pub task: String,
    /// Success rate for every evaluation seed.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std_error: f64,
    pub rollouts: usize,
}

/// Success rates per task and averaged over tasks; standard errors are
/// taken across evaluation seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessTable {
    pub tasks: Vec<TaskSuccess>,
    pub per_seed_average: Vec<f64>,
    pub average: f64,
    pub average_std_error: f64,
    pub seeds: usize,
    pub episodes: usize,
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl SuccessTable {
    pub fn task(&self, name: &str) -> Option<&TaskSuccess> {
        self.tasks.iter().find(|t| t.task == name)
    }

    /// Mean success over the named tasks.
    pub fn average_over(&self, names: &[String]) -> f64 {
        let rows: Vec<f64> = self
            .tasks
            .iter()
            .filter(|t| names.contains(&t.task))
            .map(|t| t.mean)
            .collect();
        rows.iter().sum::<f64>() / rows.len().max(1) as f64
    }

    /// CSV with columns `task,mean,std_error,rollouts` and a final
    /// `average` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["task", "mean", "std_error", "rollouts"])?;
        for t in &self.tasks {
            w.write_record([
                t.task.clone(),
                t.mean.to_string(),
                t.std_error.to_string(),
                t.rollouts.to_string(),
            ])?;
        }
        w.write_record([
            "average".to_string(),
            self.average.to_string(),
            self.average_std_error.to_string(),
            self.tasks.iter().map(|t| t.rollouts).sum::<usize>().to_string(),
        ])?;
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Success rates of `agent` on every task of `suite`.
///
/// Seed `s` of task `t` runs `episodes` rollouts under the stream
/// `(seed, s, t)`; units run in parallel and are reduced in a fixed order,
/// so the table does not depend on the thread count.
pub fn evaluate(agent: &dyn Agent, suite: &Suite, opts: &EvalOptions) -> Result<SuccessTable> {
    if opts.seeds == 0 || opts.episodes == 0 {
        return Err(Error::Config("evaluation needs at least one seed and one episode".into()));
    }
    let units: Vec<(usize, usize)> = (0..suite.tasks.len())
        .flat_map(|t| (0..opts.seeds).map(move |s| (t, s)))
        .collect();
    let rates: Vec<f64> = units
        .par_iter()
        .map(|&(t, s)| {
            let spec = &suite.tasks[t];
            let root = Rng::new(opts.seed).child(s as u64).child(task_stream(&spec.name));
            let jobs = (0..opts.episodes)
                .map(|e| RolloutJob::from_root(spec, &root, e, opts.max_steps))
                .collect();
            let records = rollout_batch(agent, jobs)?;
            Ok(records.iter().filter(|r| r.success).count() as f64 / opts.episodes as f64)
        })
        .collect::<Result<_>>()?;
    let mut tasks = Vec::with_capacity(suite.tasks.len());
    for (t, spec) in suite.tasks.iter().enumerate() {
        let per_seed = rates[t * opts.seeds..(t + 1) * opts.seeds].to_vec();
        let (mean, std_error) = mean_and_se(&per_seed);
        tasks.push(TaskSuccess {
            task: spec.name.clone(),
            per_seed,
            mean,
            std_error,
            rollouts: opts.seeds * opts.episodes,
        });
    }
    let per_seed_average: Vec<f64> = (0..opts.seeds)
        .map(|s| tasks.iter().map(|t| t.per_seed[s]).sum::<f64>() / tasks.len() as f64)
        .collect();
    let (average, average_std_error) = mean_and_se(&per_seed_average);
    Ok(SuccessTable {
        tasks,
        per_seed_average,
        average,
        average_std_error,
        seeds: opts.seeds,
        episodes: opts.episodes,
    })
}
