//! Transfer to new tasks by retraining selected parameter groups.
//!
//! `NewModule` appends a copy of an existing component, extends the router by
//! one zero-initialized logit and trains only those two groups, so the
//! pretrained components stay bit-identical. Replay mixes a few pretraining
//! demonstrations per task into the adaptation data.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{evaluate, EpisodeDataset, EvalOptions, Suite, SuccessTable};
use crate::composition::TrainableMask;
use crate::error::{Error, Result};
use crate::numerics::{FeedForwardNet, Matrix};
use crate::policy::{FactorizedPolicy, PolicyAgent, TrainOptions, TrainingLog};

const ROUTING_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptStrategy {
    Full,
    Router,
    RouterEncoder,
    NewModule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpcycleSource {
    /// Component with the largest mean routing weight on the new demos.
    HighestWeight,
    Index(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub strategy: AdaptStrategy,
    pub upcycle: UpcycleSource,
    /// Pretraining episodes replayed per task; 0 disables replay.
    pub replay_per_task: usize,
    /// Demonstrations used per new task.
    pub demos_per_task: usize,
    /// Also unfreeze the observation encoder under `NewModule`.
    pub train_encoder: bool,
    pub train: TrainOptions,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            strategy: AdaptStrategy::NewModule,
            upcycle: UpcycleSource::HighestWeight,
            replay_per_task: 0,
            demos_per_task: 10,
            train_encoder: false,
            train: TrainOptions::default(),
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.demos_per_task == 0 {
            return Err(Error::Config("demos_per_task must be positive".into()));
        }
        if self.train_encoder && self.strategy != AdaptStrategy::NewModule {
            return Err(Error::Config("train_encoder only applies to the new_module strategy".into()));
        }
        Ok(())
    }

    /// Parameter groups updated when adapting a policy that will hold
    /// `components` components.
    pub fn mask(&self, components: usize) -> TrainableMask {
        match self.strategy {
            AdaptStrategy::Full => TrainableMask::all(components),
            AdaptStrategy::Router => TrainableMask {
                router: true,
                ..TrainableMask::none(components)
            },
            AdaptStrategy::RouterEncoder => TrainableMask {
                encoder: true,
                router: true,
                ..TrainableMask::none(components)
            },
            AdaptStrategy::NewModule => {
                let mut m = TrainableMask {
                    encoder: self.train_encoder,
                    router: true,
                    ..TrainableMask::none(components)
                };
                m.components[components - 1] = true;
                m
            }
        }
    }
}

/// SHA-256 of every parameter group, hex encoded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamChecksums {
    pub encoder: String,
    pub router: String,
    pub components: Vec<String>,
}

pub fn net_checksum(net: &FeedForwardNet) -> String {
    Sha256::digest(net.param_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl ParamChecksums {
    pub fn of(policy: &FactorizedPolicy) -> Self {
        Self {
            encoder: net_checksum(policy.encoder()),
            router: net_checksum(policy.router().net()),
            components: policy.components().iter().map(|c| net_checksum(c.net())).collect(),
        }
    }
}

/// Mean router weight over every step of every episode in `dataset`.
pub fn mean_routing_weights(policy: &FactorizedPolicy, dataset: &EpisodeDataset) -> Result<Vec<f64>> {
    let mut obs = Matrix::zeros(0, policy.obs_dim());
    for ep in &dataset.episodes {
        for t in 0..ep.len() {
            obs.push_row(&policy.observation(&ep.states, t, ep.task_id)?)?;
        }
    }
    if obs.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let rows: Vec<usize> = (0..obs.rows()).collect();
    let mut sum = vec![0.0; policy.num_components()];
    for chunk in rows.chunks(ROUTING_CHUNK) {
        let w = policy.route_batch(&obs.select_rows(chunk))?;
        for r in 0..w.rows() {
            for (s, v) in sum.iter_mut().zip(w.row(r)) {
                *s += v;
            }
        }
    }
    Ok(sum.into_iter().map(|s| s / obs.rows() as f64).collect())
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Resolves the component to copy for a new module.
pub fn upcycle_source(policy: &FactorizedPolicy, source: UpcycleSource, dataset: &EpisodeDataset) -> Result<usize> {
    match source {
        UpcycleSource::Index(i) => Ok(i),
        UpcycleSource::HighestWeight => Ok(argmax_lowest(&mean_routing_weights(policy, dataset)?)),
    }
}

impl FactorizedPolicy {
    /// Appends a copy of component `source` and a zero-initialized router
    /// logit for it.
    pub fn upcycle_component(&mut self, source: usize) -> Result<()> {
        let copy = self
            .components
            .get(source)
            .ok_or(Error::Index {
                what: "upcycle source",
                index: source,
                len: self.components.len(),
            })?
            .clone();
        self.components.push(copy);
        self.router.extend()?;
        self.config.components += 1;
        self.check()
    }
}

/// Record of one adaptation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationStage {
    pub stage: usize,
    pub strategy: AdaptStrategy,
    pub new_tasks: Vec<String>,
    pub components: usize,
    pub upcycled_from: Option<usize>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub adaptation_episodes: usize,
    pub replay_episodes: usize,
    pub checksums_before: ParamChecksums,
    pub checksums_after: ParamChecksums,
    pub training: TrainingLog,
    pub evaluation: Option<SuccessTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationLog {
    pub config: AdaptationConfig,
    pub stages: Vec<AdaptationStage>,
}

impl AdaptationLog {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_frozen(
    mask: &TrainableMask,
    before: &ParamChecksums,
    after: &ParamChecksums,
) -> Result<()> {
    let changed = |what: &str| Err(Error::Config(format!("frozen {what} changed during adaptation")));
    if !mask.encoder && before.encoder != after.encoder {
        return changed("encoder");
    }
    if !mask.router && before.router != after.router {
        return changed("router");
    }
    for (i, (b, m)) in before.components.iter().zip(&mask.components).enumerate() {
        if !m && *b != after.components[i] {
            return changed(&format!("component {i}"));
        }
    }
    Ok(())
}

/// Adapts a copy of `policy` to the tasks in `new_tasks`.
///
/// `replay` must hold the pretraining demonstrations exactly when
/// `replay_per_task > 0`; its first `replay_per_task` episodes per task are
/// shuffled in with the new demonstrations. The policy's normalizer is kept.
pub fn adapt(
    policy: &FactorizedPolicy,
    config: &AdaptationConfig,
    new_tasks: &EpisodeDataset,
    replay: Option<&EpisodeDataset>,
) -> Result<(FactorizedPolicy, AdaptationStage)> {
    config.validate()?;
    for (what, ds) in std::iter::once(("adaptation", new_tasks)).chain(replay.map(|r| ("replay", r))) {
        if ds.state_dim != policy.state_dim() || ds.action_dim != policy.action_dim() {
            return Err(Error::Config(format!(
                "{what} data has state/action widths {}/{} but the policy expects {}/{}",
                ds.state_dim,
                ds.action_dim,
                policy.state_dim(),
                policy.action_dim()
            )));
        }
    }
    let fresh = new_tasks.take_per_task(config.demos_per_task)?;
    let (data, replay_episodes) = match (config.replay_per_task, replay) {
        (0, None) => (fresh.clone(), 0),
        (0, Some(_)) => return Err(Error::Config("replay data given but replay_per_task is 0".into())),
        (_, None) => return Err(Error::Config("replay_per_task > 0 requires replay data".into())),
        (n, Some(r)) => {
            let buffer = r.take_per_task(n)?;
            let count = buffer.len();
            (fresh.concat(&buffer)?, count)
        }
    };

    let mut adapted = policy.clone();
    let mut upcycled_from = None;
    if config.strategy == AdaptStrategy::NewModule {
        let src = upcycle_source(policy, config.upcycle, &fresh)?;
        adapted.upcycle_component(src)?;
        upcycled_from = Some(src);
    }
    let mask = config.mask(adapted.num_components());
    let before = ParamChecksums::of(&adapted);
    let training = adapted.train(&data, &config.train, &mask)?;
    let after = ParamChecksums::of(&adapted);
    check_frozen(&mask, &before, &after)?;

    let stage = AdaptationStage {
        stage: 0,
        strategy: config.strategy,
        new_tasks: fresh.tasks.clone(),
        components: adapted.num_components(),
        upcycled_from,
        trainable_params: adapted.trainable_params(&mask),
        total_params: adapted.num_params(),
        adaptation_episodes: fresh.len(),
        replay_episodes,
        checksums_before: before,
        checksums_after: after,
        training,
        evaluation: None,
    };
    Ok((adapted, stage))
}

/// Adds one component per task of `suite` from index `first_new` on.
///
/// Stage `m` adapts to task `first_new + m` with `demos` and replays from
/// every task seen before it; afterwards all tasks seen so far are
/// evaluated. Each stage trains with its own seed offset.
pub fn continual_adapt(
    policy: &FactorizedPolicy,
    suite: &Suite,
    first_new: usize,
    config: &AdaptationConfig,
    demos: &EpisodeDataset,
    eval: &EvalOptions,
) -> Result<(FactorizedPolicy, AdaptationLog)> {
    if config.strategy != AdaptStrategy::NewModule {
        return Err(Error::Config("continual adaptation requires the new_module strategy".into()));
    }
    if first_new == 0 || first_new > suite.tasks.len() {
        return Err(Error::Index {
            what: "first new task",
            index: first_new,
            len: suite.tasks.len(),
        });
    }
    let names: Vec<String> = suite.tasks.iter().map(|t| t.name.clone()).collect();
    let mut current = policy.clone();
    let mut stages = Vec::new();
    for (m, task) in names.iter().enumerate().skip(first_new) {
        let new = demos.select_tasks(std::slice::from_ref(task))?;
        let replay = if config.replay_per_task > 0 {
            Some(demos.select_tasks(&names[..m])?)
        } else {
            None
        };
        let mut stage_config = config.clone();
        stage_config.train.seed = config.train.seed.wrapping_add(m as u64);
        let (next, mut stage) = adapt(&current, &stage_config, &new, replay.as_ref())?;
        let seen = suite.slice(0..m + 1)?;
        stage.stage = m - first_new;
        stage.evaluation = Some(evaluate(&PolicyAgent::new(&next), &seen, eval)?);
        log::info!(
            "stage {}: {} components, average success {:.3}",
            stage.stage,
            stage.components,
            stage.evaluation.as_ref().map_or(f64::NAN, |e| e.average)
        );
        stages.push(stage);
        current = next;
    }
    Ok((
        current,
        AdaptationLog {
            config: config.clone(),
            stages,
        },
    ))
}
