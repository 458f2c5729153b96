use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::env::Env;
use super::suite::Suite;
use super::task_stream;
use crate::error::{check_len, Error, Result};
use crate::numerics::Rng;

pub const DATASET_FORMAT: &str = "fdp-episodes";
pub const DATASET_VERSION: u32 = 1;
/// Attempts allowed per requested episode before demo generation gives up.
pub const ATTEMPT_FACTOR: usize = 10;

const MIN_SPAN: f64 = 2e-3;

/// Per-dimension affine map from `[min, max]` to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionNormalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ActionNormalizer {
    /// Covers every action; dimensions narrower than `2e-3` are widened
    /// symmetrically so the map stays invertible.
    pub fn fit<'a>(dim: usize, actions: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        let mut seen = false;
        for a in actions {
            check_len("normalizer action", dim, a.len())?;
            seen = true;
            for d in 0..dim {
                min[d] = min[d].min(a[d]);
                max[d] = max[d].max(a[d]);
            }
        }
        if !seen {
            return Err(Error::EmptyDataset);
        }
        for d in 0..dim {
            if max[d] - min[d] < MIN_SPAN {
                let mid = 0.5 * (max[d] + min[d]);
                min[d] = mid - 0.5 * MIN_SPAN;
                max[d] = mid + 0.5 * MIN_SPAN;
            }
        }
        Ok(Self { min, max })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            min: vec![-1.0; dim],
            max: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn normalize(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let d = i % self.dim();
                2.0 * (a - self.min[d]) / (self.max[d] - self.min[d]) - 1.0
            })
            .collect()
    }

    /// Inverse of [`ActionNormalizer::normalize`]; accepts flattened windows
    /// whose length is a multiple of the action dimension.
    pub fn denormalize(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let d = i % self.dim();
                (a + 1.0) * 0.5 * (self.max[d] - self.min[d]) + self.min[d]
            })
            .collect()
    }
}

/// One demonstration: `states[t]` is observed before `actions[t]` is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub task: String,
    pub task_id: usize,
    /// Latched expert mode.
    pub mode: usize,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
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

/// Stacks the `h` most recent states ending at `t`, oldest first; steps
/// before the episode start repeat the first state.
pub fn stack_history(states: &[Vec<f64>], t: usize, h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * states[0].len());
    for back in (0..h).rev() {
        out.extend_from_slice(&states[t.saturating_sub(back)]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    suite: String,
    seed: u64,
    per_task: usize,
    state_dim: usize,
    action_dim: usize,
    tasks: Vec<String>,
    normalizer: ActionNormalizer,
    episodes: usize,
}

/// Demonstrations for a suite, grouped by task in suite order.
///
/// On disk this is JSON lines: a header record with fields `format`
/// (`"fdp-episodes"`), `version`, `suite`, `seed`, `per_task`, `state_dim`,
/// `action_dim`, `tasks`, `normalizer` (`min`, `max`) and `episodes` (the
/// record count), followed by one [`Episode`] record per line with fields
/// `task`, `task_id`, `mode`, `states`, `actions` and `success`. Actions are
/// stored raw; the normalizer statistics travel in the header.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeDataset {
    pub suite: String,
    pub seed: u64,
    pub per_task: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub tasks: Vec<String>,
    pub normalizer: ActionNormalizer,
    pub episodes: Vec<Episode>,
}

impl EpisodeDataset {
    /// Assembles a dataset and fits its normalizer.
    pub fn new(suite: &str, seed: u64, per_task: usize, tasks: Vec<String>, episodes: Vec<Episode>) -> Result<Self> {
        let first = episodes.first().ok_or(Error::EmptyDataset)?;
        let state_dim = first.states.first().map(|s| s.len()).ok_or(Error::EmptyDataset)?;
        let action_dim = first.actions[0].len();
        for e in &episodes {
            check_len("episode action count", e.states.len(), e.actions.len())?;
            if e.is_empty() {
                return Err(Error::Format(format!("empty episode for task {}", e.task)));
            }
            for s in &e.states {
                check_len("episode state", state_dim, s.len())?;
            }
        }
        let normalizer = ActionNormalizer::fit(
            action_dim,
            episodes.iter().flat_map(|e| e.actions.iter().map(|a| a.as_slice())),
        )?;
        Ok(Self {
            suite: suite.to_string(),
            seed,
            per_task,
            state_dim,
            action_dim,
            tasks,
            normalizer,
            episodes,
        })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn episodes_for<'a>(&'a self, task: &'a str) -> impl Iterator<Item = &'a Episode> + 'a {
        self.episodes.iter().filter(move |e| e.task == task)
    }

    /// First `count` episodes of every task, in task order.
    pub fn take_per_task(&self, count: usize) -> Result<Self> {
        let episodes: Vec<Episode> = self
            .tasks
            .iter()
            .flat_map(|t| self.episodes_for(t).take(count).cloned())
            .collect();
        Self::new(&self.suite, self.seed, count, self.tasks.clone(), episodes)
    }

    /// Episodes of the named tasks only.
    pub fn select_tasks(&self, tasks: &[String]) -> Result<Self> {
        let episodes: Vec<Episode> = self
            .episodes
            .iter()
            .filter(|e| tasks.contains(&e.task))
            .cloned()
            .collect();
        Self::new(&self.suite, self.seed, self.per_task, tasks.to_vec(), episodes)
    }

    /// Concatenation; the normalizer is refitted over both.
    pub fn concat(&self, other: &EpisodeDataset) -> Result<Self> {
        let mut tasks = self.tasks.clone();
        for t in &other.tasks {
            if !tasks.contains(t) {
                tasks.push(t.clone());
            }
        }
        let mut episodes = self.episodes.clone();
        episodes.extend(other.episodes.iter().cloned());
        Self::new(&self.suite, self.seed, self.per_task, tasks, episodes)
    }

    pub fn write_jsonl<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = BufWriter::new(writer);
        let header = Header {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            suite: self.suite.clone(),
            seed: self.seed,
            per_task: self.per_task,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            tasks: self.tasks.clone(),
            normalizer: self.normalizer.clone(),
            episodes: self.episodes.len(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for e in &self.episodes {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: Read>(reader: R) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let header: Header = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::Format("dataset file is empty".into())),
        };
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "expected {DATASET_FORMAT} v{DATASET_VERSION}, found {} v{}",
                header.format, header.version
            )));
        }
        let mut episodes = Vec::with_capacity(header.episodes);
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                episodes.push(serde_json::from_str::<Episode>(&line)?);
            }
        }
        if episodes.len() != header.episodes {
            return Err(Error::Format(format!(
                "header declares {} episodes but file holds {}",
                header.episodes,
                episodes.len()
            )));
        }
        let mut ds = Self::new(&header.suite, header.seed, header.per_task, header.tasks, episodes)?;
        check_len("dataset state width", header.state_dim, ds.state_dim)?;
        check_len("dataset action width", header.action_dim, ds.action_dim)?;
        ds.normalizer = header.normalizer;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_jsonl(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_jsonl(std::fs::File::open(path)?)
    }
}

/// Runs the scripted expert once; returns the episode whatever the outcome.
pub fn expert_episode(spec: &super::EnvSpec, rng: &mut Rng) -> Result<Episode> {
    let mut env = Env::reset(spec, rng);
    let mode = rng.below(spec.modes());
    let mut states = Vec::new();
    let mut actions = Vec::new();
    while !env.done() {
        let a = spec.expert_action(env.state(), mode, rng);
        states.push(env.state().to_vec());
        env.step(&a)?;
        actions.push(a);
    }
    Ok(Episode {
        task: spec.name.clone(),
        task_id: spec.task_id,
        mode,
        states,
        actions,
        success: env.succeeded(),
    })
}

/// `per_task` successful expert episodes for every task of `suite`.
///
/// Failed attempts are discarded and resampled; the generator stream of each
/// attempt depends only on `seed`, the task name and the attempt index.
pub fn generate_demos(suite: &Suite, per_task: usize, seed: u64) -> Result<EpisodeDataset> {
    if per_task == 0 {
        return Err(Error::Config("per-task demo count must be at least 1".into()));
    }
    let root = Rng::new(seed);
    let mut episodes = Vec::with_capacity(per_task * suite.tasks.len());
    for spec in &suite.tasks {
        let task_root = root.child(task_stream(&spec.name));
        let attempts = ATTEMPT_FACTOR * per_task;
        let mut produced = 0;
        for attempt in 0..attempts {
            if produced == per_task {
                break;
            }
            let ep = expert_episode(spec, &mut task_root.child(attempt as u64))?;
            if ep.success {
                episodes.push(ep);
                produced += 1;
            }
        }
        if produced < per_task {
            return Err(Error::DemoGeneration {
                task: spec.name.clone(),
                produced,
                attempts,
            });
        }
    }
    let tasks = suite.tasks.iter().map(|t| t.name.clone()).collect();
    EpisodeDataset::new(&suite.name, seed, per_task, tasks, episodes)
}
