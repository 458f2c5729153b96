//! Run configuration: TOML file, then command-line overrides.

use std::path::Path;

use anyhow::{Context, Result};
use fdp_core::adaptation::AdaptationConfig;
use fdp_core::bench::{make_suite, EvalOptions};
use fdp_core::policy::{PolicyConfig, TrainOptions};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "FDP_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    /// Demonstrations per task; adaptation uses the first
    /// `adaptation.demos_per_task` of them.
    pub per_task: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self { per_task: 25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seeds: usize,
    pub episodes: usize,
    pub top_k: Option<usize>,
    pub max_steps: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: 5,
            episodes: 40,
            top_k: None,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinualConfig {
    /// Leading tasks of the suite used for pretraining.
    pub pretrain_tasks: usize,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        Self { pretrain_tasks: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; falls back to `FDP_SEED`, then 0.
    pub seed: Option<u64>,
    pub suite: String,
    /// Suite providing the new tasks for `adapt`; defaults to `suite`.
    pub adapt_suite: Option<String>,
    pub demos: DemoConfig,
    pub policy: PolicyConfig,
    pub train: TrainOptions,
    pub eval: EvalConfig,
    pub adaptation: AdaptationConfig,
    pub continual: ContinualConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            suite: "reach4".into(),
            adapt_suite: None,
            demos: DemoConfig::default(),
            policy: PolicyConfig::default(),
            train: TrainOptions::default(),
            eval: EvalConfig::default(),
            adaptation: AdaptationConfig::default(),
            continual: ContinualConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    /// Fills the seed from the environment when unset and copies it into
    /// every sub-block, then checks module constraints.
    pub fn resolve(mut self) -> Result<Self> {
        if self.seed.is_none() {
            self.seed = match std::env::var(SEED_ENV) {
                Ok(v) => Some(v.trim().parse().with_context(|| format!("{SEED_ENV}={v} is not an integer"))?),
                Err(_) => Some(0),
            };
        }
        let seed = self.seed();
        self.train.seed = seed;
        self.adaptation.train.seed = seed;
        self.policy.validate()?;
        self.adaptation.validate()?;
        make_suite(&self.suite)?;
        if let Some(s) = &self.adapt_suite {
            make_suite(s)?;
        }
        if self.demos.per_task == 0 {
            anyhow::bail!(fdp_core::Error::Config("demos.per_task must be positive".into()));
        }
        if self.eval.seeds == 0 || self.eval.episodes == 0 {
            anyhow::bail!(fdp_core::Error::Config("eval seeds and episodes must be positive".into()));
        }
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            episodes: self.eval.episodes,
            seeds: self.eval.seeds,
            seed: self.seed(),
            max_steps: self.eval.max_steps,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("config.toml"), self.to_toml()?)?;
        Ok(())
    }
}
