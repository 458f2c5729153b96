//! `fdp`: demonstration generation, training, evaluation, adaptation and
//! analysis for factorized diffusion policies.
//!
//! Every command writes into `--out` and leaves the resolved `config.toml`
//! there; rerunning with that file reproduces the outputs byte for byte.
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "fdp", version, about = "Factorized diffusion policy experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    suite: Option<String>,
    /// Worker threads for rollouts and evaluation; results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Clone, Default)]
pub struct PolicyFlags {
    #[arg(long)]
    components: Option<usize>,
    /// Denoiser hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    diffusion_steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    per_task: Option<usize>,
}

#[derive(Args, Clone, Default)]
pub struct EvalFlags {
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args, Clone, Default)]
pub struct AdaptFlags {
    /// full, router, router_encoder or new_module.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    replay_per_task: Option<usize>,
    #[arg(long)]
    adapt_epochs: Option<usize>,
    #[arg(long)]
    demos_per_task: Option<usize>,
    #[arg(long)]
    adapt_suite: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted demonstrations for a suite.
    GenDemos {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        per_task: Option<usize>,
    },
    /// Train a policy on a demonstration file (generated when omitted).
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyFlags,
        #[arg(long)]
        demos: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured suite.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Adapt a checkpoint to new tasks.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        adapt: AdaptFlags,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        /// New-task demonstrations (generated from the adaptation suite when omitted).
        #[arg(long)]
        demos: Option<PathBuf>,
        /// Pretraining demonstrations to replay from.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Pretrain on the leading tasks, then add one component per remaining task.
    Continual {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyFlags,
        #[command(flatten)]
        adapt: AdaptFlags,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        pretrain_tasks: Option<usize>,
        /// Start from this checkpoint instead of pretraining.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export similarity, solo-rollout, routing-trace and convergence tables.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Demonstrations to draw similarity probes from (generated when omitted).
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long, default_value_t = fdp_core::analysis::DEFAULT_PROBES)]
        probes: usize,
        /// Training logs to align, as `label=path`.
        #[arg(long = "log")]
        logs: Vec<String>,
    },
}

/// Failure classified by exit code.
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let usage = e.chain().any(|c| {
            matches!(
                c.downcast_ref::<fdp_core::Error>(),
                Some(fdp_core::Error::Config(_) | fdp_core::Error::UnknownSuite { .. })
            ) || c.downcast_ref::<toml::de::Error>().is_some()
        });
        if usage {
            Failure::Usage(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

impl From<fdp_core::Error> for Failure {
    fn from(e: fdp_core::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn configure(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    if let Some(s) = &common.suite {
        cfg.suite = s.clone();
    }
    if let Some(j) = common.jobs {
        if j == 0 {
            return Err(Failure::Usage(anyhow::anyhow!("--jobs must be positive")));
        }
        // A second initialization only happens in-process and keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    Ok(cfg)
}

impl PolicyFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.components {
            cfg.policy.components = v;
        }
        if let Some(v) = &self.hidden {
            cfg.policy.denoiser_hidden = v.clone();
        }
        if let Some(v) = self.diffusion_steps {
            cfg.policy.diffusion_steps = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = self.per_task {
            cfg.demos.per_task = v;
        }
    }
}

impl EvalFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.seeds {
            cfg.eval.seeds = v;
        }
        if let Some(v) = self.episodes {
            cfg.eval.episodes = v;
        }
        if self.top_k.is_some() {
            cfg.eval.top_k = self.top_k;
        }
        if self.max_steps.is_some() {
            cfg.eval.max_steps = self.max_steps;
        }
    }
}

impl AdaptFlags {
    fn apply(&self, cfg: &mut RunConfig) -> Result<(), Failure> {
        if let Some(s) = &self.strategy {
            cfg.adaptation.strategy = serde_json::from_value(serde_json::Value::String(s.clone())).map_err(|_| {
                Failure::Usage(anyhow::anyhow!(
                    "unknown strategy `{s}`; expected full, router, router_encoder or new_module"
                ))
            })?;
        }
        if let Some(v) = self.replay_per_task {
            cfg.adaptation.replay_per_task = v;
        }
        if let Some(v) = self.adapt_epochs {
            cfg.adaptation.train.epochs = v;
        }
        if let Some(v) = self.demos_per_task {
            cfg.adaptation.demos_per_task = v;
        }
        if self.adapt_suite.is_some() {
            cfg.adapt_suite = self.adapt_suite.clone();
        }
        Ok(())
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenDemos { common, per_task } => {
            let mut cfg = configure(&common)?;
            if let Some(n) = per_task {
                cfg.demos.per_task = n;
            }
            commands::gen_demos(&cfg.resolve()?, &common.out)
        }
        Command::Train { common, policy, demos } => {
            let mut cfg = configure(&common)?;
            policy.apply(&mut cfg);
            commands::train(&cfg.resolve()?, &common.out, demos.as_deref())
        }
        Command::Eval { common, eval, checkpoint } => {
            let mut cfg = configure(&common)?;
            eval.apply(&mut cfg);
            commands::eval(&cfg.resolve()?, &common.out, &checkpoint)
        }
        Command::Adapt {
            common,
            adapt,
            eval,
            checkpoint,
            demos,
            replay,
        } => {
            let mut cfg = configure(&common)?;
            adapt.apply(&mut cfg)?;
            eval.apply(&mut cfg);
            commands::adapt(&cfg.resolve()?, &common.out, &checkpoint, demos.as_deref(), replay.as_deref())
        }
        Command::Continual {
            common,
            policy,
            adapt,
            eval,
            pretrain_tasks,
            checkpoint,
        } => {
            let mut cfg = configure(&common)?;
            if common.suite.is_none() && common.config.is_none() {
                cfg.suite = "continual12".into();
            }
            policy.apply(&mut cfg);
            adapt.apply(&mut cfg)?;
            eval.apply(&mut cfg);
            if let Some(n) = pretrain_tasks {
                cfg.continual.pretrain_tasks = n;
            }
            commands::continual(&cfg.resolve()?, &common.out, checkpoint.as_deref())
        }
        Command::Analyze {
            common,
            eval,
            checkpoint,
            demos,
            probes,
            logs,
        } => {
            let mut cfg = configure(&common)?;
            eval.apply(&mut cfg);
            commands::analyze(&cfg.resolve()?, &common.out, &checkpoint, demos.as_deref(), probes, &logs)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
