//! The composed policy: observation encoder, denoiser components, router,
//! noise schedule and receding-horizon execution settings.

mod agent;
mod checkpoint;
mod train;

pub use agent::PolicyAgent;
pub use checkpoint::{CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use train::{EpochLog, TrainOptions, TrainingLog, TrainingSamples};

use serde::{Deserialize, Serialize};

use crate::bench::{stack_history, ActionNormalizer, EpisodeDataset};
use crate::composition::{sample_composed, EvalCounter, ModelParts, Router};
use crate::diffusion::{DenoiserComponent, NoisePredictor, NoiseSchedule, Sampler, ScheduleKind, Solver};
use crate::error::{check_len, Error, Result};
use crate::numerics::{Activation, FeedForwardNet, Matrix, Rng};

/// Sampled normalized actions are clamped to this magnitude.
pub const ACTION_CLAMP: f64 = 1.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub components: usize,
    pub embed_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub denoiser_hidden: Vec<usize>,
    pub router_hidden: Vec<usize>,
    pub step_embed_dim: usize,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    pub solver: Solver,
    /// Clamp applied to the clean-sample estimate at every reverse step.
    pub clip_sample: Option<f64>,
    pub obs_history: usize,
    pub pred_horizon: usize,
    pub exec_horizon: usize,
    pub temperature: f64,
    /// Width of the one-hot task id appended to observations (0 = none).
    pub task_slots: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            components: 4,
            embed_dim: 64,
            encoder_hidden: Vec::new(),
            denoiser_hidden: vec![256, 256],
            router_hidden: vec![64],
            step_embed_dim: 16,
            diffusion_steps: 100,
            schedule: ScheduleKind::Cosine,
            solver: Solver::Ddpm,
            clip_sample: Some(1.0),
            obs_history: 2,
            pred_horizon: 16,
            exec_horizon: 8,
            temperature: 1.0,
            task_slots: 0,
        }
    }
}

fn mlp_params(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.components == 0 {
            return fail("components must be at least 1");
        }
        if self.embed_dim == 0 {
            return fail("embed_dim must be positive");
        }
        if self.step_embed_dim % 2 != 0 {
            return fail("step_embed_dim must be even");
        }
        if self.diffusion_steps < 2 {
            return fail("diffusion_steps must be at least 2");
        }
        if self.obs_history == 0 || self.pred_horizon == 0 {
            return fail("obs_history and pred_horizon must be positive");
        }
        if self.exec_horizon == 0 || self.exec_horizon > self.pred_horizon {
            return fail("exec_horizon must lie in 1..=pred_horizon");
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return fail("temperature must be positive");
        }
        if matches!(self.clip_sample, Some(c) if !(c.is_finite() && c > 0.0)) {
            return fail("clip_sample must be positive");
        }
        if let Solver::Strided { stride: 0 } = self.solver {
            return fail("solver stride must be positive");
        }
        if self.encoder_hidden.iter().chain(&self.denoiser_hidden).chain(&self.router_hidden).any(|w| *w == 0) {
            return fail("hidden widths must be positive");
        }
        Ok(())
    }

    pub fn obs_dim(&self, state_dim: usize) -> usize {
        self.obs_history * state_dim + self.task_slots
    }

    pub fn window_len(&self, action_dim: usize) -> usize {
        self.pred_horizon * action_dim
    }

    /// Total parameter count of a policy built from this configuration.
    pub fn param_count(&self, state_dim: usize, action_dim: usize) -> usize {
        let mut enc = vec![self.obs_dim(state_dim)];
        enc.extend(&self.encoder_hidden);
        enc.push(self.embed_dim);
        let mut router = vec![self.embed_dim];
        router.extend(&self.router_hidden);
        router.push(self.components);
        let window = self.window_len(action_dim);
        let mut den = vec![window + self.embed_dim + self.step_embed_dim];
        den.extend(&self.denoiser_hidden);
        den.push(window);
        mlp_params(&enc) + mlp_params(&router) + self.components * mlp_params(&den)
    }

    /// Copy with `components` denoisers whose hidden layers all share the
    /// width that brings the total parameter count closest to `target`.
    pub fn matched_to(&self, components: usize, target: usize, state_dim: usize, action_dim: usize) -> Self {
        let depth = self.denoiser_hidden.len().max(1);
        let mut cfg = Self {
            components,
            ..self.clone()
        };
        let mut best = (usize::MAX, 1);
        for w in 1..=4096 {
            cfg.denoiser_hidden = vec![w; depth];
            let total = cfg.param_count(state_dim, action_dim);
            let gap = total.abs_diff(target);
            if gap < best.0 {
                best = (gap, w);
            }
            if total > target {
                break;
            }
        }
        cfg.denoiser_hidden = vec![best.1; depth];
        cfg
    }
}

/// Inference-time choices.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ActOptions {
    /// Evaluate only the `top_k` highest-weight components.
    pub top_k: Option<usize>,
    /// Bypass the router and use this component alone.
    pub solo: Option<usize>,
}

/// Sampled windows for a batch of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ActBatch {
    /// Denormalized windows, one `pred_horizon × action_dim` block per row.
    pub windows: Vec<Vec<Vec<f64>>>,
    /// Weights used for each row.
    pub weights: Matrix,
}

/// `p(a | o) ∝ Π_i p_i(a | o)^{w_i(o)}` realized at the score level.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedPolicy {
    pub(crate) config: PolicyConfig,
    pub(crate) state_dim: usize,
    pub(crate) action_dim: usize,
    pub(crate) encoder: FeedForwardNet,
    pub(crate) router: Router,
    pub(crate) components: Vec<DenoiserComponent>,
    pub(crate) schedule: NoiseSchedule,
    pub(crate) normalizer: ActionNormalizer,
}

impl FactorizedPolicy {
    /// Fresh policy; every network draws from its own stream of `seed`.
    pub fn new(
        config: PolicyConfig,
        state_dim: usize,
        action_dim: usize,
        normalizer: ActionNormalizer,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        check_len("normalizer width", action_dim, normalizer.dim())?;
        let root = Rng::new(seed);
        let mut enc_widths = vec![config.obs_dim(state_dim)];
        enc_widths.extend(&config.encoder_hidden);
        enc_widths.push(config.embed_dim);
        let acts = vec![Activation::Tanh; enc_widths.len() - 1];
        let encoder = FeedForwardNet::new(&enc_widths, &acts, &mut root.child(0))?;
        let router = Router::new(config.embed_dim, &config.router_hidden, config.components, &mut root.child(1))?
            .with_temperature(config.temperature)?;
        let components = (0..config.components)
            .map(|i| {
                DenoiserComponent::new(
                    config.window_len(action_dim),
                    config.embed_dim,
                    config.step_embed_dim,
                    &config.denoiser_hidden,
                    &mut root.child(100 + i as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let schedule = NoiseSchedule::new(config.diffusion_steps, config.schedule)?;
        Ok(Self {
            config,
            state_dim,
            action_dim,
            encoder,
            router,
            components,
            schedule,
            normalizer,
        })
    }

    /// Fresh policy sized for `dataset`, using its normalizer.
    pub fn for_dataset(config: PolicyConfig, dataset: &EpisodeDataset, seed: u64) -> Result<Self> {
        Self::new(config, dataset.state_dim, dataset.action_dim, dataset.normalizer.clone(), seed)
    }

    /// Assembles a policy from explicit parts, checking every interface.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        config: PolicyConfig,
        state_dim: usize,
        action_dim: usize,
        encoder: FeedForwardNet,
        router: Router,
        components: Vec<DenoiserComponent>,
        schedule: NoiseSchedule,
        normalizer: ActionNormalizer,
    ) -> Result<Self> {
        let p = Self {
            config,
            state_dim,
            action_dim,
            encoder,
            router,
            components,
            schedule,
            normalizer,
        };
        p.check()?;
        Ok(p)
    }

    pub(crate) fn check(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        check_len("encoder input", c.obs_dim(self.state_dim), self.encoder.input_dim())?;
        check_len("encoder output", c.embed_dim, self.encoder.output_dim())?;
        check_len("router input", c.embed_dim, self.router.net().input_dim())?;
        check_len("component count", c.components, self.components.len())?;
        check_len("router outputs", c.components, self.router.components())?;
        check_len("normalizer width", self.action_dim, self.normalizer.dim())?;
        check_len("schedule steps", c.diffusion_steps, self.schedule.steps())?;
        for (i, comp) in self.components.iter().enumerate() {
            if comp.action_len() != c.window_len(self.action_dim) || comp.cond_len() != c.embed_dim {
                return Err(Error::Dimension {
                    context: format!("interface of component {i}"),
                    expected: c.window_len(self.action_dim),
                    actual: comp.action_len(),
                });
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.config.obs_dim(self.state_dim)
    }

    pub fn encoder(&self) -> &FeedForwardNet {
        &self.encoder
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn components(&self) -> &[DenoiserComponent] {
        &self.components
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn normalizer(&self) -> &ActionNormalizer {
        &self.normalizer
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params()
            + self.router.num_params()
            + self.components.iter().map(|c| c.num_params()).sum::<usize>()
    }

    /// Replaces the router (its output count must match the components).
    pub fn set_router(&mut self, router: Router) -> Result<()> {
        check_len("router outputs", self.components.len(), router.components())?;
        check_len("router input", self.config.embed_dim, router.net().input_dim())?;
        self.router = router;
        Ok(())
    }

    /// Sampling loop override, e.g. a strided solver for faster inference.
    pub fn set_solver(&mut self, solver: Solver) -> Result<()> {
        let mut c = self.config.clone();
        c.solver = solver;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    /// Drops every component from index `n` on, with the matching router
    /// rows.
    pub fn truncate_components(&mut self, n: usize, router: Router) -> Result<()> {
        if n == 0 || n > self.components.len() {
            return Err(Error::Index {
                what: "component count",
                index: n,
                len: self.components.len() + 1,
            });
        }
        self.components.truncate(n);
        self.config.components = n;
        self.set_router(router)
    }

    pub fn sampler(&self) -> Sampler {
        Sampler {
            solver: self.config.solver,
            clip_sample: self.config.clip_sample,
        }
    }

    pub(crate) fn parts(&self) -> ModelParts<'_> {
        ModelParts {
            encoder: &self.encoder,
            router: &self.router,
            components: &self.components,
        }
    }

    /// Policy input for step `t` of a state sequence: the stacked history,
    /// followed by the one-hot task id when task slots are configured.
    pub fn observation(&self, states: &[Vec<f64>], t: usize, task_id: usize) -> Result<Vec<f64>> {
        if states.is_empty() {
            return Err(Error::EmptyDataset);
        }
        check_len("state width", self.state_dim, states[0].len())?;
        let mut obs = stack_history(states, t, self.config.obs_history);
        if self.config.task_slots > 0 {
            if task_id >= self.config.task_slots {
                return Err(Error::Index {
                    what: "task slot",
                    index: task_id,
                    len: self.config.task_slots,
                });
            }
            let mut hot = vec![0.0; self.config.task_slots];
            hot[task_id] = 1.0;
            obs.extend(hot);
        }
        Ok(obs)
    }

    pub fn encode_observation(&self, obs: &[f64]) -> Result<Vec<f64>> {
        check_len("observation", self.obs_dim(), obs.len())?;
        self.encoder.eval(obs)
    }

    pub fn encode_batch(&self, obs: &Matrix) -> Result<Matrix> {
        check_len("observation", self.obs_dim(), obs.cols())?;
        self.encoder.eval_batch(obs)
    }

    /// Router weights for a batch of observations.
    pub fn route_batch(&self, obs: &Matrix) -> Result<Matrix> {
        self.router.route_batch(&self.encode_batch(obs)?)
    }

    /// Normalized windows and weights for every observation row. The router
    /// runs once per call; row `r` draws all its noise from `rngs[r]`.
    pub fn compositional_sample(
        &self,
        obs: &Matrix,
        rngs: &mut [Rng],
        opts: ActOptions,
        counter: Option<&EvalCounter>,
    ) -> Result<(Matrix, Matrix)> {
        let n = self.components.len();
        if let Some(k) = opts.top_k {
            if k == 0 || k > n {
                return Err(Error::Config(format!("top_k must lie in 1..={n}, got {k}")));
            }
        }
        let embedding = self.encode_batch(obs)?;
        let (weights, top_k) = match opts.solo {
            Some(i) => {
                if i >= n {
                    return Err(Error::Index {
                        what: "component",
                        index: i,
                        len: n,
                    });
                }
                let mut w = Matrix::zeros(obs.rows(), n);
                for r in 0..obs.rows() {
                    w.set(r, i, 1.0);
                }
                (w, Some(1))
            }
            None => (self.router.route_batch(&embedding)?, opts.top_k),
        };
        let refs: Vec<&dyn NoisePredictor> = self.components.iter().map(|c| c as &dyn NoisePredictor).collect();
        let mut x = sample_composed(
            &self.schedule,
            self.sampler(),
            &refs,
            &embedding,
            &weights,
            top_k,
            rngs,
            counter,
        )?;
        for v in x.as_mut_slice() {
            *v = v.clamp(-ACTION_CLAMP, ACTION_CLAMP);
        }
        Ok((x, weights))
    }

    /// Denormalized action windows for a batch of observations.
    pub fn act_batch(
        &self,
        obs: &Matrix,
        rngs: &mut [Rng],
        opts: ActOptions,
        counter: Option<&EvalCounter>,
    ) -> Result<ActBatch> {
        let (x, weights) = self.compositional_sample(obs, rngs, opts, counter)?;
        let windows = (0..x.rows())
            .map(|r| {
                self.normalizer
                    .denormalize(x.row(r))
                    .chunks(self.action_dim)
                    .map(|c| c.to_vec())
                    .collect()
            })
            .collect();
        Ok(ActBatch { windows, weights })
    }

    /// One denormalized `pred_horizon × action_dim` window.
    pub fn act(&self, obs: &[f64], rng: &mut Rng, top_k: Option<usize>) -> Result<Vec<Vec<f64>>> {
        let out = self.act_batch(
            &Matrix::row_vector(obs),
            std::slice::from_mut(rng),
            ActOptions { top_k, solo: None },
            None,
        )?;
        Ok(out.windows.into_iter().next().expect("one row"))
    }
}
