//! Single-component DDPM machinery: the noise schedule, forward corruption,
//! the noise-prediction loss and the reverse update.
//!
//! Forward corruption is the variance-preserving form
//! `a^k = √ᾱ_k a^0 + √(1-ᾱ_k) ε`. The reverse update is the DDPM posterior
//! mean plus posterior noise; composed sampling uses exactly the same update
//! with a weighted sum of noise predictions in place of `ε̂`.

mod denoiser;
mod schedule;

pub use denoiser::{step_embedding, DenoiserComponent};
pub use schedule::{NoiseSchedule, ScheduleKind};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numerics::{Matrix, NetGradients, Rng};

/// Anything that predicts the noise in a batch of noisy action windows.
///
/// Rows of `noisy` and `cond` are samples; every row is at diffusion step `k`.
pub trait NoisePredictor: Sync {
    fn output_len(&self) -> usize;
    fn predict_batch(&self, noisy: &Matrix, cond: &Matrix, k: usize) -> Result<Matrix>;
}

/// A flattened action window at diffusion step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyAction {
    pub k: usize,
    pub values: Vec<f64>,
}

/// `√ᾱ_k a0 + √(1-ᾱ_k) eps`. Step 0 returns `a0` unchanged.
pub fn forward_noise(schedule: &NoiseSchedule, a0: &[f64], k: usize, eps: &[f64]) -> Result<NoisyAction> {
    check_len("forward_noise eps", a0.len(), eps.len())?;
    if k > schedule.steps() {
        return Err(Error::Index {
            what: "diffusion step",
            index: k,
            len: schedule.steps() + 1,
        });
    }
    let ab = schedule.alpha_bar(k);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(NoisyAction {
        k,
        values: a0.iter().zip(eps).map(|(a, e)| s * a + n * e).collect(),
    })
}

/// Sampling loop over the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Solver {
    /// Every step `K, K-1, ..., 1`.
    #[default]
    Ddpm,
    /// DDPM posterior jumps over a stride-subsampled step sequence
    /// `K, K-s, ..., 0`.
    Strided { stride: usize },
}

impl Solver {
    /// `(from, to)` pairs visited by the reverse loop, ending at step 0.
    pub fn transitions(&self, steps: usize) -> Vec<(usize, usize)> {
        let stride = match *self {
            Solver::Ddpm => 1,
            Solver::Strided { stride } => stride.max(1),
        };
        let mut out = Vec::new();
        let mut k = steps;
        while k > 0 {
            let next = k.saturating_sub(stride);
            out.push((k, next));
            k = next;
        }
        out
    }
}

/// Reverse loop settings: step sequence and optional clean-sample clipping.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Sampler {
    pub solver: Solver,
    /// When set, each step first forms the clean-sample estimate
    /// `(a^k - √(1-ᾱ_k) ε̂) / √ᾱ_k`, clamps it to `±clip` and takes the
    /// posterior mean from it. Without clamping the two forms coincide.
    pub clip_sample: Option<f64>,
}

impl From<Solver> for Sampler {
    fn from(solver: Solver) -> Self {
        Self {
            solver,
            clip_sample: None,
        }
    }
}

/// Posterior update of every row of `current` from step `from` to `to`
/// given the noise estimate `eps_hat`. Noise is drawn from `rngs[row]` only
/// when the posterior standard deviation is positive.
pub fn reverse_update(
    schedule: &NoiseSchedule,
    from: usize,
    to: usize,
    current: &mut Matrix,
    eps_hat: &Matrix,
    clip_sample: Option<f64>,
    rngs: &mut [Rng],
) -> Result<()> {
    check_len("reverse_update rows", current.rows(), eps_hat.rows())?;
    check_len("reverse_update width", current.cols(), eps_hat.cols())?;
    check_len("reverse_update rngs", current.rows(), rngs.len())?;
    if to >= from || from > schedule.steps() {
        return Err(Error::Config(format!("invalid reverse transition {from} -> {to}")));
    }
    let (scale, eps_scale, std) = schedule.posterior(from, to);
    let (ab_from, ab_to) = (schedule.alpha_bar(from), schedule.alpha_bar(to));
    let beta = 1.0 - ab_from / ab_to;
    let x0_coef = ab_to.sqrt() * beta / (1.0 - ab_from);
    let xk_coef = (1.0 - beta).sqrt() * (1.0 - ab_to) / (1.0 - ab_from);
    for (r, rng) in rngs.iter_mut().enumerate() {
        let row = current.row_mut(r);
        match clip_sample {
            None => {
                for (x, e) in row.iter_mut().zip(eps_hat.row(r)) {
                    *x = scale * (*x - eps_scale * e);
                }
            }
            Some(c) => {
                for (x, e) in row.iter_mut().zip(eps_hat.row(r)) {
                    let x0 = ((*x - (1.0 - ab_from).sqrt() * e) / ab_from.sqrt()).clamp(-c, c);
                    *x = x0_coef * x0 + xk_coef * *x;
                }
            }
        }
        if std > 0.0 {
            for x in row.iter_mut() {
                *x += std * rng.gaussian();
            }
        }
    }
    Ok(())
}

/// One reverse step `k → k-1` for a single window.
pub fn reverse_step(
    schedule: &NoiseSchedule,
    denoiser: &dyn NoisePredictor,
    ak: &NoisyAction,
    cond: &[f64],
    rng: &mut Rng,
) -> Result<NoisyAction> {
    if ak.k == 0 || ak.k > schedule.steps() {
        return Err(Error::Index {
            what: "reverse step",
            index: ak.k,
            len: schedule.steps() + 1,
        });
    }
    let mut x = Matrix::row_vector(&ak.values);
    let eps = denoiser.predict_batch(&x, &Matrix::row_vector(cond), ak.k)?;
    check_len("denoiser output", ak.values.len(), eps.cols())?;
    reverse_update(schedule, ak.k, ak.k - 1, &mut x, &eps, None, std::slice::from_mut(rng))?;
    Ok(NoisyAction {
        k: ak.k - 1,
        values: x.into_vec(),
    })
}

/// Draws `x^K ~ N(0, I)` for every row from that row's generator.
pub fn initial_noise(rows: usize, dim: usize, rngs: &mut [Rng]) -> Matrix {
    let mut x = Matrix::zeros(rows, dim);
    for (r, rng) in rngs.iter_mut().enumerate().take(rows) {
        for v in x.row_mut(r) {
            *v = rng.gaussian();
        }
    }
    x
}

/// Full reverse loop with a single denoiser. Row `r` of the result uses
/// conditioning row `r` and generator `rngs[r]`.
pub fn sample_single(
    schedule: &NoiseSchedule,
    sampler: impl Into<Sampler>,
    denoiser: &dyn NoisePredictor,
    cond: &Matrix,
    rngs: &mut [Rng],
) -> Result<Matrix> {
    let sampler = sampler.into();
    check_len("sample rngs", cond.rows(), rngs.len())?;
    let mut x = initial_noise(cond.rows(), denoiser.output_len(), rngs);
    for (from, to) in sampler.solver.transitions(schedule.steps()) {
        let eps = denoiser.predict_batch(&x, cond, from)?;
        reverse_update(schedule, from, to, &mut x, &eps, sampler.clip_sample, rngs)?;
    }
    Ok(x)
}

/// Mean squared error `mean((ε - ε̂)²)` and its gradient with respect to `ε̂`.
pub fn noise_mse(eps: &[f64], pred: &[f64]) -> (f64, Vec<f64>) {
    let d = eps.len() as f64;
    let mut loss = 0.0;
    let grad = eps
        .iter()
        .zip(pred)
        .map(|(e, p)| {
            let r = p - e;
            loss += r * r;
            2.0 * r / d
        })
        .collect();
    (loss / d, grad)
}

/// Output of [`component_loss`].
#[derive(Debug, Clone)]
pub struct ComponentLoss {
    pub loss: f64,
    pub k: usize,
    pub eps: Vec<f64>,
    pub grads: NetGradients,
    /// Gradient with respect to the conditioning (observation embedding).
    pub cond_grad: Vec<f64>,
}

/// Noise-prediction loss of one denoiser on one clean window.
///
/// Draws `k` uniformly from `1..=K`, then `ε ~ N(0, I)`, corrupts `a0` and
/// scores the prediction by mean squared error.
pub fn component_loss(
    denoiser: &DenoiserComponent,
    schedule: &NoiseSchedule,
    a0: &[f64],
    cond: &[f64],
    rng: &mut Rng,
) -> Result<ComponentLoss> {
    check_len("clean action window", denoiser.action_len(), a0.len())?;
    let k = 1 + rng.below(schedule.steps());
    let eps = rng.gaussian_vec(a0.len());
    let noisy = forward_noise(schedule, a0, k, &eps)?;
    let (pred, cache) = denoiser.forward_train(
        &Matrix::row_vector(&noisy.values),
        &Matrix::row_vector(cond),
        &[k],
    )?;
    let (loss, grad) = noise_mse(&eps, pred.as_slice());
    if !loss.is_finite() {
        return Err(Error::NonFinite("component loss".into()));
    }
    let (grads, cond_grad) = denoiser.backward(&cache, &Matrix::row_vector(&grad))?;
    Ok(ComponentLoss {
        loss,
        k,
        eps,
        grads,
        cond_grad: cond_grad.into_vec(),
    })
}
