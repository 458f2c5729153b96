//! Score composition across denoisers.
//!
//! The composed noise estimate is `Σ_i w_i ε_i`, with router weights `w` on
//! the simplex. Because each `ε_i` is a scaled score of its component
//! distribution, the sum is the score of `Π p_i^{w_i}`; sampling runs the same
//! DDPM posterior update used for a single denoiser.
//!
//! Sums over components always run in ascending component index so results
//! are reproducible regardless of how the evaluations were scheduled.

mod loss;
mod router;

pub use loss::{joint_loss, JointGradients, JointLoss, ModelParts, TrainableMask};
pub use router::{softmax, Router};

use std::sync::atomic::{AtomicU64, Ordering};

use crate::diffusion::{initial_noise, reverse_update, NoisePredictor, NoiseSchedule, Sampler};
use crate::error::{check_len, Error, Result};
use crate::numerics::{Matrix, Rng};

/// Per-component predictions, their weights and the weighted sum.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedScore {
    pub per_component: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub aggregate: Vec<f64>,
}

/// Counts single-row denoiser evaluations and reverse steps.
#[derive(Debug, Default)]
pub struct EvalCounter {
    evaluations: AtomicU64,
    steps: AtomicU64,
}

impl EvalCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Total single-row denoiser evaluations.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    /// Total row-steps of the reverse loop (one per row per transition).
    pub fn row_steps(&self) -> u64 {
        self.steps.load(Ordering::Relaxed)
    }

    /// Mean denoiser evaluations per row per reverse step.
    pub fn evaluations_per_step(&self) -> f64 {
        self.evaluations() as f64 / self.row_steps().max(1) as f64
    }

    fn add(&self, evaluations: u64, steps: u64) {
        self.evaluations.fetch_add(evaluations, Ordering::Relaxed);
        self.steps.fetch_add(steps, Ordering::Relaxed);
    }
}

fn check_simplex(weights: &[f64]) -> Result<()> {
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("weights are not on the simplex: {weights:?}")));
    }
    Ok(())
}

/// Components used for sampling and their weights, ascending by index.
///
/// Without `top_k`, or with `top_k ≥ N`, every component keeps its weight
/// unchanged. Otherwise the `top_k` largest weights are kept (ties go to the
/// lower index) and renormalized to sum to one.
pub fn select_top_k(weights: &[f64], top_k: Option<usize>) -> Result<Vec<(usize, f64)>> {
    let n = weights.len();
    match top_k {
        Some(0) => Err(Error::Config("top_k must be at least 1".into())),
        Some(k) if k < n => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
            let mut chosen: Vec<usize> = order[..k].to_vec();
            chosen.sort_unstable();
            let total: f64 = chosen.iter().map(|&i| weights[i]).sum();
            if total <= 0.0 {
                let uniform = 1.0 / k as f64;
                return Ok(chosen.into_iter().map(|i| (i, uniform)).collect());
            }
            Ok(chosen.into_iter().map(|i| (i, weights[i] / total)).collect())
        }
        _ => Ok(weights.iter().copied().enumerate().collect()),
    }
}

/// Weighted sum of component noise predictions for one window at step `k`.
pub fn composed_score(
    components: &[&dyn NoisePredictor],
    weights: &[f64],
    ak: &[f64],
    cond: &[f64],
    k: usize,
) -> Result<ComposedScore> {
    check_len("component weights", components.len(), weights.len())?;
    let x = Matrix::row_vector(ak);
    let c = Matrix::row_vector(cond);
    let mut per_component = Vec::with_capacity(components.len());
    let mut aggregate = vec![0.0; ak.len()];
    for (i, (comp, &w)) in components.iter().zip(weights).enumerate() {
        let eps = comp.predict_batch(&x, &c, k)?.into_vec();
        if eps.len() != ak.len() {
            return Err(Error::Dimension {
                context: format!("output of component {i}"),
                expected: ak.len(),
                actual: eps.len(),
            });
        }
        for (a, e) in aggregate.iter_mut().zip(&eps) {
            *a += w * e;
        }
        per_component.push(eps);
    }
    Ok(ComposedScore {
        per_component,
        weights: weights.to_vec(),
        aggregate,
    })
}

/// Reverse diffusion on the weighted composition of `components`.
///
/// Row `r` samples with conditioning `cond[r]`, simplex weights
/// `weights[r]` (held fixed across all steps) and generator `rngs[r]`. With
/// `top_k`, each row evaluates only its selected components.
#[allow(clippy::too_many_arguments)]
pub fn sample_composed(
    schedule: &NoiseSchedule,
    sampler: impl Into<Sampler>,
    components: &[&dyn NoisePredictor],
    cond: &Matrix,
    weights: &Matrix,
    top_k: Option<usize>,
    rngs: &mut [Rng],
    counter: Option<&EvalCounter>,
) -> Result<Matrix> {
    let sampler = sampler.into();
    let n = components.len();
    if n == 0 {
        return Err(Error::Config("composition needs at least one component".into()));
    }
    let rows = cond.rows();
    check_len("weight rows", rows, weights.rows())?;
    check_len("weight columns", n, weights.cols())?;
    check_len("sample rngs", rows, rngs.len())?;
    let dim = components[0].output_len();
    for (i, c) in components.iter().enumerate() {
        if c.output_len() != dim {
            return Err(Error::Dimension {
                context: format!("output of component {i}"),
                expected: dim,
                actual: c.output_len(),
            });
        }
    }

    // For every component: the rows it serves and the weight it gets there.
    let mut assignments: Vec<(Vec<usize>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); n];
    for r in 0..rows {
        check_simplex(weights.row(r))?;
        for (i, w) in select_top_k(weights.row(r), top_k)? {
            assignments[i].0.push(r);
            assignments[i].1.push(w);
        }
    }

    let mut x = initial_noise(rows, dim, rngs);
    for (from, to) in sampler.solver.transitions(schedule.steps()) {
        let mut aggregate = Matrix::zeros(rows, dim);
        let mut evaluations = 0u64;
        for (comp, (served, ws)) in components.iter().zip(&assignments) {
            if served.is_empty() {
                continue;
            }
            let eps = if served.len() == rows {
                comp.predict_batch(&x, cond, from)?
            } else {
                comp.predict_batch(&x.select_rows(served), &cond.select_rows(served), from)?
            };
            evaluations += served.len() as u64;
            for (j, (&r, &w)) in served.iter().zip(ws).enumerate() {
                for (a, e) in aggregate.row_mut(r).iter_mut().zip(eps.row(j)) {
                    *a += w * e;
                }
            }
        }
        if let Some(c) = counter {
            c.add(evaluations, rows as u64);
        }
        reverse_update(schedule, from, to, &mut x, &aggregate, sampler.clip_sample, rngs)?;
    }
    Ok(x)
}
