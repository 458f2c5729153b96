use serde::{Deserialize, Serialize};

use super::Router;
use crate::diffusion::{forward_noise, DenoiserComponent, NoiseSchedule};
use crate::error::{check_len, Error, Result};
use crate::numerics::{FeedForwardNet, Matrix, NetGradients, Rng};

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableMask {
    pub encoder: bool,
    pub router: bool,
    pub components: Vec<bool>,
}

impl TrainableMask {
    pub fn all(components: usize) -> Self {
        Self {
            encoder: true,
            router: true,
            components: vec![true; components],
        }
    }

    pub fn none(components: usize) -> Self {
        Self {
            encoder: false,
            router: false,
            components: vec![false; components],
        }
    }

    pub fn any(&self) -> bool {
        self.encoder || self.router || self.components.iter().any(|c| *c)
    }
}

/// Borrowed view of the networks that make up a composed policy.
#[derive(Debug, Clone, Copy)]
pub struct ModelParts<'a> {
    pub encoder: &'a FeedForwardNet,
    pub router: &'a Router,
    pub components: &'a [DenoiserComponent],
}

/// Gradients of the mean joint loss; `None` for frozen groups.
#[derive(Debug, Clone)]
pub struct JointGradients {
    pub encoder: Option<NetGradients>,
    pub router: Option<NetGradients>,
    pub components: Vec<Option<NetGradients>>,
}

#[derive(Debug, Clone)]
pub struct JointLoss {
    /// Batch mean of `(1/D) ‖ε - Σ_i w_i ε_i‖²`.
    pub loss: f64,
    /// Batch mean of the router weights.
    pub mean_weights: Vec<f64>,
    pub grads: JointGradients,
}

/// Joint noise-prediction loss of the composed estimate on a batch.
///
/// Row `b` of `observations` conditions the clean window `actions[b]`. For
/// each row in order, `k ~ U{1..K}` and then `ε ~ N(0, I)` are drawn from
/// `rng`. Every component sees the same corrupted window and the shared
/// observation embedding.
pub fn joint_loss(
    parts: ModelParts<'_>,
    schedule: &NoiseSchedule,
    observations: &Matrix,
    actions: &Matrix,
    rng: &mut Rng,
    mask: &TrainableMask,
) -> Result<JointLoss> {
    let n = parts.components.len();
    let batch = observations.rows();
    if batch == 0 {
        return Err(Error::EmptyDataset);
    }
    check_len("router outputs", n, parts.router.components())?;
    check_len("trainable mask components", n, mask.components.len())?;
    check_len("action rows", batch, actions.rows())?;
    let dim = actions.cols();

    let mut steps = Vec::with_capacity(batch);
    let mut eps = Matrix::zeros(batch, dim);
    let mut noisy = Matrix::zeros(batch, dim);
    for b in 0..batch {
        let k = 1 + rng.below(schedule.steps());
        let e = rng.gaussian_vec(dim);
        let x = forward_noise(schedule, actions.row(b), k, &e)?;
        noisy.row_mut(b).copy_from_slice(&x.values);
        eps.row_mut(b).copy_from_slice(&e);
        steps.push(k);
    }

    let (embedding, enc_cache) = parts.encoder.forward_batch(observations)?;
    let (weights, router_cache) = parts.router.route_train(&embedding)?;

    let mut predictions = Vec::with_capacity(n);
    let mut caches = Vec::with_capacity(n);
    for (i, comp) in parts.components.iter().enumerate() {
        let (p, c) = comp.forward_train(&noisy, &embedding, &steps)?;
        if p.cols() != dim {
            return Err(Error::Dimension {
                context: format!("output of component {i}"),
                expected: dim,
                actual: p.cols(),
            });
        }
        predictions.push(p);
        caches.push(c);
    }

    let mut residual = Matrix::zeros(batch, dim);
    for b in 0..batch {
        let w = weights.row(b);
        let row = residual.row_mut(b);
        for (i, p) in predictions.iter().enumerate() {
            for (r, v) in row.iter_mut().zip(p.row(b)) {
                *r += w[i] * v;
            }
        }
        for (r, e) in row.iter_mut().zip(eps.row(b)) {
            *r -= e;
        }
    }
    let sq: f64 = residual.as_slice().iter().map(|r| r * r).sum();
    let loss = sq / (dim * batch) as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("joint loss".into()));
    }
    let mut mean_weights = vec![0.0; n];
    for b in 0..batch {
        for (m, w) in mean_weights.iter_mut().zip(weights.row(b)) {
            *m += w / batch as f64;
        }
    }

    let scale = 2.0 / (dim * batch) as f64;
    let d_agg = {
        let mut d = residual;
        for v in d.as_mut_slice() {
            *v *= scale;
        }
        d
    };

    let mut d_embedding = Matrix::zeros(batch, embedding.cols());
    let mut component_grads = Vec::with_capacity(n);
    for (i, (comp, cache)) in parts.components.iter().zip(&caches).enumerate() {
        if !(mask.components[i] || mask.encoder) {
            component_grads.push(None);
            continue;
        }
        let mut d_pred = d_agg.clone();
        for b in 0..batch {
            let w = weights.get(b, i);
            for v in d_pred.row_mut(b) {
                *v *= w;
            }
        }
        if mask.components[i] && mask.encoder {
            let (g, dc) = comp.backward(cache, &d_pred)?;
            add_into(&mut d_embedding, &dc);
            component_grads.push(Some(g));
        } else if mask.components[i] {
            component_grads.push(Some(comp.backward_params(cache, &d_pred)?));
        } else {
            add_into(&mut d_embedding, &comp.backward_cond(cache, &d_pred)?);
            component_grads.push(None);
        }
    }

    let router_grads = if mask.router || mask.encoder {
        let mut d_weights = Matrix::zeros(batch, n);
        for b in 0..batch {
            let g = d_agg.row(b);
            for (i, p) in predictions.iter().enumerate() {
                let dot: f64 = p.row(b).iter().zip(g).map(|(a, c)| a * c).sum();
                d_weights.set(b, i, dot);
            }
        }
        if mask.router {
            let (g, de) = parts.router.backward(&router_cache, &weights, &d_weights)?;
            if mask.encoder {
                add_into(&mut d_embedding, &de);
            }
            Some(g)
        } else {
            add_into(
                &mut d_embedding,
                &parts.router.backward_input(&router_cache, &weights, &d_weights)?,
            );
            None
        }
    } else {
        None
    };

    let encoder_grads = if mask.encoder {
        Some(parts.encoder.backward_params_batch(&enc_cache, &d_embedding)?)
    } else {
        None
    };

    Ok(JointLoss {
        loss,
        mean_weights,
        grads: JointGradients {
            encoder: encoder_grads,
            router: router_grads,
            components: component_grads,
        },
    })
}

fn add_into(acc: &mut Matrix, other: &Matrix) {
    for (a, b) in acc.as_mut_slice().iter_mut().zip(other.as_slice()) {
        *a += b;
    }
}
