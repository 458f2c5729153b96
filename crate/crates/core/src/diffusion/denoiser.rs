use serde::{Deserialize, Serialize};

use super::NoisePredictor;
use crate::error::{check_len, Error, Result};
use crate::numerics::{Activation, FeedForwardNet, ForwardCache, Matrix, NetGradients, Rng};

/// Sinusoidal features of the diffusion step: `sin(k f_j), cos(k f_j)` with
/// `f_j = 10000^{-j/(dim/2)}`. `dim` must be even.
pub fn step_embedding(k: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
        let angle = k as f64 * freq;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

/// One noise-prediction network `ε_θ(a^k, c, k)`.
///
/// The network input is `[noisy action window ‖ conditioning ‖ step features]`
/// and the output has the length of the action window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserComponent {
    net: FeedForwardNet,
    action_len: usize,
    cond_len: usize,
    step_embed_dim: usize,
}

impl DenoiserComponent {
    pub fn new(
        action_len: usize,
        cond_len: usize,
        step_embed_dim: usize,
        hidden: &[usize],
        rng: &mut Rng,
    ) -> Result<Self> {
        if step_embed_dim % 2 != 0 {
            return Err(Error::Config(format!("step embedding width must be even, got {step_embed_dim}")));
        }
        let net = FeedForwardNet::mlp(
            action_len + cond_len + step_embed_dim,
            hidden,
            action_len,
            Activation::Tanh,
            rng,
        )?;
        Ok(Self {
            net,
            action_len,
            cond_len,
            step_embed_dim,
        })
    }

    /// Wraps an existing network; its widths must match the declared layout.
    pub fn from_net(net: FeedForwardNet, action_len: usize, cond_len: usize, step_embed_dim: usize) -> Result<Self> {
        check_len("denoiser input", action_len + cond_len + step_embed_dim, net.input_dim())?;
        check_len("denoiser output", action_len, net.output_dim())?;
        Ok(Self {
            net,
            action_len,
            cond_len,
            step_embed_dim,
        })
    }

    pub fn net(&self) -> &FeedForwardNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut FeedForwardNet {
        &mut self.net
    }

    pub fn action_len(&self) -> usize {
        self.action_len
    }

    pub fn cond_len(&self) -> usize {
        self.cond_len
    }

    pub fn step_embed_dim(&self) -> usize {
        self.step_embed_dim
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    /// Assembles the network input; `steps[r]` is the diffusion step of row `r`.
    pub fn assemble_input(&self, noisy: &Matrix, cond: &Matrix, steps: &[usize]) -> Result<Matrix> {
        check_len("denoiser noisy width", self.action_len, noisy.cols())?;
        check_len("denoiser conditioning width", self.cond_len, cond.cols())?;
        check_len("denoiser conditioning rows", noisy.rows(), cond.rows())?;
        check_len("denoiser step count", noisy.rows(), steps.len())?;
        let width = self.action_len + self.cond_len + self.step_embed_dim;
        let mut input = Matrix::zeros(noisy.rows(), width);
        let mut cached: Option<(usize, Vec<f64>)> = None;
        for r in 0..noisy.rows() {
            let k = steps[r];
            if cached.as_ref().map(|c| c.0) != Some(k) {
                cached = Some((k, step_embedding(k, self.step_embed_dim)));
            }
            let emb = &cached.as_ref().expect("just set").1;
            let row = input.row_mut(r);
            row[..self.action_len].copy_from_slice(noisy.row(r));
            row[self.action_len..self.action_len + self.cond_len].copy_from_slice(cond.row(r));
            row[self.action_len + self.cond_len..].copy_from_slice(emb);
        }
        Ok(input)
    }

    /// Training forward pass with per-row diffusion steps.
    pub fn forward_train(&self, noisy: &Matrix, cond: &Matrix, steps: &[usize]) -> Result<(Matrix, ForwardCache)> {
        let input = self.assemble_input(noisy, cond, steps)?;
        self.net.forward_batch(&input)
    }

    /// Gradients of the network parameters and of the conditioning input.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Matrix) -> Result<(NetGradients, Matrix)> {
        let (g, dx) = self.net.backward_batch(cache, d_out)?;
        Ok((g, dx.columns(self.action_len, self.cond_len)))
    }

    pub fn backward_params(&self, cache: &ForwardCache, d_out: &Matrix) -> Result<NetGradients> {
        self.net.backward_params_batch(cache, d_out)
    }

    pub fn backward_cond(&self, cache: &ForwardCache, d_out: &Matrix) -> Result<Matrix> {
        Ok(self
            .net
            .backward_input_batch(cache, d_out)?
            .columns(self.action_len, self.cond_len))
    }
}

impl NoisePredictor for DenoiserComponent {
    fn output_len(&self) -> usize {
        self.action_len
    }

    fn predict_batch(&self, noisy: &Matrix, cond: &Matrix, k: usize) -> Result<Matrix> {
        let steps = vec![k; noisy.rows()];
        let input = self.assemble_input(noisy, cond, &steps)?;
        self.net.eval_batch(&input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_embedding_shape_and_values() {
        let e = step_embedding(3, 16);
        assert_eq!(e.len(), 16);
        assert!((e[0] - 3f64.sin()).abs() < 1e-15);
        assert!((e[1] - 3f64.cos()).abs() < 1e-15);
        assert_eq!(step_embedding(0, 4), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn output_has_window_length() {
        let mut rng = Rng::new(1);
        let d = DenoiserComponent::new(6, 3, 4, &[8], &mut rng).unwrap();
        let out = d
            .predict_batch(&Matrix::zeros(2, 6), &Matrix::zeros(2, 3), 5)
            .unwrap();
        assert_eq!((out.rows(), out.cols()), (2, 6));
        assert!(d.predict_batch(&Matrix::zeros(1, 5), &Matrix::zeros(1, 3), 5).is_err());
    }
}
