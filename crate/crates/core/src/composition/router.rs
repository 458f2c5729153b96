use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numerics::{Activation, FeedForwardNet, ForwardCache, Matrix, NetGradients, Rng};

/// Numerically stable softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|l| ((l - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Observation-conditioned weight head: an MLP to one logit per component,
/// followed by a tempered softmax so the weights live on the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Router {
    net: FeedForwardNet,
    temperature: f64,
}

impl Router {
    pub fn new(embed_dim: usize, hidden: &[usize], components: usize, rng: &mut Rng) -> Result<Self> {
        if components == 0 {
            return Err(Error::Config("router needs at least one component".into()));
        }
        Ok(Self {
            net: FeedForwardNet::mlp(embed_dim, hidden, components, Activation::Tanh, rng)?,
            temperature: 1.0,
        })
    }

    pub fn from_net(net: FeedForwardNet, temperature: f64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Config(format!("router temperature must be positive, got {temperature}")));
        }
        Ok(Self { net, temperature })
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Config(format!("router temperature must be positive, got {temperature}")));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn net(&self) -> &FeedForwardNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut FeedForwardNet {
        &mut self.net
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn components(&self) -> usize {
        self.net.output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    /// Simplex weights for one observation embedding.
    pub fn route(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        let logits = self.net.eval(embedding)?;
        Ok(softmax(&logits, self.temperature))
    }

    pub fn route_batch(&self, embeddings: &Matrix) -> Result<Matrix> {
        let logits = self.net.eval_batch(embeddings)?;
        Ok(self.softmax_rows(&logits))
    }

    /// Training forward pass; keeps the trace needed by [`Router::backward`].
    pub fn route_train(&self, embeddings: &Matrix) -> Result<(Matrix, ForwardCache)> {
        let (logits, cache) = self.net.forward_batch(embeddings)?;
        Ok((self.softmax_rows(&logits), cache))
    }

    fn softmax_rows(&self, logits: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(logits.rows(), logits.cols());
        for r in 0..logits.rows() {
            out.row_mut(r)
                .copy_from_slice(&softmax(logits.row(r), self.temperature));
        }
        out
    }

    /// Pulls `dL/dw` back through the softmax:
    /// `dL/dl_j = w_j (g_j - Σ_i w_i g_i) / T`.
    fn logit_gradient(&self, weights: &Matrix, d_weights: &Matrix) -> Result<Matrix> {
        check_len("router weight gradient rows", weights.rows(), d_weights.rows())?;
        check_len("router weight gradient cols", weights.cols(), d_weights.cols())?;
        let mut d_logits = Matrix::zeros(weights.rows(), weights.cols());
        for r in 0..weights.rows() {
            let w = weights.row(r);
            let g = d_weights.row(r);
            let dot: f64 = w.iter().zip(g).map(|(a, b)| a * b).sum();
            for (j, d) in d_logits.row_mut(r).iter_mut().enumerate() {
                *d = w[j] * (g[j] - dot) / self.temperature;
            }
        }
        Ok(d_logits)
    }

    /// Parameter and embedding gradients given `dL/dw`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        weights: &Matrix,
        d_weights: &Matrix,
    ) -> Result<(NetGradients, Matrix)> {
        let d_logits = self.logit_gradient(weights, d_weights)?;
        self.net.backward_batch(cache, &d_logits)
    }

    pub fn backward_input(&self, cache: &ForwardCache, weights: &Matrix, d_weights: &Matrix) -> Result<Matrix> {
        let d_logits = self.logit_gradient(weights, d_weights)?;
        self.net.backward_input_batch(cache, &d_logits)
    }

    /// Adds one output logit with zero weights and zero bias.
    pub fn extend(&mut self) -> Result<()> {
        let width = self.net.layers().last().expect("non-empty").in_dim();
        self.net.push_output_unit(&vec![0.0; width], 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Layer;

    fn logit_router(logits: &[f64], temperature: f64) -> Router {
        let n = logits.len();
        let layer = Layer::new(Matrix::zeros(n, 1), logits.to_vec(), Activation::Identity).unwrap();
        Router::from_net(FeedForwardNet::from_layers(vec![layer]).unwrap(), temperature).unwrap()
    }

    #[test]
    fn equal_logits_are_uniform() {
        let w = logit_router(&[0.3; 4], 1.0).route(&[1.0]).unwrap();
        assert_eq!(w, vec![0.25; 4]);
    }

    #[test]
    fn dominant_logit_saturates() {
        let w = logit_router(&[50.0, -1e3, -1e3, -1e3], 1.0).route(&[0.0]).unwrap();
        assert!(w[0] > 1.0 - 1e-12);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn high_temperature_flattens() {
        let w = logit_router(&[1.0, -0.5, 0.2, 0.9], 1e3).route(&[0.0]).unwrap();
        assert!(w.iter().all(|x| (x - 0.25).abs() < 1e-3), "{w:?}");
    }

    #[test]
    fn extension_adds_zero_logit() {
        let mut rng = Rng::new(2);
        let mut r = Router::new(3, &[4], 2, &mut rng).unwrap();
        let emb = [0.2, -0.4, 0.9];
        let before = r.net().eval(&emb).unwrap();
        r.extend().unwrap();
        let after = r.net().eval(&emb).unwrap();
        assert_eq!(&after[..2], &before[..]);
        assert_eq!(after[2], 0.0);
        let w = r.route(&emb).unwrap();
        let z: f64 = before.iter().map(|l| l.exp()).sum::<f64>() + 1.0;
        assert!((w[2] - 1.0 / z).abs() < 1e-12);
    }

    #[test]
    fn router_gradient_matches_finite_differences() {
        let mut rng = Rng::new(31);
        let mut r = Router::new(3, &[5], 4, &mut rng).unwrap().with_temperature(0.7).unwrap();
        let emb = Matrix::from_rows(&[rng.gaussian_vec(3), rng.gaussian_vec(3)]).unwrap();
        let probe = Matrix::from_rows(&[rng.gaussian_vec(4), rng.gaussian_vec(4)]).unwrap();
        let objective = |r: &Router, e: &Matrix| -> f64 {
            let w = r.route_batch(e).unwrap();
            w.as_slice().iter().zip(probe.as_slice()).map(|(a, b)| a * b).sum()
        };
        let (w, cache) = r.route_train(&emb).unwrap();
        let (g, d_emb) = r.backward(&cache, &w, &probe).unwrap();
        let analytic = g.flatten();
        let base = r.net().flat_params();
        let h = 1e-5;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            r.net_mut().set_flat_params(&p).unwrap();
            let up = objective(&r, &emb);
            p[i] -= 2.0 * h;
            r.net_mut().set_flat_params(&p).unwrap();
            let down = objective(&r, &emb);
            let num = (up - down) / (2.0 * h);
            assert!((num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-6) <= 1e-4);
        }
        r.net_mut().set_flat_params(&base).unwrap();
        for i in 0..emb.as_slice().len() {
            let mut e = emb.clone();
            e.as_mut_slice()[i] += h;
            let up = objective(&r, &e);
            e.as_mut_slice()[i] -= 2.0 * h;
            let down = objective(&r, &e);
            let num = (up - down) / (2.0 * h);
            let a = d_emb.as_slice()[i];
            assert!((num - a).abs() / num.abs().max(a.abs()).max(1e-6) <= 1e-4);
        }
    }
}
