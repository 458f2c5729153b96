//! Fully connected feed-forward networks with an explicit backward pass.
//!
//! A forward pass returns a [`ForwardCache`] holding every layer's input and
//! output. The cache is stamped with the network's revision; handing a cache
//! to `backward` after the parameters changed is an error, not a silent
//! wrong gradient.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{Matrix, Rng};
use crate::error::{Error, Result};

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Dense affine layer `y = act(W x + b)` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    weights: Matrix,
    bias: Vec<f64>,
    activation: Activation,
}

impl Layer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        crate::error::check_len("layer bias", weights.rows(), bias.len())?;
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("layer bias".into()));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn forward(&self, input: &Matrix) -> Matrix {
        let mut z = input.matmul_transposed(&self.weights);
        let act = self.activation;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *v = act.apply(*v + b);
            }
        }
        z
    }
}

/// Activation trace of one (batched) forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: u64,
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Matrix>,
}

impl ForwardCache {
    pub fn input(&self) -> &Matrix {
        &self.activations[0]
    }

    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("cache always holds the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Parameter gradients with the same shapes as a [`FeedForwardNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetGradients {
    pub layers: Vec<LayerGradients>,
}

impl NetGradients {
    pub fn zeros_like(net: &FeedForwardNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradients {
                    weights: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NetGradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.as_mut_slice().iter_mut().zip(b.weights.as_slice()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.as_mut_slice().iter_mut().for_each(|v| *v *= factor);
            l.bias.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Flattened in parameter order (`w0, b0, w1, b1, ...`).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Which parameter block of a layer a slice belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weights,
    Bias,
}

/// Stack of dense layers.
#[derive(Debug, Clone)]
pub struct FeedForwardNet {
    layers: Vec<Layer>,
    stamp: u64,
}

impl PartialEq for FeedForwardNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl FeedForwardNet {
    /// Xavier-uniform (tanh/identity) or He-uniform (relu) initialization
    /// with zero biases. `activations[i]` applies after layer `i`.
    pub fn new(widths: &[usize], activations: &[Activation], rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("a network needs at least two widths".into()));
        }
        crate::error::check_len("activations per layer", widths.len() - 1, activations.len())?;
        if widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (w, &act) in widths.windows(2).zip(activations) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = match act {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            let data = (0..fan_in * fan_out)
                .map(|_| (2.0 * rng.uniform() - 1.0) * limit)
                .collect();
            layers.push(Layer {
                weights: Matrix::from_vec(fan_out, fan_in, data)?,
                bias: vec![0.0; fan_out],
                activation: act,
            });
        }
        Ok(Self {
            layers,
            stamp: fresh_stamp(),
        })
    }

    /// Hidden layers use `hidden`, the output layer is linear.
    pub fn mlp(
        input: usize,
        hidden_widths: &[usize],
        output: usize,
        hidden: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden_widths);
        widths.push(output);
        let mut acts = vec![hidden; hidden_widths.len()];
        acts.push(Activation::Identity);
        Self::new(&widths, &acts, rng)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::LayerWidth {
                    layer: i + 1,
                    expected: pair[1].in_dim(),
                    actual: pair[0].out_dim(),
                });
            }
        }
        Ok(Self {
            layers,
            stamp: fresh_stamp(),
        })
    }

    /// Single linear layer with weight `I` and zero bias.
    pub fn identity(n: usize) -> Self {
        Self {
            layers: vec![Layer {
                weights: Matrix::identity(n),
                bias: vec![0.0; n],
                activation: Activation::Identity,
            }],
            stamp: fresh_stamp(),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(Layer::out_dim));
        w
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.in_dim() * l.out_dim() + l.out_dim())
            .sum()
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        if input.cols() != self.input_dim() {
            return Err(Error::LayerWidth {
                layer: 0,
                expected: self.input_dim(),
                actual: input.cols(),
            });
        }
        Ok(())
    }

    /// Batched forward pass; rows are samples.
    pub fn forward_batch(&self, input: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for layer in &self.layers {
            let next = layer.forward(activations.last().expect("non-empty"));
            activations.push(next);
        }
        let out = activations.last().expect("non-empty").clone();
        Ok((
            out,
            ForwardCache {
                stamp: self.stamp,
                activations,
            },
        ))
    }

    /// Batched forward pass without keeping the activation trace.
    pub fn eval_batch(&self, input: &Matrix) -> Result<Matrix> {
        self.check_input(input)?;
        let mut x = self.layers[0].forward(input);
        for layer in &self.layers[1..] {
            x = layer.forward(&x);
        }
        Ok(x)
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let (out, cache) = self.forward_batch(&Matrix::row_vector(input))?;
        Ok((out.into_vec(), cache))
    }

    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval_batch(&Matrix::row_vector(input))?.into_vec())
    }

    fn backprop(
        &self,
        cache: &ForwardCache,
        d_out: &Matrix,
        want_params: bool,
        want_input: bool,
    ) -> Result<(Option<NetGradients>, Option<Matrix>)> {
        if cache.stamp != self.stamp || cache.activations.len() != self.layers.len() + 1 {
            return Err(Error::StaleCache);
        }
        let out = cache.output();
        if d_out.rows() != out.rows() || d_out.cols() != out.cols() {
            return Err(Error::Dimension {
                context: "output gradient".into(),
                expected: out.rows() * out.cols(),
                actual: d_out.rows() * d_out.cols(),
            });
        }
        let mut grads = want_params.then(|| NetGradients::zeros_like(self));
        let mut upstream = d_out.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let y = &cache.activations[l + 1];
            let act = layer.activation;
            if act != Activation::Identity {
                for (g, &yv) in upstream.as_mut_slice().iter_mut().zip(y.as_slice()) {
                    *g *= act.derivative_from_output(yv);
                }
            }
            // `upstream` now holds dL/dz for layer l.
            if let Some(grads) = grads.as_mut() {
                let lg = &mut grads.layers[l];
                upstream.add_transposed_matmul(&cache.activations[l], &mut lg.weights);
                for r in 0..upstream.rows() {
                    for (b, g) in lg.bias.iter_mut().zip(upstream.row(r)) {
                        *b += g;
                    }
                }
            }
            if l > 0 || want_input {
                upstream = upstream.matmul(&layer.weights);
            }
        }
        Ok((grads, want_input.then_some(upstream)))
    }

    /// Parameter and input gradients for a batched forward pass. Parameter
    /// gradients are summed over the batch rows.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        d_out: &Matrix,
    ) -> Result<(NetGradients, Matrix)> {
        let (g, x) = self.backprop(cache, d_out, true, true)?;
        Ok((g.expect("requested"), x.expect("requested")))
    }

    pub fn backward_params_batch(&self, cache: &ForwardCache, d_out: &Matrix) -> Result<NetGradients> {
        Ok(self.backprop(cache, d_out, true, false)?.0.expect("requested"))
    }

    pub fn backward_input_batch(&self, cache: &ForwardCache, d_out: &Matrix) -> Result<Matrix> {
        Ok(self.backprop(cache, d_out, false, true)?.1.expect("requested"))
    }

    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64]) -> Result<(NetGradients, Vec<f64>)> {
        let (g, x) = self.backward_batch(cache, &Matrix::row_vector(d_out))?;
        Ok((g, x.into_vec()))
    }

    /// Visits `(layer, kind, slice)` in parameter order.
    pub fn visit_params(&self, mut f: impl FnMut(usize, ParamKind, &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            f(i, ParamKind::Weights, l.weights.as_slice());
            f(i, ParamKind::Bias, &l.bias);
        }
    }

    /// Mutable parameter visitor. Invalidates outstanding forward caches.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(usize, ParamKind, &mut [f64])) {
        self.stamp = fresh_stamp();
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(i, ParamKind::Weights, l.weights.as_mut_slice());
            f(i, ParamKind::Bias, &mut l.bias);
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_params(|_, _, s| out.extend_from_slice(s));
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        crate::error::check_len("flat parameters", self.num_params(), values.len())?;
        let mut offset = 0;
        self.visit_params_mut(|_, _, s| {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        });
        Ok(())
    }

    /// Little-endian bytes of every parameter, in parameter order.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_params() * 8);
        self.visit_params(|_, _, s| {
            for v in s {
                out.extend_from_slice(&v.to_le_bytes());
            }
        });
        out
    }

    /// Appends one output unit to the last layer.
    pub fn push_output_unit(&mut self, weights: &[f64], bias: f64) -> Result<()> {
        self.stamp = fresh_stamp();
        let last = self.layers.last_mut().expect("non-empty");
        last.weights.push_row(weights)?;
        last.bias.push(bias);
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// On-disk form: widths, per-layer activations, then row-major weights
/// (`out × in`) and biases for each layer.
#[derive(Serialize, Deserialize)]
struct NetRecord {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    layers: Vec<LayerRecord>,
}

impl Serialize for FeedForwardNet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        NetRecord {
            widths: self.widths(),
            activations: self.layers.iter().map(|l| l.activation).collect(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    weights: l.weights.as_slice().to_vec(),
                    bias: l.bias.clone(),
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FeedForwardNet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let rec = NetRecord::deserialize(d)?;
        if rec.widths.len() != rec.layers.len() + 1 || rec.activations.len() != rec.layers.len() {
            return Err(D::Error::custom("widths/activations/layers length mismatch"));
        }
        let layers = rec
            .layers
            .into_iter()
            .zip(rec.activations)
            .zip(rec.widths.windows(2))
            .map(|((l, act), w)| {
                Layer::new(Matrix::from_vec(w[1], w[0], l.weights)?, l.bias, act)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(D::Error::custom)?;
        FeedForwardNet::from_layers(layers).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight-line reimplementation used as an independent oracle.
    fn reference_forward(net: &FeedForwardNet, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for l in net.layers() {
            let mut next = Vec::with_capacity(l.out_dim());
            for o in 0..l.out_dim() {
                let mut z = l.bias()[o];
                for i in 0..l.in_dim() {
                    z += l.weights().get(o, i) * cur[i];
                }
                next.push(match l.activation() {
                    Activation::Tanh => z.tanh(),
                    Activation::Relu => {
                        if z > 0.0 {
                            z
                        } else {
                            0.0
                        }
                    }
                    Activation::Identity => z,
                });
            }
            cur = next;
        }
        cur
    }

    fn scalar_loss(out: &[f64], weights: &[f64]) -> f64 {
        out.iter().zip(weights).map(|(o, w)| o * w).sum()
    }

    #[test]
    fn identity_layer_is_identity() {
        let net = FeedForwardNet::identity(3);
        assert_eq!(net.eval(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let layer = Layer::new(Matrix::zeros(2, 3), vec![0.3, -0.7], Activation::Identity).unwrap();
        let net = FeedForwardNet::from_layers(vec![layer]).unwrap();
        assert_eq!(net.eval(&[5.0, 1.0, -9.0]).unwrap(), vec![0.3, -0.7]);
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = Rng::new(11);
        let net = FeedForwardNet::new(
            &[4, 7, 5, 3],
            &[Activation::Tanh, Activation::Relu, Activation::Identity],
            &mut rng,
        )
        .unwrap();
        for _ in 0..20 {
            let x = rng.gaussian_vec(4);
            let got = net.eval(&x).unwrap();
            let want = reference_forward(&net, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_names_layer() {
        let mut rng = Rng::new(1);
        let net = FeedForwardNet::mlp(3, &[4], 2, Activation::Tanh, &mut rng).unwrap();
        match net.eval(&[1.0, 2.0]) {
            Err(Error::LayerWidth { layer: 0, expected: 3, actual: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        let w = Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6]).unwrap();
        let net =
            FeedForwardNet::from_layers(vec![Layer::new(w, vec![0.0; 2], Activation::Identity).unwrap()])
                .unwrap();
        let x = [1.5, -2.0, 0.25];
        let g = [0.7, -1.1];
        let (_, cache) = net.forward(&x).unwrap();
        let (grads, dx) = net.backward(&cache, &g).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert!((grads.layers[0].weights.get(o, i) - g[o] * x[i]).abs() < 1e-15);
            }
        }
        assert_eq!(grads.layers[0].bias, g.to_vec());
        let expected_dx: Vec<f64> = (0..3)
            .map(|i| g[0] * net.layers()[0].weights().get(0, i) + g[1] * net.layers()[0].weights().get(1, i))
            .collect();
        for (a, b) in dx.iter().zip(&expected_dx) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(5);
        let net = FeedForwardNet::mlp(3, &[6, 6], 2, Activation::Tanh, &mut rng).unwrap();
        let (_, cache) = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        let (grads, dx) = net.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(grads.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = Rng::new(5);
        let mut net = FeedForwardNet::mlp(2, &[3], 1, Activation::Tanh, &mut rng).unwrap();
        let (_, cache) = net.forward(&[0.1, 0.2]).unwrap();
        net.visit_params_mut(|_, _, s| s.iter_mut().for_each(|v| *v *= 0.5));
        assert!(matches!(net.backward(&cache, &[1.0]), Err(Error::StaleCache)));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let shapes: &[(&[usize], &[Activation])] = &[
            (&[3, 5, 2], &[Activation::Tanh, Activation::Identity]),
            (&[4, 6, 6, 3], &[Activation::Tanh, Activation::Tanh, Activation::Identity]),
            (&[2, 8, 1], &[Activation::Relu, Activation::Tanh]),
            (&[5, 4], &[Activation::Identity]),
        ];
        let mut rng = Rng::new(2024);
        for (widths, acts) in shapes {
            let mut net = FeedForwardNet::new(widths, acts, &mut rng).unwrap();
            let x = rng.gaussian_vec(widths[0]);
            let probe = rng.gaussian_vec(*widths.last().unwrap());
            let (_, cache) = net.forward(&x).unwrap();
            let (grads, dx) = net.backward(&cache, &probe).unwrap();
            let analytic = grads.flatten();
            let base = net.flat_params();
            let h = 1e-5;
            for i in 0..base.len() {
                let mut p = base.clone();
                p[i] += h;
                net.set_flat_params(&p).unwrap();
                let up = scalar_loss(&net.eval(&x).unwrap(), &probe);
                p[i] -= 2.0 * h;
                net.set_flat_params(&p).unwrap();
                let down = scalar_loss(&net.eval(&x).unwrap(), &probe);
                let numeric = (up - down) / (2.0 * h);
                let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
                assert!(rel <= 1e-4, "param {i}: {numeric} vs {}", analytic[i]);
            }
            net.set_flat_params(&base).unwrap();
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp[i] += h;
                let up = scalar_loss(&net.eval(&xp).unwrap(), &probe);
                xp[i] -= 2.0 * h;
                let down = scalar_loss(&net.eval(&xp).unwrap(), &probe);
                let numeric = (up - down) / (2.0 * h);
                let rel = (numeric - dx[i]).abs() / numeric.abs().max(dx[i].abs()).max(1e-6);
                assert!(rel <= 1e-4);
            }
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = Rng::new(9);
        let net = FeedForwardNet::mlp(3, &[5], 2, Activation::Tanh, &mut rng).unwrap();
        let text = serde_json::to_string(&net).unwrap();
        let back: FeedForwardNet = serde_json::from_str(&text).unwrap();
        assert_eq!(net.param_bytes(), back.param_bytes());
        assert_eq!(net.widths(), back.widths());
    }

    #[test]
    fn param_count_formula() {
        let mut rng = Rng::new(3);
        let net = FeedForwardNet::mlp(7, &[11, 5], 3, Activation::Tanh, &mut rng).unwrap();
        assert_eq!(net.num_params(), 7 * 11 + 11 + 11 * 5 + 5 + 5 * 3 + 3);
    }
}
