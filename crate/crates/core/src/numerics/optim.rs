use serde::{Deserialize, Serialize};

use super::{FeedForwardNet, NetGradients, ParamKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment accumulators for one network, in parameter order.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn for_net(net: &FeedForwardNet, config: AdamConfig) -> Self {
        let mut shapes = Vec::new();
        net.visit_params(|_, _, s| shapes.push(s.len()));
        Self {
            config,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Fails without touching the network if
    /// any gradient entry is non-finite.
    pub fn step(&mut self, net: &mut FeedForwardNet, grads: &NetGradients) -> Result<()> {
        if grads.layers.len() * 2 != self.first.len() {
            return Err(Error::Dimension {
                context: "optimizer parameter groups".into(),
                expected: self.first.len(),
                actual: grads.layers.len() * 2,
            });
        }
        for (i, lg) in grads.layers.iter().enumerate() {
            crate::error::check_len("weight gradient", self.first[2 * i].len(), lg.weights.as_slice().len())?;
            crate::error::check_len("bias gradient", self.first[2 * i + 1].len(), lg.bias.len())?;
            if let Some(j) = lg.weights.as_slice().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient layer {i} weights[{j}]")));
            }
            if let Some(j) = lg.bias.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient layer {i} bias[{j}]")));
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (first, second) = (&mut self.first, &mut self.second);
        let mut group = 0;
        net.visit_params_mut(|layer, kind, params| {
            let g = match kind {
                ParamKind::Weights => grads.layers[layer].weights.as_slice(),
                ParamKind::Bias => &grads.layers[layer].bias,
            };
            let m = &mut first[group];
            let v = &mut second[group];
            for j in 0..params.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                params[j] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
            group += 1;
        });
        Ok(())
    }
}
