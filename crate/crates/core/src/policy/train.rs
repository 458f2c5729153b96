use serde::{Deserialize, Serialize};

use super::FactorizedPolicy;
use crate::bench::EpisodeDataset;
use crate::composition::{joint_loss, TrainableMask};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, Matrix, OptimizerState, Rng};

const SPLIT_STREAM: u64 = 0x5eed_0001;
const VAL_STREAM: u64 = 0x5eed_0002;
const EPOCH_STREAM: u64 = 0x5eed_1000;
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Fraction of episodes held out for validation.
    pub val_fraction: f64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            learning_rate: 1e-3,
            seed: 0,
            val_fraction: 0.1,
            cosine_decay: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mse: f64,
    /// `None` when the dataset is too small to hold out an episode.
    pub val_mse: Option<f64>,
    pub mean_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub train_samples: usize,
    pub val_samples: usize,
    pub trainable_params: usize,
    pub total_params: usize,
}

impl TrainingLog {
    pub fn val_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_mse.unwrap_or(f64::NAN)).collect()
    }
}

/// Observations and normalized target windows, one row per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSamples {
    pub observations: Matrix,
    pub windows: Matrix,
}

impl TrainingSamples {
    pub fn len(&self) -> usize {
        self.observations.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.rows() == 0
    }

    fn select(&self, rows: &[usize]) -> (Matrix, Matrix) {
        (self.observations.select_rows(rows), self.windows.select_rows(rows))
    }
}

impl FactorizedPolicy {
    /// One sample per step of every listed episode. Windows past the episode
    /// end repeat its last action.
    pub fn training_samples(&self, dataset: &EpisodeDataset, episodes: &[usize]) -> Result<TrainingSamples> {
        let h = self.config.pred_horizon;
        let mut observations = Matrix::zeros(0, self.obs_dim());
        let mut windows = Matrix::zeros(0, self.config.window_len(self.action_dim));
        for &i in episodes {
            let ep = &dataset.episodes[i];
            for t in 0..ep.len() {
                observations.push_row(&self.observation(&ep.states, t, ep.task_id)?)?;
                let mut w = Vec::with_capacity(h * self.action_dim);
                for j in 0..h {
                    w.extend_from_slice(&ep.actions[(t + j).min(ep.len() - 1)]);
                }
                windows.push_row(&self.normalizer.normalize(&w))?;
            }
        }
        Ok(TrainingSamples { observations, windows })
    }

    /// Mean joint loss on `samples` with a fixed noise stream.
    pub fn evaluate_loss(&self, samples: &TrainingSamples, seed: u64) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let none = TrainableMask::none(self.components.len());
        let mut rng = Rng::new(seed);
        let rows: Vec<usize> = (0..samples.len()).collect();
        let mut total = 0.0;
        for chunk in rows.chunks(EVAL_CHUNK) {
            let (o, a) = samples.select(chunk);
            total += joint_loss(self.parts(), &self.schedule, &o, &a, &mut rng, &none)?.loss * chunk.len() as f64;
        }
        Ok(total / samples.len() as f64)
    }

    pub fn trainable_params(&self, mask: &TrainableMask) -> usize {
        let mut n = 0;
        if mask.encoder {
            n += self.encoder.num_params();
        }
        if mask.router {
            n += self.router.num_params();
        }
        n + self
            .components
            .iter()
            .zip(&mask.components)
            .filter(|(_, m)| **m)
            .map(|(c, _)| c.num_params())
            .sum::<usize>()
    }

    /// Joint denoising training of the groups selected by `mask`.
    ///
    /// A seeded `val_fraction` of episodes is held out; each epoch shuffles
    /// the remaining samples and takes one Adam step per minibatch. Logged
    /// validation loss uses the same noise draws every epoch.
    pub fn train(&mut self, dataset: &EpisodeDataset, opts: &TrainOptions, mask: &TrainableMask) -> Result<TrainingLog> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if mask.components.len() != self.components.len() {
            return Err(Error::Config(format!(
                "trainable mask covers {} components but the policy has {}",
                mask.components.len(),
                self.components.len()
            )));
        }
        if opts.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&opts.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        let root = Rng::new(opts.seed);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        root.child(SPLIT_STREAM).shuffle(&mut order);
        let n_val = if dataset.len() >= 2 && opts.val_fraction > 0.0 {
            ((dataset.len() as f64 * opts.val_fraction).round() as usize).clamp(1, dataset.len() - 1)
        } else {
            0
        };
        let (val_eps, train_eps) = order.split_at(n_val);
        let mut train_eps = train_eps.to_vec();
        train_eps.sort_unstable();
        let mut val_eps = val_eps.to_vec();
        val_eps.sort_unstable();
        let train = self.training_samples(dataset, &train_eps)?;
        let val = self.training_samples(dataset, &val_eps)?;

        let adam = AdamConfig {
            learning_rate: opts.learning_rate,
            ..AdamConfig::default()
        };
        let mut enc_opt = OptimizerState::for_net(&self.encoder, adam);
        let mut router_opt = OptimizerState::for_net(self.router.net(), adam);
        let mut comp_opts: Vec<OptimizerState> = self
            .components
            .iter()
            .map(|c| OptimizerState::for_net(c.net(), adam))
            .collect();

        let mut log = TrainingLog {
            epochs: Vec::with_capacity(opts.epochs),
            train_samples: train.len(),
            val_samples: val.len(),
            trainable_params: self.trainable_params(mask),
            total_params: self.num_params(),
        };
        let mut rows: Vec<usize> = (0..train.len()).collect();
        let total_steps = (opts.epochs * train.len().div_ceil(opts.batch_size)).max(1);
        let mut step = 0usize;
        for epoch in 0..opts.epochs {
            let mut rng = root.child(EPOCH_STREAM + epoch as u64);
            rng.shuffle(&mut rows);
            let mut sum = 0.0;
            let mut weight_sum = vec![0.0; self.components.len()];
            for batch in rows.chunks(opts.batch_size) {
                let (o, a) = train.select(batch);
                let out = joint_loss(self.parts(), &self.schedule, &o, &a, &mut rng, mask)?;
                sum += out.loss * batch.len() as f64;
                for (s, w) in weight_sum.iter_mut().zip(&out.mean_weights) {
                    *s += w * batch.len() as f64;
                }
                let lr = if opts.cosine_decay {
                    0.5 * opts.learning_rate * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
                } else {
                    opts.learning_rate
                };
                step += 1;
                enc_opt.config.learning_rate = lr;
                router_opt.config.learning_rate = lr;
                for o in &mut comp_opts {
                    o.config.learning_rate = lr;
                }
                let g = out.grads;
                if let Some(g) = g.encoder {
                    enc_opt.step(&mut self.encoder, &g)?;
                }
                if let Some(g) = g.router {
                    router_opt.step(self.router.net_mut(), &g)?;
                }
                for ((comp, opt), g) in self.components.iter_mut().zip(&mut comp_opts).zip(g.components) {
                    if let Some(g) = g {
                        opt.step(comp.net_mut(), &g)?;
                    }
                }
            }
            let denom = train.len().max(1) as f64;
            let val_mse = if val.is_empty() {
                None
            } else {
                Some(self.evaluate_loss(&val, opts.seed ^ VAL_STREAM)?)
            };
            let entry = EpochLog {
                epoch,
                train_mse: sum / denom,
                val_mse,
                mean_weights: weight_sum.into_iter().map(|w| w / denom).collect(),
            };
            log::debug!("epoch {epoch}: train {:.5} val {:?}", entry.train_mse, entry.val_mse);
            log.epochs.push(entry);
        }
        Ok(log)
    }
}
