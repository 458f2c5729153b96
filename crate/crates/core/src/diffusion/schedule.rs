use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// β linearly spaced over `[1e-4, 0.02]`.
    Linear,
    /// Squared-cosine cumulative signal level with offset `s = 0.008`,
    /// per-step β capped at 0.999.
    Cosine,
}

const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.02;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Variance-preserving DDPM noise schedule over steps `0..=K`.
///
/// Index 0 is the clean sample: `β_0 = 0`, `ᾱ_0 = 1`. The reverse update from
/// step `k` to `k - 1` is written
///
/// `a^{k-1} = α_k (a^k - γ_k ε̂) + σ_k z`
///
/// with `α_k = 1/√(1-β_k)`, `γ_k = β_k/√(1-ᾱ_k)` and `σ_k = √β_k` for
/// `k ≥ 2`, `σ_1 = 0` (the last step returns the posterior mean).
///
/// `σ_k² = β_k` is the upper of the two standard DDPM variance choices. The
/// lower one, `β_k (1-ᾱ_{k-1})/(1-ᾱ_k)`, under-disperses a non-degenerate
/// target by several percent at `K = 100`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRecord", into = "ScheduleRecord")]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRecord {
    steps: usize,
    kind: ScheduleKind,
    /// β_1..β_K.
    betas: Vec<f64>,
}

impl From<NoiseSchedule> for ScheduleRecord {
    fn from(s: NoiseSchedule) -> Self {
        Self {
            steps: s.steps(),
            kind: s.kind,
            betas: s.betas[1..].to_vec(),
        }
    }
}

impl TryFrom<ScheduleRecord> for NoiseSchedule {
    type Error = Error;

    fn try_from(r: ScheduleRecord) -> Result<Self> {
        if r.betas.len() != r.steps {
            return Err(Error::Format(format!(
                "schedule declares {} steps but stores {} betas",
                r.steps,
                r.betas.len()
            )));
        }
        NoiseSchedule::from_betas(r.kind, &r.betas)
    }
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("diffusion needs at least 2 steps, got {steps}")));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| {
                    LINEAR_BETA_START
                        + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (steps - 1) as f64
                })
                .collect(),
            ScheduleKind::Cosine => {
                let f = |k: usize| {
                    let t = (k as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (t * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                let f0 = f(0);
                (1..=steps)
                    .map(|k| (1.0 - (f(k) / f0) / (f(k - 1) / f0)).clamp(0.0, MAX_BETA))
                    .collect()
            }
        };
        Self::from_betas(kind, &betas)
    }

    /// Builds the schedule from `β_1..β_K`, validating every invariant.
    pub fn from_betas(kind: ScheduleKind, betas: &[f64]) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::Config("diffusion needs at least 2 steps".into()));
        }
        if betas.iter().any(|b| !(b.is_finite() && *b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("betas must be non-decreasing".into()));
        }
        let mut all = Vec::with_capacity(betas.len() + 1);
        all.push(0.0);
        all.extend_from_slice(betas);
        let mut alpha_bars = Vec::with_capacity(all.len());
        let mut acc = 1.0;
        alpha_bars.push(acc);
        for b in &all[1..] {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self {
            kind,
            betas: all,
            alpha_bars,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `K`.
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        1.0 / (1.0 - self.betas[k]).sqrt()
    }

    pub fn gamma(&self, k: usize) -> f64 {
        self.betas[k] / (1.0 - self.alpha_bars[k]).sqrt()
    }

    pub fn sigma(&self, k: usize) -> f64 {
        if k <= 1 {
            0.0
        } else {
            self.betas[k].sqrt()
        }
    }

    /// Coefficients `(mean_scale, eps_scale, std)` of the posterior jump from
    /// step `from` to an earlier step `to`:
    /// `a^{to} = mean_scale · (a^{from} - eps_scale · ε̂) + std · z`.
    pub fn posterior(&self, from: usize, to: usize) -> (f64, f64, f64) {
        debug_assert!(to < from && from <= self.steps());
        let ab_from = self.alpha_bars[from];
        let ab_to = self.alpha_bars[to];
        let beta = if to + 1 == from {
            self.betas[from]
        } else {
            1.0 - ab_from / ab_to
        };
        let mean_scale = 1.0 / (1.0 - beta).sqrt();
        let eps_scale = beta / (1.0 - ab_from).sqrt();
        let std = if to == 0 { 0.0 } else { beta.sqrt() };
        (mean_scale, eps_scale, std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_too_few_steps() {
        assert!(NoiseSchedule::new(1, ScheduleKind::Cosine).is_err());
        assert!(NoiseSchedule::new(0, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn cosine_terminal_is_near_pure_noise() {
        let s = NoiseSchedule::new(100, ScheduleKind::Cosine).unwrap();
        // Closed form: f(K) = cos²(π/2) = 0, so β_K hits the 0.999 cap and
        // ᾱ_K = 0.001 · ᾱ_{K-1}.
        assert!(s.alpha_bar(100) < 0.01);
        assert_eq!(s.beta(100), MAX_BETA);
        let f = |k: f64| (((k / 100.0 + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        assert!((s.alpha_bar(50) - f(50.0) / f(0.0)).abs() < 1e-12);
    }

    #[test]
    fn schedule_invariants() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for steps in [2, 10, 50, 100, 1000] {
                let s = NoiseSchedule::new(steps, kind).unwrap();
                assert_eq!(s.alpha_bar(0), 1.0);
                for k in 1..=steps {
                    assert!(s.beta(k) > 0.0 && s.beta(k) < 1.0);
                    assert!(s.alpha_bar(k) < s.alpha_bar(k - 1), "{kind:?} {steps} {k}");
                    assert!(s.sigma(k) >= 0.0 && s.sigma(k).is_finite());
                    assert!(s.alpha(k).is_finite() && s.gamma(k).is_finite());
                    if k > 1 {
                        assert!(s.beta(k) >= s.beta(k - 1));
                    }
                }
                assert_eq!(s.sigma(1), 0.0);
            }
        }
    }

    #[test]
    fn linear_endpoints() {
        let s = NoiseSchedule::new(100, ScheduleKind::Linear).unwrap();
        assert!((s.beta(1) - 1e-4).abs() < 1e-18);
        assert!((s.beta(100) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn single_step_posterior_matches_named_coefficients() {
        let s = NoiseSchedule::new(20, ScheduleKind::Cosine).unwrap();
        for k in 1..=20 {
            let (a, g, sd) = s.posterior(k, k - 1);
            assert_eq!(a, s.alpha(k));
            assert_eq!(g, s.gamma(k));
            assert_eq!(sd, s.sigma(k));
        }
    }

    #[test]
    fn serde_round_trip() {
        let s = NoiseSchedule::new(30, ScheduleKind::Cosine).unwrap();
        let back: NoiseSchedule = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(s, back);
    }
}
