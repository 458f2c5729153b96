//! Specialization diagnostics: solo rollouts, routing traces, pairwise score
//! similarity and aligned validation curves.

use serde::{Deserialize, Serialize};

use crate::bench::{rollout, EnvSpec, EpisodeDataset, RolloutRecord};
use crate::diffusion::{forward_noise, NoisePredictor};
use crate::error::{check_len, Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::policy::{FactorizedPolicy, PolicyAgent, TrainingLog};

pub const DEFAULT_PROBES: usize = 256;

/// Rollout with the router bypassed and all weight on `component`.
pub fn solo_rollout(
    policy: &FactorizedPolicy,
    component: usize,
    spec: &EnvSpec,
    seed: u64,
    max_steps: Option<usize>,
) -> Result<RolloutRecord> {
    if component >= policy.num_components() {
        return Err(Error::Index {
            what: "component",
            index: component,
            len: policy.num_components(),
        });
    }
    rollout(&PolicyAgent::new(policy).solo(component), spec, seed, max_steps)
}

/// `step,w0,...` rows of a rollout's routing weights, one per replanning.
pub fn weight_trace_csv(record: &RolloutRecord, exec_horizon: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let n = record.weight_trace.first().map_or(0, |r| r.len());
    let mut header = vec!["step".to_string()];
    header.extend((0..n).map(|i| format!("w{i}")));
    w.write_record(&header)?;
    for (i, row) in record.weight_trace.iter().enumerate() {
        let mut rec = vec![(i * exec_horizon).to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One similarity probe: an observation with a noisy normalized window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub observation: Vec<f64>,
    pub noisy: Vec<f64>,
    pub k: usize,
}

/// `count` probes drawn uniformly over the steps of `dataset`, each noised
/// to a uniform diffusion step.
pub fn probe_set(policy: &FactorizedPolicy, dataset: &EpisodeDataset, count: usize, seed: u64) -> Result<Vec<Probe>> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let samples = policy.training_samples(dataset, &all)?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = Rng::new(seed);
    let steps = policy.schedule().steps();
    (0..count)
        .map(|_| {
            let row = rng.below(samples.len());
            let k = 1 + rng.below(steps);
            let eps = rng.gaussian_vec(samples.windows.cols());
            let noisy = forward_noise(policy.schedule(), samples.windows.row(row), k, &eps)?;
            Ok(Probe {
                observation: samples.observations.row(row).to_vec(),
                noisy: noisy.values,
                k,
            })
        })
        .collect()
}

/// Mean pairwise cosine similarity between component noise predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub values: Vec<Vec<f64>>,
    pub probes_used: usize,
    /// Probes where some component predicted an all-zero vector.
    pub probes_skipped: usize,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    pub fn off_diagonal(&self) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| self.values[i][j])
            .collect()
    }

    /// Symmetric, unit diagonal within `tol`, entries within [-1, 1].
    pub fn is_well_formed(&self, tol: f64) -> bool {
        let n = self.len();
        (0..n).all(|i| {
            (self.values[i][i] - 1.0).abs() <= tol
                && (0..n).all(|j| {
                    self.values[i][j] == self.values[j][i] && self.values[i][j].abs() <= 1.0 + tol
                })
        })
    }

    /// `component,c0,...` with one row per component.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["component".to_string()];
        header.extend((0..self.len()).map(|i| format!("c{i}")));
        w.write_record(&header)?;
        for (i, row) in self.values.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        finish(w)
    }
}

fn cosine(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Similarity of arbitrary predictors. `cond` holds one conditioning row per
/// probe; `noisy[p]` and `steps[p]` give the rest of probe `p`.
pub fn similarity_of(
    predictors: &[&dyn NoisePredictor],
    cond: &Matrix,
    noisy: &Matrix,
    steps: &[usize],
) -> Result<SimilarityMatrix> {
    let n = predictors.len();
    check_len("probe conditioning rows", steps.len(), cond.rows())?;
    check_len("probe window rows", steps.len(), noisy.rows())?;
    if steps.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sum = vec![vec![0.0; n]; n];
    let (mut used, mut skipped) = (0, 0);
    for (p, &k) in steps.iter().enumerate() {
        let c = Matrix::row_vector(cond.row(p));
        let x = Matrix::row_vector(noisy.row(p));
        let preds = predictors
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let out = m.predict_batch(&x, &c, k)?;
                check_len(&format!("prediction of component {i}"), x.cols(), out.cols())?;
                Ok(out.into_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        let norms: Vec<f64> = preds.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        if norms.iter().any(|v| *v == 0.0 || !v.is_finite()) {
            skipped += 1;
            continue;
        }
        used += 1;
        for i in 0..n {
            for j in i..n {
                sum[i][j] += cosine(&preds[i], &preds[j], norms[i], norms[j]);
            }
        }
    }
    if skipped > 0 {
        log::warn!("similarity: skipped {skipped} probes with zero-norm predictions");
    }
    let denom = used.max(1) as f64;
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = sum[i][j] / denom;
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    Ok(SimilarityMatrix {
        values,
        probes_used: used,
        probes_skipped: skipped,
    })
}

/// Similarity between the components of `policy` over `probes`.
pub fn score_similarity(policy: &FactorizedPolicy, probes: &[Probe]) -> Result<SimilarityMatrix> {
    if probes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let obs = Matrix::from_rows(&probes.iter().map(|p| p.observation.clone()).collect::<Vec<_>>())?;
    let noisy = Matrix::from_rows(&probes.iter().map(|p| p.noisy.clone()).collect::<Vec<_>>())?;
    let steps: Vec<usize> = probes.iter().map(|p| p.k).collect();
    let cond = policy.encode_batch(&obs)?;
    let refs: Vec<&dyn NoisePredictor> = policy.components().iter().map(|c| c as &dyn NoisePredictor).collect();
    similarity_of(&refs, &cond, &noisy, &steps)
}

/// Per-epoch validation MSE of several runs, aligned by epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub labels: Vec<String>,
    /// `rows[e][r]` is run `r` at epoch `e`.
    pub rows: Vec<Vec<f64>>,
    pub truncated: bool,
}

/// Aligns validation curves, cutting every run to the shortest one.
pub fn convergence_report(runs: &[(&str, &TrainingLog)]) -> Result<ConvergenceTable> {
    if runs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let curves: Vec<Vec<f64>> = runs.iter().map(|(_, l)| l.val_curve()).collect();
    let shortest = curves.iter().map(|c| c.len()).min().unwrap_or(0);
    let truncated = curves.iter().any(|c| c.len() != shortest);
    if truncated {
        log::warn!("convergence report: epoch counts differ, truncating to {shortest}");
    }
    Ok(ConvergenceTable {
        labels: runs.iter().map(|(l, _)| l.to_string()).collect(),
        rows: (0..shortest).map(|e| curves.iter().map(|c| c[e]).collect()).collect(),
        truncated,
    })
}

impl ConvergenceTable {
    /// `epoch,val_mse_<label>,...`
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["epoch".to_string()];
        header.extend(self.labels.iter().map(|l| format!("val_mse_{l}")));
        w.write_record(&header)?;
        for (e, row) in self.rows.iter().enumerate() {
            let mut rec = vec![e.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        finish(w)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let labels = r
            .headers()?
            .iter()
            .skip(1)
            .map(|h| {
                h.strip_prefix("val_mse_")
                    .map(str::to_string)
                    .ok_or_else(|| Error::Format(format!("unexpected column `{h}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| Error::Format(format!("bad value `{v}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            check_len("convergence row", labels.len(), row.len())?;
            rows.push(row);
        }
        Ok(Self {
            labels,
            rows,
            truncated: false,
        })
    }
}
