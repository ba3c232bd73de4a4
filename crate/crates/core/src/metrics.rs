//! Evaluation metrics: MAPE, empirical CRPS, QQ-plot deviation and top-k accuracy.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Minimum number of intervals for a trustworthy QQ deviation.
pub const QQP_MIN_INTERVALS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mape {
    /// Percent.
    pub value: f64,
    pub evaluated: usize,
    /// Events skipped because the true time was not positive.
    pub exclusions: usize,
}

/// `100 · mean |t̂ − t| / t` over events with `t > 0`.
pub fn mape(predicted: &[f64], truth: &[f64]) -> Result<Mape> {
    assert_eq!(predicted.len(), truth.len(), "mape length mismatch");
    let mut sum = 0.0;
    let mut n = 0;
    let mut exclusions = 0;
    for (p, t) in predicted.iter().zip(truth) {
        if *t > 0.0 {
            sum += (p - t).abs() / t;
            n += 1;
        } else {
            exclusions += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyEval);
    }
    Ok(Mape { value: 100.0 * sum / n as f64, evaluated: n, exclusions })
}

/// `(1/S) Σ_k |x_k − y| − (1/(2S²)) Σ_k Σ_j |x_k − x_j|`.
pub fn crps_empirical(samples: &[f64], truth: f64) -> Result<f64> {
    let s = samples.len();
    if s < 2 {
        return Err(Error::Config(format!("CRPS needs at least 2 samples, got {s}")));
    }
    let n = s as f64;
    let first = samples.iter().map(|x| (x - truth).abs()).sum::<f64>() / n;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Σ_k Σ_j |x_k − x_j| = 2 Σ_i (2i − S + 1) x_(i) over sorted order
    let pair: f64 = sorted.iter().enumerate().map(|(i, x)| (2.0 * i as f64 - n + 1.0) * x).sum::<f64>() * 2.0;
    Ok(first - pair / (2.0 * n * n))
}

/// Mean CRPS over events.
pub fn crps_mean(samples: &[Vec<f64>], truth: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyEval);
    }
    let mut sum = 0.0;
    for (s, t) in samples.iter().zip(truth) {
        sum += crps_empirical(s, *t)?;
    }
    Ok(sum / samples.len() as f64)
}

/// `−ln(1 − F̂(y))` with the empirical CDF of `samples` clipped to
/// `[1/(S+1), S/(S+1)]`.
pub fn empirical_cumulative_hazard(samples: &[f64], truth: f64) -> f64 {
    let s = samples.len() as f64;
    let below = samples.iter().filter(|x| **x <= truth).count() as f64;
    let f = (below / s).clamp(1.0 / (s + 1.0), s / (s + 1.0));
    -(-f).ln_1p()
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Quantile levels 0.01, 0.02, …, 0.99.
pub fn qqp_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QqpDev {
    pub value: f64,
    pub intervals: usize,
    /// Fewer than [`QQP_MIN_INTERVALS`] intervals were available.
    pub insufficient: bool,
}

/// Mean absolute gap between the empirical quantiles of the integrated
/// hazards and the `Exp(1)` quantiles over [`qqp_grid`].
pub fn qqp_dev(hazards: &[f64]) -> Result<QqpDev> {
    if hazards.is_empty() {
        return Err(Error::EmptyEval);
    }
    let insufficient = hazards.len() < QQP_MIN_INTERVALS;
    if insufficient {
        warn!("QQ deviation from only {} intervals (want at least {QQP_MIN_INTERVALS})", hazards.len());
    }
    let mut sorted = hazards.to_vec();
    sorted.sort_by(f64::total_cmp);
    let grid = qqp_grid();
    let dev = grid.iter().map(|&q| (quantile_sorted(&sorted, q) + (-q).ln_1p()).abs()).sum::<f64>() / grid.len() as f64;
    Ok(QqpDev { value: dev, intervals: hazards.len(), insufficient })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub value: f64,
    /// `M < k`: every class is in the top `k`, reported as 1.0.
    pub degenerate: bool,
}

/// Whether `mark` ranks among the `k` largest entries, ties going to the lower index.
pub fn in_top_k(probs: &[f64], mark: usize, k: usize) -> bool {
    let p = probs[mark];
    let rank = probs.iter().enumerate().filter(|(j, q)| **q > p || (**q == p && *j < mark)).count();
    rank < k
}

pub fn topk_acc(probs: &Tensor, marks: &[usize], k: usize) -> Result<TopK> {
    if marks.is_empty() {
        return Err(Error::EmptyEval);
    }
    if probs.cols < k {
        return Ok(TopK { value: 1.0, degenerate: true });
    }
    let hits = marks.iter().enumerate().filter(|(r, m)| in_top_k(probs.row_slice(*r), **m, k)).count();
    Ok(TopK { value: hits as f64 / marks.len() as f64, degenerate: false })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub index: usize,
    pub events: usize,
    pub mape: Option<f64>,
    pub crps: f64,
    pub top1_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mape: f64,
    pub crps: f64,
    pub qqp_dev: f64,
    pub top1_acc: f64,
    pub top3_acc: f64,
    #[serde(rename = "S")]
    pub samples: usize,
    pub n_events: usize,
    pub exclusions: usize,
    #[serde(default)]
    pub top3_degenerate: bool,
    #[serde(default)]
    pub qqp_insufficient: bool,
    #[serde(default)]
    pub per_sequence: Vec<SequenceMetrics>,
}

impl MetricsReport {
    pub fn check_invariants(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.top1_acc)
            && (0.0..=1.0).contains(&self.top3_acc)
            && self.top3_acc >= self.top1_acc
            && self.mape >= 0.0
            && self.crps >= -1e-12;
        if ok {
            Ok(())
        } else {
            Err(Error::Schema(format!("metrics report violates its invariants: {self:?}")))
        }
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
