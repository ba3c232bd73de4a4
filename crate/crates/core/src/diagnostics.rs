//! Verification helpers: oracle distributions, Kolmogorov–Smirnov tests,
//! ground-truth QQ deviation for simulated data, and per-epoch timing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::data::{Dataset, EventSequence};
use crate::error::{Error, Result};
use crate::hawkes::{compensator, KernelSpec};
use crate::metrics::{qqp_dev, QqpDev};
use crate::training::EpochLog;

/// Smallest sample the asymptotic KS threshold is trusted for.
pub const KS_MIN_SAMPLES: usize = 30;

/// Reference distribution with a known CDF.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum OracleSpec {
    Exp { rate: f64 },
    LogNormal { mu: f64, sigma: f64 },
    Gaussian { mean: f64, sd: f64 },
    Mixture { weights: Vec<f64>, components: Vec<OracleSpec> },
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

impl OracleSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            OracleSpec::Exp { rate } => *rate > 0.0 && rate.is_finite(),
            OracleSpec::LogNormal { mu, sigma } => mu.is_finite() && *sigma > 0.0,
            OracleSpec::Gaussian { mean, sd } => mean.is_finite() && *sd > 0.0,
            OracleSpec::Mixture { weights, components } => {
                for c in components {
                    c.validate()?;
                }
                !weights.is_empty()
                    && weights.len() == components.len()
                    && weights.iter().all(|w| *w >= 0.0)
                    && (weights.iter().sum::<f64>() - 1.0).abs() < 1e-9
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid oracle parameters: {self:?}")))
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            OracleSpec::Exp { rate } => {
                if x <= 0.0 {
                    0.0
                } else {
                    -(-rate * x).exp_m1()
                }
            }
            OracleSpec::LogNormal { mu, sigma } => {
                if x <= 0.0 {
                    0.0
                } else {
                    std_normal_cdf((x.ln() - mu) / sigma)
                }
            }
            OracleSpec::Gaussian { mean, sd } => std_normal_cdf((x - mean) / sd),
            OracleSpec::Mixture { weights, components } => {
                weights.iter().zip(components).map(|(w, c)| w * c.cdf(x)).sum()
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            OracleSpec::Exp { rate } => 1.0 / rate,
            OracleSpec::LogNormal { mu, sigma } => (mu + 0.5 * sigma * sigma).exp(),
            OracleSpec::Gaussian { mean, .. } => *mean,
            OracleSpec::Mixture { weights, components } => {
                weights.iter().zip(components).map(|(w, c)| w * c.mean()).sum()
            }
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            OracleSpec::Exp { rate } => Exp::new(*rate).expect("validated rate").sample(rng),
            OracleSpec::LogNormal { mu, sigma } => LogNormal::new(*mu, *sigma).expect("validated").sample(rng),
            OracleSpec::Gaussian { mean, sd } => Normal::new(*mean, *sd).expect("validated").sample(rng),
            OracleSpec::Mixture { weights, components } => {
                let mut u: f64 = rng.random();
                for (w, c) in weights.iter().zip(components) {
                    if u < *w {
                        return c.sample(rng);
                    }
                    u -= w;
                }
                components.last().expect("non-empty mixture").sample(rng)
            }
        }
    }
}

/// Single-mark dataset of i.i.d. positive intervals drawn from `oracle`,
/// split into sequences of `per_sequence` events.
pub fn iid_interval_dataset(oracle: &OracleSpec, events: usize, per_sequence: usize, seed: u64) -> Result<Dataset> {
    oracle.validate()?;
    if per_sequence == 0 {
        return Err(Error::Config("sequences need at least one event".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seqs = Vec::new();
    let mut left = events;
    while left > 0 {
        let n = left.min(per_sequence);
        let mut t = 0.0;
        let mut times = Vec::with_capacity(n);
        for _ in 0..n {
            t += oracle.sample(&mut rng).max(0.0);
            times.push(t);
        }
        seqs.push(EventSequence::new(times, vec![0; n])?);
        left -= n;
    }
    Dataset::new(seqs, 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    /// `sup_x |F_n(x) − F(x)|`.
    pub statistic: f64,
    /// Rejection threshold `c(α)/√N`.
    pub critical: f64,
    pub alpha: f64,
    pub n: usize,
    pub passed: bool,
}

/// `c(α) = √(−½ ln(α/2))`.
pub fn ks_coefficient(alpha: f64) -> f64 {
    (-0.5 * (alpha / 2.0).ln()).sqrt()
}

/// Two-sided KS statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyEval);
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    Ok(s.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n)
    }))
}

/// Two-sided one-sample KS test with the asymptotic threshold.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64, alpha: f64) -> Result<KsResult> {
    if samples.len() < KS_MIN_SAMPLES {
        return Err(Error::Config(format!(
            "KS test needs at least {KS_MIN_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let statistic = ks_statistic(samples, cdf)?;
    let critical = ks_coefficient(alpha) / (samples.len() as f64).sqrt();
    Ok(KsResult { statistic, critical, alpha, n: samples.len(), passed: statistic <= critical })
}

/// Integrated ground-truth intensity between consecutive events of every sequence.
pub fn true_hazards(ds: &Dataset, kernels: &KernelSpec, mu: &[f64]) -> Vec<f64> {
    ds.sequences.iter().flat_map(|s| compensator(s, kernels, mu)).collect()
}

/// QQ deviation of simulated data under the intensity that generated it.
pub fn true_intensity_qqp(ds: &Dataset, kernels: &KernelSpec, mu: &[f64]) -> Result<QqpDev> {
    qqp_dev(&true_hazards(ds, kernels, mu))
}

/// Largest intermediate variance over recorded sampler checkpoints.
pub fn max_dynamics_variance(rows: &[crate::decoder::DynamicsRow]) -> f64 {
    rows.iter().map(|r| r.var).fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub name: String,
    pub epochs: usize,
    pub mean_seconds: f64,
    pub total_seconds: f64,
}

/// Per-epoch wall time of each named run.
pub fn timing_report(runs: &[(String, Vec<EpochLog>)]) -> Vec<TimingRow> {
    runs.iter()
        .map(|(name, log)| {
            let total: f64 = log.iter().map(|r| r.wall_seconds).sum();
            TimingRow {
                name: name.clone(),
                epochs: log.len(),
                mean_seconds: if log.is_empty() { 0.0 } else { total / log.len() as f64 },
                total_seconds: total,
            }
        })
        .collect()
}

pub fn format_timing(rows: &[TimingRow]) -> String {
    let mut s = format!("{:<10} {:>7} {:>12} {:>12}\n", "run", "epochs", "s/epoch", "total s");
    for r in rows {
        s.push_str(&format!("{:<10} {:>7} {:>12.4} {:>12.3}\n", r.name, r.epochs, r.mean_seconds, r.total_seconds));
    }
    s
}
