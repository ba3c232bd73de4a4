use log::warn;
use serde::{Deserialize, Serialize};

use super::Dataset;

/// Intervals are clamped to this value before taking logs.
pub const TAU_FLOOR: f64 = 1e-8;

/// Statistics of `log τ` over training intervals.
///
/// Normalization divides by the variance unless `use_std` is set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogNormStats {
    pub mean_log: f64,
    pub var_log: f64,
    #[serde(default)]
    pub use_std: bool,
}

impl LogNormStats {
    pub fn identity() -> Self {
        Self { mean_log: 0.0, var_log: 1.0, use_std: false }
    }

    pub fn from_intervals(taus: impl IntoIterator<Item = f64>, use_std: bool) -> Self {
        let logs: Vec<f64> = taus.into_iter().map(|t| t.max(TAU_FLOOR).ln()).collect();
        let n = logs.len().max(1) as f64;
        let mean = logs.iter().sum::<f64>() / n;
        let mut var = logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
        if !(var > 1e-6) {
            warn!("log-interval variance {var:e} is degenerate; flooring at 1e-6");
            var = 1e-6;
        }
        Self { mean_log: mean, var_log: var, use_std }
    }

    /// Statistics from every interval of a (training) dataset.
    pub fn from_dataset(ds: &Dataset, use_std: bool) -> Self {
        Self::from_intervals(ds.sequences.iter().flat_map(|s| s.intervals()), use_std)
    }

    pub fn divisor(&self) -> f64 {
        if self.use_std {
            self.var_log.sqrt()
        } else {
            self.var_log
        }
    }
}

pub fn log_normalize(tau: f64, stats: &LogNormStats) -> f64 {
    (tau.max(TAU_FLOOR).ln() - stats.mean_log) / stats.divisor()
}

pub fn log_denormalize(z: f64, stats: &LogNormStats) -> f64 {
    (z * stats.divisor() + stats.mean_log).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_stats() {
        let s = LogNormStats::identity();
        assert_eq!(log_normalize(1.0, &s), 0.0);
        assert_eq!(log_denormalize(0.0, &s), 1.0);
        assert!((log_normalize(std::f64::consts::E, &s) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_interval_is_clamped() {
        let s = LogNormStats::identity();
        assert!((log_normalize(0.0, &s) - TAU_FLOOR.ln()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn round_trip(tau in 1e-6f64..1e6, mean in -5.0f64..5.0, var in 0.05f64..10.0, use_std in any::<bool>()) {
            let s = LogNormStats { mean_log: mean, var_log: var, use_std };
            let back = log_denormalize(log_normalize(tau, &s), &s);
            prop_assert!((back - tau).abs() <= 1e-9 * tau);
        }

        #[test]
        fn denormalized_is_positive(z in -20.0f64..20.0) {
            let s = LogNormStats { mean_log: -1.0, var_log: 2.0, use_std: false };
            prop_assert!(log_denormalize(z, &s) > 0.0);
        }
    }
}
