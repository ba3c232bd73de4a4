//! Multivariate Hawkes simulation by Ogata thinning, plus the exact
//! compensator used as ground truth for goodness-of-fit checks.

mod kernel;

pub use kernel::{adaptive_simpson, impact_kernel, KernelKind, KernelSpec, NONZERO_KINDS};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EventSequence, MAX_SEQ_LEN};
use crate::error::{Error, Result};

/// Default base rate per type.
pub const DEFAULT_BASE_RATE: f64 = 0.1;
/// Default fraction of zeroed kernel pairs.
pub const DEFAULT_CUTTING_RATIO: f64 = 0.2;
/// Mean sequence length of the reference synthetic set.
pub const REFERENCE_MEAN_LENGTH: f64 = 580.36;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HawkesConfig {
    pub base_rate: Vec<f64>,
    pub horizon: f64,
    pub num_types: usize,
    pub seed: u64,
    pub cutting_ratio: f64,
    /// Simulation stops after this many accepted events.
    pub max_events: usize,
}

impl HawkesConfig {
    pub fn new(num_types: usize, horizon: f64, seed: u64) -> Self {
        Self {
            base_rate: vec![DEFAULT_BASE_RATE; num_types],
            horizon,
            num_types,
            seed,
            cutting_ratio: DEFAULT_CUTTING_RATIO,
            max_events: MAX_SEQ_LEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_types == 0 {
            return Err(Error::Config("number of types must be positive".into()));
        }
        if self.base_rate.len() != self.num_types {
            return Err(Error::Config(format!(
                "{} base rates for {} types",
                self.base_rate.len(),
                self.num_types
            )));
        }
        if self.base_rate.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
            return Err(Error::Config("base rates must be positive".into()));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(0.0..=1.0).contains(&self.cutting_ratio) {
            return Err(Error::Config(format!("cutting ratio {} outside [0, 1]", self.cutting_ratio)));
        }
        Ok(())
    }

    /// Kernel matrix drawn from the master seed.
    pub fn sample_kernels(&self) -> KernelSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        KernelSpec::sample(self.num_types, self.cutting_ratio, &mut rng)
    }

    /// RNG stream of sequence `i`.
    pub fn sequence_rng(&self, i: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64);
        rng
    }
}

/// `λ_m(t) = μ_m + Σ_{t_j < t} g_{m, m_j}(t − t_j)` for every type `m`.
pub fn intensity(t: f64, times: &[f64], marks: &[usize], kernels: &KernelSpec, mu: &[f64]) -> Vec<f64> {
    let mut lam = mu.to_vec();
    for (&tj, &mj) in times.iter().zip(marks) {
        if tj >= t {
            break;
        }
        for (m, l) in lam.iter_mut().enumerate() {
            *l += kernels.kinds[m][mj].eval(t - tj);
        }
    }
    lam
}

fn dominating_rate(t: f64, times: &[f64], marks: &[usize], kernels: &KernelSpec, mu: &[f64]) -> f64 {
    let mut bar: f64 = mu.iter().sum();
    for (&tj, &mj) in times.iter().zip(marks) {
        for row in &kernels.kinds {
            bar += row[mj].envelope(t - tj);
        }
    }
    bar
}

/// One accepted or rejected thinning candidate.
#[derive(Clone, Copy, Debug)]
pub struct ThinningStep {
    pub time: f64,
    pub bound: f64,
    pub total_intensity: f64,
    pub accepted: bool,
}

/// Warns when the branching matrix is supercritical. Returns the spectral radius.
pub fn check_stability(kernels: &KernelSpec) -> f64 {
    let rho = kernels.spectral_radius();
    if rho >= 1.0 {
        warn!("unstable process: branching spectral radius {rho:.3} >= 1; sequences are capped by horizon and event limit");
    }
    rho
}

/// Ogata thinning on `[0, horizon]` with the given RNG.
pub fn simulate_with_rng(
    config: &HawkesConfig,
    kernels: &KernelSpec,
    rng: &mut impl Rng,
    mut trace: Option<&mut Vec<ThinningStep>>,
) -> EventSequence {
    let mu = &config.base_rate;
    let mut seq = EventSequence::empty();
    let mut t = 0.0;
    while seq.len() < config.max_events {
        let bound = dominating_rate(t, &seq.times, &seq.marks, kernels, mu);
        let u: f64 = rng.random();
        t += -(1.0 - u).ln() / bound;
        if t > config.horizon {
            break;
        }
        let lam = intensity(t, &seq.times, &seq.marks, kernels, mu);
        let total: f64 = lam.iter().sum();
        let accept = rng.random::<f64>() * bound <= total;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(ThinningStep { time: t, bound, total_intensity: total, accepted: accept });
        }
        if accept {
            let mut r = rng.random::<f64>() * total;
            let mut mark = lam.len() - 1;
            for (m, l) in lam.iter().enumerate() {
                if r < *l {
                    mark = m;
                    break;
                }
                r -= l;
            }
            seq.push(t, mark);
        }
    }
    seq
}

/// Single realization using the stream of sequence 0.
pub fn simulate_ogata(config: &HawkesConfig, kernels: &KernelSpec) -> Result<EventSequence> {
    config.validate()?;
    check_stability(kernels);
    Ok(simulate_with_rng(config, kernels, &mut config.sequence_rng(0), None))
}

/// Independent realizations, each on its own RNG stream.
pub fn generate_synthetic(num_sequences: usize, config: &HawkesConfig, kernels: &KernelSpec) -> Result<Dataset> {
    config.validate()?;
    if kernels.num_types() != config.num_types {
        return Err(Error::Config("kernel matrix size does not match number of types".into()));
    }
    check_stability(kernels);
    let sequences = (0..num_sequences)
        .map(|i| simulate_with_rng(config, kernels, &mut config.sequence_rng(i), None))
        .collect();
    Dataset::new(sequences, config.num_types)
}

/// Horizon at which the mean sequence length over `runs` pilot realizations
/// reaches `target`. Pilot runs share RNG streams, so counts are monotone in T.
pub fn calibrate_horizon(config: &HawkesConfig, kernels: &KernelSpec, target: f64, runs: usize) -> Result<f64> {
    config.validate()?;
    let mut pilot = config.clone();
    pilot.max_events = usize::MAX;
    let mean_len = |t: f64, paths: &[EventSequence]| -> f64 {
        paths.iter().map(|s| s.times.partition_point(|&x| x <= t) as f64).sum::<f64>() / paths.len() as f64
    };
    // grow the pilot horizon until the target is bracketed
    let mut hi = config.horizon;
    let mut paths: Vec<EventSequence>;
    loop {
        pilot.horizon = hi;
        pilot.max_events = config.max_events;
        paths = (0..runs).map(|i| simulate_with_rng(&pilot, kernels, &mut pilot.sequence_rng(i), None)).collect();
        if mean_len(hi, &paths) >= target || hi > 1e9 {
            break;
        }
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean_len(mid, &paths) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// `Λ(t_{i−1}, t_i] = ∫ Σ_m λ_m` for every interval, the first starting at 0.
///
/// Under the true model these are i.i.d. Exp(1).
pub fn compensator(seq: &EventSequence, kernels: &KernelSpec, mu: &[f64]) -> Vec<f64> {
    let mu_total: f64 = mu.iter().sum();
    // column counts: for a source type, how many targets use each kernel kind
    let columns: Vec<Vec<(KernelKind, usize)>> = (0..kernels.num_types())
        .map(|s| {
            let mut counts: Vec<(KernelKind, usize)> = Vec::new();
            for row in &kernels.kinds {
                let k = row[s];
                if k == KernelKind::Zero {
                    continue;
                }
                match counts.iter_mut().find(|(kk, _)| *kk == k) {
                    Some(c) => c.1 += 1,
                    None => counts.push((k, 1)),
                }
            }
            counts
        })
        .collect();
    let mut out = Vec::with_capacity(seq.len());
    let mut prev = 0.0;
    for i in 0..seq.len() {
        let t = seq.times[i];
        let mut lam = mu_total * (t - prev);
        for j in 0..i {
            let tj = seq.times[j];
            for &(k, c) in &columns[seq.marks[j]] {
                lam += c as f64 * k.integral(prev - tj, t - tj);
            }
        }
        out.push(lam);
        prev = t;
    }
    out
}
