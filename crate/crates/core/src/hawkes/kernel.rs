//! Impact kernels of the synthetic multivariate Hawkes process.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelKind {
    /// `0.09 e^{−0.4t}`
    A,
    /// `0.01 e^{−0.8t} + 0.03 e^{−0.6t} + 0.05 e^{−0.4t}`
    B,
    /// `0.25 |cos 3t| e^{−0.1t}`
    C,
    /// `0.1 (0.5 + t)^{−2}`
    D,
    Zero,
}

pub const NONZERO_KINDS: [KernelKind; 4] = [KernelKind::A, KernelKind::B, KernelKind::C, KernelKind::D];

const B_TERMS: [(f64, f64); 3] = [(0.01, 0.8), (0.03, 0.6), (0.05, 0.4)];

impl KernelKind {
    #[inline]
    pub(crate) fn eval(self, t: f64) -> f64 {
        match self {
            KernelKind::A => 0.09 * (-0.4 * t).exp(),
            KernelKind::B => B_TERMS.iter().map(|(c, r)| c * (-r * t).exp()).sum(),
            KernelKind::C => 0.25 * (3.0 * t).cos().abs() * (-0.1 * t).exp(),
            KernelKind::D => 0.1 / ((0.5 + t) * (0.5 + t)),
            KernelKind::Zero => 0.0,
        }
    }

    /// Non-increasing upper bound of the kernel on `[t, ∞)`.
    #[inline]
    pub fn envelope(self, t: f64) -> f64 {
        match self {
            KernelKind::C => 0.25 * (-0.1 * t).exp(),
            k => k.eval(t),
        }
    }

    /// `∫_a^b g(s) ds` for `0 ≤ a ≤ b`; `g_c` by adaptive Simpson quadrature.
    pub fn integral(self, a: f64, b: f64) -> f64 {
        debug_assert!(0.0 <= a && a <= b);
        match self {
            KernelKind::A => 0.09 / 0.4 * ((-0.4 * a).exp() - (-0.4 * b).exp()),
            KernelKind::B => B_TERMS.iter().map(|(c, r)| c / r * ((-r * a).exp() - (-r * b).exp())).sum(),
            KernelKind::C => adaptive_simpson(&|s| KernelKind::C.eval(s), a, b, 1e-8),
            KernelKind::D => 0.1 * (1.0 / (0.5 + a) - 1.0 / (0.5 + b)),
            KernelKind::Zero => 0.0,
        }
    }

    /// `∫_0^∞ g`, the expected number of direct offspring.
    pub fn mass(self) -> f64 {
        match self {
            KernelKind::C => {
                // geometric tail: each half-period of |cos 3t| shrinks by e^{−0.1π/3}
                let period = std::f64::consts::PI / 3.0;
                let first = self.integral(0.0, period);
                first / (1.0 - (-0.1 * period).exp())
            }
            KernelKind::Zero => 0.0,
            k => k.integral(0.0, 1e6),
        }
    }
}

/// Kernel value, rejecting negative lags.
pub fn impact_kernel(kind: KernelKind, t: f64) -> Result<f64> {
    if t < 0.0 || t.is_nan() {
        return Err(Error::Domain(format!("kernel lag must be non-negative, got {t}")));
    }
    Ok(kind.eval(t))
}

pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    if b <= a {
        return 0.0;
    }
    // split into pieces no longer than a third of a |cos 3t| period so the kinks are resolved
    let pieces = ((b - a) / 0.35).ceil().max(1.0) as usize;
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|i| {
            let lo = a + i as f64 * h;
            let hi = if i + 1 == pieces { b } else { lo + h };
            let (fa, fb, fm) = (f(lo), f(hi), f(0.5 * (lo + hi)));
            let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
            rec(f, lo, hi, fa, fm, fb, whole, tol / pieces as f64, 40)
        })
        .sum()
}

/// Per-pair kernel assignment; `kinds[target][source]` is the impact of
/// `source` events on the `target` intensity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kinds: Vec<Vec<KernelKind>>,
}

impl KernelSpec {
    /// Each pair is zero with probability `cutting_ratio`, otherwise uniform over the four kernels.
    pub fn sample(num_types: usize, cutting_ratio: f64, rng: &mut impl Rng) -> Self {
        let kinds = (0..num_types)
            .map(|_| {
                (0..num_types)
                    .map(|_| {
                        if rng.random::<f64>() < cutting_ratio {
                            KernelKind::Zero
                        } else {
                            NONZERO_KINDS[rng.random_range(0..4)]
                        }
                    })
                    .collect()
            })
            .collect();
        Self { kinds }
    }

    pub fn uniform(num_types: usize, kind: KernelKind) -> Self {
        Self { kinds: vec![vec![kind; num_types]; num_types] }
    }

    pub fn num_types(&self) -> usize {
        self.kinds.len()
    }

    /// Expected offspring counts `G[target][source]`.
    pub fn branching_matrix(&self) -> Vec<Vec<f64>> {
        self.kinds.iter().map(|row| row.iter().map(|k| k.mass()).collect()).collect()
    }

    /// Perron root of the branching matrix by power iteration.
    pub fn spectral_radius(&self) -> f64 {
        let g = self.branching_matrix();
        let n = g.len();
        let mut v = vec![1.0; n];
        let mut rho = 0.0;
        for _ in 0..500 {
            let w: Vec<f64> = (0..n).map(|i| (0..n).map(|j| g[i][j] * v[j]).sum()).collect();
            let norm = w.iter().cloned().fold(0.0, f64::max);
            if norm == 0.0 {
                return 0.0;
            }
            rho = norm / v.iter().cloned().fold(0.0, f64::max);
            v = w.iter().map(|x| x / norm).collect();
        }
        rho
    }
}
