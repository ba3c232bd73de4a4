//! Closed-form mixture decoders over raw intervals.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::nets::Dense;
use crate::autodiff::tensor::{log_softmax_rows, softplus};
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::data::TAU_FLOOR;

pub const DEFAULT_COMPONENTS: usize = 3;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    LogNormal,
    /// Component density `c e^{wτ} exp(−(c/w)(e^{wτ} − 1))`.
    Gompertz,
    /// Component density `(k/λ)(τ/λ)^{k−1} exp(−(τ/λ)^k)`.
    Weibull,
}

impl Family {
    pub fn positive_support(self) -> bool {
        !matches!(self, Family::Gaussian)
    }

    fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gauss",
            Family::LogNormal => "lognorm",
            Family::Gompertz => "gompertz",
            Family::Weibull => "weibull",
        }
    }
}

/// Per-row component parameters after the positivity transforms.
///
/// `loc`/`scale` mean `(μ, σ)` for Gaussian and LogNormal, `(c, w)` for
/// Gompertz and `(λ, k)` for Weibull.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub loc: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Mixture {
    pub family: Family,
    pub components: usize,
    pub head: Dense,
}

impl Mixture {
    pub fn new(store: &mut ParamStore, family: Family, dim: usize, components: usize, rng: &mut impl Rng) -> Self {
        let head = Dense::new(store, &format!("dec.{}", family.name()), dim, 3 * components, rng);
        Self { family, components, head }
    }

    fn clamp(&self, tau: f64) -> f64 {
        if self.family.positive_support() {
            tau.max(TAU_FLOOR)
        } else {
            tau
        }
    }

    /// Per-row negative log-likelihood.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, h: Var, targets: &[f64]) -> Var {
        let c = self.components;
        let n = targets.len();
        let raw = self.head.forward(g, store, h);
        let logits = g.slice_cols(raw, 0, c);
        let loc = g.slice_cols(raw, c, c);
        let sraw = g.slice_cols(raw, 2 * c, c);
        let spread = |f: &dyn Fn(f64) -> f64| {
            let mut t = Tensor::zeros(n, c);
            for (r, &tau) in targets.iter().enumerate() {
                let v = f(self.clamp(tau));
                (0..c).for_each(|j| t.set(r, j, v));
            }
            t
        };
        let log_pdf = match self.family {
            Family::Gaussian | Family::LogNormal => {
                let lognormal = self.family == Family::LogNormal;
                let x = g.input(spread(&|t| if lognormal { t.ln() } else { t }));
                let sigma = g.softplus(sraw);
                let d = g.sub(x, loc);
                let z = g.div(d, sigma);
                let z2 = g.square(z);
                let q = g.scale(z2, -0.5);
                let ls = g.log(sigma);
                let lp = g.sub(q, ls);
                let lp = g.shift(lp, -HALF_LN_2PI);
                if lognormal {
                    g.sub(lp, x)
                } else {
                    lp
                }
            }
            Family::Gompertz => {
                // ln c = loc, w = softplus(raw)
                let tau = g.input(spread(&|t| t));
                let w = g.softplus(sraw);
                let wt = g.mul(w, tau);
                let e = g.exp(wt);
                let em1 = g.shift(e, -1.0);
                let cc = g.exp(loc);
                let ratio = g.div(cc, w);
                let comp = g.mul(ratio, em1);
                let a = g.add(loc, wt);
                g.sub(a, comp)
            }
            Family::Weibull => {
                // λ = softplus(loc), k = softplus(raw)
                let lt = g.input(spread(&|t| t.ln()));
                let lam = g.softplus(loc);
                let k = g.softplus(sraw);
                let llam = g.log(lam);
                let lk = g.log(k);
                let u = g.sub(lt, llam);
                let ku = g.mul(k, u);
                let pow = g.exp(ku);
                let km1 = g.shift(k, -1.0);
                let b = g.mul(km1, u);
                let a = g.sub(lk, llam);
                let s = g.add(a, b);
                g.sub(s, pow)
            }
        };
        let lw = g.log_softmax_rows(logits);
        let joint = g.add(lw, log_pdf);
        // logsumexp(v) = v₀ − log_softmax(v)₀
        let ls = g.log_softmax_rows(joint);
        let v0 = g.slice_cols(joint, 0, 1);
        let l0 = g.slice_cols(ls, 0, 1);
        let lse = g.sub(v0, l0);
        g.neg(lse)
    }

    pub fn params(&self, store: &ParamStore, h: &Tensor) -> Vec<MixtureParams> {
        let raw = self.head.eval(store, h);
        let c = self.components;
        let logits = Tensor::new(raw.rows, c, (0..raw.rows).flat_map(|r| raw.row_slice(r)[..c].to_vec()).collect());
        let lw = log_softmax_rows(&logits);
        (0..raw.rows)
            .map(|r| {
                let row = raw.row_slice(r);
                let weights = lw.row_slice(r).iter().map(|v| v.exp()).collect();
                let (loc, scale) = match self.family {
                    Family::Gaussian | Family::LogNormal => {
                        (row[c..2 * c].to_vec(), row[2 * c..].iter().map(|&v| softplus(v)).collect())
                    }
                    Family::Gompertz => (row[c..2 * c].iter().map(|v| v.exp()).collect(), row[2 * c..].iter().map(|&v| softplus(v)).collect()),
                    Family::Weibull => {
                        (row[c..2 * c].iter().map(|&v| softplus(v)).collect(), row[2 * c..].iter().map(|&v| softplus(v)).collect())
                    }
                };
                MixtureParams { weights, loc, scale }
            })
            .collect()
    }

    pub fn mean(&self, store: &ParamStore, h: &Tensor) -> Vec<f64> {
        self.params(store, h).iter().map(|p| mixture_mean(self.family, p)).collect()
    }

    /// Ancestral draws: component, then value; positive families never go below the floor.
    pub fn sample(&self, store: &ParamStore, h: &Tensor, rng: &mut impl Rng) -> Vec<f64> {
        self.params(store, h)
            .iter()
            .map(|p| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut j = p.weights.len() - 1;
                for (i, w) in p.weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        j = i;
                        break;
                    }
                }
                let v = component_sample(self.family, p.loc[j], p.scale[j], rng);
                self.clamp(v)
            })
            .collect()
    }
}

/// Log-density of one component.
pub fn component_log_pdf(family: Family, loc: f64, scale: f64, tau: f64) -> f64 {
    match family {
        Family::Gaussian => -HALF_LN_2PI - scale.ln() - 0.5 * ((tau - loc) / scale).powi(2),
        Family::LogNormal => {
            let lt = tau.ln();
            -HALF_LN_2PI - scale.ln() - lt - 0.5 * ((lt - loc) / scale).powi(2)
        }
        Family::Gompertz => {
            let (c, w) = (loc, scale);
            c.ln() + w * tau - c / w * (w * tau).exp_m1()
        }
        Family::Weibull => {
            let (lam, k) = (loc, scale);
            let u = tau / lam;
            k.ln() - lam.ln() + (k - 1.0) * u.ln() - u.powf(k)
        }
    }
}

pub fn mixture_log_pdf(family: Family, p: &MixtureParams, tau: f64) -> f64 {
    let terms: Vec<f64> =
        (0..p.weights.len()).map(|j| p.weights[j].ln() + component_log_pdf(family, p.loc[j], p.scale[j], tau)).collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

pub fn component_mean(family: Family, loc: f64, scale: f64) -> f64 {
    match family {
        Family::Gaussian => loc,
        Family::LogNormal => (loc + 0.5 * scale * scale).exp(),
        Family::Gompertz => {
            let (c, w) = (loc, scale);
            exp_e1(c / w) / w
        }
        Family::Weibull => loc * statrs::function::gamma::gamma(1.0 + 1.0 / scale),
    }
}

pub fn mixture_mean(family: Family, p: &MixtureParams) -> f64 {
    (0..p.weights.len()).map(|j| p.weights[j] * component_mean(family, p.loc[j], p.scale[j])).sum()
}

pub fn component_sample(family: Family, loc: f64, scale: f64, rng: &mut impl Rng) -> f64 {
    match family {
        Family::Gaussian => loc + scale * rng.sample::<f64, _>(StandardNormal),
        Family::LogNormal => (loc + scale * rng.sample::<f64, _>(StandardNormal)).exp(),
        Family::Gompertz => {
            let (c, w) = (loc, scale);
            let u: f64 = rng.random();
            // F(τ) = 1 − exp(−(c/w)(e^{wτ} − 1))
            (-(w / c) * (-u).ln_1p()).ln_1p() / w
        }
        Family::Weibull => {
            let u: f64 = rng.random();
            loc * (-(-u).ln_1p()).powf(1.0 / scale)
        }
    }
}

/// `eˣ E₁(x)` for `x > 0`.
pub fn exp_e1(x: f64) -> f64 {
    assert!(x > 0.0, "exp_e1 needs a positive argument");
    if x <= 1.0 {
        // E₁(x) = −γ − ln x − Σ_{n≥1} (−x)ⁿ / (n n!)
        let mut sum = 0.0;
        let mut term = 1.0;
        for n in 1..60 {
            term *= -x / n as f64;
            let add = term / n as f64;
            sum += add;
            if add.abs() < 1e-17 * sum.abs().max(1e-300) {
                break;
            }
        }
        x.exp() * (-EULER_GAMMA - x.ln() - sum)
    } else {
        // continued fraction eˣE₁(x) = 1/(x + 1/(1 + 1/(x + 2/(1 + 2/(x + …))))), modified Lentz
        let tiny = 1e-300;
        let mut b = x + 1.0;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut f = d;
        for i in 1..500 {
            let a = -((i * i) as f64);
            b += 2.0;
            d = 1.0 / (a * d + b);
            c = b + a / c;
            let delta = c * d;
            f *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        f
    }
}
