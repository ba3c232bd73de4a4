//! Temporal conditional denoising diffusion decoder.

use rand::Rng;
use rand_distr::StandardNormal;

use super::nets::Dense;
use super::schedule::DiffusionSchedule;
use super::StepNoise;
use crate::autodiff::tensor::{add_row, matmul};
use crate::autodiff::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// `ε_θ(τ', h, k) = W₃ x₂ + b₃`, `x₂ = x₁ + tanh(W₂ x₁ + b₂)`,
/// `x₁ = W_h h + W_t τ' + cos(E_k[k])`.
#[derive(Clone, Debug)]
pub struct EpsNet {
    pub w_h: ParamId,
    pub w_t: ParamId,
    pub step_emb: ParamId,
    pub inner: Dense,
    pub out: Dense,
}

impl EpsNet {
    pub fn new(store: &mut ParamStore, dim: usize, steps: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_h: store.add("dec.ddpm.w_h", dim, dim, Init::FanIn, rng),
            w_t: store.add("dec.ddpm.w_t", 1, dim, Init::Uniform(1.0), rng),
            step_emb: store.add("dec.ddpm.step_emb", steps, dim, Init::Uniform(std::f64::consts::PI), rng),
            inner: Dense::new(store, "dec.ddpm.w2", dim, dim, rng),
            out: Dense::new(store, "dec.ddpm.w3", dim, 1, rng),
        }
    }

    /// `ks` are 1-based steps, one per row.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var, tau: &[f64], ks: &[usize]) -> Var {
        let wh = g.param(store, self.w_h);
        let wt = g.param(store, self.w_t);
        let e = g.param(store, self.step_emb);
        let a = g.matmul(h, wh);
        let t = g.input(Tensor::column(tau.to_vec()));
        let b = g.matmul(t, wt);
        let rows = g.gather_rows(e, ks.iter().map(|&k| Some(k - 1)).collect());
        let c = g.cos(rows);
        let x1 = g.add(a, b);
        let x1 = g.add(x1, c);
        let r = self.inner.forward(g, store, x1);
        let r = g.tanh(r);
        let x2 = g.add(x1, r);
        self.out.forward(g, store, x2)
    }

    /// Eager evaluation at a single step `k` with `hw = h W_h` precomputed.
    pub fn eval_step(&self, store: &ParamStore, hw: &Tensor, tau: &[f64], k: usize) -> Vec<f64> {
        let wt = store.value(self.w_t);
        let emb = store.value(self.step_emb).row_slice(k - 1);
        let d = hw.cols;
        let mut x1 = hw.clone();
        for r in 0..hw.rows {
            for c in 0..d {
                x1.data[r * d + c] += tau[r] * wt.data[c] + emb[c].cos();
            }
        }
        let mut inner = add_row(&matmul(&x1, store.value(self.inner.w)), store.value(self.inner.b));
        for (v, x) in inner.data.iter_mut().zip(&x1.data) {
            *v = x + v.tanh();
        }
        self.out.eval(store, &inner).data
    }

    pub fn project_history(&self, store: &ParamStore, h: &Tensor) -> Tensor {
        matmul(h, store.value(self.w_h))
    }
}

#[derive(Clone, Debug)]
pub struct Tcddm {
    pub net: EpsNet,
    pub schedule: DiffusionSchedule,
    /// Use the `β`-dependent weights of the unsimplified objective.
    pub weighted: bool,
}

impl Tcddm {
    pub fn new(store: &mut ParamStore, dim: usize, schedule: DiffusionSchedule, weighted: bool, rng: &mut impl Rng) -> Self {
        let net = EpsNet::new(store, dim, schedule.steps(), rng);
        Self { net, schedule, weighted }
    }

    pub fn draw_noise(&self, rows: usize, rng: &mut impl Rng) -> StepNoise {
        let k_max = self.schedule.steps();
        let ks = (0..rows).map(|_| rng.random_range(1..=k_max)).collect();
        let eps = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        StepNoise { ks, eps }
    }

    /// Per-row `‖ε − ε_θ(√ᾱ_k τ + √(1−ᾱ_k) ε, h, k)‖²`.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, h: Var, targets: &[f64], noise: &StepNoise) -> Var {
        let noisy: Vec<f64> = targets
            .iter()
            .zip(&noise.ks)
            .zip(&noise.eps)
            .map(|((&t, &k), &e)| super::schedule::forward_marginal(t, k, &self.schedule, e))
            .collect();
        let pred = self.net.forward(g, store, h, &noisy, &noise.ks);
        let eps = g.input(Tensor::column(noise.eps.clone()));
        let diff = g.sub(eps, pred);
        let sq = g.square(diff);
        if self.weighted {
            let w = g.input(Tensor::column(noise.ks.iter().map(|&k| self.schedule.loss_weight(k)).collect()));
            g.mul(sq, w)
        } else {
            sq
        }
    }

    /// Reverse chain, one chain per row of `h`. Initial draws for all chains
    /// come first, then one normal per chain at every step `k > 1`.
    pub fn sample(
        &self,
        store: &ParamStore,
        h: &Tensor,
        rng: &mut impl Rng,
        mut observe: Option<&mut dyn FnMut(usize, &[f64])>,
    ) -> Result<Vec<f64>> {
        let n = h.rows;
        let hw = self.net.project_history(store, h);
        let mut x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let k_max = self.schedule.steps();
        if let Some(f) = observe.as_deref_mut() {
            f(k_max, &x);
        }
        for k in (1..=k_max).rev() {
            let eps = self.net.eval_step(store, &hw, &x, k);
            let (a, ab, b) = (self.schedule.alpha(k), self.schedule.alpha_bar(k), self.schedule.beta(k));
            let coef = b / (1.0 - ab).sqrt();
            let sd = self.schedule.sigma2(k).sqrt();
            for (xi, e) in x.iter_mut().zip(&eps) {
                let z: f64 = if k > 1 { rng.sample(StandardNormal) } else { 0.0 };
                *xi = (*xi - coef * e) / a.sqrt() + sd * z;
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::SamplerDiverged(format!("diffusion chain left finite range at step {k}")));
            }
            if let Some(f) = observe.as_deref_mut() {
                f(k - 1, &x);
            }
        }
        Ok(x)
    }
}
