//! Temporal conditional Wasserstein GAN decoder with a Lipschitz penalty.

use rand::Rng;
use rand_distr::StandardNormal;

use super::nets::Mlp;
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};

/// Floor on `|τ̂ − τ|` in the Lipschitz ratio.
pub const RATIO_FLOOR: f64 = 1e-8;

/// Default regularizer weight `η`.
pub const DEFAULT_ETA: f64 = 1.0;

/// Critic updates per generator update.
pub const DEFAULT_CRITIC_STEPS: usize = 5;

#[derive(Clone, Debug)]
pub struct Tcgan {
    pub generator: Mlp,
    pub critic: Mlp,
    pub latent: usize,
    pub eta: f64,
}

/// Prefix shared by every critic parameter name.
pub const CRITIC_PREFIX: &str = "dec.critic.";

impl Tcgan {
    pub fn new(store: &mut ParamStore, dim: usize, hidden: usize, eta: f64, rng: &mut impl Rng) -> Self {
        Self {
            generator: Mlp::new(store, "dec.gen", dim + dim, hidden, 1, rng),
            critic: Mlp::new(store, "dec.critic.net", 1 + dim, hidden, 1, rng),
            latent: dim,
            eta,
        }
    }

    pub fn critic_ids(&self) -> Vec<ParamId> {
        self.critic.param_ids()
    }

    pub fn draw_noise(&self, rows: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::new(rows, self.latent, (0..rows * self.latent).map(|_| rng.sample(StandardNormal)).collect())
    }

    pub fn generate(&self, g: &mut Graph, store: &ParamStore, h: Var, z: &Tensor) -> Var {
        let zv = g.input(z.clone());
        let x = g.concat_cols(&[zv, h]);
        self.generator.forward(g, store, x)
    }

    pub fn critic_score(&self, g: &mut Graph, store: &ParamStore, h: Var, tau: Var) -> Var {
        let x = g.concat_cols(&[tau, h]);
        self.critic.forward(g, store, x)
    }

    /// Per-row critic objective (to minimize):
    /// `−(d(τ) − d(τ̂)) + η | |d(τ) − d(τ̂)| / max(|τ̂ − τ|, floor) − 1 |`.
    /// `τ̂` and `h` are treated as constants.
    pub fn critic_loss(&self, g: &mut Graph, store: &ParamStore, h: Var, targets: &[f64], z: &Tensor) -> Var {
        let h = g.detach(h);
        let fake = self.generate(g, store, h, z);
        let fake = g.detach(fake);
        let real = g.input(Tensor::column(targets.to_vec()));
        self.critic_objective(g, store, h, real, fake)
    }

    pub fn critic_objective(&self, g: &mut Graph, store: &ParamStore, h: Var, real: Var, fake: Var) -> Var {
        let dr = self.critic_score(g, store, h, real);
        let df = self.critic_score(g, store, h, fake);
        let gap = g.sub(dr, df);
        let dist = g.sub(fake, real);
        let dist = g.abs(dist);
        let dist = g.clamp_min(dist, RATIO_FLOOR);
        let mag = g.abs(gap);
        let ratio = g.div(mag, dist);
        let off = g.shift(ratio, -1.0);
        let pen = g.abs(off);
        let pen = g.scale(pen, self.eta);
        let neg = g.neg(gap);
        g.add(neg, pen)
    }

    /// Per-row generator objective `d(τ) − d(τ̂)`; the critic is only read.
    pub fn generator_loss(&self, g: &mut Graph, store: &ParamStore, h: Var, targets: &[f64], z: &Tensor) -> Var {
        let fake = self.generate(g, store, h, z);
        let real = g.input(Tensor::column(targets.to_vec()));
        let dr = self.critic_score(g, store, h, real);
        let df = self.critic_score(g, store, h, fake);
        g.sub(dr, df)
    }

    pub fn sample(&self, store: &ParamStore, h: &Tensor, rng: &mut impl Rng) -> Vec<f64> {
        let z = self.draw_noise(h.rows, rng);
        let mut input = Tensor::zeros(h.rows, z.cols + h.cols);
        for r in 0..h.rows {
            let row = &mut input.data[r * input.cols..(r + 1) * input.cols];
            row[..z.cols].copy_from_slice(z.row_slice(r));
            row[z.cols..].copy_from_slice(h.row_slice(r));
        }
        self.generator.eval(store, &input).data
    }
}
