//! Temporal conditional noise-conditional score network decoder.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::nets::CondMlp;
use super::schedule::NoiseLadder;
use super::StepNoise;
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// What the Langevin update adds, scaled by `α_k`.
///
/// The weighted objective is minimized by `s_θ = σ ∇ log q_σ`, so the
/// network output is `σ` times the score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScaling {
    /// `α_k s_θ(τ; σ_k | h)`, the update as written against the objective.
    #[default]
    Network,
    /// `α_k s_θ(τ; σ_k | h) / σ_k`, the update with the score itself.
    Rescaled,
}

/// Drift used by the annealed Langevin sampler at one noise level.
pub trait ScoreModel {
    fn score(&self, x: &[f64], level: usize, sigma: f64) -> Vec<f64>;
}

/// Annealed Langevin dynamics: per level, `steps_per_level` updates
/// `x ← x + α_k s(x; σ_k) + √(2α_k) z`. Draws one normal per chain per
/// update, chains in order. `observe(level, x)` sees the state after each
/// level, and `level = 0` before the first.
pub fn langevin(
    score: &dyn ScoreModel,
    ladder: &NoiseLadder,
    mut x: Vec<f64>,
    rng: &mut impl Rng,
    mut observe: Option<&mut dyn FnMut(usize, &[f64])>,
) -> Result<Vec<f64>> {
    if let Some(f) = observe.as_deref_mut() {
        f(0, &x);
    }
    for (k, (&sigma, &alpha)) in ladder.sigmas.iter().zip(&ladder.step_sizes).enumerate() {
        let noise = (2.0 * alpha).sqrt();
        for _ in 0..ladder.steps_per_level {
            let s = score.score(&x, k, sigma);
            for (xi, si) in x.iter_mut().zip(&s) {
                let z: f64 = rng.sample(StandardNormal);
                *xi += alpha * si + noise * z;
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SamplerDiverged(format!("Langevin chain left finite range at level {}", k + 1)));
        }
        if let Some(f) = observe.as_deref_mut() {
            f(k + 1, &x);
        }
    }
    Ok(x)
}

#[derive(Clone, Debug)]
pub struct Tcnsn {
    pub net: CondMlp,
    pub ladder: NoiseLadder,
    pub scaling: ScoreScaling,
}

struct NetScore<'a> {
    model: &'a Tcnsn,
    store: &'a ParamStore,
    proj: Tensor,
}

impl ScoreModel for NetScore<'_> {
    fn score(&self, x: &[f64], _level: usize, sigma: f64) -> Vec<f64> {
        let ls = vec![sigma.ln(); x.len()];
        let (mut s, _) = self.model.net.eval(self.store, &[x, &ls], &self.proj, false);
        if self.model.scaling == ScoreScaling::Rescaled {
            s.iter_mut().for_each(|v| *v /= sigma);
        }
        s
    }
}

impl Tcnsn {
    pub fn new(
        store: &mut ParamStore,
        dim: usize,
        hidden: usize,
        ladder: NoiseLadder,
        scaling: ScoreScaling,
        rng: &mut impl Rng,
    ) -> Self {
        Self { net: CondMlp::new(store, "dec.nsn", 2, dim, hidden, rng), ladder, scaling }
    }

    /// Level indices (1-based) and standard normals for the perturbation.
    pub fn draw_noise(&self, rows: usize, rng: &mut impl Rng) -> StepNoise {
        let levels = self.ladder.levels();
        let ks = (0..rows).map(|_| rng.random_range(1..=levels)).collect();
        let eps = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        StepNoise { ks, eps }
    }

    /// Per-row `(σ²/2) (s_θ(τ̃; σ | h)/σ + (τ̃ − τ)/σ²)²` with `τ̃ = τ + σ ε`.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, h: Var, targets: &[f64], noise: &StepNoise) -> Var {
        let sigmas: Vec<f64> = noise.ks.iter().map(|&k| self.ladder.sigmas[k - 1]).collect();
        let perturbed: Vec<f64> = targets.iter().zip(&sigmas).zip(&noise.eps).map(|((t, s), e)| t + s * e).collect();
        let log_sigma: Vec<f64> = sigmas.iter().map(|s| s.ln()).collect();
        let mut inputs = Tensor::zeros(targets.len(), 2);
        for r in 0..targets.len() {
            inputs.set(r, 0, perturbed[r]);
            inputs.set(r, 1, log_sigma[r]);
        }
        let proj = self.net.project(g, store, h);
        let s = g.input(inputs);
        let out = self.net.forward(g, store, s, proj);
        // σ²/2 (s/σ + (τ̃−τ)/σ²)² = ½ (s + ε)²
        let eps = g.input(Tensor::column(noise.eps.clone()));
        let r = g.add(out, eps);
        let sq = g.square(r);
        g.scale(sq, 0.5)
    }

    pub fn score_model<'a>(&'a self, store: &'a ParamStore, h: &Tensor) -> impl ScoreModel + 'a {
        NetScore { model: self, store, proj: self.net.project_eval(store, h) }
    }

    /// Initial draws `N(0, σ₁²)`, one chain per row of `h`, then annealing.
    pub fn sample(
        &self,
        store: &ParamStore,
        h: &Tensor,
        rng: &mut impl Rng,
        observe: Option<&mut dyn FnMut(usize, &[f64])>,
    ) -> Result<Vec<f64>> {
        let s0 = self.ladder.sigmas[0];
        let x = (0..h.rows).map(|_| s0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let score = self.score_model(store, h);
        langevin(&score, &self.ladder, x, rng, observe)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Oracle(f64);

    impl ScoreModel for Oracle {
        fn score(&self, x: &[f64], _level: usize, _sigma: f64) -> Vec<f64> {
            x.iter().map(|v| -(v - self.0)).collect()
        }
    }

    fn model() -> (Tcnsn, ParamStore) {
        let mut store = ParamStore::new();
        let ladder = NoiseLadder::geometric(10, 1.0, 0.1, 1e-3, 2).unwrap();
        let m = Tcnsn::new(&mut store, 3, 4, ladder, ScoreScaling::Network, &mut ChaCha8Rng::seed_from_u64(1));
        (m, store)
    }

    #[test]
    fn zero_step_sizes_keep_initial_draw() {
        let ladder = NoiseLadder { sigmas: vec![1.0, 0.5], step_sizes: vec![0.0, 0.0], steps_per_level: 3 };
        let x0 = vec![0.3, -1.2];
        let out = langevin(&Oracle(5.0), &ladder, x0.clone(), &mut ChaCha8Rng::seed_from_u64(0), None).unwrap();
        assert_eq!(out, x0);
    }

    #[test]
    fn oracle_score_pulls_to_target_mean() {
        let ladder = NoiseLadder { sigmas: vec![1.0; 200], step_sizes: vec![0.05; 200], steps_per_level: 5 };
        let x0 = vec![0.0; 1000];
        let out = langevin(&Oracle(2.0), &ladder, x0, &mut ChaCha8Rng::seed_from_u64(4), None).unwrap();
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        assert!((mean - 2.0).abs() < 0.04 * 2.0, "{mean}");
    }

    #[test]
    fn zero_net_loss_is_half_eps_squared() {
        let (m, mut store) = model();
        for id in m.net.param_ids() {
            store.value_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let h = g.input(Tensor::zeros(2, 3));
        let noise = StepNoise { ks: vec![1, 10], eps: vec![0.6, -2.0] };
        let l = m.loss(&mut g, &store, h, &[0.0, 1.0], &noise);
        assert_eq!(g.value(l).data, vec![0.18, 2.0]);
    }

    #[test]
    fn loss_matches_weighted_objective() {
        let (m, store) = model();
        let h = Tensor::new(2, 3, vec![0.1, 0.4, -0.2, 0.7, -0.5, 0.3]);
        let targets = [0.8, -0.4];
        let noise = StepNoise { ks: vec![3, 7], eps: vec![1.4, -0.3] };
        let mut g = Graph::new();
        let hv = g.input(h.clone());
        let l = m.loss(&mut g, &store, hv, &targets, &noise);
        let proj = m.net.project_eval(&store, &h);
        for r in 0..2 {
            let sigma = m.ladder.sigmas[noise.ks[r] - 1];
            let pert = targets[r] + sigma * noise.eps[r];
            let pr = Tensor::new(1, proj.cols, proj.row_slice(r).to_vec());
            let s = m.net.eval(&store, &[&[pert], &[sigma.ln()]], &pr, false).0[0];
            let expect = sigma * sigma / 2.0 * (s / sigma + (pert - targets[r]) / (sigma * sigma)).powi(2);
            assert!((g.value(l).data[r] - expect).abs() < 1e-12);
        }
    }
}
