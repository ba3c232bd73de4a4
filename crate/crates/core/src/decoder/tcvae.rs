//! Temporal conditional variational autoencoder decoder.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::nets::{prepend_cols, Mlp};
use crate::autodiff::{Graph, ParamStore, Tensor, Var};

/// How a sample is read off the decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VaeSampling {
    /// `f(z, h) + N(0, ½)`: the squared-error reconstruction term is the
    /// negative log-likelihood of a Gaussian with variance ½.
    #[default]
    Likelihood,
    /// `f(z, h)` only.
    DecoderMean,
}

/// Variance of the observation model implied by the squared-error term.
pub const OBSERVATION_VARIANCE: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct Tcvae {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub latent: usize,
    pub sampling: VaeSampling,
}

impl Tcvae {
    pub fn new(store: &mut ParamStore, dim: usize, hidden: usize, sampling: VaeSampling, rng: &mut impl Rng) -> Self {
        Self {
            encoder: Mlp::new(store, "dec.vae.enc", 1 + dim, hidden, 2 * dim, rng),
            decoder: Mlp::new(store, "dec.vae.dec", dim + dim, hidden, 1, rng),
            latent: dim,
            sampling,
        }
    }

    /// Standard-normal reparameterization noise, `rows × D`.
    pub fn draw_noise(&self, rows: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::new(rows, self.latent, (0..rows * self.latent).map(|_| rng.sample(StandardNormal)).collect())
    }

    /// Per-row `KL(N(μ, diag σ²) ‖ N(0, I)) + (f(z, h) − τ)²`.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, h: Var, targets: &[f64], eps: &Tensor) -> Var {
        let (mu, logvar) = self.posterior(g, store, h, targets);
        let kl = kl_standard_normal(g, mu, logvar);
        let half = g.scale(logvar, 0.5);
        let sd = g.exp(half);
        let e = g.input(eps.clone());
        let noise = g.mul(sd, e);
        let z = g.add(mu, noise);
        let zh = g.concat_cols(&[z, h]);
        let f = self.decoder.forward(g, store, zh);
        let t = g.input(Tensor::column(targets.to_vec()));
        let diff = g.sub(f, t);
        let rec = g.square(diff);
        g.add(kl, rec)
    }

    pub fn posterior(&self, g: &mut Graph, store: &ParamStore, h: Var, targets: &[f64]) -> (Var, Var) {
        let t = g.input(Tensor::column(targets.to_vec()));
        let x = g.concat_cols(&[t, h]);
        let out = self.encoder.forward(g, store, x);
        let mu = g.slice_cols(out, 0, self.latent);
        let logvar = g.slice_cols(out, self.latent, self.latent);
        (mu, logvar)
    }

    /// Decoder output for explicit latent draws.
    pub fn decode(&self, store: &ParamStore, z: &Tensor, h: &Tensor) -> Vec<f64> {
        let mut x = Tensor::zeros(h.rows, z.cols + h.cols);
        for r in 0..h.rows {
            let row = &mut x.data[r * x.cols..(r + 1) * x.cols];
            row[..z.cols].copy_from_slice(z.row_slice(r));
            row[z.cols..].copy_from_slice(h.row_slice(r));
        }
        self.decoder.eval(store, &x).data
    }

    pub fn sample(&self, store: &ParamStore, h: &Tensor, rng: &mut impl Rng) -> Vec<f64> {
        let z = self.draw_noise(h.rows, rng);
        let mut out = self.decode(store, &z, h);
        if self.sampling == VaeSampling::Likelihood {
            let sd = OBSERVATION_VARIANCE.sqrt();
            for v in out.iter_mut() {
                *v += sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        out
    }

    /// Encoder statistics `(μ, log σ²)` for inspection.
    pub fn encode(&self, store: &ParamStore, h: &Tensor, targets: &[f64]) -> (Tensor, Tensor) {
        let out = self.encoder.eval(store, &prepend_cols(&[targets], h));
        let d = self.latent;
        let take = |off: usize| {
            Tensor::new(out.rows, d, (0..out.rows).flat_map(|r| out.row_slice(r)[off..off + d].to_vec()).collect())
        };
        (take(0), take(d))
    }
}

/// `½ Σ (μ² + e^{lv} − lv − 1)` per row.
pub fn kl_standard_normal(g: &mut Graph, mu: Var, logvar: Var) -> Var {
    let m2 = g.square(mu);
    let ev = g.exp(logvar);
    let a = g.add(m2, ev);
    let b = g.sub(a, logvar);
    let b = g.shift(b, -1.0);
    let s = g.sum_cols(b);
    g.scale(s, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kl(mu: Vec<f64>, lv: Vec<f64>) -> f64 {
        let mut g = Graph::new();
        let d = mu.len();
        let m = g.input(Tensor::new(1, d, mu));
        let l = g.input(Tensor::new(1, d, lv));
        let k = kl_standard_normal(&mut g, m, l);
        g.value(k).item()
    }

    #[test]
    fn kl_cases() {
        assert_eq!(kl(vec![0.0, 0.0], vec![0.0, 0.0]), 0.0);
        assert!((kl(vec![1.0], vec![0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_decoder_gives_constant_samples() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Tcvae::new(&mut store, 4, 4, VaeSampling::DecoderMean, &mut rng);
        for l in &m.decoder.layers {
            store.value_mut(l.w).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let last = m.decoder.layers.last().unwrap().b;
        store.value_mut(last).data[0] = 0.7;
        let s = m.sample(&store, &Tensor::zeros(5, 4), &mut rng);
        assert!(s.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let mut store = ParamStore::new();
        let m = Tcvae::new(&mut store, 4, 4, VaeSampling::Likelihood, &mut ChaCha8Rng::seed_from_u64(1));
        let h = Tensor::zeros(3, 4);
        let a = m.sample(&store, &h, &mut ChaCha8Rng::seed_from_u64(8));
        let b = m.sample(&store, &h, &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_loss_matches_eager_pieces() {
        let mut store = ParamStore::new();
        let m = Tcvae::new(&mut store, 2, 3, VaeSampling::Likelihood, &mut ChaCha8Rng::seed_from_u64(2));
        let h = Tensor::new(2, 2, vec![0.3, -0.1, 0.8, 0.4]);
        let targets = [0.5, -1.5];
        let mut g = Graph::new();
        let hv = g.input(h.clone());
        let l = m.loss(&mut g, &store, hv, &targets, &Tensor::zeros(2, 2));
        let (mu, lv) = m.encode(&store, &h, &targets);
        let f = m.decode(&store, &mu, &h);
        for r in 0..2 {
            let kl: f64 = (0..2)
                .map(|c| {
                    let (a, b) = (mu.row_slice(r)[c], lv.row_slice(r)[c]);
                    0.5 * (a * a + b.exp() - b - 1.0)
                })
                .sum();
            let expect = kl + (f[r] - targets[r]).powi(2);
            assert!((g.value(l).data[r] - expect).abs() < 1e-12);
        }
    }
}
