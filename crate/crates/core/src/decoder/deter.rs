//! Deterministic interval regressor with positive weights and bias.

use rand::Rng;

use crate::autodiff::tensor::softplus;
use crate::autodiff::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::data::TAU_FLOOR;

/// `τ̂ = softplus(W)ᵀ h + softplus(b)`.
#[derive(Clone, Debug)]
pub struct Deter {
    pub w: ParamId,
    pub b: ParamId,
}

impl Deter {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add("dec.deter.w", dim, 1, Init::FanIn, rng),
            b: store.add("dec.deter.b", 1, 1, Init::Zeros, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let w = g.softplus(w);
        let b = g.softplus(b);
        let y = g.matmul(h, w);
        g.add_row(y, b)
    }

    /// Per-row squared error.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, h: Var, targets: &[f64]) -> Var {
        let y = self.forward(g, store, h);
        let t = g.input(Tensor::column(targets.to_vec()));
        let d = g.sub(y, t);
        g.square(d)
    }

    /// Predictions, floored so they stay positive for any history.
    pub fn predict(&self, store: &ParamStore, h: &Tensor) -> Vec<f64> {
        let w = store.value(self.w);
        let b = softplus(store.value(self.b).item());
        (0..h.rows)
            .map(|r| {
                let v: f64 = h.row_slice(r).iter().zip(&w.data).map(|(x, w)| x * softplus(*w)).sum::<f64>() + b;
                v.max(TAU_FLOOR)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_history_gives_positive_bias() {
        let mut store = ParamStore::new();
        let d = Deter::new(&mut store, 4, &mut ChaCha8Rng::seed_from_u64(0));
        store.value_mut(d.b).data[0] = -3.0;
        let p = d.predict(&store, &Tensor::zeros(1, 4));
        assert_eq!(p[0], softplus(-3.0));
        assert!(p[0] > 0.0);
    }

    #[test]
    fn positive_history_gives_positive_prediction() {
        let mut store = ParamStore::new();
        let d = Deter::new(&mut store, 3, &mut ChaCha8Rng::seed_from_u64(1));
        let h = Tensor::new(2, 3, vec![0.1, 2.0, 0.3, 5.0, 0.0, 1.0]);
        let mut g = Graph::new();
        let hv = g.input(h.clone());
        let y = d.forward(&mut g, &store, hv);
        assert!(g.value(y).data.iter().all(|v| *v > 0.0));
        assert_eq!(g.value(y).data, d.predict(&store, &h));
    }
}
