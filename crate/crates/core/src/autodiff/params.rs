//! Named parameter arrays with per-parameter optimizer state.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Shape record of one parameter, as written into checkpoint headers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

/// Initialisation rule for a new parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in ±1/√fan_in, with fan_in the row count.
    FanIn,
    Uniform(f64),
    /// Uniform entries, then every row scaled to unit norm.
    UnitRows,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init, rng: &mut impl Rng) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let n = rows * cols;
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::FanIn => {
                let b = 1.0 / (rows.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-b..b)).collect()
            }
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..b)).collect(),
            Init::UnitRows => {
                let mut d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                for r in 0..rows {
                    let row = &mut d[r * cols..(r + 1) * cols];
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    row.iter_mut().for_each(|x| *x /= norm);
                }
                d
            }
        };
        self.insert(name, Tensor::new(rows, cols, data))
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        let n = value.len();
        self.params.push(Param { name: name.to_string(), value, m: vec![0.0; n], v: vec![0.0; n], step: 0 });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn step_count(&self, id: ParamId) -> u64 {
        self.params[id.0].step
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.params
            .iter()
            .map(|p| ParamSpec { name: p.name.clone(), rows: p.value.rows, cols: p.value.cols })
            .collect()
    }

    /// All parameter values in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data.iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Schema(format!(
                "parameter payload has {} values, model expects {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Adaptive-moment optimizer hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One adaptive-moment update of the parameters named in `grads`.
///
/// Parameters absent from `grads` are left untouched, so disjoint parameter
/// groups (generator and critic) can be stepped independently on one store.
pub fn adam_step(store: &mut ParamStore, grads: &[(ParamId, Tensor)], opt: &Adam) -> Result<()> {
    for (id, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(store.name(*id).to_string()));
        }
    }
    for (id, g) in grads {
        let p = &mut store.params[id.0];
        assert_eq!(p.value.shape(), g.shape(), "gradient shape mismatch for {}", p.name);
        p.step += 1;
        let bc1 = 1.0 - opt.beta1.powi(p.step as i32);
        let bc2 = 1.0 - opt.beta2.powi(p.step as i32);
        for k in 0..g.len() {
            let gk = g.data[k];
            p.m[k] = opt.beta1 * p.m[k] + (1.0 - opt.beta1) * gk;
            p.v[k] = opt.beta2 * p.v[k] + (1.0 - opt.beta2) * gk * gk;
            let mhat = p.m[k] / bc1;
            let vhat = p.v[k] / bc2;
            p.value.data[k] -= opt.lr * mhat / (vhat.sqrt() + opt.eps);
        }
        if !p.value.is_finite() {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::scalar(v));
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = store_with(1.5);
        adam_step(&mut s, &[(id, Tensor::scalar(0.0))], &Adam::new(0.1)).unwrap();
        assert_eq!(s.value(id).item(), 1.5);
        assert_eq!(s.step_count(id), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so Δ = −lr·g/(|g| + eps)
        let (mut s, id) = store_with(0.0);
        adam_step(&mut s, &[(id, Tensor::scalar(1.0))], &Adam::new(0.1)).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.value(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn descends_convex_quadratic() {
        let (mut s, id) = store_with(2.0);
        let loss = |w: f64| (w - 0.5).powi(2);
        let mut prev = loss(s.value(id).item());
        for _ in 0..2 {
            let w = s.value(id).item();
            adam_step(&mut s, &[(id, Tensor::scalar(2.0 * (w - 0.5)))], &Adam::new(0.1)).unwrap();
            let now = loss(s.value(id).item());
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let (mut s, id) = store_with(0.0);
        let r = adam_step(&mut s, &[(id, Tensor::scalar(f64::NAN))], &Adam::new(0.1));
        assert!(matches!(r, Err(Error::NonFiniteGradient(_))));
        assert_eq!(s.value(id).item(), 0.0);
    }

    #[test]
    fn unit_rows_init_is_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let id = s.add("emb", 4, 3, Init::UnitRows, &mut rng);
        for r in 0..4 {
            let n: f64 = s.value(id).row_slice(r).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::new();
        s.add("a", 2, 3, Init::FanIn, &mut rng);
        s.add("b", 1, 3, Init::Zeros, &mut rng);
        let flat = s.flatten();
        let mut t = s.clone();
        t.load_flat(&flat).unwrap();
        assert_eq!(t.flatten(), flat);
        assert!(t.load_flat(&flat[1..]).is_err());
    }
}
