//! Temporal conditional continuous normalizing flow decoder.
//!
//! `τ = z + ∫₀¹ f(τ(k), k | h) dk` with a scalar state, so the trace in the
//! change-of-variables integral is just `∂f/∂τ`.

use rand::Rng;
use rand_distr::StandardNormal;

use super::nets::CondMlp;
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 100;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// A scalar vector field evaluated on a batch of states at flow time `k`.
pub trait Field {
    /// `f(x_r, k)` for every row and, with `tangent`, `∂f/∂x` at the same points.
    fn eval(&self, x: &[f64], k: f64, tangent: bool) -> (Vec<f64>, Vec<f64>);
}

/// The learned field conditioned on fixed history rows.
pub struct NetField<'a> {
    net: &'a CondMlp,
    store: &'a ParamStore,
    proj: Tensor,
}

impl<'a> NetField<'a> {
    pub fn new(net: &'a CondMlp, store: &'a ParamStore, h: &Tensor) -> Self {
        Self { net, store, proj: net.project_eval(store, h) }
    }
}

impl Field for NetField<'_> {
    fn eval(&self, x: &[f64], k: f64, tangent: bool) -> (Vec<f64>, Vec<f64>) {
        let ks = vec![k; x.len()];
        self.net.eval(self.store, &[x, &ks], &self.proj, tangent)
    }
}

fn check_steps(steps: usize) -> Result<()> {
    if steps < 2 {
        return Err(Error::Config(format!("flow integrator needs at least 2 steps, got {steps}")));
    }
    Ok(())
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(x, d)| x + a * d).collect()
}

/// Classical RK4 from `k0` to `k1` in `steps` equal steps; `observe(i, x)`
/// sees the state after step `i` (and `i = 0` for the start).
pub fn integrate(
    field: &dyn Field,
    x0: &[f64],
    k0: f64,
    k1: f64,
    steps: usize,
    mut observe: Option<&mut dyn FnMut(usize, &[f64])>,
) -> Result<Vec<f64>> {
    check_steps(steps)?;
    let dk = (k1 - k0) / steps as f64;
    let mut x = x0.to_vec();
    if let Some(f) = observe.as_deref_mut() {
        f(0, &x);
    }
    for i in 0..steps {
        let k = k0 + i as f64 * dk;
        let (a, _) = field.eval(&x, k, false);
        let (b, _) = field.eval(&axpy(&x, dk / 2.0, &a), k + dk / 2.0, false);
        let (c, _) = field.eval(&axpy(&x, dk / 2.0, &b), k + dk / 2.0, false);
        let (d, _) = field.eval(&axpy(&x, dk, &c), k + dk, false);
        for (j, xj) in x.iter_mut().enumerate() {
            *xj += dk / 6.0 * (a[j] + 2.0 * b[j] + 2.0 * c[j] + d[j]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SamplerDiverged(format!("flow state left finite range at step {}", i + 1)));
        }
        if let Some(f) = observe.as_deref_mut() {
            f(i + 1, &x);
        }
    }
    Ok(x)
}

/// Base sample `z` pushed to `τ` over `k ∈ [0, 1]`.
pub fn transform(field: &dyn Field, z: &[f64], steps: usize) -> Result<Vec<f64>> {
    integrate(field, z, 0.0, 1.0, steps, None)
}

/// `τ` pulled back to its base point.
pub fn inverse(field: &dyn Field, tau: &[f64], steps: usize) -> Result<Vec<f64>> {
    integrate(field, tau, 1.0, 0.0, steps, None)
}

/// Per-row `−log N(z(0)) + ∫₀¹ ∂f/∂τ dk` along the trajectory ending at `τ`.
pub fn nll(field: &dyn Field, tau: &[f64], steps: usize) -> Result<Vec<f64>> {
    check_steps(steps)?;
    let dk = -1.0 / steps as f64;
    let mut x = tau.to_vec();
    let mut acc = vec![0.0; x.len()];
    for i in 0..steps {
        let k = 1.0 + i as f64 * dk;
        let (a, ta) = field.eval(&x, k, true);
        let (b, tb) = field.eval(&axpy(&x, dk / 2.0, &a), k + dk / 2.0, true);
        let (c, tc) = field.eval(&axpy(&x, dk / 2.0, &b), k + dk / 2.0, true);
        let (d, td) = field.eval(&axpy(&x, dk, &c), k + dk, true);
        for j in 0..x.len() {
            x[j] += dk / 6.0 * (a[j] + 2.0 * b[j] + 2.0 * c[j] + d[j]);
            acc[j] += dk / 6.0 * (ta[j] + 2.0 * tb[j] + 2.0 * tc[j] + td[j]);
        }
        if x.iter().chain(&acc).any(|v| !v.is_finite()) {
            return Err(Error::SamplerDiverged(format!("flow state left finite range at step {}", i + 1)));
        }
    }
    // acc = ∫₁⁰ tr dk = −∫₀¹ tr dk
    Ok(x.iter().zip(&acc).map(|(z, a)| HALF_LN_2PI + 0.5 * z * z - a).collect())
}

#[derive(Clone, Debug)]
pub struct Tccnf {
    pub net: CondMlp,
    pub steps: usize,
}

impl Tccnf {
    pub fn new(store: &mut ParamStore, dim: usize, hidden: usize, steps: usize, rng: &mut impl Rng) -> Result<Self> {
        check_steps(steps)?;
        Ok(Self { net: CondMlp::new(store, "dec.cnf", 2, dim, hidden, rng), steps })
    }

    /// Differentiable per-row NLL; the RK4 recursion and the trace tangents
    /// are unrolled on the graph.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, h: Var, targets: &[f64]) -> Var {
        let n = targets.len();
        let proj = self.net.project(g, store, h);
        let dk = -1.0 / self.steps as f64;
        let mut x = g.input(Tensor::column(targets.to_vec()));
        let mut acc: Option<Var> = None;
        let eval = |g: &mut Graph, x: Var, k: f64| {
            let kc = g.input(Tensor::filled(n, 1, k));
            let s = g.concat_cols(&[x, kc]);
            self.net.forward_tangent(g, store, s, proj)
        };
        for i in 0..self.steps {
            let k = 1.0 + i as f64 * dk;
            let (a, ta) = eval(g, x, k);
            let xa = g.scale(a, dk / 2.0);
            let xa = g.add(x, xa);
            let (b, tb) = eval(g, xa, k + dk / 2.0);
            let xb = g.scale(b, dk / 2.0);
            let xb = g.add(x, xb);
            let (c, tc) = eval(g, xb, k + dk / 2.0);
            let xc = g.scale(c, dk);
            let xc = g.add(x, xc);
            let (d, td) = eval(g, xc, k + dk);
            let step = rk4_combine(g, a, b, c, d, dk);
            x = g.add(x, step);
            let tstep = rk4_combine(g, ta, tb, tc, td, dk);
            acc = Some(match acc {
                None => tstep,
                Some(v) => g.add(v, tstep),
            });
        }
        let z2 = g.square(x);
        let half = g.scale(z2, 0.5);
        let base = g.shift(half, HALF_LN_2PI);
        match acc {
            Some(a) => g.sub(base, a),
            None => base,
        }
    }

    pub fn draw_base(&self, rows: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..rows).map(|_| rng.sample(StandardNormal)).collect()
    }

    pub fn sample(
        &self,
        store: &ParamStore,
        h: &Tensor,
        rng: &mut impl Rng,
        observe: Option<&mut dyn FnMut(usize, &[f64])>,
    ) -> Result<Vec<f64>> {
        let z = self.draw_base(h.rows, rng);
        let field = NetField::new(&self.net, store, h);
        integrate(&field, &z, 0.0, 1.0, self.steps, observe)
    }

    pub fn nll_eval(&self, store: &ParamStore, h: &Tensor, targets: &[f64]) -> Result<Vec<f64>> {
        nll(&NetField::new(&self.net, store, h), targets, self.steps)
    }

    /// Field value at explicit points, for inspection.
    pub fn field_at(&self, store: &ParamStore, h: &Tensor, x: &[f64], k: f64) -> Vec<f64> {
        let ks = vec![k; x.len()];
        let proj = self.net.project_eval(store, h);
        self.net.eval(store, &[x, &ks], &proj, false).0
    }
}

fn rk4_combine(g: &mut Graph, a: Var, b: Var, c: Var, d: Var, dk: f64) -> Var {
    let bc = g.add(b, c);
    let bc = g.scale(bc, 2.0);
    let s = g.add(a, bc);
    let s = g.add(s, d);
    g.scale(s, dk / 6.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Linear {
        slope: f64,
        offset: f64,
    }

    impl Field for Linear {
        fn eval(&self, x: &[f64], _k: f64, tangent: bool) -> (Vec<f64>, Vec<f64>) {
            let f = x.iter().map(|v| self.slope * v + self.offset).collect();
            let t = if tangent { vec![self.slope; x.len()] } else { Vec::new() };
            (f, t)
        }
    }

    #[test]
    fn zero_and_constant_fields() {
        let zero = Linear { slope: 0.0, offset: 0.0 };
        assert_eq!(transform(&zero, &[0.3, -2.0], 10).unwrap(), vec![0.3, -2.0]);
        let c = Linear { slope: 0.0, offset: 0.7 };
        let out = transform(&c, &[0.3], 10).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-14);
        let n = nll(&zero, &[1.5], 10).unwrap();
        assert!((n[0] - (HALF_LN_2PI + 1.125)).abs() < 1e-14);
    }

    #[test]
    fn linear_field_has_exact_trace_integral() {
        let s = -0.8;
        let f = Linear { slope: s, offset: 0.0 };
        let tau = 0.9;
        let n = nll(&f, &[tau], 100).unwrap()[0];
        let z0 = tau * (-s).exp();
        let expect = HALF_LN_2PI + 0.5 * z0 * z0 + s;
        assert!((n - expect).abs() < 1e-9);
    }

    #[test]
    fn too_few_steps_rejected() {
        let f = Linear { slope: 0.0, offset: 0.0 };
        assert!(matches!(transform(&f, &[0.0], 1), Err(Error::Config(_))));
        let mut store = ParamStore::new();
        assert!(Tccnf::new(&mut store, 2, 4, 1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn graph_nll_matches_eager() {
        let mut store = ParamStore::new();
        let m = Tccnf::new(&mut store, 3, 5, 12, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let h = Tensor::new(2, 3, vec![0.2, 0.5, -0.4, 1.0, -0.3, 0.1]);
        let targets = [0.4, -1.3];
        let mut g = Graph::new();
        let hv = g.input(h.clone());
        let l = m.loss(&mut g, &store, hv, &targets);
        let eager = m.nll_eval(&store, &h, &targets).unwrap();
        for r in 0..2 {
            assert!((g.value(l).data[r] - eager[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip() {
        let mut store = ParamStore::new();
        let m = Tccnf::new(&mut store, 4, 8, 100, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let h = Tensor::new(1, 4, vec![0.3, -0.6, 0.2, 0.9]);
        let field = NetField::new(&m.net, &store, &h);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let z: f64 = rng.sample(StandardNormal);
            let t = transform(&field, &[z], 100).unwrap();
            let back = inverse(&field, &t, 100).unwrap();
            assert!((back[0] - z).abs() < 1e-6);
        }
    }
}
