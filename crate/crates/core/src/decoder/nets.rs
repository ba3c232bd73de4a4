//! Small tanh MLPs evaluated either on a graph (training) or eagerly on
//! tensors (sampling), optionally carrying a forward-mode tangent.

use rand::Rng;

use crate::autodiff::tensor::{add_row, matmul};
use crate::autodiff::{Graph, Init, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add(&format!("{name}.w"), fan_in, fan_out, Init::FanIn, rng),
            b: store.add(&format!("{name}.b"), 1, fan_out, Init::Zeros, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        add_row(&matmul(x, store.value(self.w)), store.value(self.b))
    }
}

/// `in → hidden (tanh) → hidden (tanh) → out`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        let layers = vec![
            Dense::new(store, &format!("{name}.0"), input, hidden, rng),
            Dense::new(store, &format!("{name}.1"), hidden, hidden, rng),
            Dense::new(store, &format!("{name}.2"), hidden, output, rng),
        ];
        Self { layers }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, store, x);
            if i < last {
                x = g.tanh(x);
            }
        }
        x
    }

    /// Forward pass plus the directional derivative along `dx` (same shape as `x`).
    pub fn forward_tangent(&self, g: &mut Graph, store: &ParamStore, mut x: Var, mut dx: Var) -> (Var, Var) {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, store, x);
            let w = g.param(store, l.w);
            dx = g.matmul(dx, w);
            if i < last {
                x = g.tanh(x);
                dx = tanh_tangent(g, x, dx);
            }
        }
        (x, dx)
    }

    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let last = self.layers.len() - 1;
        let mut x = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.eval(store, &x);
            if i < last {
                x.data.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        x
    }

    pub fn eval_tangent(&self, store: &ParamStore, x: &Tensor, dx: &Tensor) -> (Tensor, Tensor) {
        let last = self.layers.len() - 1;
        let (mut x, mut dx) = (x.clone(), dx.clone());
        for (i, l) in self.layers.iter().enumerate() {
            x = l.eval(store, &x);
            dx = matmul(&dx, store.value(l.w));
            if i < last {
                for (v, d) in x.data.iter_mut().zip(dx.data.iter_mut()) {
                    *v = v.tanh();
                    *d *= 1.0 - *v * *v;
                }
            }
        }
        (x, dx)
    }
}

/// Tanh MLP on `[s₁ … s_c | h]` whose first layer is split so `h W_h + b`
/// can be computed once and reused across many scalar inputs.
#[derive(Clone, Debug)]
pub struct CondMlp {
    pub w_s: ParamId,
    pub w_h: ParamId,
    pub b0: ParamId,
    pub l1: Dense,
    pub l2: Dense,
}

impl CondMlp {
    pub fn new(store: &mut ParamStore, name: &str, scalars: usize, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (scalars + dim) as f64;
        let bound = 1.0 / fan_in.sqrt();
        Self {
            w_s: store.add(&format!("{name}.0.ws"), scalars, hidden, Init::Uniform(bound), rng),
            w_h: store.add(&format!("{name}.0.wh"), dim, hidden, Init::Uniform(bound), rng),
            b0: store.add(&format!("{name}.0.b"), 1, hidden, Init::Zeros, rng),
            l1: Dense::new(store, &format!("{name}.1"), hidden, hidden, rng),
            l2: Dense::new(store, &format!("{name}.2"), hidden, 1, rng),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w_s, self.w_h, self.b0, self.l1.w, self.l1.b, self.l2.w, self.l2.b]
    }

    /// `h W_h + b₀` on the graph.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Var {
        let wh = g.param(store, self.w_h);
        let b = g.param(store, self.b0);
        let p = g.matmul(h, wh);
        g.add_row(p, b)
    }

    /// Output column for scalar inputs `s` (`B×c`) and a projected history.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, s: Var, proj: Var) -> Var {
        let ws = g.param(store, self.w_s);
        let a = g.matmul(s, ws);
        let a = g.add(a, proj);
        let a = g.tanh(a);
        let a = self.l1.forward(g, store, a);
        let a = g.tanh(a);
        self.l2.forward(g, store, a)
    }

    /// Output and its derivative with respect to scalar input 0.
    pub fn forward_tangent(&self, g: &mut Graph, store: &ParamStore, s: Var, proj: Var) -> (Var, Var) {
        let rows = g.value(s).rows;
        let ws = g.param(store, self.w_s);
        let a = g.matmul(s, ws);
        let a = g.add(a, proj);
        let a0 = g.tanh(a);
        // d pre0 / d s₀ is row 0 of W_s on every row
        let c = g.value(ws).rows;
        let mut unit = Tensor::zeros(rows, c);
        (0..rows).for_each(|r| unit.set(r, 0, 1.0));
        let unit = g.input(unit);
        let d0 = g.matmul(unit, ws);
        let da0 = tanh_tangent(g, a0, d0);
        let a1 = self.l1.forward(g, store, a0);
        let a1 = g.tanh(a1);
        let w1 = g.param(store, self.l1.w);
        let d1 = g.matmul(da0, w1);
        let da1 = tanh_tangent(g, a1, d1);
        let out = self.l2.forward(g, store, a1);
        let w2 = g.param(store, self.l2.w);
        let dout = g.matmul(da1, w2);
        (out, dout)
    }

    /// Eager `h W_h + b₀`.
    pub fn project_eval(&self, store: &ParamStore, h: &Tensor) -> Tensor {
        add_row(&matmul(h, store.value(self.w_h)), store.value(self.b0))
    }

    /// Eager output for scalar columns `s` (each of length `proj.rows`);
    /// with `tangent` also returns the derivative with respect to `s[0]`.
    pub fn eval(&self, store: &ParamStore, s: &[&[f64]], proj: &Tensor, tangent: bool) -> (Vec<f64>, Vec<f64>) {
        let ws = store.value(self.w_s);
        let (w1, b1) = (store.value(self.l1.w), store.value(self.l1.b));
        let (w2, b2) = (store.value(self.l2.w), store.value(self.l2.b));
        let hid = proj.cols;
        let n = proj.rows;
        let mut out = vec![0.0; n];
        let mut dout = if tangent { vec![0.0; n] } else { Vec::new() };
        let mut a0 = vec![0.0; hid];
        let mut d0 = vec![0.0; hid];
        let mut a1 = vec![0.0; hid];
        let mut d1 = vec![0.0; hid];
        for r in 0..n {
            let p = proj.row_slice(r);
            for j in 0..hid {
                let mut v = p[j];
                for (c, col) in s.iter().enumerate() {
                    v += col[r] * ws.data[c * hid + j];
                }
                let t = v.tanh();
                a0[j] = t;
                d0[j] = (1.0 - t * t) * ws.data[j];
            }
            a1.copy_from_slice(&b1.data);
            d1.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..hid {
                let (ai, di) = (a0[i], d0[i]);
                let row = &w1.data[i * hid..(i + 1) * hid];
                for j in 0..hid {
                    a1[j] += ai * row[j];
                }
                if tangent {
                    for j in 0..hid {
                        d1[j] += di * row[j];
                    }
                }
            }
            let (mut o, mut od) = (b2.data[0], 0.0);
            for j in 0..hid {
                let t = a1[j].tanh();
                o += t * w2.data[j];
                od += (1.0 - t * t) * d1[j] * w2.data[j];
            }
            out[r] = o;
            if tangent {
                dout[r] = od;
            }
        }
        (out, dout)
    }
}

/// `(1 − y²) ⊙ dx` for `y = tanh(x)`.
fn tanh_tangent(g: &mut Graph, y: Var, dx: Var) -> Var {
    let y2 = g.square(y);
    let neg = g.neg(y2);
    let d = g.shift(neg, 1.0);
    g.mul(d, dx)
}

/// `[col | h]` with a scalar column prepended to each history row.
pub fn prepend_cols(cols: &[&[f64]], h: &Tensor) -> Tensor {
    let extra = cols.len();
    let c = h.cols + extra;
    let mut out = Tensor::zeros(h.rows, c);
    for r in 0..h.rows {
        for (k, col) in cols.iter().enumerate() {
            out.data[r * c + k] = col[r];
        }
        out.data[r * c + extra..(r + 1) * c].copy_from_slice(h.row_slice(r));
    }
    out
}

/// Repeats every row of `h` `times` times consecutively.
pub fn repeat_rows(h: &Tensor, times: usize) -> Tensor {
    let mut data = Vec::with_capacity(h.len() * times);
    for r in 0..h.rows {
        for _ in 0..times {
            data.extend_from_slice(h.row_slice(r));
        }
    }
    Tensor::new(h.rows * times, h.cols, data)
}
