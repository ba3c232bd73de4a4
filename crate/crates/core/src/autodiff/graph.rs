//! Tape-recorded reverse-mode differentiation over [`Tensor`] nodes.
//!
//! A [`Graph`] is an append-only list of nodes; each node stores its forward
//! value and the operation (with parent handles) that produced it. Because
//! parents always precede children, the node order is a topological order and
//! the backward sweep is a single reverse pass.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
    Sin,
    Cos,
    Square,
    Sqrt,
    Abs,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Unary(Var, Unary),
    Sum(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    MaskFill(Var, Vec<bool>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<Option<usize>>),
    NormalizeRows(Var),
    Pick(Var, Vec<usize>),
    ClampMin(Var, f64),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::MulScalar(..) => "mul_scalar",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Unary(..) => "unary",
            Op::Sum(..) => "sum",
            Op::SumCols(..) => "sum_cols",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::MaskFill(..) => "mask_fill",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::NormalizeRows(..) => "normalize_rows",
            Op::Pick(..) => "pick",
            Op::ClampMin(..) => "clamp_min",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Result of a backward sweep.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of the root w.r.t. any node; zeros for nodes the root does not reach.
    pub fn wrt(&self, g: &Graph, v: Var) -> Tensor {
        match &self.nodes[v.0] {
            Some(t) => t.clone(),
            None => {
                let (r, c) = g.value(v).shape();
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Dense per-parameter gradients aligned with `store`, zero-filled where unreached.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| match self.params.get(&id) {
                Some(t) => t.clone(),
                None => {
                    let (r, c) = store.value(id).shape();
                    Tensor::zeros(r, c)
                }
            })
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant or data leaf. Gradients reach it but flow no further.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn constant(&mut self, v: f64) -> Var {
        self.input(Tensor::scalar(v))
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    /// Copy of `v`'s value as a fresh leaf (stops gradient flow).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip(self.value(b), |x, y| x / y);
        self.push(t, Op::Div(a, b))
    }

    /// `x + row` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let t = tensor::add_row(self.value(x), self.value(row));
        self.push(t, Op::AddRow(x, row))
    }

    /// `x (n×c) ⊙ col (n×1)` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let xv = self.value(x);
        let cv = self.value(col);
        assert_eq!(cv.shape(), (xv.rows, 1), "mul_col expects an n×1 column");
        let mut t = xv.clone();
        for r in 0..t.rows {
            let s = cv.data[r];
            for v in &mut t.data[r * t.cols..(r + 1) * t.cols] {
                *v *= s;
            }
        }
        self.push(t, Op::MulCol(x, col))
    }

    /// `x · s` with `s` a 1×1 node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let t = self.value(x).map(|v| v * sv);
        self.push(t, Op::MulScalar(x, s))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c))
    }

    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::Shift(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let t = tensor::matmul(self.value(a), self.value(b));
        self.push(t, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let t = tensor::matmul_nt(self.value(a), self.value(b));
        self.push(t, Op::MatMulNT(a, b))
    }

    pub fn unary(&mut self, x: Var, u: Unary) -> Var {
        let f: fn(f64) -> f64 = match u {
            Unary::Neg => |v| -v,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => tensor::sigmoid,
            Unary::Softplus => tensor::softplus,
            Unary::Relu => |v| v.max(0.0),
            Unary::Sin => f64::sin,
            Unary::Cos => f64::cos,
            Unary::Square => |v| v * v,
            Unary::Sqrt => f64::sqrt,
            Unary::Abs => f64::abs,
        };
        let t = self.value(x).map(f);
        self.push(t, Op::Unary(x, u))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }
    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sin)
    }
    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Cos)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums, `n×c → n×1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::column((0..xv.rows).map(|r| xv.row_slice(r).iter().sum()).collect());
        self.push(t, Op::SumCols(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = tensor::softmax_rows(self.value(x));
        self.push(t, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let t = tensor::log_softmax_rows(self.value(x));
        self.push(t, Op::LogSoftmaxRows(x))
    }

    /// Replaces entries where `mask` is true by `fill`; those entries get no gradient.
    pub fn mask_fill(&mut self, x: Var, mask: Vec<bool>, fill: f64) -> Var {
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.len(), "mask length mismatch");
        let mut t = xv.clone();
        for (v, &m) in t.data.iter_mut().zip(&mask) {
            if m {
                *v = fill;
            }
        }
        self.push(t, Op::MaskFill(x, mask))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut t = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                t.data[r * cols + off..r * cols + off + pv.cols].copy_from_slice(pv.row_slice(r));
            }
            off += pv.cols;
        }
        self.push(t, Op::ConcatCols(parts.to_vec()))
    }

    /// Stacks tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&pv.data);
        }
        let t = Tensor::new(data.len() / cols.max(1), cols, data);
        self.push(t, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols, "slice_cols out of range");
        let mut t = Tensor::zeros(xv.rows, len);
        for r in 0..xv.rows {
            t.data[r * len..(r + 1) * len]
                .copy_from_slice(&xv.data[r * xv.cols + start..r * xv.cols + start + len]);
        }
        self.push(t, Op::SliceCols(x, start))
    }

    /// Output row `i` is input row `idx[i]`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<Option<usize>>) -> Var {
        let xv = self.value(x);
        let c = xv.cols;
        let mut t = Tensor::zeros(idx.len(), c);
        for (i, src) in idx.iter().enumerate() {
            if let Some(s) = *src {
                t.data[i * c..(i + 1) * c].copy_from_slice(xv.row_slice(s));
            }
        }
        self.push(t, Op::GatherRows(x, idx))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut t = xv.clone();
        for r in 0..t.rows {
            let row = &mut t.data[r * t.cols..(r + 1) * t.cols];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        self.push(t, Op::NormalizeRows(x))
    }

    /// Picks column `idx[r]` from each row, `n×c → n×1`.
    pub fn pick(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        assert_eq!(idx.len(), xv.rows, "pick index length mismatch");
        let t = Tensor::column(idx.iter().enumerate().map(|(r, &c)| xv.at(r, c)).collect());
        self.push(t, Op::Pick(x, idx))
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        let t = self.value(x).map(|v| v.max(lo));
        self.push(t, Op::ClampMin(x, lo))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        assert_eq!(rv.len(), 1, "backward root must be scalar");
        if !rv.item().is_finite() {
            return Err(Error::NonFiniteLoss(rv.item()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            self.propagate(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        let mut params = HashMap::new();
        for (&id, &v) in &self.params {
            if let Some(g) = &grads[v.0] {
                params.insert(id, g.clone());
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn propagate(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                acc(grads, *a, gout.clone());
                acc(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, gout.clone());
                acc(grads, *b, gout.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, gout.zip(bv, |g, y| g * y));
                acc(grads, *b, gout.zip(av, |g, x| g * x));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, gout.zip(bv, |g, y| g / y));
                let ga = gout.zip(av, |g, x| g * x);
                acc(grads, *b, ga.zip(bv, |gx, y| -gx / (y * y)));
            }
            Op::AddRow(x, row) => {
                acc(grads, *x, gout.clone());
                let mut gr = Tensor::zeros(1, gout.cols);
                for r in 0..gout.rows {
                    for (a, b) in gr.data.iter_mut().zip(gout.row_slice(r)) {
                        *a += b;
                    }
                }
                acc(grads, *row, gr);
            }
            Op::MulCol(x, col) => {
                let (xv, cv) = (self.value(*x), self.value(*col));
                let mut gx = gout.clone();
                let mut gc = Tensor::zeros(cv.rows, 1);
                for r in 0..gx.rows {
                    let s = cv.data[r];
                    let mut dot = 0.0;
                    for c in 0..gx.cols {
                        let k = r * gx.cols + c;
                        dot += gout.data[k] * xv.data[k];
                        gx.data[k] *= s;
                    }
                    gc.data[r] = dot;
                }
                acc(grads, *x, gx);
                acc(grads, *col, gc);
            }
            Op::MulScalar(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s).item());
                acc(grads, *x, gout.map(|g| g * sv));
                let d: f64 = gout.data.iter().zip(&xv.data).map(|(g, v)| g * v).sum();
                acc(grads, *s, Tensor::scalar(d));
            }
            Op::Scale(x, c) => acc(grads, *x, gout.map(|g| g * c)),
            Op::Shift(x) => acc(grads, *x, gout.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, tensor::matmul_nt(gout, bv));
                acc(grads, *b, tensor::matmul_tn(av, gout));
            }
            Op::MatMulNT(a, b) => {
                // out = a bᵀ: da = gout b, db = goutᵀ a
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, tensor::matmul(gout, bv));
                acc(grads, *b, tensor::matmul_tn(gout, av));
            }
            Op::Unary(x, u) => {
                let xv = self.value(*x);
                let g = match u {
                    Unary::Neg => gout.map(|g| -g),
                    Unary::Exp => gout.zip(out, |g, y| g * y),
                    Unary::Log => gout.zip(xv, |g, x| g / x),
                    Unary::Tanh => gout.zip(out, |g, y| g * (1.0 - y * y)),
                    Unary::Sigmoid => gout.zip(out, |g, y| g * y * (1.0 - y)),
                    Unary::Softplus => gout.zip(xv, |g, x| g * tensor::sigmoid(x)),
                    Unary::Relu => gout.zip(xv, |g, x| if x > 0.0 { g } else { 0.0 }),
                    Unary::Sin => gout.zip(xv, |g, x| g * x.cos()),
                    Unary::Cos => gout.zip(xv, |g, x| -g * x.sin()),
                    Unary::Square => gout.zip(xv, |g, x| 2.0 * g * x),
                    Unary::Sqrt => gout.zip(out, |g, y| g * 0.5 / y),
                    Unary::Abs => gout.zip(xv, |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    }),
                };
                acc(grads, *x, g);
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                acc(grads, *x, Tensor::filled(r, c, gout.item()));
            }
            Op::SumCols(x) => {
                let (r, c) = self.value(*x).shape();
                let mut g = Tensor::zeros(r, c);
                for row in 0..r {
                    for v in &mut g.data[row * c..(row + 1) * c] {
                        *v = gout.data[row];
                    }
                }
                acc(grads, *x, g);
            }
            Op::SoftmaxRows(x) => {
                let mut g = out.clone();
                for r in 0..out.rows {
                    let y = out.row_slice(r);
                    let go = gout.row_slice(r);
                    let dot: f64 = y.iter().zip(go).map(|(a, b)| a * b).sum();
                    for (k, gv) in g.data[r * out.cols..(r + 1) * out.cols].iter_mut().enumerate() {
                        *gv = y[k] * (go[k] - dot);
                    }
                }
                acc(grads, *x, g);
            }
            Op::LogSoftmaxRows(x) => {
                let mut g = out.clone();
                for r in 0..out.rows {
                    let go = gout.row_slice(r);
                    let s: f64 = go.iter().sum();
                    for (k, gv) in g.data[r * out.cols..(r + 1) * out.cols].iter_mut().enumerate() {
                        *gv = go[k] - out.data[r * out.cols + k].exp() * s;
                    }
                }
                acc(grads, *x, g);
            }
            Op::MaskFill(x, mask) => {
                let mut g = gout.clone();
                for (v, &m) in g.data.iter_mut().zip(mask) {
                    if m {
                        *v = 0.0;
                    }
                }
                acc(grads, *x, g);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols;
                    let mut g = Tensor::zeros(gout.rows, pc);
                    for r in 0..gout.rows {
                        g.data[r * pc..(r + 1) * pc]
                            .copy_from_slice(&gout.data[r * gout.cols + off..r * gout.cols + off + pc]);
                    }
                    acc(grads, p, g);
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let (r, c) = self.value(p).shape();
                    acc(grads, p, Tensor::new(r, c, gout.data[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::SliceCols(x, start) => {
                let (r, c) = self.value(*x).shape();
                let mut g = Tensor::zeros(r, c);
                for row in 0..r {
                    g.data[row * c + start..row * c + start + gout.cols]
                        .copy_from_slice(gout.row_slice(row));
                }
                acc(grads, *x, g);
            }
            Op::GatherRows(x, idx) => {
                let (r, c) = self.value(*x).shape();
                let mut g = Tensor::zeros(r, c);
                for (i, src) in idx.iter().enumerate() {
                    if let Some(s) = *src {
                        for (a, b) in g.data[s * c..(s + 1) * c].iter_mut().zip(gout.row_slice(i)) {
                            *a += b;
                        }
                    }
                }
                acc(grads, *x, g);
            }
            Op::NormalizeRows(x) => {
                // y = x/‖x‖, dx = (g − y (y·g)) / ‖x‖
                let xv = self.value(*x);
                let mut g = Tensor::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    let n = xv.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let y = out.row_slice(r);
                    let go = gout.row_slice(r);
                    let dot: f64 = y.iter().zip(go).map(|(a, b)| a * b).sum();
                    for k in 0..xv.cols {
                        g.data[r * xv.cols + k] = (go[k] - y[k] * dot) / n;
                    }
                }
                acc(grads, *x, g);
            }
            Op::Pick(x, idx) => {
                let (r, c) = self.value(*x).shape();
                let mut g = Tensor::zeros(r, c);
                for (row, &col) in idx.iter().enumerate() {
                    g.data[row * c + col] = gout.data[row];
                }
                acc(grads, *x, g);
            }
            Op::ClampMin(x, lo) => {
                let xv = self.value(*x);
                acc(grads, *x, gout.zip(xv, |g, v| if v > *lo { g } else { 0.0 }));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.square(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(&g, x).item(), 6.0);
    }

    #[test]
    fn softmax_first_component_derivative() {
        let f = |x: f64| {
            let mut g = Graph::new();
            let v = g.input(Tensor::row(vec![x, 0.0]));
            let s = g.softmax_rows(v);
            (g.value(s).at(0, 0), g, v, s)
        };
        let (_, g, v, s) = f(0.0);
        let first = {
            let mut g = g;
            let p = g.pick(s, vec![0]);
            let grads = g.backward(p).unwrap();
            grads.wrt(&g, v).at(0, 0)
        };
        let oracle = fd(|x| f(x).0, 0.0);
        assert!((oracle - 0.25).abs() < 1e-9);
        assert!((first - 0.25).abs() < 1e-12);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(2.0));
        let c = g.constant(5.0);
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.wrt(&g, x).item(), 0.0);
    }

    #[test]
    fn non_finite_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(-1.0));
        let y = g.log(x);
        assert!(matches!(g.backward(y), Err(Error::NonFiniteLoss(_))));
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let a = g.input(Tensor::new(2, 3, vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4]));
            let b = g.input(Tensor::new(3, 2, vec![1.0, 0.5, -0.2, 0.9, 0.4, -1.1]));
            let m = g.matmul(a, b);
            let t = g.tanh(m);
            let s = g.softmax_rows(t);
            let l = g.log(s);
            let r = g.sum(l);
            let grads = g.backward(r).unwrap();
            (grads.wrt(&g, a), grads.wrt(&g, b))
        };
        let (a1, b1) = build();
        let (a2, b2) = build();
        assert_eq!(a1.data, a2.data);
        assert_eq!(b1.data, b2.data);
    }

    /// Every op against central differences on a composite expression.
    #[test]
    fn composite_ops_match_finite_differences() {
        let x0 = vec![0.3, -0.7, 1.1, 0.4, -0.2, 0.9];
        let eval = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let xv = g.input(Tensor::new(2, 3, x.to_vec()));
            let w = g.input(Tensor::new(3, 3, vec![0.2, -0.1, 0.5, 0.3, 0.8, -0.6, 0.1, 0.4, 0.7]));
            let row = g.input(Tensor::row(vec![0.1, -0.2, 0.3]));
            let col = g.input(Tensor::column(vec![1.5, -0.5]));
            let s = g.input(Tensor::scalar(0.7));
            let a = g.matmul(xv, w);
            let b = g.add_row(a, row);
            let c = g.tanh(b);
            let d = g.mul_col(c, col);
            let e = g.mul_scalar(d, s);
            let f = g.matmul_nt(e, xv);
            let f = g.mask_fill(f, vec![false, true, false, false], -1e9);
            let sm = g.softmax_rows(f);
            let ls = g.log_softmax_rows(e);
            let pk = g.pick(ls, vec![2, 0]);
            let nr = g.normalize_rows(xv);
            let sp = g.softplus(nr);
            let sg = g.sigmoid(sp);
            let sn = g.sin(sg);
            let cs = g.cos(sn);
            let cat = g.concat_cols(&[cs, sm]);
            let sl = g.slice_cols(cat, 1, 3);
            let ga = g.gather_rows(sl, vec![Some(1), None, Some(0)]);
            let ga = g.concat_rows(&[ga, sl]);
            let sq = g.square(ga);
            let sc = g.sum_cols(sq);
            let ex = g.exp(sc);
            let ab = g.abs(pk);
            let sqr = g.sqrt(ab);
            let t1 = g.sum(ex);
            let t2 = g.sum(sqr);
            let t3 = g.div(t1, t2);
            let t4 = g.sub(t3, s);
            let cl = g.clamp_min(xv, -0.5);
            let t5 = g.sum(cl);
            let t6 = g.mul(t4, t5);
            let grads = g.backward(t6).unwrap();
            (g.scalar_value(t6), grads.wrt(&g, xv).data)
        };
        let (_, ad) = eval(&x0);
        let h = 1e-6;
        for k in 0..x0.len() {
            let mut xp = x0.clone();
            xp[k] += h;
            let mut xm = x0.clone();
            xm[k] -= h;
            let num = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
            assert!((num - ad[k]).abs() / (num.abs() + 1e-8) < 1e-6, "k={k} fd={num} ad={}", ad[k]);
        }
    }
}
