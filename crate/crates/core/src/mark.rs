//! Next-mark classifier and the combined time + mark loss.

use rand::Rng;

use crate::autodiff::tensor::{add_row, matmul, softmax_rows};
use crate::autodiff::{Graph, Init, ParamId, ParamStore, Tensor, Var};

/// Linear logits `κ(h) = h W + b` over `M` marks.
#[derive(Clone, Debug)]
pub struct MarkHead {
    pub w: ParamId,
    pub b: ParamId,
    pub num_marks: usize,
}

impl MarkHead {
    pub fn new(store: &mut ParamStore, dim: usize, num_marks: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add("mark.w", dim, num_marks, Init::FanIn, rng),
            b: store.add("mark.b", 1, num_marks, Init::Zeros, rng),
            num_marks,
        }
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(h, w);
        g.add_row(y, b)
    }

    /// Per-row cross-entropy `−log p_{m_i}`.
    pub fn cross_entropy(&self, g: &mut Graph, store: &ParamStore, h: Var, marks: &[usize]) -> Var {
        let l = self.logits(g, store, h);
        cross_entropy_from_logits(g, l, marks)
    }

    /// Softmax probabilities, one row per history row.
    pub fn mark_probs(&self, store: &ParamStore, h: &Tensor) -> Tensor {
        softmax_rows(&add_row(&matmul(h, store.value(self.w)), store.value(self.b)))
    }
}

pub fn cross_entropy_from_logits(g: &mut Graph, logits: Var, marks: &[usize]) -> Var {
    let ls = g.log_softmax_rows(logits);
    let p = g.pick(ls, marks.to_vec());
    g.neg(p)
}

/// `L_i = l_i + CE_i` with both terms per row.
pub fn total_loss(g: &mut Graph, time_loss: Var, ce: Var) -> Var {
    g.add(time_loss, ce)
}
