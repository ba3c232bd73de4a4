//! History encoders: event embedding, (revised) causal self-attention and
//! recurrent cells. Every encoder maps a sequence of `n` events to an `n×D`
//! matrix whose row `i` summarizes events `0..=i`.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::data::intervals;
use crate::error::{Error, Result};

/// Logit assigned to masked (future or zero-similarity) pairs.
pub const MASK_LOGIT: f64 = -1e9;
/// Similarities with absolute value below this count as exactly zero.
pub const ZERO_SIMILARITY: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Gru,
    Lstm,
    Att,
    RevAtt,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(Self::Gru),
            "lstm" => Ok(Self::Lstm),
            "att" => Ok(Self::Att),
            "revatt" | "rev_att" => Ok(Self::RevAtt),
            _ => Err(Error::Config(format!("unknown encoder '{s}'"))),
        }
    }
}

/// `Sahp`: `[sin(ω₁ j + ω₂ τ); cos(ω₁ j + ω₂ τ)]`. `Thp`: `[sin(ω₁ τ); cos(ω₂ τ)]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeEncoding {
    #[default]
    Sahp,
    Thp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub dim: usize,
    pub layers: usize,
    pub num_marks: usize,
    #[serde(default)]
    pub time_encoding: TimeEncoding,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.dim % 2 != 0 {
            return Err(Error::Config(format!("embedding dimension must be even and positive, got {}", self.dim)));
        }
        if self.layers == 0 {
            return Err(Error::Config("at least one encoder layer is required".into()));
        }
        if self.num_marks == 0 {
            return Err(Error::Config("number of marks must be positive".into()));
        }
        Ok(())
    }

    /// Width of the time part and of the type part.
    pub fn half(&self) -> usize {
        self.dim / 2
    }

    /// Number of distinct frequencies; each drives one sin/cos pair.
    pub fn num_freqs(&self) -> usize {
        self.half().div_ceil(2)
    }
}

#[derive(Clone, Debug)]
struct AttLayer {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    ffn: Option<[ParamId; 4]>,
}

#[derive(Clone, Debug)]
struct RecLayer {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
enum Body {
    Attention { layers: Vec<AttLayer>, decay: Option<ParamId> },
    Recurrent(Vec<RecLayer>),
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    omega1: ParamId,
    omega2: ParamId,
    type_emb: ParamId,
    body: Body,
}

impl Encoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (d, half, p) = (config.dim, config.half(), config.num_freqs());
        let freqs = Tensor::row((0..p).map(|k| 10f64.powf(-(k as f64) / p as f64)).collect());
        let omega1 = store.insert("enc.omega1", freqs.clone());
        let omega2 = store.insert("enc.omega2", freqs);
        let type_emb = store.add("enc.type_emb", config.num_marks, half, Init::UnitRows, rng);
        let body = match config.kind {
            EncoderKind::Att | EncoderKind::RevAtt => {
                let layers = (0..config.layers)
                    .map(|l| AttLayer {
                        wq: store.add(&format!("enc.l{l}.wq"), d, d, Init::FanIn, rng),
                        wk: store.add(&format!("enc.l{l}.wk"), d, d, Init::FanIn, rng),
                        wv: store.add(&format!("enc.l{l}.wv"), d, d, Init::FanIn, rng),
                        ffn: (l + 1 < config.layers).then(|| {
                            [
                                store.add(&format!("enc.l{l}.ffn_w1"), d, 2 * d, Init::FanIn, rng),
                                store.add(&format!("enc.l{l}.ffn_b1"), 1, 2 * d, Init::Zeros, rng),
                                store.add(&format!("enc.l{l}.ffn_w2"), 2 * d, d, Init::FanIn, rng),
                                store.add(&format!("enc.l{l}.ffn_b2"), 1, d, Init::Zeros, rng),
                            ]
                        }),
                    })
                    .collect();
                let decay = (config.kind == EncoderKind::RevAtt).then(|| store.add("enc.a", 1, 1, Init::Zeros, rng));
                Body::Attention { layers, decay }
            }
            EncoderKind::Gru | EncoderKind::Lstm => {
                let gates = if config.kind == EncoderKind::Gru { 3 } else { 4 };
                Body::Recurrent(
                    (0..config.layers)
                        .map(|l| RecLayer {
                            wx: store.add(&format!("enc.l{l}.wx"), d, gates * d, Init::FanIn, rng),
                            wh: store.add(&format!("enc.l{l}.wh"), d, gates * d, Init::FanIn, rng),
                            b: store.add(&format!("enc.l{l}.b"), 1, gates * d, Init::Zeros, rng),
                        })
                        .collect(),
                )
            }
        };
        Ok(Self { config, omega1, omega2, type_emb, body })
    }

    pub fn type_embedding_id(&self) -> ParamId {
        self.type_emb
    }

    pub fn decay_id(&self) -> Option<ParamId> {
        match &self.body {
            Body::Attention { decay, .. } => *decay,
            Body::Recurrent(_) => None,
        }
    }

    /// Per-event embeddings `[ω(τ_j); E_mᵀ m_j / ‖·‖]`, `n×D`.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, times: &[f64], marks: &[usize]) -> Var {
        let taus = intervals(times);
        let positions: Vec<f64> = (1..=times.len()).map(|j| j as f64).collect();
        self.embed_raw(g, store, &taus, &positions, marks)
    }

    fn embed_raw(&self, g: &mut Graph, store: &ParamStore, taus: &[f64], positions: &[f64], marks: &[usize]) -> Var {
        let (half, p) = (self.config.half(), self.config.num_freqs());
        // spread: frequency k drives time columns 2k (sin) and 2k+1 (cos)
        let mut even = Tensor::zeros(p, half);
        let mut odd = Tensor::zeros(p, half);
        for q in 0..half {
            if q % 2 == 0 {
                even.set(q / 2, q, 1.0);
            } else {
                odd.set(q / 2, q, 1.0);
            }
        }
        let phase = Tensor::row((0..half).map(|q| if q % 2 == 0 { 0.0 } else { FRAC_PI_2 }).collect());
        let w1 = g.param(store, self.omega1);
        let w2 = g.param(store, self.omega2);
        let tau = g.input(Tensor::column(taus.to_vec()));
        let angle = match self.config.time_encoding {
            TimeEncoding::Sahp => {
                let both = g.input(add_tensors(&even, &odd));
                let f1 = g.matmul(w1, both);
                let f2 = g.matmul(w2, both);
                let pos = g.input(Tensor::column(positions.to_vec()));
                let a = g.matmul(pos, f1);
                let b = g.matmul(tau, f2);
                g.add(a, b)
            }
            TimeEncoding::Thp => {
                let ev = g.input(even);
                let od = g.input(odd);
                let f1 = g.matmul(w1, ev);
                let f2 = g.matmul(w2, od);
                let f = g.add(f1, f2);
                g.matmul(tau, f)
            }
        };
        let ph = g.input(phase);
        let shifted = g.add_row(angle, ph);
        let time_part = g.sin(shifted);
        let e = g.param(store, self.type_emb);
        let unit = g.normalize_rows(e);
        let idx = marks.iter().map(|&m| Some(m)).collect();
        let type_part = g.gather_rows(unit, idx);
        g.concat_cols(&[time_part, type_part])
    }

    /// Row `i` is the encoding after observing events `0..=i`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, times: &[f64], marks: &[usize]) -> Var {
        let x = self.embed(g, store, times, marks);
        match &self.body {
            Body::Attention { layers, decay } => self.encode_attention(g, store, x, times, marks, layers, *decay),
            Body::Recurrent(layers) => self.encode_recurrent(g, store, x, layers),
        }
    }

    /// Row `i` is `h_{i−1}`, the encoding available when predicting event `i`; row 0 is zero.
    pub fn history(&self, g: &mut Graph, store: &ParamStore, times: &[f64], marks: &[usize]) -> Var {
        let h = self.encode(g, store, times, marks);
        let idx = (0..times.len()).map(|i| i.checked_sub(1)).collect();
        g.gather_rows(h, idx)
    }

    #[allow(clippy::too_many_arguments)]
    fn encode_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut x: Var,
        times: &[f64],
        marks: &[usize],
        layers: &[AttLayer],
        decay: Option<ParamId>,
    ) -> Var {
        let revision = decay.map(|a| {
            let e = g.param(store, self.type_emb);
            let unit = g.normalize_rows(e);
            let rows = g.gather_rows(unit, marks.iter().map(|&m| Some(m)).collect());
            let sim = g.matmul_nt(rows, rows);
            let a = g.param(store, a);
            Revision { sim, a, times }
        });
        for layer in layers {
            let wq = g.param(store, layer.wq);
            let wk = g.param(store, layer.wk);
            let wv = g.param(store, layer.wv);
            let w = attention_probs(g, x, wq, wk, revision.as_ref(), self.config.dim);
            let v = g.matmul(x, wv);
            let out = g.matmul(w, v);
            x = match layer.ffn {
                None => out,
                Some([w1, b1, w2, b2]) => {
                    let r = g.add(x, out);
                    let w1 = g.param(store, w1);
                    let b1 = g.param(store, b1);
                    let w2 = g.param(store, w2);
                    let b2 = g.param(store, b2);
                    let a = g.matmul(r, w1);
                    let a = g.add_row(a, b1);
                    let a = g.relu(a);
                    let f = g.matmul(a, w2);
                    let f = g.add_row(f, b2);
                    g.add(r, f)
                }
            };
        }
        x
    }

    fn encode_recurrent(&self, g: &mut Graph, store: &ParamStore, mut x: Var, layers: &[RecLayer]) -> Var {
        let d = self.config.dim;
        let n = g.value(x).rows;
        let lstm = self.config.kind == EncoderKind::Lstm;
        for layer in layers {
            let wx = g.param(store, layer.wx);
            let wh = g.param(store, layer.wh);
            let b = g.param(store, layer.b);
            let gx = g.matmul(x, wx);
            let gx = g.add_row(gx, b);
            let mut h = g.input(Tensor::zeros(1, d));
            let mut c = g.input(Tensor::zeros(1, d));
            let mut outs = Vec::with_capacity(n);
            for i in 0..n {
                let xi = g.gather_rows(gx, vec![Some(i)]);
                let hh = g.matmul(h, wh);
                if lstm {
                    let pre = g.add(xi, hh);
                    let ig = gate(g, pre, 0, d, true);
                    let fg = gate(g, pre, d, d, true);
                    let cg = gate(g, pre, 2 * d, d, false);
                    let og = gate(g, pre, 3 * d, d, true);
                    let fc = g.mul(fg, c);
                    let ic = g.mul(ig, cg);
                    c = g.add(fc, ic);
                    let tc = g.tanh(c);
                    h = g.mul(og, tc);
                } else {
                    let xr = g.slice_cols(xi, 0, 2 * d);
                    let hr = g.slice_cols(hh, 0, 2 * d);
                    let rz = g.add(xr, hr);
                    let rz = g.sigmoid(rz);
                    let r = g.slice_cols(rz, 0, d);
                    let z = g.slice_cols(rz, d, d);
                    let xn = g.slice_cols(xi, 2 * d, d);
                    let hn = g.slice_cols(hh, 2 * d, d);
                    let rh = g.mul(r, hn);
                    let cand = g.add(xn, rh);
                    let cand = g.tanh(cand);
                    // h' = n + z ⊙ (h − n)
                    let diff = g.sub(h, cand);
                    let zd = g.mul(z, diff);
                    h = g.add(cand, zd);
                }
                outs.push(h);
            }
            x = g.concat_rows(&outs);
        }
        x
    }

    /// `Ê Êᵀ` with unit-normalized type embedding rows.
    pub fn type_similarity_matrix(&self, store: &ParamStore) -> Tensor {
        similarity_of_rows(store.value(self.type_emb))
    }
}

fn gate(g: &mut Graph, pre: Var, start: usize, len: usize, sigmoid: bool) -> Var {
    let s = g.slice_cols(pre, start, len);
    if sigmoid {
        g.sigmoid(s)
    } else {
        g.tanh(s)
    }
}

fn add_tensors(a: &Tensor, b: &Tensor) -> Tensor {
    a.zip(b, |x, y| x + y)
}

/// Cosine-similarity matrix of the rows of `e`.
pub fn similarity_of_rows(e: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let x = g.input(e.clone());
    let u = g.normalize_rows(x);
    let s = g.matmul_nt(u, u);
    g.value(s).clone()
}

struct Revision<'a> {
    sim: Var,
    a: Var,
    times: &'a [f64],
}

/// Causal attention probabilities, row `i` = query `i`, column `j` = key `j ≤ i`.
///
/// Logits are `φ_{ij} = (x_j W_Q)·(x_i W_K)/√D`; the revised form multiplies by
/// `sim(m_j, m_i)·exp(a(t_i − t_j))` and masks zero-similarity pairs.
fn attention_probs(g: &mut Graph, x: Var, wq: Var, wk: Var, rev: Option<&Revision>, dim: usize) -> Var {
    let n = g.value(x).rows;
    let q = g.matmul(x, wq);
    let k = g.matmul(x, wk);
    let phi = g.matmul_nt(k, q);
    let mut logits = g.scale(phi, 1.0 / (dim as f64).sqrt());
    let mut mask: Vec<bool> = (0..n * n).map(|p| p % n > p / n).collect();
    if let Some(r) = rev {
        let dt = Tensor::new(
            n,
            n,
            (0..n * n)
                .map(|p| {
                    let (i, j) = (p / n, p % n);
                    if j <= i {
                        r.times[i] - r.times[j]
                    } else {
                        0.0
                    }
                })
                .collect(),
        );
        let dt = g.input(dt);
        let scaled = g.mul_scalar(dt, r.a);
        let recency = g.exp(scaled);
        let weighted = g.mul(r.sim, recency);
        logits = g.mul(weighted, logits);
        for (m, s) in mask.iter_mut().zip(&g.value(r.sim).data) {
            *m |= s.abs() < ZERO_SIMILARITY;
        }
    }
    let masked = g.mask_fill(logits, mask, MASK_LOGIT);
    g.softmax_rows(masked)
}

/// Causal attention weight matrix for given embeddings and projections.
pub fn attention_weights(emb: &Tensor, wq: &Tensor, wk: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let x = g.input(emb.clone());
    let q = g.input(wq.clone());
    let k = g.input(wk.clone());
    let w = attention_probs(&mut g, x, q, k, None, emb.cols);
    g.value(w).clone()
}

/// Revised attention weights; `type_rows[j]` is the type embedding of event `j`.
pub fn revised_attention_weights(
    emb: &Tensor,
    type_rows: &Tensor,
    times: &[f64],
    wq: &Tensor,
    wk: &Tensor,
    a: f64,
) -> Tensor {
    let mut g = Graph::new();
    let x = g.input(emb.clone());
    let q = g.input(wq.clone());
    let k = g.input(wk.clone());
    let t = g.input(type_rows.clone());
    let u = g.normalize_rows(t);
    let sim = g.matmul_nt(u, u);
    let a = g.input(Tensor::scalar(a));
    let w = attention_probs(&mut g, x, q, k, Some(&Revision { sim, a, times }), emb.cols);
    g.value(w).clone()
}

/// Embedding of a single event, for inspection.
pub fn embed_event(enc: &Encoder, store: &ParamStore, tau: f64, mark: usize, position: usize) -> Vec<f64> {
    let mut g = Graph::new();
    let e = enc.embed_raw(&mut g, store, &[tau], &[position as f64], &[mark]);
    g.value(e).data.clone()
}
