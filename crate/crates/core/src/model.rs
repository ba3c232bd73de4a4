//! The full model: history encoder, time decoder and mark head over one parameter store.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use crate::data::{Dataset, EventSequence, LogNormStats};
use crate::decoder::{Decoder, DecoderConfig, DecoderKind};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::mark::MarkHead;
use crate::metrics::{self, MetricsReport, SequenceMetrics};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.dim != self.decoder.dim {
            return Err(Error::Config(format!(
                "encoder width {} differs from decoder width {}",
                self.encoder.dim, self.decoder.dim
            )));
        }
        Ok(())
    }
}

/// Everything a checkpoint header records besides the parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub stats: LogNormStats,
    /// Training horizon the data were rescaled by.
    pub t_max: f64,
}

/// Which parameters a gradient pass serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Encoder, decoder (generator side) and mark head.
    Main,
    /// Critic of the adversarial decoder only.
    Critic,
}

#[derive(Clone, Debug)]
pub struct BatchGradients {
    /// `Σ_events L_i` averaged over the sequences of the batch.
    pub loss: f64,
    pub grads: Vec<(ParamId, Tensor)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub mark: MarkHead,
    pub stats: LogNormStats,
    pub t_max: f64,
}

impl Model {
    pub fn new(config: ModelConfig, stats: LogNormStats, t_max: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), &mut store, &mut rng)?;
        let decoder = Decoder::new(&config.decoder, &mut store, &mut rng)?;
        let mark = MarkHead::new(&mut store, config.encoder.dim, config.encoder.num_marks, &mut rng);
        Ok(Self { config, store, encoder, decoder, mark, stats, t_max })
    }

    pub fn kind(&self) -> DecoderKind {
        self.decoder.kind()
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta { config: self.config.clone(), stats: self.stats, t_max: self.t_max }
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let meta = serde_json::to_value(self.meta()).map_err(|e| Error::Schema(e.to_string()))?;
        checkpoint::save(path, seed, meta, &self.store)
    }

    /// Rebuilds the model from a checkpoint; returns it with the recorded seed.
    pub fn load(path: &Path) -> Result<(Self, u64)> {
        let (header, values) = checkpoint::load(path)?;
        let meta: ModelMeta = serde_json::from_value(header.meta.clone())
            .map_err(|e| Error::Schema(format!("checkpoint metadata: {e}")))?;
        let mut model = Model::new(meta.config, meta.stats, meta.t_max, header.seed)?;
        checkpoint::restore_into(&mut model.store, &header, &values)?;
        Ok((model, header.seed))
    }

    /// Ids of the parameters the main phase updates.
    pub fn main_ids(&self) -> Vec<ParamId> {
        let critic = self.decoder.critic_ids();
        self.store.ids().filter(|id| !critic.contains(id)).collect()
    }

    /// Loss-space targets for every event of `seq`.
    pub fn targets(&self, seq: &EventSequence) -> Vec<f64> {
        seq.intervals().into_iter().map(|t| self.decoder.to_target(t, &self.stats)).collect()
    }

    /// History encodings `h_{i−1}` for every event, one row each.
    pub fn history(&self, seq: &EventSequence) -> Tensor {
        let mut g = Graph::new();
        let h = self.encoder.history(&mut g, &self.store, &seq.times, &seq.marks);
        g.value(h).clone()
    }

    /// Encoding after the last event of `seq`, used to predict what follows it.
    pub fn next_history(&self, seq: &EventSequence) -> Tensor {
        if seq.is_empty() {
            return Tensor::zeros(1, self.config.encoder.dim);
        }
        let mut g = Graph::new();
        let h = self.encoder.encode(&mut g, &self.store, &seq.times, &seq.marks);
        let v = g.value(h);
        Tensor::row(v.row_slice(v.rows - 1).to_vec())
    }

    /// Rows per decoder sub-graph.
    fn chunk_rows(&self) -> usize {
        match self.kind() {
            DecoderKind::Tccnf => 128,
            _ => 2048,
        }
    }

    /// Loss and gradients of one batch of sequences.
    ///
    /// The encoder and mark head run in one graph; the decoder loss runs in
    /// row chunks against the history values, and its gradient with respect
    /// to the history is pulled back through the encoder.
    pub fn batch_gradients(&self, batch: &[&EventSequence], phase: Phase, rng: &mut impl Rng) -> Result<BatchGradients> {
        let seqs: Vec<&EventSequence> = batch.iter().copied().filter(|s| !s.is_empty()).collect();
        if seqs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let weight = 1.0 / seqs.len() as f64;
        let mut g = Graph::new();
        let hs: Vec<Var> = seqs.iter().map(|s| self.encoder.history(&mut g, &self.store, &s.times, &s.marks)).collect();
        let h = g.concat_rows(&hs);
        let marks: Vec<usize> = seqs.iter().flat_map(|s| s.marks.iter().copied()).collect();
        let targets: Vec<f64> = seqs.iter().flat_map(|s| self.targets(s)).collect();
        let hval = g.value(h).clone();

        let mut acc = GradAccumulator::new(&self.store);
        let mut dh = Tensor::zeros(hval.rows, hval.cols);
        let mut loss = 0.0;
        for start in (0..hval.rows).step_by(self.chunk_rows()) {
            let end = (start + self.chunk_rows()).min(hval.rows);
            let mut cg = Graph::new();
            let hin = cg.input(rows(&hval, start, end));
            let noise = self.decoder.draw_noise(end - start, rng);
            let per_row = match phase {
                Phase::Main => self.decoder.loss(&mut cg, &self.store, hin, &targets[start..end], &noise)?,
                Phase::Critic => self
                    .decoder
                    .critic_loss(&mut cg, &self.store, hin, &targets[start..end], &noise)
                    .ok_or_else(|| Error::Config(format!("decoder {} has no critic", self.kind())))?,
            };
            let total = cg.sum(per_row);
            let root = cg.scale(total, weight);
            loss += cg.value(root).item();
            let grads = cg.backward(root)?;
            acc.add(&grads);
            if phase == Phase::Main {
                let gh = grads.wrt(&cg, hin);
                dh.data[start * hval.cols..end * hval.cols].copy_from_slice(&gh.data);
            }
        }

        if phase == Phase::Main {
            let ce = self.mark.cross_entropy(&mut g, &self.store, h, &marks);
            let ce_sum = g.sum(ce);
            let ce_w = g.scale(ce_sum, weight);
            loss += g.value(ce_w).item();
            let pull = g.input(dh);
            let hd = g.mul(h, pull);
            let surrogate = g.sum(hd);
            let root = g.add(surrogate, ce_w);
            let grads = g.backward(root)?;
            acc.add(&grads);
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(loss));
        }

        let wanted = match phase {
            Phase::Main => self.main_ids(),
            Phase::Critic => self.decoder.critic_ids(),
        };
        Ok(BatchGradients { loss, grads: acc.take(&wanted) })
    }

    /// Mean over sequences of `Σ_events (l_i + CE_i)`, without gradients.
    pub fn dataset_loss(&self, ds: &Dataset, rng: &mut impl Rng) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for seq in ds.sequences.iter().filter(|s| !s.is_empty()) {
            total += self.sequence_loss(seq, rng)?;
            n += 1;
        }
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let mean = total / n as f64;
        if !mean.is_finite() {
            return Err(Error::NonFiniteLoss(mean));
        }
        Ok(mean)
    }

    pub fn sequence_loss(&self, seq: &EventSequence, rng: &mut impl Rng) -> Result<f64> {
        let mut g = Graph::new();
        let h = self.encoder.history(&mut g, &self.store, &seq.times, &seq.marks);
        let ce = self.mark.cross_entropy(&mut g, &self.store, h, &seq.marks);
        let mut total = g.value(ce).sum();
        let hval = g.value(h).clone();
        let targets = self.targets(seq);
        for start in (0..hval.rows).step_by(self.chunk_rows()) {
            let end = (start + self.chunk_rows()).min(hval.rows);
            let mut cg = Graph::new();
            let hin = cg.input(rows(&hval, start, end));
            let noise = self.decoder.draw_noise(end - start, rng);
            let l = self.decoder.loss(&mut cg, &self.store, hin, &targets[start..end], &noise)?;
            total += cg.value(l).sum();
        }
        Ok(total)
    }

    /// Generates one sequence on `[0, horizon]` by feeding every sampled
    /// event back into the encoder. `deterministic` takes the expected
    /// interval and the most likely mark instead of sampling them.
    pub fn rollout(&self, horizon: f64, max_events: usize, deterministic: bool, rng: &mut impl Rng) -> Result<EventSequence> {
        let mut seq = EventSequence::empty();
        while seq.len() < max_events {
            let h = self.next_history(&seq);
            let tau = if deterministic {
                match self.decoder.closed_form_mean(&self.store, &h) {
                    Some(m) => m[0],
                    None => {
                        let draws = self.decoder.sample_many(&self.store, &h, crate::decoder::DEFAULT_SAMPLES, &self.stats, rng)?;
                        draws[0].iter().sum::<f64>() / draws[0].len() as f64
                    }
                }
            } else {
                self.decoder.sample_intervals(&self.store, &h, &self.stats, rng)?[0]
            };
            let t = seq.last_time() + tau;
            if t > horizon {
                break;
            }
            let probs = self.mark.mark_probs(&self.store, &h);
            let p = probs.row_slice(0);
            let mark = if deterministic {
                (0..p.len()).fold(0, |b, j| if p[j] > p[b] { j } else { b })
            } else {
                let mut u: f64 = rng.random();
                let mut m = p.len() - 1;
                for (j, pj) in p.iter().enumerate() {
                    if u < *pj {
                        m = j;
                        break;
                    }
                    u -= pj;
                }
                m
            };
            seq.push(t, mark);
        }
        Ok(seq)
    }

    /// Runs the evaluation protocol over `ds`.
    pub fn evaluate(&self, ds: &Dataset, cfg: &EvalConfig) -> Result<MetricsReport> {
        evaluate(self, ds, cfg)
    }
}

/// Rows `start..end` of `t`.
pub fn rows(t: &Tensor, start: usize, end: usize) -> Tensor {
    Tensor::new(end - start, t.cols, t.data[start * t.cols..end * t.cols].to_vec())
}

/// Sums gradients of several graphs per parameter.
struct GradAccumulator {
    slots: Vec<Option<Tensor>>,
}

impl GradAccumulator {
    fn new(store: &ParamStore) -> Self {
        Self { slots: vec![None; store.len()] }
    }

    fn add(&mut self, grads: &crate::autodiff::Gradients) {
        for (i, slot) in self.slots.iter_mut().enumerate() {
            if let Some(t) = grads.param(ParamId(i)) {
                match slot {
                    Some(s) => s.add_assign(t),
                    None => *slot = Some(t.clone()),
                }
            }
        }
    }

    fn take(mut self, ids: &[ParamId]) -> Vec<(ParamId, Tensor)> {
        ids.iter().filter_map(|id| self.slots[id.0].take().map(|t| (*id, t))).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Samples per event for the mean prediction, CRPS and integrated hazard.
    pub samples: usize,
    /// Upper bound on evaluated events; events are thinned by a global stride.
    pub max_events: Option<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples: crate::decoder::DEFAULT_SAMPLES, max_events: None, seed: 0 }
    }
}

/// Stride that keeps at most `cap` of `total` events.
pub fn eval_stride(total: usize, cap: Option<usize>) -> usize {
    match cap {
        Some(c) if c > 0 && total > c => total.div_ceil(c),
        _ => 1,
    }
}

pub fn evaluate(model: &Model, ds: &Dataset, cfg: &EvalConfig) -> Result<MetricsReport> {
    if cfg.samples < 2 {
        return Err(Error::Config(format!("evaluation needs at least 2 samples per event, got {}", cfg.samples)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let stride = eval_stride(ds.num_events(), cfg.max_events);
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let mut crps = Vec::new();
    let mut hazards = Vec::new();
    let mut probs_all: Vec<f64> = Vec::new();
    let mut marks_all = Vec::new();
    let mut per_sequence = Vec::new();
    let mut offset = 0usize;
    for (index, seq) in ds.sequences.iter().enumerate() {
        let picked: Vec<usize> = (0..seq.len()).filter(|i| (offset + i) % stride == 0).collect();
        offset += seq.len();
        if picked.is_empty() {
            continue;
        }
        let hall = model.history(seq);
        let h = Tensor::new(
            picked.len(),
            hall.cols,
            picked.iter().flat_map(|&i| hall.row_slice(i).to_vec()).collect(),
        );
        let draws = model.decoder.sample_many(&model.store, &h, cfg.samples, &model.stats, &mut rng)?;
        let closed = model.decoder.closed_form_mean(&model.store, &h);
        let probs = model.mark.mark_probs(&model.store, &h);
        let (mut ape, mut n_ape, mut crps_sum, mut hits) = (0.0, 0usize, 0.0, 0usize);
        for (r, &i) in picked.iter().enumerate() {
            let prev = if i == 0 { 0.0 } else { seq.times[i - 1] };
            let t = seq.times[i];
            let tau_mean = match &closed {
                Some(m) => m[r],
                None => draws[r].iter().sum::<f64>() / draws[r].len() as f64,
            };
            let t_hat = prev + tau_mean;
            pred.push(t_hat);
            truth.push(t);
            if t > 0.0 {
                ape += (t_hat - t).abs() / t;
                n_ape += 1;
            }
            let times: Vec<f64> = draws[r].iter().map(|tau| prev + tau).collect();
            let c = metrics::crps_empirical(&times, t)?;
            crps_sum += c;
            crps.push(c);
            hazards.push(metrics::empirical_cumulative_hazard(&draws[r], t - prev));
            if metrics::in_top_k(probs.row_slice(r), seq.marks[i], 1) {
                hits += 1;
            }
            marks_all.push(seq.marks[i]);
        }
        probs_all.extend_from_slice(&probs.data);
        per_sequence.push(SequenceMetrics {
            index,
            events: picked.len(),
            mape: (n_ape > 0).then(|| 100.0 * ape / n_ape as f64),
            crps: crps_sum / picked.len() as f64,
            top1_acc: hits as f64 / picked.len() as f64,
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyEval);
    }
    let mape = metrics::mape(&pred, &truth)?;
    let qqp = metrics::qqp_dev(&hazards)?;
    let probs = Tensor::new(marks_all.len(), ds.num_marks, probs_all);
    let top1 = metrics::topk_acc(&probs, &marks_all, 1)?;
    let top3 = metrics::topk_acc(&probs, &marks_all, 3)?;
    let report = MetricsReport {
        mape: mape.value,
        crps: crps.iter().sum::<f64>() / crps.len() as f64,
        qqp_dev: qqp.value,
        top1_acc: top1.value,
        top3_acc: top3.value,
        samples: cfg.samples,
        n_events: pred.len(),
        exclusions: mape.exclusions,
        top3_degenerate: top3.degenerate,
        qqp_insufficient: qqp.insufficient,
        per_sequence,
    };
    report.check_invariants()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderKind;

    fn config(kind: DecoderKind, enc: EncoderKind) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig { kind: enc, dim: 4, layers: 1, num_marks: 3, time_encoding: Default::default() },
            decoder: DecoderConfig { diffusion_steps: 5, noise_levels: 5, flow_steps: 4, ..DecoderConfig::new(kind, 4) },
        }
    }

    fn toy() -> Vec<EventSequence> {
        vec![
            EventSequence::new(vec![0.5, 1.0, 2.5, 2.7], vec![0, 1, 2, 1]).unwrap(),
            EventSequence::new(vec![0.3, 0.9, 1.1], vec![2, 2, 0]).unwrap(),
        ]
    }

    /// Finite differences of the whole batch loss over a few parameter
    /// entries, with the loss noise replayed from a fixed seed.
    fn check_batch_gradient(kind: DecoderKind, enc: EncoderKind) {
        let mut model = Model::new(config(kind, enc), LogNormStats::identity(), 3.0, 5).unwrap();
        let seqs = toy();
        let batch: Vec<&EventSequence> = seqs.iter().collect();
        let bg = model.batch_gradients(&batch, Phase::Main, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let eps = 1e-5;
        for (id, grad) in bg.grads.iter().step_by(3) {
            for k in [0, grad.len() / 2] {
                let orig = model.store.value(*id).data[k];
                model.store.value_mut(*id).data[k] = orig + eps;
                let up = model.batch_gradients(&batch, Phase::Main, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().loss;
                model.store.value_mut(*id).data[k] = orig - eps;
                let dn = model.batch_gradients(&batch, Phase::Main, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().loss;
                model.store.value_mut(*id).data[k] = orig;
                let fd = (up - dn) / (2.0 * eps);
                let ad = grad.data[k];
                let rel = (ad - fd).abs() / (fd.abs() + 1e-8);
                assert!(rel < 1e-4 || (ad - fd).abs() < 1e-8, "{kind} {}: ad {ad} fd {fd}", model.store.name(*id));
            }
        }
    }

    #[test]
    fn batch_gradients_match_finite_differences() {
        check_batch_gradient(DecoderKind::Tcddm, EncoderKind::Gru);
        check_batch_gradient(DecoderKind::Lognorm, EncoderKind::RevAtt);
        check_batch_gradient(DecoderKind::Tcvae, EncoderKind::Att);
    }

    #[test]
    fn batch_loss_is_mean_of_sequence_losses() {
        let model = Model::new(config(DecoderKind::Gauss, EncoderKind::Lstm), LogNormStats::identity(), 3.0, 1).unwrap();
        let seqs = toy();
        let batch: Vec<&EventSequence> = seqs.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bg = model.batch_gradients(&batch, Phase::Main, &mut rng).unwrap();
        let each: f64 = seqs.iter().map(|s| model.sequence_loss(s, &mut rng).unwrap()).sum::<f64>() / 2.0;
        assert!((bg.loss - each).abs() < 1e-12);
    }

    #[test]
    fn critic_phase_touches_only_the_critic() {
        let model = Model::new(config(DecoderKind::Tcgan, EncoderKind::Gru), LogNormStats::identity(), 3.0, 1).unwrap();
        let seqs = toy();
        let batch: Vec<&EventSequence> = seqs.iter().collect();
        let bg = model.batch_gradients(&batch, Phase::Critic, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let critic = model.decoder.critic_ids();
        assert!(!bg.grads.is_empty());
        assert!(bg.grads.iter().all(|(id, _)| critic.contains(id)));
        let main = model.batch_gradients(&batch, Phase::Main, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(main.grads.iter().all(|(id, _)| !critic.contains(id)));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::new(config(DecoderKind::Tcddm, EncoderKind::RevAtt), LogNormStats::identity(), 3.0, 4).unwrap();
        model.save(&path, 4).unwrap();
        let (back, seed) = Model::load(&path).unwrap();
        assert_eq!(seed, 4);
        let ds = Dataset::new(toy(), 3).unwrap();
        let cfg = EvalConfig { samples: 8, max_events: None, seed: 3 };
        assert_eq!(model.evaluate(&ds, &cfg).unwrap(), back.evaluate(&ds, &cfg).unwrap());
    }

    #[test]
    fn evaluation_is_total_on_untrained_models() {
        let ds = Dataset::new(toy(), 3).unwrap();
        for kind in DecoderKind::ALL {
            let model = Model::new(config(kind, EncoderKind::Gru), LogNormStats::identity(), 3.0, 2).unwrap();
            let r = model.evaluate(&ds, &EvalConfig { samples: 4, max_events: Some(5), seed: 0 }).unwrap();
            assert!(r.n_events <= 5 && r.n_events > 0, "{kind}");
            assert!(r.qqp_insufficient);
        }
    }

    #[test]
    fn deterministic_rollout_repeats() {
        let model = Model::new(config(DecoderKind::Tcddm, EncoderKind::Gru), LogNormStats::identity(), 3.0, 2).unwrap();
        let a = model.rollout(5.0, 50, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = model.rollout(5.0, 50, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.times.iter().all(|t| *t <= 5.0));
        let s = model.rollout(5.0, 7, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(s.len() <= 7 && s.marks.iter().all(|m| *m < 3));
    }

    #[test]
    fn stride_cases() {
        assert_eq!(eval_stride(100, None), 1);
        assert_eq!(eval_stride(100, Some(200)), 1);
        assert_eq!(eval_stride(100, Some(30)), 4);
    }
}
