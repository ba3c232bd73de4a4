//! Training loop with early stopping, the hyperparameter grid and seed replicas.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, Adam, Graph, ParamId, ParamStore, Tensor};
use crate::data::{self, Dataset, EventSequence, LogNormStats, Splits};
use crate::decoder::{Decoder, DecoderConfig, DecoderKind, DEFAULT_SAMPLES};
use crate::encoder::{EncoderConfig, EncoderKind, TimeEncoding};
use crate::error::{Error, Result};
use crate::metrics::{mean_std, MetricsReport};
use crate::model::{EvalConfig, Model, ModelConfig, Phase};

pub const LR_GRID: [f64; 3] = [1e-3, 5e-4, 1e-4];
pub const DIM_GRID: [usize; 3] = [8, 16, 32];
pub const LAYER_GRID: [usize; 3] = [1, 2, 3];

/// Seed offset for the fixed noise stream of validation losses.
const VAL_NOISE_SALT: u64 = 0x5eed_0001;
/// Seed offset for the shuffling and loss-noise stream.
const TRAIN_STREAM_SALT: u64 = 0x5eed_0002;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub encoder: EncoderKind,
    pub decoder: DecoderKind,
    pub lr: f64,
    pub dim: usize,
    pub layers: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Samples per event at evaluation.
    pub samples: usize,
    /// Divide log-intervals by their standard deviation instead of the variance.
    pub lognorm_std: bool,
    pub time_encoding: TimeEncoding,
    /// Cap on evaluated events (`None` evaluates all).
    pub eval_max_events: Option<usize>,
    /// Decoder hyperparameters; `kind` and `dim` are taken from the fields above.
    pub decoder_options: DecoderConfig,
    /// Restrict `lr`, `dim` and `layers` to the tuning grid.
    pub grid_mode: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::RevAtt,
            decoder: DecoderKind::Tcddm,
            lr: 1e-3,
            dim: 16,
            layers: 1,
            max_epochs: 100,
            patience: 10,
            batch_size: 16,
            seed: 0,
            samples: DEFAULT_SAMPLES,
            lognorm_std: false,
            time_encoding: TimeEncoding::Sahp,
            eval_max_events: None,
            decoder_options: DecoderConfig::default(),
            grid_mode: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.max_epochs == 0 || self.batch_size == 0 || self.samples < 2 {
            return Err(Error::Config(
                "need lr > 0, at least one epoch, a positive batch size and at least 2 samples".into(),
            ));
        }
        if self.grid_mode
            && (!LR_GRID.contains(&self.lr) || !DIM_GRID.contains(&self.dim) || !LAYER_GRID.contains(&self.layers))
        {
            return Err(Error::Config(format!(
                "lr {}, dim {}, layers {} lie outside the tuning grid",
                self.lr, self.dim, self.layers
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, num_marks: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                kind: self.encoder,
                dim: self.dim,
                layers: self.layers,
                num_marks,
                time_encoding: self.time_encoding,
            },
            decoder: DecoderConfig { kind: self.decoder, dim: self.dim, ..self.decoder_options.clone() },
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig { samples: self.samples, max_events: self.eval_max_events, seed: self.seed }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }
}

/// Splits by sequence and rescales every split by the training horizon.
pub fn prepare_splits(ds: &Dataset, seed: u64) -> Result<Splits> {
    data::split(ds, seed)?.rescaled()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_seconds: f64,
}

pub fn write_log_csv(w: impl Write, log: &[EpochLog]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for row in log {
        wr.serialize(row).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_log_csv(r: impl std::io::Read) -> Result<Vec<EpochLog>> {
    csv::Reader::from_reader(r).deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Schema(format!("csv: {e}"))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters the model holds (1-based).
    pub kept_epoch: usize,
    pub best_val_loss: f64,
}

/// Where training writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub log_csv: Option<PathBuf>,
    /// Training horizon before rescaling, recorded in the checkpoint.
    pub source_horizon: Option<f64>,
}

/// Trains on `splits.train`, early-stopping on `splits.val`.
///
/// The kept parameters are those of the lowest validation loss, except for
/// the adversarial decoder, which keeps the final epoch. On a non-finite loss
/// the error is returned and the checkpoint file holds the last kept state.
pub fn train(cfg: &TrainConfig, splits: &Splits, out: &TrainOutputs) -> Result<TrainOutcome> {
    cfg.validate()?;
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let stats = LogNormStats::from_dataset(&splits.train, cfg.lognorm_std);
    let t_max = out.source_horizon.unwrap_or(splits.train.t_max);
    let mut model = Model::new(cfg.model_config(splits.train.num_marks), stats, t_max, cfg.seed)?;
    let adam = Adam::new(cfg.lr);
    let critic_steps = model.decoder.critic_steps(&model.config.decoder);
    let keep_final = model.kind() == DecoderKind::Tcgan;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TRAIN_STREAM_SALT);
    let train_seqs: Vec<&EventSequence> = splits.train.sequences.iter().filter(|s| !s.is_empty()).collect();
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();

    let mut log = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.store.flatten());
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&EventSequence> = chunk.iter().map(|&i| train_seqs[i]).collect();
            for _ in 0..critic_steps {
                let cg = model.batch_gradients(&batch, Phase::Critic, &mut rng)?;
                adam_step(&mut model.store, &cg.grads, &adam)?;
            }
            let bg = model.batch_gradients(&batch, Phase::Main, &mut rng)?;
            adam_step(&mut model.store, &bg.grads, &adam)?;
            loss_sum += bg.loss * batch.len() as f64;
        }
        let train_loss = loss_sum / train_seqs.len() as f64;
        let val_loss = model.dataset_loss(&splits.val, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ VAL_NOISE_SALT))?;
        let row = EpochLog { epoch, train_loss, val_loss, wall_seconds: start.elapsed().as_secs_f64() };
        info!(
            "{} epoch {epoch}: train {train_loss:.5} val {val_loss:.5} ({:.2}s)",
            model.kind(),
            row.wall_seconds
        );
        log.push(row);
        if let Some(p) = &out.log_csv {
            write_log_csv(std::fs::File::create(p)?, &log)?;
        }
        let improved = val_loss < best.0;
        if improved {
            best = (val_loss, epoch, model.store.flatten());
        }
        if let Some(p) = &out.checkpoint {
            if improved || keep_final {
                model.save(p, cfg.seed)?;
            }
        }
        if !keep_final && epoch - best.1 >= cfg.patience {
            info!("early stop after epoch {epoch}; best epoch {}", best.1);
            break;
        }
    }
    let kept_epoch = if keep_final {
        log.len()
    } else {
        model.store.load_flat(&best.2)?;
        best.1
    };
    Ok(TrainOutcome { model, log, kept_epoch, best_val_loss: best.0 })
}

/// Settings for fitting a decoder alone on i.i.d. intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub lognorm_std: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { epochs: 100, batch_size: 256, lr: 1e-3, seed: 0, lognorm_std: false }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderFit {
    pub decoder: Decoder,
    pub store: ParamStore,
    pub stats: LogNormStats,
    /// Mean per-event loss of every epoch.
    pub losses: Vec<f64>,
    pub dim: usize,
}

impl DecoderFit {
    /// Constant (zero) history of one row.
    pub fn history(&self) -> Tensor {
        Tensor::zeros(1, self.dim)
    }
}

/// Fits a decoder to i.i.d. intervals with the history held at zero, so
/// the decoder has to represent the interval distribution on its own.
/// The final epoch's parameters are kept.
pub fn fit_constant_history(cfg: &DecoderConfig, intervals: &[f64], opts: &FitOptions) -> Result<DecoderFit> {
    if intervals.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if opts.batch_size == 0 || !(opts.lr > 0.0) {
        return Err(Error::Config("need a positive batch size and learning rate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut store = ParamStore::new();
    let decoder = Decoder::new(cfg, &mut store, &mut rng)?;
    let stats = LogNormStats::from_intervals(intervals.iter().copied(), opts.lognorm_std);
    let targets: Vec<f64> = intervals.iter().map(|&t| decoder.to_target(t, &stats)).collect();
    let adam = Adam::new(opts.lr);
    let critic = decoder.critic_ids();
    let main: Vec<ParamId> = store.ids().filter(|id| !critic.contains(id)).collect();
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let mut losses = Vec::with_capacity(opts.epochs);
    let step = |store: &mut ParamStore, batch: &[f64], critic_side: bool, rng: &mut ChaCha8Rng| -> Result<f64> {
        let mut g = Graph::new();
        let h = g.input(Tensor::zeros(batch.len(), cfg.dim));
        let noise = decoder.draw_noise(batch.len(), rng);
        let per_row = if critic_side {
            decoder.critic_loss(&mut g, store, h, batch, &noise).expect("adversarial decoder")
        } else {
            decoder.loss(&mut g, store, h, batch, &noise)?
        };
        let root = g.mean(per_row);
        let value = g.value(root).item();
        let grads = g.backward(root)?;
        let ids = if critic_side { &critic } else { &main };
        let list: Vec<(ParamId, Tensor)> =
            ids.iter().filter_map(|id| grads.param(*id).map(|t| (*id, t.clone()))).collect();
        adam_step(store, &list, &adam)?;
        Ok(value)
    };
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            for _ in 0..decoder.critic_steps(cfg) {
                step(&mut store, &batch, true, &mut rng)?;
            }
            sum += step(&mut store, &batch, false, &mut rng)? * batch.len() as f64;
        }
        losses.push(sum / targets.len() as f64);
    }
    Ok(DecoderFit { decoder, store, stats, losses, dim: cfg.dim })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lrs: Vec<f64>,
    pub dims: Vec<usize>,
    pub layers: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Self { lrs: LR_GRID.to_vec(), dims: DIM_GRID.to_vec(), layers: LAYER_GRID.to_vec() }
    }
}

impl Grid {
    pub fn cells(&self) -> Vec<(f64, usize, usize)> {
        let mut out = Vec::new();
        for &lr in &self.lrs {
            for &d in &self.dims {
                for &l in &self.layers {
                    out.push((lr, d, l));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub lr: f64,
    pub dim: usize,
    pub layers: usize,
    pub best_val_loss: f64,
    pub epochs: usize,
    pub kept_epoch: usize,
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub best: usize,
}

impl GridResult {
    pub fn best_row(&self) -> &GridRow {
        &self.rows[self.best]
    }
}

/// Trains every grid cell and picks the lowest validation loss (first on ties).
pub fn grid_search(base: &TrainConfig, grid: &Grid, splits: &Splits) -> Result<GridResult> {
    let mut rows = Vec::new();
    for (lr, dim, layers) in grid.cells() {
        let cfg = TrainConfig { lr, dim, layers, ..base.clone() };
        let o = train(&cfg, splits, &TrainOutputs::default())?;
        rows.push(GridRow { lr, dim, layers, best_val_loss: o.best_val_loss, epochs: o.log.len(), kept_epoch: o.kept_epoch });
    }
    if rows.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    let best = rows
        .iter()
        .enumerate()
        .fold(0, |b, (i, r)| if r.best_val_loss < rows[b].best_val_loss { i } else { b });
    Ok(GridResult { rows, best })
}

pub fn write_grid_csv(w: impl Write, rows: &[GridRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for row in rows {
        wr.serialize(row).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_grid_csv(r: impl std::io::Read) -> Result<Vec<GridRow>> {
    csv::Reader::from_reader(r).deserialize().map(|row| row.map_err(csv_err)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl From<(f64, f64)> for MeanStd {
    fn from((mean, std): (f64, f64)) -> Self {
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub mape: MeanStd,
    pub crps: MeanStd,
    pub qqp_dev: MeanStd,
    pub top1_acc: MeanStd,
    pub top3_acc: MeanStd,
}

impl SeedSummary {
    pub fn from_reports(seeds: Vec<u64>, reports: &[MetricsReport]) -> Result<Self> {
        if reports.len() < 2 {
            return Err(Error::Config(format!("seed replicas need n >= 2, got {}", reports.len())));
        }
        let col = |f: fn(&MetricsReport) -> f64| -> MeanStd {
            mean_std(&reports.iter().map(f).collect::<Vec<_>>()).into()
        };
        Ok(Self {
            seeds,
            mape: col(|r| r.mape),
            crps: col(|r| r.crps),
            qqp_dev: col(|r| r.qqp_dev),
            top1_acc: col(|r| r.top1_acc),
            top3_acc: col(|r| r.top3_acc),
        })
    }
}

/// Trains and evaluates once per seed and aggregates the test metrics.
pub fn run_seeds(base: &TrainConfig, splits: &Splits, seeds: &[u64]) -> Result<(SeedSummary, Vec<MetricsReport>)> {
    if seeds.len() < 2 {
        return Err(Error::Config(format!("seed replicas need n >= 2, got {}", seeds.len())));
    }
    let mut reports = Vec::new();
    for &seed in seeds {
        let cfg = TrainConfig { seed, ..base.clone() };
        let o = train(&cfg, splits, &TrainOutputs::default())?;
        reports.push(o.model.evaluate(&splits.test, &cfg.eval_config())?);
    }
    Ok((SeedSummary::from_reports(seeds.to_vec(), &reports)?, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_interval_splits(c: f64) -> Splits {
        let seqs: Vec<EventSequence> = (0..20)
            .map(|i| {
                let n = 8 + i % 5;
                EventSequence::new((1..=n).map(|k| k as f64 * c).collect(), vec![0; n]).unwrap()
            })
            .collect();
        let ds = Dataset::new(seqs, 1).unwrap();
        data::split(&ds, 0).unwrap()
    }

    fn small(decoder: DecoderKind) -> TrainConfig {
        TrainConfig {
            encoder: EncoderKind::Gru,
            decoder,
            dim: 4,
            lr: 5e-2,
            max_epochs: 3,
            batch_size: 4,
            samples: 4,
            decoder_options: DecoderConfig { diffusion_steps: 10, noise_levels: 10, flow_steps: 4, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_logs() {
        let splits = constant_interval_splits(0.5);
        let cfg = small(DecoderKind::Tcddm);
        let a = train(&cfg, &splits, &TrainOutputs::default()).unwrap();
        let b = train(&cfg, &splits, &TrainOutputs::default()).unwrap();
        let strip = |l: &[EpochLog]| l.iter().map(|r| (r.epoch, r.train_loss, r.val_loss)).collect::<Vec<_>>();
        assert_eq!(strip(&a.log), strip(&b.log));
        assert_eq!(a.model.store.flatten(), b.model.store.flatten());
    }

    #[test]
    fn deter_head_learns_constant_intervals() {
        let splits = constant_interval_splits(0.5);
        let cfg = TrainConfig { max_epochs: 20, patience: 20, lr: 0.05, ..small(DecoderKind::Deter) };
        let o = train(&cfg, &splits, &TrainOutputs::default()).unwrap();
        let r = o.model.evaluate(&splits.val, &cfg.eval_config()).unwrap();
        assert!(r.mape < 2.0, "val MAPE {}", r.mape);
    }

    #[test]
    fn early_stopping_respects_patience() {
        let splits = constant_interval_splits(0.5);
        let cfg = TrainConfig { max_epochs: 40, patience: 2, lr: 0.3, ..small(DecoderKind::Gauss) };
        let o = train(&cfg, &splits, &TrainOutputs::default()).unwrap();
        let argmin = o.log.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss)).unwrap().epoch;
        assert_eq!(o.kept_epoch, argmin);
        assert!(o.log.len() <= argmin + 2);
        assert_eq!(o.best_val_loss, o.log[argmin - 1].val_loss);
    }

    #[test]
    fn adversarial_decoder_keeps_final_epoch() {
        let splits = constant_interval_splits(0.5);
        let cfg = TrainConfig { max_epochs: 2, ..small(DecoderKind::Tcgan) };
        let o = train(&cfg, &splits, &TrainOutputs::default()).unwrap();
        assert_eq!(o.kept_epoch, 2);
    }

    #[test]
    fn artifacts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutputs {
            checkpoint: Some(dir.path().join("m.ckpt")),
            log_csv: Some(dir.path().join("log.csv")),
            source_horizon: Some(123.0),
        };
        let splits = constant_interval_splits(0.5);
        let cfg = small(DecoderKind::Lognorm);
        let o = train(&cfg, &splits, &out).unwrap();
        let log = read_log_csv(std::fs::File::open(out.log_csv.unwrap()).unwrap()).unwrap();
        assert_eq!(log, o.log);
        let (back, _) = Model::load(out.checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(back.store.flatten(), o.model.store.flatten());
        assert_eq!(back.t_max, 123.0);
    }

    #[test]
    fn grid_cardinality_and_best() {
        let splits = constant_interval_splits(0.5);
        let base = TrainConfig { max_epochs: 1, ..small(DecoderKind::Gauss) };
        let grid = Grid { lrs: vec![1e-3, 1e-2], dims: vec![4], layers: vec![1, 2] };
        let r = grid_search(&base, &grid, &splits).unwrap();
        assert_eq!(r.rows.len(), 4);
        let min = r.rows.iter().map(|x| x.best_val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(r.best_row().best_val_loss, min);
        let mut buf = Vec::new();
        write_grid_csv(&mut buf, &r.rows).unwrap();
        assert_eq!(read_grid_csv(&buf[..]).unwrap(), r.rows);
        assert_eq!(Grid::default().cells().len(), 27);
    }

    #[test]
    fn grid_mode_rejects_off_grid_values() {
        let cfg = TrainConfig { grid_mode: true, lr: 0.3, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(TrainConfig { grid_mode: true, ..Default::default() }.validate().is_ok());
    }

    #[test]
    fn seed_summary_cases() {
        let rep = |m: f64| MetricsReport {
            mape: m,
            crps: m,
            qqp_dev: 0.0,
            top1_acc: 0.5,
            top3_acc: 1.0,
            samples: 2,
            n_events: 1,
            exclusions: 0,
            top3_degenerate: false,
            qqp_insufficient: false,
            per_sequence: vec![],
        };
        let s = SeedSummary::from_reports(vec![1, 2, 3], &[rep(1.0), rep(2.0), rep(3.0)]).unwrap();
        assert_eq!(s.mape, MeanStd { mean: 2.0, std: 1.0 });
        assert_eq!(s.top1_acc.std, 0.0);
        assert!(SeedSummary::from_reports(vec![1], &[rep(1.0)]).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = small(DecoderKind::Tcnsn);
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), cfg);
        let partial: TrainConfig = serde_json::from_str(r#"{"decoder":"tccnf","lr":0.0005}"#).unwrap();
        assert_eq!(partial.decoder, DecoderKind::Tccnf);
        assert_eq!(partial.max_epochs, 100);
    }
}
