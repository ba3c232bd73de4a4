use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tppgen::data::{self, Dataset, LogNormStats, StatsSidecar};
use tppgen::decoder::{self, DecoderKind, ScoreScaling};
use tppgen::encoder::{EncoderKind, TimeEncoding};
use tppgen::hawkes::{self, HawkesConfig};
use tppgen::model::{EvalConfig, Model};
use tppgen::training::{self, Grid, TrainConfig, TrainOutputs};
use tppgen::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "tppgen", version, about = "Generative neural temporal point processes")]
struct Cli {
    /// Log level (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a multivariate Hawkes dataset.
    Simulate(SimulateArgs),
    /// Train a model with early stopping.
    Train(TrainArgs),
    /// Evaluate a checkpoint and export the type-similarity matrix.
    Evaluate(EvaluateArgs),
    /// Generate sequences by autoregressive rollout.
    Sample(SampleArgs),
    /// Record intermediate sampler distributions.
    Dynamics(DynamicsArgs),
    /// Train every cell of the hyperparameter grid.
    Grid(GridArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Number of event types.
    #[arg(long, default_value_t = 5)]
    types: usize,
    /// Probability that a pairwise kernel is cut to zero.
    #[arg(long, default_value_t = hawkes::DEFAULT_CUTTING_RATIO)]
    cut: f64,
    /// Number of sequences.
    #[arg(long, default_value_t = 6000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Base rate of every type.
    #[arg(long, default_value_t = hawkes::DEFAULT_BASE_RATE)]
    base_rate: f64,
    /// Horizon; calibrated to --target-length when omitted.
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long, default_value_t = hawkes::REFERENCE_MEAN_LENGTH)]
    target_length: f64,
    /// Pilot realizations for horizon calibration.
    #[arg(long, default_value_t = 100)]
    calibration_runs: usize,
    #[arg(long, default_value_t = data::MAX_SEQ_LEN)]
    max_events: usize,
    /// Seed of the train/val/test split used for the stats sidecar.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Output JSONL; sidecars are written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EncArg {
    Gru,
    Lstm,
    Att,
    Revatt,
}

impl From<EncArg> for EncoderKind {
    fn from(e: EncArg) -> Self {
        match e {
            EncArg::Gru => EncoderKind::Gru,
            EncArg::Lstm => EncoderKind::Lstm,
            EncArg::Att => EncoderKind::Att,
            EncArg::Revatt => EncoderKind::RevAtt,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DecArg {
    Tcddm,
    Tcvae,
    Tcgan,
    Tccnf,
    Tcnsn,
    Gauss,
    Lognorm,
    Gompertz,
    Weibull,
    Deter,
}

impl From<DecArg> for DecoderKind {
    fn from(d: DecArg) -> Self {
        match d {
            DecArg::Tcddm => DecoderKind::Tcddm,
            DecArg::Tcvae => DecoderKind::Tcvae,
            DecArg::Tcgan => DecoderKind::Tcgan,
            DecArg::Tccnf => DecoderKind::Tccnf,
            DecArg::Tcnsn => DecoderKind::Tcnsn,
            DecArg::Gauss => DecoderKind::Gauss,
            DecArg::Lognorm => DecoderKind::Lognorm,
            DecArg::Gompertz => DecoderKind::Gompertz,
            DecArg::Weibull => DecoderKind::Weibull,
            DecArg::Deter => DecoderKind::Deter,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TimeEncArg {
    Sahp,
    Thp,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScoreArg {
    Network,
    Rescaled,
}

/// Flags shared by `train` and `grid`.
#[derive(Args, Debug)]
struct ModelArgs {
    /// Dataset JSONL.
    #[arg(long)]
    data: PathBuf,
    /// JSON file mirroring the training configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    encoder: Option<EncArg>,
    #[arg(long, value_enum)]
    decoder: Option<DecArg>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Samples per event at evaluation.
    #[arg(long)]
    samples: Option<usize>,
    /// Normalize log-intervals by the standard deviation instead of the variance.
    #[arg(long)]
    lognorm_std: bool,
    #[arg(long, value_enum)]
    time_encoding: Option<TimeEncArg>,
    /// Cap on evaluated events.
    #[arg(long)]
    eval_max_events: Option<usize>,
    /// Use the weighted diffusion objective.
    #[arg(long)]
    weighted_diffusion: bool,
    /// How the score network output enters the Langevin update.
    #[arg(long, value_enum)]
    score_scaling: Option<ScoreArg>,
    /// Reject lr/dim/layers outside the tuning grid.
    #[arg(long)]
    grid_mode: bool,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

impl ModelArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.encoder {
            c.encoder = v.into();
        }
        if let Some(v) = self.decoder {
            c.decoder = v.into();
        }
        macro_rules! set {
            ($($f:ident => $t:ident),*) => { $(if let Some(v) = self.$f { c.$t = v; })* };
        }
        set!(lr => lr, dim => dim, layers => layers, epochs => max_epochs, patience => patience,
             batch_size => batch_size, seed => seed, samples => samples);
        if self.eval_max_events.is_some() {
            c.eval_max_events = self.eval_max_events;
        }
        if let Some(t) = self.time_encoding {
            c.time_encoding = match t {
                TimeEncArg::Sahp => TimeEncoding::Sahp,
                TimeEncArg::Thp => TimeEncoding::Thp,
            };
        }
        if let Some(s) = self.score_scaling {
            c.decoder_options.score_scaling = match s {
                ScoreArg::Network => ScoreScaling::Network,
                ScoreArg::Rescaled => ScoreScaling::Rescaled,
            };
        }
        c.lognorm_std |= self.lognorm_std;
        c.decoder_options.weighted_diffusion |= self.weighted_diffusion;
        c.grid_mode |= self.grid_mode;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Directory for model.ckpt, train_log.csv, config.json and stats.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = decoder::DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long)]
    max_events: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report JSON.
    #[arg(long)]
    report: PathBuf,
    /// Type-similarity matrix CSV.
    #[arg(long)]
    similarity: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of sequences.
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Horizon in rescaled time units.
    #[arg(long, default_value_t = data::RESCALED_HORIZON)]
    horizon: f64,
    #[arg(long, default_value_t = data::MAX_SEQ_LEN)]
    max_events: usize,
    /// Expected intervals and most likely marks instead of draws.
    #[arg(long)]
    deter: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DynamicsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Condition on the history before the middle event of the first test
    /// sequence of this dataset; zero history when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = decoder::DYNAMICS_CHAINS)]
    chains: usize,
    /// Number of evenly spaced checkpoints; every step when omitted.
    #[arg(long)]
    checkpoints: Option<usize>,
    #[arg(long, default_value_t = 40)]
    bins: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to `artifacts/diag/dynamics_<decoder>.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',')]
    lrs: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long = "layer-grid", value_delimiter = ',')]
    layer_grid: Option<Vec<usize>>,
    /// Table CSV.
    #[arg(long)]
    out: PathBuf,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, v).map_err(|e| Error::Schema(e.to_string()))
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    if a.n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let mut cfg = HawkesConfig::new(a.types, 1.0, a.seed);
    cfg.base_rate = vec![a.base_rate; a.types];
    cfg.cutting_ratio = a.cut;
    cfg.max_events = a.max_events;
    cfg.validate()?;
    let kernels = cfg.sample_kernels();
    cfg.horizon = match a.horizon {
        Some(t) => t,
        None => {
            let t = hawkes::calibrate_horizon(&cfg, &kernels, a.target_length, a.calibration_runs)?;
            info!("calibrated horizon {t:.4} for mean length {}", a.target_length);
            t
        }
    };
    let ds = hawkes::generate_synthetic(a.n, &cfg, &kernels)?;
    info!("{} sequences, mean length {:.2}", ds.len(), ds.mean_length());
    data::save_jsonl(&a.out, &ds)?;
    write_json(&sibling(&a.out, "kernels.json"), &serde_json::json!({ "config": cfg, "kernels": kernels }))?;
    if ds.len() >= 5 {
        let raw = data::split(&ds, a.split_seed)?;
        let scaled = raw.rescaled()?;
        let st = LogNormStats::from_dataset(&scaled.train, false);
        StatsSidecar { mean_log: st.mean_log, var_log: st.var_log, t_max: raw.train.t_max }
            .save(&sibling(&a.out, "stats.json"))?;
    } else {
        warn!("fewer than 5 sequences; no stats sidecar written");
    }
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset> {
    let mut ds = data::load_jsonl(path)?;
    ds.clamp_lengths(data::MAX_SEQ_LEN);
    Ok(ds)
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = a.model.config()?;
    let ds = load_data(&a.model.data)?;
    let raw = data::split(&ds, a.model.split_seed)?;
    let splits = raw.rescaled()?;
    std::fs::create_dir_all(&a.out_dir)?;
    write_json(&a.out_dir.join("config.json"), &cfg)?;
    let out = TrainOutputs {
        checkpoint: Some(a.out_dir.join("model.ckpt")),
        log_csv: Some(a.out_dir.join("train_log.csv")),
        source_horizon: Some(raw.train.t_max),
    };
    let o = training::train(&cfg, &splits, &out)?;
    o.model.save(out.checkpoint.as_ref().expect("set above"), cfg.seed)?;
    StatsSidecar { mean_log: o.model.stats.mean_log, var_log: o.model.stats.var_log, t_max: raw.train.t_max }
        .save(&a.out_dir.join("stats.json"))?;
    let timing = tppgen::diagnostics::timing_report(&[(cfg.decoder.to_string(), o.log.clone())]);
    info!("kept epoch {} (val loss {:.5})\n{}", o.kept_epoch, o.best_val_loss, tppgen::diagnostics::format_timing(&timing));
    Ok(())
}

fn evaluation_split(path: &Path, split_seed: u64, which: SplitArg, model: &Model) -> Result<Dataset> {
    let ds = load_data(path)?;
    let raw = data::split(&ds, split_seed)?;
    if ds.num_marks > model.config.encoder.num_marks {
        return Err(Error::Schema(format!(
            "dataset has {} marks, model was trained on {}",
            ds.num_marks, model.config.encoder.num_marks
        )));
    }
    let part = match which {
        SplitArg::Train => raw.train,
        SplitArg::Val => raw.val,
        SplitArg::Test => raw.test,
    };
    let mut scaled = data::rescale_time(&part, model.t_max)?;
    scaled.num_marks = model.config.encoder.num_marks;
    Ok(scaled)
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let (model, _) = Model::load(&a.checkpoint)?;
    let ds = evaluation_split(&a.data, a.split_seed, a.split, &model)?;
    let report = model.evaluate(&ds, &EvalConfig { samples: a.samples, max_events: a.max_events, seed: a.seed })?;
    write_json(&a.report, &report)?;
    info!(
        "MAPE {:.4} CRPS {:.5} QQP-Dev {:.5} Top1 {:.4} Top3 {:.4} over {} events",
        report.mape, report.crps, report.qqp_dev, report.top1_acc, report.top3_acc, report.n_events
    );
    if let Some(p) = &a.similarity {
        let sim = model.encoder.type_similarity_matrix(&model.store);
        let mut w = csv::Writer::from_path(p).map_err(|e| Error::Schema(e.to_string()))?;
        for r in 0..sim.rows {
            w.write_record(sim.row_slice(r).iter().map(|v| v.to_string())).map_err(|e| Error::Schema(e.to_string()))?;
        }
        w.flush()?;
    }
    Ok(())
}

fn sample(a: &SampleArgs) -> Result<()> {
    let (model, _) = Model::load(&a.checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut seqs = Vec::with_capacity(a.n);
    for _ in 0..a.n {
        seqs.push(model.rollout(a.horizon, a.max_events, a.deter, &mut rng)?);
    }
    let ds = Dataset::new(seqs, model.config.encoder.num_marks)?;
    info!("generated {} sequences, mean length {:.2}", ds.len(), ds.mean_length());
    data::save_jsonl(&a.out, &ds)
}

fn dynamics(a: &DynamicsArgs) -> Result<()> {
    let (model, _) = Model::load(&a.checkpoint)?;
    let h = match &a.data {
        Some(p) => {
            let ds = evaluation_split(p, a.split_seed, SplitArg::Test, &model)?;
            let seq = ds.sequences.iter().find(|s| !s.is_empty()).ok_or(Error::EmptyDataset)?;
            let all = model.history(seq);
            let mid = seq.len() / 2;
            tppgen::autodiff::Tensor::row(all.row_slice(mid).to_vec())
        }
        None => tppgen::autodiff::Tensor::zeros(1, model.config.encoder.dim),
    };
    let total = decoder::sampler_length(&model.decoder)
        .ok_or_else(|| Error::Config(format!("decoder {} has no iterative sampler", model.kind())))?;
    let cps = a.checkpoints.map(|c| decoder::even_checkpoints(total, c));
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let rows = decoder::record_sampling_dynamics(&model.decoder, &model.store, &h, a.chains, cps.as_deref(), a.bins, &mut rng)?;
    let max_var = tppgen::diagnostics::max_dynamics_variance(&rows);
    info!("{} checkpoints, largest intermediate variance {max_var:.4}", rows.len());
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from(format!("artifacts/diag/dynamics_{}.csv", model.kind())));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    decoder::write_dynamics_csv(BufWriter::new(File::create(&out)?), &rows)
}

fn grid(a: &GridArgs) -> Result<()> {
    let mut base = a.model.config()?;
    base.grid_mode = false;
    let ds = load_data(&a.model.data)?;
    let splits = training::prepare_splits(&ds, a.model.split_seed)?;
    let d = Grid::default();
    let g = Grid {
        lrs: a.lrs.clone().unwrap_or(d.lrs),
        dims: a.dims.clone().unwrap_or(d.dims),
        layers: a.layer_grid.clone().unwrap_or(d.layers),
    };
    let r = training::grid_search(&base, &g, &splits)?;
    training::write_grid_csv(File::create(&a.out)?, &r.rows)?;
    let b = r.best_row();
    info!("best cell lr {} dim {} layers {} (val loss {:.5})", b.lr, b.dim, b.layers, b.best_val_loss);
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NonFiniteLoss(_) | Error::NonFiniteGradient(_) | Error::SamplerDiverged(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    let res = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Sample(a) => sample(a),
        Command::Dynamics(a) => dynamics(a),
        Command::Grid(a) => grid(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
