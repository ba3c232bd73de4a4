//! Conditional interval decoders `p(τ | h)`.
//!
//! Generative decoders work on log-normalized intervals; mixtures and the
//! deterministic head work on raw intervals. [`Decoder::sample_intervals`]
//! always returns raw, strictly positive intervals.

pub mod deter;
pub mod mixture;
pub mod nets;
pub mod schedule;
pub mod tccnf;
pub mod tcddm;
pub mod tcgan;
pub mod tcnsn;
pub mod tcvae;

use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::data::{log_denormalize, log_normalize, LogNormStats, TAU_FLOOR};
use crate::error::{Error, Result};

pub use deter::Deter;
pub use mixture::{Family, Mixture};
pub use schedule::{DiffusionSchedule, NoiseLadder};
pub use tccnf::Tccnf;
pub use tcddm::Tcddm;
pub use tcgan::Tcgan;
pub use tcnsn::{ScoreScaling, Tcnsn};
pub use tcvae::{Tcvae, VaeSampling};

/// Default Monte Carlo sample count for means and CRPS.
pub const DEFAULT_SAMPLES: usize = 100;

/// Default number of chains when recording sampler dynamics.
pub const DYNAMICS_CHAINS: usize = 5000;

/// Step indices (1-based) and standard normals fixed for one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise {
    pub ks: Vec<usize>,
    pub eps: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
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

impl DecoderKind {
    pub const ALL: [DecoderKind; 10] = [
        DecoderKind::Tcddm,
        DecoderKind::Tcvae,
        DecoderKind::Tcgan,
        DecoderKind::Tccnf,
        DecoderKind::Tcnsn,
        DecoderKind::Gauss,
        DecoderKind::Lognorm,
        DecoderKind::Gompertz,
        DecoderKind::Weibull,
        DecoderKind::Deter,
    ];

    pub fn is_generative(self) -> bool {
        matches!(self, DecoderKind::Tcddm | DecoderKind::Tcvae | DecoderKind::Tcgan | DecoderKind::Tccnf | DecoderKind::Tcnsn)
    }

    pub fn family(self) -> Option<Family> {
        match self {
            DecoderKind::Gauss => Some(Family::Gaussian),
            DecoderKind::Lognorm => Some(Family::LogNormal),
            DecoderKind::Gompertz => Some(Family::Gompertz),
            DecoderKind::Weibull => Some(Family::Weibull),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Tcddm => "tcddm",
            DecoderKind::Tcvae => "tcvae",
            DecoderKind::Tcgan => "tcgan",
            DecoderKind::Tccnf => "tccnf",
            DecoderKind::Tcnsn => "tcnsn",
            DecoderKind::Gauss => "gauss",
            DecoderKind::Lognorm => "lognorm",
            DecoderKind::Gompertz => "gompertz",
            DecoderKind::Weibull => "weibull",
            DecoderKind::Deter => "deter",
        }
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DecoderKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown decoder '{s}'")))
    }
}

impl std::fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    /// Width of the history encoding.
    pub dim: usize,
    /// Hidden width of the decoder networks; `None` uses `dim`.
    pub hidden: Option<usize>,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub weighted_diffusion: bool,
    pub noise_levels: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub langevin_eps: f64,
    pub steps_per_level: usize,
    pub score_scaling: ScoreScaling,
    pub vae_sampling: VaeSampling,
    pub gan_eta: f64,
    pub critic_steps: usize,
    pub flow_steps: usize,
    pub components: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            kind: DecoderKind::Tcddm,
            dim: 16,
            hidden: None,
            diffusion_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            weighted_diffusion: false,
            noise_levels: 1000,
            sigma_max: 1.0,
            sigma_min: 0.01,
            langevin_eps: 2e-5,
            steps_per_level: 5,
            score_scaling: ScoreScaling::Network,
            vae_sampling: VaeSampling::Likelihood,
            gan_eta: tcgan::DEFAULT_ETA,
            critic_steps: tcgan::DEFAULT_CRITIC_STEPS,
            flow_steps: tccnf::DEFAULT_STEPS,
            components: mixture::DEFAULT_COMPONENTS,
        }
    }
}

impl DecoderConfig {
    pub fn new(kind: DecoderKind, dim: usize) -> Self {
        Self { kind, dim, ..Self::default() }
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or(self.dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden_width() == 0 {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        if self.components == 0 {
            return Err(Error::Config("mixtures need at least one component".into()));
        }
        if self.critic_steps == 0 {
            return Err(Error::Config("critic steps must be positive".into()));
        }
        if !(self.gan_eta >= 0.0) {
            return Err(Error::Config("Lipschitz weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Noise a loss evaluation consumes; drawn apart from the loss so that
/// repeated evaluations (finite differences) see the same randomness.
#[derive(Clone, Debug, PartialEq)]
pub enum LossNoise {
    None,
    Step(StepNoise),
    Latent(Tensor),
}

#[derive(Clone, Debug)]
pub enum Decoder {
    Tcddm(Tcddm),
    Tcvae(Tcvae),
    Tcgan(Tcgan),
    Tccnf(Tccnf),
    Tcnsn(Tcnsn),
    Mixture(Mixture),
    Deter(Deter),
}

impl Decoder {
    pub fn new(config: &DecoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (d, hid) = (config.dim, config.hidden_width());
        Ok(match config.kind {
            DecoderKind::Tcddm => {
                let schedule = DiffusionSchedule::linear(config.diffusion_steps, config.beta_start, config.beta_end)?;
                Decoder::Tcddm(Tcddm::new(store, d, schedule, config.weighted_diffusion, rng))
            }
            DecoderKind::Tcvae => Decoder::Tcvae(Tcvae::new(store, d, hid, config.vae_sampling, rng)),
            DecoderKind::Tcgan => Decoder::Tcgan(Tcgan::new(store, d, hid, config.gan_eta, rng)),
            DecoderKind::Tccnf => Decoder::Tccnf(Tccnf::new(store, d, hid, config.flow_steps, rng)?),
            DecoderKind::Tcnsn => {
                let ladder = NoiseLadder::geometric(
                    config.noise_levels,
                    config.sigma_max,
                    config.sigma_min,
                    config.langevin_eps,
                    config.steps_per_level,
                )?;
                Decoder::Tcnsn(Tcnsn::new(store, d, hid, ladder, config.score_scaling, rng))
            }
            DecoderKind::Gauss | DecoderKind::Lognorm | DecoderKind::Gompertz | DecoderKind::Weibull => {
                let family = config.kind.family().expect("mixture kind");
                Decoder::Mixture(Mixture::new(store, family, d, config.components, rng))
            }
            DecoderKind::Deter => Decoder::Deter(Deter::new(store, d, rng)),
        })
    }

    pub fn kind(&self) -> DecoderKind {
        match self {
            Decoder::Tcddm(_) => DecoderKind::Tcddm,
            Decoder::Tcvae(_) => DecoderKind::Tcvae,
            Decoder::Tcgan(_) => DecoderKind::Tcgan,
            Decoder::Tccnf(_) => DecoderKind::Tccnf,
            Decoder::Tcnsn(_) => DecoderKind::Tcnsn,
            Decoder::Mixture(m) => match m.family {
                Family::Gaussian => DecoderKind::Gauss,
                Family::LogNormal => DecoderKind::Lognorm,
                Family::Gompertz => DecoderKind::Gompertz,
                Family::Weibull => DecoderKind::Weibull,
            },
            Decoder::Deter(_) => DecoderKind::Deter,
        }
    }

    /// Maps a raw interval into the space the loss is defined on.
    pub fn to_target(&self, tau: f64, stats: &LogNormStats) -> f64 {
        if self.kind().is_generative() {
            log_normalize(tau, stats)
        } else {
            tau
        }
    }

    pub fn from_target(&self, v: f64, stats: &LogNormStats) -> f64 {
        if self.kind().is_generative() {
            log_denormalize(v, stats)
        } else {
            v
        }
    }

    pub fn draw_noise(&self, rows: usize, rng: &mut impl Rng) -> LossNoise {
        match self {
            Decoder::Tcddm(m) => LossNoise::Step(m.draw_noise(rows, rng)),
            Decoder::Tcnsn(m) => LossNoise::Step(m.draw_noise(rows, rng)),
            Decoder::Tcvae(m) => LossNoise::Latent(m.draw_noise(rows, rng)),
            Decoder::Tcgan(m) => LossNoise::Latent(m.draw_noise(rows, rng)),
            _ => LossNoise::None,
        }
    }

    /// Per-row time loss `B×1`. For the adversarial decoder this is the
    /// generator side.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, h: Var, targets: &[f64], noise: &LossNoise) -> Result<Var> {
        Ok(match (self, noise) {
            (Decoder::Tcddm(m), LossNoise::Step(n)) => m.loss(g, store, h, targets, n),
            (Decoder::Tcnsn(m), LossNoise::Step(n)) => m.loss(g, store, h, targets, n),
            (Decoder::Tcvae(m), LossNoise::Latent(z)) => m.loss(g, store, h, targets, z),
            (Decoder::Tcgan(m), LossNoise::Latent(z)) => m.generator_loss(g, store, h, targets, z),
            (Decoder::Tccnf(m), LossNoise::None) => m.loss(g, store, h, targets),
            (Decoder::Mixture(m), LossNoise::None) => m.loss(g, store, h, targets),
            (Decoder::Deter(m), LossNoise::None) => m.loss(g, store, h, targets),
            _ => return Err(Error::Config(format!("noise kind does not fit decoder {}", self.kind()))),
        })
    }

    /// Per-row critic loss for the adversarial decoder.
    pub fn critic_loss(&self, g: &mut Graph, store: &ParamStore, h: Var, targets: &[f64], noise: &LossNoise) -> Option<Var> {
        match (self, noise) {
            (Decoder::Tcgan(m), LossNoise::Latent(z)) => Some(m.critic_loss(g, store, h, targets, z)),
            _ => None,
        }
    }

    pub fn critic_ids(&self) -> Vec<ParamId> {
        match self {
            Decoder::Tcgan(m) => m.critic_ids(),
            _ => Vec::new(),
        }
    }

    pub fn critic_steps(&self, config: &DecoderConfig) -> usize {
        match self {
            Decoder::Tcgan(_) => config.critic_steps,
            _ => 0,
        }
    }

    /// One draw per row of `h`, in loss space.
    pub fn sample_targets(&self, store: &ParamStore, h: &Tensor, rng: &mut impl Rng) -> Result<Vec<f64>> {
        match self {
            Decoder::Tcddm(m) => m.sample(store, h, rng, None),
            Decoder::Tcvae(m) => Ok(m.sample(store, h, rng)),
            Decoder::Tcgan(m) => Ok(m.sample(store, h, rng)),
            Decoder::Tccnf(m) => m.sample(store, h, rng, None),
            Decoder::Tcnsn(m) => m.sample(store, h, rng, None),
            Decoder::Mixture(m) => Ok(m.sample(store, h, rng)),
            Decoder::Deter(m) => Ok(m.predict(store, h)),
        }
    }

    /// One raw positive interval per row of `h`.
    pub fn sample_intervals(&self, store: &ParamStore, h: &Tensor, stats: &LogNormStats, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let raw = self.sample_targets(store, h, rng)?;
        Ok(raw.into_iter().map(|v| self.from_target(v, stats).max(TAU_FLOOR)).collect())
    }

    /// `samples` draws per history row, grouped by row.
    pub fn sample_many(
        &self,
        store: &ParamStore,
        h: &Tensor,
        samples: usize,
        stats: &LogNormStats,
        rng: &mut impl Rng,
    ) -> Result<Vec<Vec<f64>>> {
        let rep = nets::repeat_rows(h, samples);
        let flat = self.sample_intervals(store, &rep, stats, rng)?;
        Ok(flat.chunks(samples.max(1)).map(|c| c.to_vec()).collect())
    }

    /// Closed-form expected interval where one exists.
    pub fn closed_form_mean(&self, store: &ParamStore, h: &Tensor) -> Option<Vec<f64>> {
        match self {
            Decoder::Mixture(m) => Some(m.mean(store, h).into_iter().map(|v| v.max(TAU_FLOOR)).collect()),
            Decoder::Deter(m) => Some(m.predict(store, h)),
            _ => None,
        }
    }
}

/// How the expected next interval is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeanMode {
    /// Average of `S` samples.
    MonteCarlo(usize),
    /// Closed form when available, otherwise `MonteCarlo(DEFAULT_SAMPLES)`.
    ClosedFormOr(usize),
}

/// `t̂_i = t_{i−1} + E[τ | h_{i−1}]` for every row.
pub fn predict_next_time(
    decoder: &Decoder,
    store: &ParamStore,
    h: &Tensor,
    prev_times: &[f64],
    stats: &LogNormStats,
    mode: MeanMode,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let means = expected_intervals(decoder, store, h, stats, mode, rng)?;
    Ok(prev_times.iter().zip(means).map(|(t, m)| t + m).collect())
}

pub fn expected_intervals(
    decoder: &Decoder,
    store: &ParamStore,
    h: &Tensor,
    stats: &LogNormStats,
    mode: MeanMode,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let s = match mode {
        MeanMode::ClosedFormOr(s) => {
            if let Some(m) = decoder.closed_form_mean(store, h) {
                return Ok(m);
            }
            s
        }
        MeanMode::MonteCarlo(s) => s,
    };
    if s == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let draws = decoder.sample_many(store, h, s, stats, rng)?;
    Ok(draws.iter().map(|d| d.iter().sum::<f64>() / d.len() as f64).collect())
}

/// Empirical distribution of the intermediate sampler state at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRow {
    /// Sampler iterations completed (0 = initial draw).
    pub step: usize,
    /// Native index: diffusion step `k`, noise level, or flow step.
    pub checkpoint_k: usize,
    pub mean: f64,
    pub var: f64,
    pub hist_bin_edges: Vec<f64>,
    pub hist_counts: Vec<usize>,
}

fn summarize(step: usize, k: usize, x: &[f64], bins: usize) -> DynamicsRow {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let mut counts = vec![0usize; bins];
    for v in x {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    DynamicsRow { step, checkpoint_k: k, mean, var, hist_bin_edges: edges, hist_counts: counts }
}

/// Runs `chains` sampler chains conditioned on the single history row `h`
/// and summarizes the intermediate states (in loss space) at the requested
/// steps; `None` records every step.
pub fn record_sampling_dynamics(
    decoder: &Decoder,
    store: &ParamStore,
    h: &Tensor,
    chains: usize,
    checkpoints: Option<&[usize]>,
    bins: usize,
    rng: &mut impl Rng,
) -> Result<Vec<DynamicsRow>> {
    if h.rows != 1 {
        return Err(Error::Config("dynamics are recorded for one history row".into()));
    }
    if chains < 2 || bins == 0 {
        return Err(Error::Config("dynamics need at least two chains and one bin".into()));
    }
    let rep = nets::repeat_rows(h, chains);
    let mut rows = Vec::new();
    let keep = |step: usize| checkpoints.is_none_or(|c| c.contains(&step));
    match decoder {
        Decoder::Tcddm(m) => {
            let total = m.schedule.steps();
            let mut obs = |k: usize, x: &[f64]| {
                let step = total - k;
                if keep(step) {
                    rows.push(summarize(step, k, x, bins));
                }
            };
            m.sample(store, &rep, rng, Some(&mut obs))?;
        }
        Decoder::Tccnf(m) => {
            let mut obs = |i: usize, x: &[f64]| {
                if keep(i) {
                    rows.push(summarize(i, i, x, bins));
                }
            };
            m.sample(store, &rep, rng, Some(&mut obs))?;
        }
        Decoder::Tcnsn(m) => {
            let mut obs = |l: usize, x: &[f64]| {
                if keep(l) {
                    rows.push(summarize(l, l, x, bins));
                }
            };
            m.sample(store, &rep, rng, Some(&mut obs))?;
        }
        _ => return Err(Error::Config(format!("decoder {} has no iterative sampler", decoder.kind()))),
    }
    Ok(rows)
}

/// Total sampler iterations, for choosing checkpoints.
pub fn sampler_length(decoder: &Decoder) -> Option<usize> {
    match decoder {
        Decoder::Tcddm(m) => Some(m.schedule.steps()),
        Decoder::Tccnf(m) => Some(m.steps),
        Decoder::Tcnsn(m) => Some(m.ladder.levels()),
        _ => None,
    }
}

/// `count` evenly spaced step indices over `0..=total`, both ends included.
pub fn even_checkpoints(total: usize, count: usize) -> Vec<usize> {
    let count = count.max(2);
    let mut v: Vec<usize> = (0..count).map(|i| (i * total + (count - 1) / 2) / (count - 1)).collect();
    v.dedup();
    v
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

/// CSV with columns `step,checkpoint_k,mean,var,hist_bin_edges,hist_counts`;
/// the two histogram columns are `;`-separated lists.
pub fn write_dynamics_csv(w: impl Write, rows: &[DynamicsRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "checkpoint_k", "mean", "var", "hist_bin_edges", "hist_counts"]).map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.step.to_string(),
            r.checkpoint_k.to_string(),
            r.mean.to_string(),
            r.var.to_string(),
            join(&r.hist_bin_edges),
            join(&r.hist_counts),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dynamics_csv(r: impl std::io::Read) -> Result<Vec<DynamicsRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["step", "checkpoint_k", "mean", "var", "hist_bin_edges", "hist_counts"] {
        return Err(Error::Schema("unexpected dynamics CSV header".into()));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let bad = |what: &str| Error::Schema(format!("bad {what} in dynamics CSV"));
        let list = |s: &str| -> Vec<String> { if s.is_empty() { Vec::new() } else { s.split(';').map(String::from).collect() } };
        rows.push(DynamicsRow {
            step: rec[0].parse().map_err(|_| bad("step"))?,
            checkpoint_k: rec[1].parse().map_err(|_| bad("checkpoint_k"))?,
            mean: rec[2].parse().map_err(|_| bad("mean"))?,
            var: rec[3].parse().map_err(|_| bad("var"))?,
            hist_bin_edges: list(&rec[4]).iter().map(|s| s.parse().map_err(|_| bad("edge"))).collect::<Result<_>>()?,
            hist_counts: list(&rec[5]).iter().map(|s| s.parse().map_err(|_| bad("count"))).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Schema(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kind_names_round_trip() {
        for k in DecoderKind::ALL {
            assert_eq!(k.name().parse::<DecoderKind>().unwrap(), k);
        }
        assert!("nope".parse::<DecoderKind>().is_err());
    }

    fn zeroed(kind: DecoderKind) -> (Decoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut cfg = DecoderConfig::new(kind, 4);
        cfg.noise_levels = 20;
        let d = Decoder::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        (d, store)
    }

    #[test]
    fn constant_decoder_prediction() {
        let (d, mut store) = zeroed(DecoderKind::Deter);
        let Decoder::Deter(m) = &d else { unreachable!() };
        // softplus(b) = 2.5
        store.value_mut(m.b).data[0] = (2.5f64.exp() - 1.0).ln();
        let h = Tensor::zeros(2, 4);
        let t = predict_next_time(
            &d,
            &store,
            &h,
            &[1.0, 7.0],
            &LogNormStats::identity(),
            MeanMode::ClosedFormOr(10),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert!((t[0] - 3.5).abs() < 1e-12 && (t[1] - 9.5).abs() < 1e-12);
    }

    #[test]
    fn zero_flow_dynamics_stay_put() {
        let (d, store) = zeroed(DecoderKind::Tccnf);
        let rows = record_sampling_dynamics(&d, &store, &Tensor::zeros(1, 4), 500, None, 10, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(rows.len(), 101);
        for r in &rows {
            assert_eq!(r.mean, rows[0].mean);
            assert_eq!(r.var, rows[0].var);
            assert_eq!(r.hist_counts.iter().sum::<usize>(), 500);
        }
    }

    #[test]
    fn zero_diffusion_net_keeps_order_one_variance() {
        let (d, store) = zeroed(DecoderKind::Tcddm);
        let rows = record_sampling_dynamics(&d, &store, &Tensor::zeros(1, 4), 5000, None, 20, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(rows.len(), 101);
        let Decoder::Tcddm(m) = &d else { unreachable!() };
        // Var[x_{k−1}] = Var[x_k]/α_k + σ_k², z = 0 at k = 1
        let mut v = 1.0;
        for r in &rows[1..] {
            let k = r.checkpoint_k + 1;
            v = v / m.schedule.alpha(k) + if k > 1 { m.schedule.sigma2(k) } else { 0.0 };
            assert!((r.var / v - 1.0).abs() < 0.1, "step {} var {} expected {v}", r.step, r.var);
            assert!(v < 5.0);
        }
    }

    #[test]
    fn samples_are_positive_after_denormalizing() {
        let stats = LogNormStats { mean_log: 0.0, var_log: 1.0, use_std: false };
        for kind in DecoderKind::ALL {
            let mut store = ParamStore::new();
            let mut cfg = DecoderConfig::new(kind, 4);
            cfg.noise_levels = 20;
            let d = Decoder::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            let h = Tensor::new(3, 4, (0..12).map(|i| (i as f64).sin()).collect());
            let s = d.sample_intervals(&store, &h, &stats, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
            assert!(s.iter().all(|v| *v > 0.0 && v.is_finite()), "{kind}");
        }
    }

    #[test]
    fn dynamics_csv_round_trip() {
        let rows = vec![summarize(0, 100, &[0.1, 0.5, -0.2, 0.3], 3), summarize(1, 99, &[1.0, 1.0], 2)];
        let mut buf = Vec::new();
        write_dynamics_csv(&mut buf, &rows).unwrap();
        let back = read_dynamics_csv(&buf[..]).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn checkpoints_cover_both_ends() {
        assert_eq!(even_checkpoints(100, 11), vec![0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100]);
        assert_eq!(even_checkpoints(3, 10), vec![0, 1, 2, 3]);
    }
}
