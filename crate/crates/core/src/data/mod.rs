//! Event sequences, datasets and the preprocessing pipeline.

mod io;
mod lognorm;
mod split;

pub use io::{load_jsonl, read_jsonl, save_jsonl, write_jsonl, StatsSidecar};
pub use lognorm::{log_denormalize, log_normalize, LogNormStats, TAU_FLOOR};
pub use split::{rescale_time, split, Splits, RESCALED_HORIZON};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Longest sequence kept after loading; longer ones are truncated.
pub const MAX_SEQ_LEN: usize = 1000;

/// One realization: ascending timestamps with a mark per event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    pub times: Vec<f64>,
    pub marks: Vec<usize>,
}

impl EventSequence {
    pub fn new(times: Vec<f64>, marks: Vec<usize>) -> Result<Self> {
        if times.len() != marks.len() {
            return Err(Error::Domain(format!(
                "{} timestamps but {} marks",
                times.len(),
                marks.len()
            )));
        }
        if let Some(t) = times.iter().find(|t| !t.is_finite() || **t < 0.0) {
            return Err(Error::Domain(format!("invalid timestamp {t}")));
        }
        if let Some(w) = times.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::Domain(format!(
                "timestamps decrease at index {}: {} < {}",
                w + 1,
                times[w + 1],
                times[w]
            )));
        }
        Ok(Self { times, marks })
    }

    pub fn empty() -> Self {
        Self { times: Vec::new(), marks: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_time(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    pub fn push(&mut self, t: f64, m: usize) {
        debug_assert!(t >= self.last_time());
        self.times.push(t);
        self.marks.push(m);
    }

    pub fn truncate(&mut self, n: usize) {
        self.times.truncate(n);
        self.marks.truncate(n);
    }

    /// Inter-event intervals, the first measured from the time origin.
    pub fn intervals(&self) -> Vec<f64> {
        intervals(&self.times)
    }
}

/// `τ_1 = t_1`, `τ_i = t_i − t_{i−1}`.
pub fn intervals(times: &[f64]) -> Vec<f64> {
    let mut prev = 0.0;
    times
        .iter()
        .map(|&t| {
            let tau = t - prev;
            prev = t;
            tau
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<EventSequence>,
    pub num_marks: usize,
    pub t_max: f64,
    pub split: Option<SplitTag>,
}

impl Dataset {
    pub fn new(sequences: Vec<EventSequence>, num_marks: usize) -> Result<Self> {
        if num_marks == 0 {
            return Err(Error::Domain("number of marks must be at least 1".into()));
        }
        if let Some(m) = sequences.iter().flat_map(|s| s.marks.iter()).find(|&&m| m >= num_marks) {
            return Err(Error::Domain(format!("mark {m} outside [0, {num_marks})")));
        }
        let t_max = sequences.iter().map(|s| s.last_time()).fold(0.0, f64::max);
        Ok(Self { sequences, num_marks, t_max, split: None })
    }

    /// Infers the mark count as `max mark + 1`.
    pub fn infer(sequences: Vec<EventSequence>) -> Result<Self> {
        let m = sequences.iter().flat_map(|s| s.marks.iter()).max().map_or(1, |m| m + 1);
        Self::new(sequences, m)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_events(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    pub fn clamp_lengths(&mut self, max_len: usize) {
        for s in &mut self.sequences {
            s.truncate(max_len);
        }
        self.t_max = self.sequences.iter().map(|s| s.last_time()).fold(0.0, f64::max);
    }

    pub fn with_split(mut self, tag: SplitTag) -> Self {
        self.split = Some(tag);
        self
    }

    pub fn mean_length(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.num_events() as f64 / self.len() as f64
        }
    }
}
