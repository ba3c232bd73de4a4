use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, EventSequence, SplitTag};
use crate::error::{Error, Result};

/// Upper end of the time axis after rescaling.
pub const RESCALED_HORIZON: f64 = 50.0;

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// 64/16/20 partition of the sequences: 20% test, then 20% of the rest as validation.
pub fn split(ds: &Dataset, seed: u64) -> Result<Splits> {
    let n = ds.len();
    if n < 5 {
        return Err(Error::Split(format!("need at least 5 sequences, have {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64) * 0.2).round() as usize;
    let n_rest = n - n_test;
    let n_val = ((n_rest as f64) * 0.2).round() as usize;
    let n_train = n_rest - n_val;
    let take = |ids: &[usize], tag: SplitTag| -> Dataset {
        let seqs: Vec<EventSequence> = ids.iter().map(|&i| ds.sequences[i].clone()).collect();
        let t_max = seqs.iter().map(|s| s.last_time()).fold(0.0, f64::max);
        Dataset { sequences: seqs, num_marks: ds.num_marks, t_max, split: Some(tag) }
    };
    Ok(Splits {
        train: take(&idx[..n_train], SplitTag::Train),
        val: take(&idx[n_train..n_train + n_val], SplitTag::Val),
        test: take(&idx[n_train + n_val..], SplitTag::Test),
    })
}

/// Multiplies every timestamp by `50 / t_max_train`.
pub fn rescale_time(ds: &Dataset, t_max_train: f64) -> Result<Dataset> {
    if !(t_max_train > 0.0) || !t_max_train.is_finite() {
        return Err(Error::Rescale(format!("training horizon must be positive, got {t_max_train}")));
    }
    let f = RESCALED_HORIZON / t_max_train;
    let sequences = ds
        .sequences
        .iter()
        .map(|s| EventSequence { times: s.times.iter().map(|t| t * f).collect(), marks: s.marks.clone() })
        .collect();
    Ok(Dataset { sequences, num_marks: ds.num_marks, t_max: ds.t_max * f, split: ds.split })
}

impl Splits {
    /// Rescales all three splits by the training horizon.
    pub fn rescaled(&self) -> Result<Splits> {
        let t = self.train.t_max;
        Ok(Splits {
            train: rescale_time(&self.train, t)?,
            val: rescale_time(&self.val, t)?,
            test: rescale_time(&self.test, t)?,
        })
    }
}
