//! Checkpoint files: one line of JSON header, then every parameter value as a
//! little-endian `f64`, in declaration order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamSpec, ParamStore};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "tppgen-checkpoint-v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub seed: u64,
    pub params: Vec<ParamSpec>,
    /// Model hyperparameters and data statistics.
    pub meta: serde_json::Value,
}

pub fn write_checkpoint(w: &mut impl Write, seed: u64, meta: serde_json::Value, store: &ParamStore) -> Result<()> {
    let header = CheckpointHeader { format: CHECKPOINT_FORMAT.to_string(), seed, params: store.specs(), meta };
    serde_json::to_writer(&mut *w, &header).map_err(|e| Error::Schema(e.to_string()))?;
    w.write_all(b"\n")?;
    for v in store.flatten() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint(r: impl Read) -> Result<(CheckpointHeader, Vec<f64>)> {
    let mut r = BufReader::new(r);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&line).map_err(|e| Error::Schema(format!("checkpoint header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Schema(format!("unknown checkpoint format {:?}", header.format)));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Schema("checkpoint payload is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> =
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    let expected: usize = header.params.iter().map(|p| p.rows * p.cols).sum();
    if values.len() != expected {
        return Err(Error::Schema(format!("checkpoint holds {} values, header declares {expected}", values.len())));
    }
    Ok((header, values))
}

pub fn save(path: &Path, seed: u64, meta: serde_json::Value, store: &ParamStore) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, seed, meta, store)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, Vec<f64>)> {
    read_checkpoint(std::fs::File::open(path)?)
}

/// Copies checkpoint values into `store` after checking names and shapes.
pub fn restore_into(store: &mut ParamStore, header: &CheckpointHeader, values: &[f64]) -> Result<()> {
    if store.specs() != header.params {
        return Err(Error::Schema("checkpoint parameter layout does not match the model".into()));
    }
    store.load_flat(values)
}
