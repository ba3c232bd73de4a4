use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, EventSequence, MAX_SEQ_LEN};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Line {
    seq: Vec<(f64, usize)>,
}

/// Reads `{"seq": [[t, m], ...]}` lines. Blank lines are skipped; sequences are
/// truncated to [`MAX_SEQ_LEN`] events.
pub fn read_jsonl(r: impl Read) -> Result<Dataset> {
    let mut sequences = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        let (times, marks): (Vec<f64>, Vec<usize>) = parsed.seq.into_iter().unzip();
        let mut seq =
            EventSequence::new(times, marks).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        seq.truncate(MAX_SEQ_LEN);
        sequences.push(seq);
    }
    if sequences.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Dataset::infer(sequences)
}

pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    read_jsonl(std::fs::File::open(path)?)
}

pub fn write_jsonl(w: &mut impl Write, ds: &Dataset) -> Result<()> {
    for s in &ds.sequences {
        let line = Line { seq: s.times.iter().copied().zip(s.marks.iter().copied()).collect() };
        serde_json::to_writer(&mut *w, &line).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_jsonl(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_jsonl(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

/// `*.stats.json` sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsSidecar {
    pub mean_log: f64,
    pub var_log: f64,
    pub t_max: f64,
}

impl StatsSidecar {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.into()))?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_line() {
        let ds = read_jsonl(r#"{"seq": [[1.0, 0], [2.5, 1]]}"#.as_bytes()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.num_marks, 2);
        assert_eq!(ds.sequences[0].times, vec![1.0, 2.5]);
    }

    #[test]
    fn decreasing_time_is_parse_error_with_line() {
        let text = "{\"seq\": [[1.0, 0]]}\n{\"seq\": [[2.0, 0], [1.0, 0]]}\n";
        match read_jsonl(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_and_empty() {
        assert!(matches!(read_jsonl("{\"seq\": [[1.0]]}".as_bytes()), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(read_jsonl("not json".as_bytes()), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(read_jsonl("".as_bytes()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn long_sequences_are_clamped() {
        let seq: Vec<(f64, usize)> = (0..1200).map(|i| (i as f64, 0)).collect();
        let text = serde_json::to_string(&Line { seq }).unwrap();
        let ds = read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(ds.sequences[0].len(), MAX_SEQ_LEN);
    }
}
