//! JSON-lines dataset files: one sequence per line, frames as
//! `N × 2 × k × [x, y, z]`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sequence::{frame_index, LabeledDataset, MotionSequence, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    label: Option<String>,
    fps: u32,
    torso_index: usize,
    frames: Vec<Vec<Vec<[f64; 3]>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normalized: Option<bool>,
}

fn to_record(seq: &MotionSequence, split: Split) -> Record {
    let (n, k) = (seq.len(), seq.joints());
    let frames = (0..n)
        .map(|f| {
            (0..2)
                .map(|p| (0..k).map(|j| [0, 1, 2].map(|c| seq.at(f, j, c, p))).collect())
                .collect()
        })
        .collect();
    Record {
        label: Some(seq.label.clone()),
        fps: seq.fps,
        torso_index: seq.torso_index,
        frames,
        split: Some(split),
        normalized: Some(seq.normalized),
    }
}

fn from_record(r: Record, line: usize) -> Result<(MotionSequence, Split)> {
    let label = r
        .label
        .ok_or_else(|| Error::Schema(format!("line {line}: missing label")))?;
    let n = r.frames.len();
    if n == 0 {
        return Err(Error::Schema(format!("line {line}: sequence has no frames")));
    }
    let k = r.frames[0].first().map_or(0, Vec::len);
    let mut data = vec![0.0; n * k * 6];
    for (f, persons) in r.frames.iter().enumerate() {
        if persons.len() != 2 || persons.iter().any(|p| p.len() != k) {
            return Err(Error::Schema(format!(
                "line {line}: frame {f} must hold 2 persons of {k} joints"
            )));
        }
        for (p, joints) in persons.iter().enumerate() {
            for (j, xyz) in joints.iter().enumerate() {
                for c in 0..3 {
                    data[frame_index(k, f, j, c, p)] = xyz[c];
                }
            }
        }
    }
    let frames = Tensor::new(vec![n, k, 3, 2], data)
        .map_err(|e| Error::Schema(format!("line {line}: {e}")))?;
    let seq = MotionSequence::new(frames, label, r.fps, r.torso_index, r.normalized.unwrap_or(false))
        .map_err(|e| Error::Schema(format!("line {line}: {e}")))?;
    Ok((seq, r.split.unwrap_or(Split::Train)))
}

/// Reads a whole file; any bad line fails the read.
pub fn read_sequences(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut seqs = Vec::new();
    let mut split = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        let (s, p) = from_record(rec, i + 1)?;
        seqs.push(s);
        split.push(p);
    }
    if seqs.is_empty() {
        return Err(Error::Schema("at least one sequence is required".into()));
    }
    LabeledDataset::new(seqs, split, serde_json::json!({ "source": path.display().to_string() }))
}

pub fn write_sequences(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (s, p) in dataset.sequences.iter().zip(&dataset.split) {
        let line = serde_json::to_string(&to_record(s, *p)).map_err(|e| Error::Schema(e.to_string()))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
