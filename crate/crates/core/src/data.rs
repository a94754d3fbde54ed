//! Utterances and their JSON-lines representation.
//!
//! Frames are stored as base64 of little-endian `f32` values, row-major.

use std::io::{BufRead, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("utterance {id}: {msg}")]
    Invalid { id: String, msg: String },
}

/// One input sequence with its reference tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T, d]` features.
    pub frames: Tensor,
    pub targets: Vec<usize>,
    /// Frames per target token; empty when unknown.
    pub durations: Vec<usize>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    /// Exclusive end frame of every target token, if durations are known.
    pub fn token_ends(&self) -> Vec<usize> {
        self.durations
            .iter()
            .scan(0, |acc, d| {
                *acc += d;
                Some(*acc)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| DataError::Invalid {
            id: self.id.clone(),
            msg,
        };
        if self.targets.is_empty() {
            return Err(bad("no target tokens".into()));
        }
        if !self.durations.is_empty() {
            if self.durations.len() != self.targets.len() {
                return Err(bad("durations and targets differ in length".into()));
            }
            let total: usize = self.durations.iter().sum();
            if total != self.num_frames() {
                return Err(bad(format!("durations sum to {total}, frames {}", self.num_frames())));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    num_frames: usize,
    dim: usize,
    frames: String,
    targets: Vec<usize>,
    #[serde(default)]
    durations: Vec<usize>,
}

fn encode_frames(t: &Tensor) -> String {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    B64.encode(bytes)
}

fn to_record(u: &Utterance) -> Record {
    Record {
        id: u.id.clone(),
        num_frames: u.num_frames(),
        dim: u.dim(),
        frames: encode_frames(&u.frames),
        targets: u.targets.clone(),
        durations: u.durations.clone(),
    }
}

fn from_record(r: Record, line: usize) -> Result<Utterance, DataError> {
    let perr = |msg: String| DataError::Parse { line, msg };
    let bytes = B64.decode(r.frames.as_bytes()).map_err(|e| perr(e.to_string()))?;
    if bytes.len() != r.num_frames * r.dim * 4 {
        return Err(perr(format!(
            "frame payload has {} bytes, expected {}",
            bytes.len(),
            r.num_frames * r.dim * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let frames = Tensor::new(vec![r.num_frames, r.dim], data).map_err(|e| perr(e.to_string()))?;
    let u = Utterance {
        id: r.id,
        frames,
        targets: r.targets,
        durations: r.durations,
    };
    u.validate()?;
    Ok(u)
}

pub fn write_jsonl<W: Write>(mut w: W, utts: &[Utterance]) -> Result<(), DataError> {
    for u in utts {
        let line = serde_json::to_string(&to_record(u)).expect("records serialize");
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Utterance>, DataError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(from_record(rec, i + 1)?);
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, utts: &[Utterance]) -> Result<(), DataError> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, utts)?;
    crate::io::atomic_write(path, &buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Utterance>, DataError> {
    let f = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(f))
}

/// Rounds every value through `f32`, matching what a saved dataset holds.
pub fn quantize(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v as f32 as f64).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}
