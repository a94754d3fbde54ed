//! Checkpoint directories: `manifest.txt` plus `params.bin`.
//!
//! The manifest starts with the format tag line, followed by one line per
//! tensor: `name<TAB>d0,d1,...<TAB>byte_offset`. The blob holds every tensor
//! back to back as little-endian `f32`.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{ParamStore, Tensor};
use crate::io::atomic_write;

pub const CHECKPOINT_TAG: &str = "MSCKPT1";
const MANIFEST: &str = "manifest.txt";
const BLOB: &str = "params.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("unsupported checkpoint format tag {0:?}")]
    Tag(String),
    #[error("parameter {name}: checkpoint shape {found:?} does not match model shape {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0} extends past the end of the blob")]
    Truncated(String),
}

/// Writes every parameter of `store` into the directory `dir`.
pub fn save_checkpoint(store: &ParamStore, dir: &Path) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!("{CHECKPOINT_TAG}\n");
    let mut blob = Vec::with_capacity(store.num_scalars() * 4);
    for (name, t) in store.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{name}\t{}\t{}\n", dims.join(","), blob.len()));
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    atomic_write(&dir.join(BLOB), &blob)?;
    atomic_write(&dir.join(MANIFEST), manifest.as_bytes())?;
    Ok(())
}

/// Reads a checkpoint as `(name, tensor)` pairs in manifest order.
pub fn load_checkpoint(dir: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let manifest = fs::read_to_string(dir.join(MANIFEST))?;
    let blob = fs::read(dir.join(BLOB))?;
    let mut lines = manifest.lines();
    let tag = lines.next().unwrap_or_default();
    if tag != CHECKPOINT_TAG {
        return Err(CheckpointError::Tag(tag.to_string()));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = |msg: &str| CheckpointError::Manifest {
            line: i + 2,
            msg: msg.to_string(),
        };
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, dims, offset] = fields[..] else {
            return Err(bad("expected 3 tab-separated fields"));
        };
        let shape = dims
            .split(',')
            .map(str::parse::<usize>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad("bad shape"))?;
        let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
        let n: usize = shape.iter().product();
        let bytes = blob
            .get(offset..offset + 4 * n)
            .ok_or_else(|| CheckpointError::Truncated(name.to_string()))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?;
        out.push((name.to_string(), t));
    }
    Ok(out)
}

impl ParamStore {
    /// Copies every checkpoint entry whose name exists in the store.
    /// Parameters missing from the checkpoint keep their current values.
    /// Returns the number of parameters loaded.
    pub fn load_from(&mut self, entries: &[(String, Tensor)]) -> Result<usize, CheckpointError> {
        let mut loaded = 0;
        for (name, t) in entries {
            let Some(id) = self.find(name) else { continue };
            let dst = self.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(CheckpointError::Shape {
                    name: name.clone(),
                    expected: dst.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(t.data());
            loaded += 1;
        }
        Ok(loaded)
    }
}
