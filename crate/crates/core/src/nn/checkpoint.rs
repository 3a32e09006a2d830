//! Checkpoint directories.
//!
//! Layout:
//! - `manifest.json`: `{"version": 1, "dtype": "f64le", "params": [{"name", "shape"}...], "t"?}`
//! - `weights.bin`: every tensor's row-major data, manifest order, little-endian binary64
//! - `adam_m.bin`, `adam_v.bin`: optimizer moments in the same layout, present iff `t` is

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, ParameterStore};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";
pub const ADAM_M: &str = "adam_m.bin";
pub const ADAM_V: &str = "adam_v.bin";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    dtype: String,
    params: Vec<Entry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

fn encode<'a>(tensors: impl Iterator<Item = &'a Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<()> {
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: PathBuf) -> Result<Vec<u8>> {
    fs::read(&path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(params: &ParameterStore, adam: Option<&AdamState>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        version: 1,
        dtype: "f64le".into(),
        params: params
            .iter()
            .map(|(name, t)| Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        t: adam.map(|a| a.t),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(dir.join(MANIFEST), text.as_bytes())?;
    write(dir.join(WEIGHTS), &encode(params.iter().map(|(_, t)| t)))?;
    if let Some(adam) = adam {
        write(dir.join(ADAM_M), &encode(adam.m.iter()))?;
        write(dir.join(ADAM_V), &encode(adam.v.iter()))?;
    }
    Ok(())
}

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (before + column.saturating_sub(1)) as u64
}

fn decode(path: &Path, bytes: &[u8], entries: &[Entry]) -> Result<Vec<Tensor>> {
    let mut offset = 0usize;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let n: usize = e.shape.iter().product();
        let end = offset + n * 8;
        if end > bytes.len() {
            return Err(Error::ParseAt {
                path: path.to_path_buf(),
                offset: bytes.len() as u64,
                msg: format!("file ends inside {} (needs {end} bytes)", e.name),
            });
        }
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push(Tensor::new(e.shape.clone(), data).map_err(|err| Error::ParseAt {
            path: path.to_path_buf(),
            offset: offset as u64,
            msg: format!("{}: {err}", e.name),
        })?);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::ParseAt {
            path: path.to_path_buf(),
            offset: offset as u64,
            msg: format!("{} trailing bytes", bytes.len() - offset),
        });
    }
    Ok(out)
}

/// Read a checkpoint directory. Optimizer state, when present, carries the default hyperparameters.
pub fn load_checkpoint(dir: &Path) -> Result<(ParameterStore, Option<AdamState>)> {
    let mpath = dir.join(MANIFEST);
    let text = String::from_utf8(read(mpath.clone())?).map_err(|e| Error::ParseAt {
        path: mpath.clone(),
        offset: e.utf8_error().valid_up_to() as u64,
        msg: "invalid UTF-8".into(),
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::ParseAt {
        path: mpath.clone(),
        offset: byte_offset(&text, e.line(), e.column()),
        msg: e.to_string(),
    })?;
    if manifest.version != 1 || manifest.dtype != "f64le" {
        return Err(Error::ParseAt {
            path: mpath,
            offset: 0,
            msg: format!("unsupported version {} / dtype {}", manifest.version, manifest.dtype),
        });
    }
    let wpath = dir.join(WEIGHTS);
    let tensors = decode(&wpath, &read(wpath.clone())?, &manifest.params)?;
    let mut params = ParameterStore::new();
    for (e, t) in manifest.params.iter().zip(tensors) {
        params.insert(e.name.clone(), t)?;
    }
    let adam = match manifest.t {
        None => None,
        Some(t) => {
            let mp = dir.join(ADAM_M);
            let vp = dir.join(ADAM_V);
            let m = decode(&mp, &read(mp.clone())?, &manifest.params)?;
            let v = decode(&vp, &read(vp.clone())?, &manifest.params)?;
            Some(AdamState {
                config: AdamConfig::default(),
                m,
                v,
                t,
            })
        }
    };
    Ok((params, adam))
}
