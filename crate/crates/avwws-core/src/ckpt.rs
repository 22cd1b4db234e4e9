//! Checkpoint and tensor-file format.
//!
//! Layout: an 8-byte little-endian header length, a JSON header, then a
//! payload of concatenated little-endian f32 arrays. The header carries the
//! format version, configs, and a table of (name, dtype, shape,
//! byte_offset, byte_length) in sorted-name order with ascending,
//! non-overlapping offsets. Save -> load -> save is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore};
use crate::tensor::{numel, Tensor};
use crate::train::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_config: Option<ModelConfig>,
    pub train_config: Option<TrainConfig>,
    pub params: Vec<ArrayEntry>,
}

/// Serialize named f32 arrays with an arbitrary typed header carrying the
/// table. `make_header` receives the table in sorted-name order.
fn write_container<H: Serialize>(
    path: &Path,
    arrays: &[(String, &Tensor<f32>)],
    make_header: impl FnOnce(Vec<ArrayEntry>) -> H,
) -> Result<()> {
    let mut sorted: Vec<&(String, &Tensor<f32>)> = arrays.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut table = Vec::with_capacity(sorted.len());
    let mut offset = 0u64;
    for (name, t) in &sorted {
        let len = (t.numel() * 4) as u64;
        table.push(ArrayEntry {
            name: name.clone(),
            dtype: "f32".to_string(),
            shape: t.shape().to_vec(),
            byte_offset: offset,
            byte_length: len,
        });
        offset += len;
    }
    let header_bytes = serde_json::to_vec(&make_header(table))?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, t) in &sorted {
        for v in t.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

fn read_container<H: for<'de> Deserialize<'de>>(path: &Path) -> Result<(H, Vec<u8>)> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| Error::Format(format!("{}: truncated header body", path.display())))?;
    let header: H = serde_json::from_slice(&header_bytes)?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    Ok((header, payload))
}

fn extract_arrays(table: &[ArrayEntry], payload: &[u8], path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut expected_offset = 0u64;
    let mut out = Vec::with_capacity(table.len());
    for entry in table {
        if entry.dtype != "f32" {
            return Err(Error::Format(format!(
                "{}: unsupported dtype `{}` for `{}`",
                path.display(),
                entry.dtype,
                entry.name
            )));
        }
        if entry.byte_offset != expected_offset {
            return Err(Error::Format(format!(
                "{}: `{}` offset {} overlaps or leaves a gap (expected {expected_offset})",
                path.display(),
                entry.name,
                entry.byte_offset
            )));
        }
        let n = numel(&entry.shape);
        if entry.byte_length != (n * 4) as u64 {
            return Err(Error::Format(format!(
                "{}: `{}` length {} does not match shape {:?}",
                path.display(),
                entry.name,
                entry.byte_length,
                entry.shape
            )));
        }
        let start = entry.byte_offset as usize;
        let end = start + entry.byte_length as usize;
        if end > payload.len() {
            return Err(Error::Format(format!(
                "{}: `{}` extends past payload",
                path.display(),
                entry.name
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
        expected_offset = end as u64;
    }
    Ok(out)
}

/// A loaded checkpoint: parameters plus the configs they were trained with.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub model_config: Option<ModelConfig>,
    pub train_config: Option<TrainConfig>,
}

/// Save model parameters (and configs) to `path`.
pub fn save_checkpoint(
    path: &Path,
    params: &ParamStore<f32>,
    model_config: Option<&ModelConfig>,
    train_config: Option<&TrainConfig>,
) -> Result<()> {
    let arrays: Vec<(String, &Tensor<f32>)> =
        params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    write_container(path, &arrays, |table| CheckpointHeader {
        format_version: FORMAT_VERSION,
        model_config: model_config.cloned(),
        train_config: train_config.cloned(),
        params: table,
    })
}

/// Load a checkpoint, rejecting unknown format versions, overlapping
/// offsets, and duplicate parameter names.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header, payload): (CheckpointHeader, Vec<u8>) = read_container(path)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unknown format_version {} (expected {FORMAT_VERSION})",
            path.display(),
            header.format_version
        )));
    }
    let mut params = ParamStore::new();
    for (name, t) in extract_arrays(&header.params, &payload, path)? {
        if params.contains(&name) {
            return Err(Error::Format(format!(
                "{}: duplicate parameter `{name}`",
                path.display()
            )));
        }
        params.insert(name, t);
    }
    Ok(Checkpoint {
        params,
        model_config: header.model_config,
        train_config: header.train_config,
    })
}

// ── generic tensor files (corpus samples) ───────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorFileHeader {
    pub format_version: u32,
    pub arrays: Vec<ArrayEntry>,
}

/// Write named arrays in the checkpoint container format.
pub fn save_tensors(path: &Path, arrays: &[(String, &Tensor<f32>)]) -> Result<()> {
    write_container(path, arrays, |table| TensorFileHeader {
        format_version: FORMAT_VERSION,
        arrays: table,
    })
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let (header, payload): (TensorFileHeader, Vec<u8>) = read_container(path)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unknown format_version {}",
            path.display(),
            header.format_version
        )));
    }
    extract_arrays(&header.arrays, &payload, path)
}
