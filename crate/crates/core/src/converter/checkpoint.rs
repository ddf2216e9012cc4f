//! Checkpoint layout:
//!
//! ```text
//! magic (8 bytes) | header length (u64 LE) | JSON header | f32 LE blobs
//! ```
//!
//! The header holds the format version, the converter config and a tensor
//! manifest mapping each tensor name to its shape and byte offset within
//! the blob section. Blobs are stored in manifest order.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{ConverterConfig, ConverterParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LVCPARAM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ConverterConfig,
    tensors: IndexMap<String, TensorEntry>,
}

fn manifest(params: &ConverterParams) -> IndexMap<String, TensorEntry> {
    let mut tensors = IndexMap::new();
    let mut offset = 0u64;
    for (name, lin) in params.named_linears() {
        let (i, o) = lin.weight().dim();
        tensors.insert(
            format!("{name}.weight"),
            TensorEntry {
                shape: vec![i, o],
                offset,
            },
        );
        offset += (i * o * 4) as u64;
        tensors.insert(format!("{name}.bias"), TensorEntry { shape: vec![o], offset });
        offset += (o * 4) as u64;
    }
    tensors
}

pub fn save_params(path: impl AsRef<Path>, cfg: &ConverterConfig, params: &ConverterParams) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        config: *cfg,
        tensors: manifest(params),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + params.num_params() * 4);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, lin) in params.named_linears() {
        for v in lin.weight().iter().chain(lin.bias.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Loads a checkpoint using the config stored in its header.
pub fn load_params(path: impl AsRef<Path>) -> Result<(ConverterConfig, ConverterParams)> {
    let bytes = fs::read(path.as_ref())?;
    let (header, data) = parse_header(path.as_ref(), &bytes)?;
    let cfg = header.config;
    let params = read_tensors(&header, &cfg, data)?;
    Ok((cfg, params))
}

/// Loads a checkpoint and validates every tensor against the shapes `cfg`
/// implies. The ablation flags of `cfg` take precedence over the header's.
pub fn load_params_with_config(path: impl AsRef<Path>, cfg: &ConverterConfig) -> Result<ConverterParams> {
    let bytes = fs::read(path.as_ref())?;
    let (header, data) = parse_header(path.as_ref(), &bytes)?;
    read_tensors(&header, cfg, data)
}

fn parse_header<'a>(path: &Path, bytes: &'a [u8]) -> Result<(Header, &'a [u8])> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        if bytes.len() < 8 && CHECKPOINT_MAGIC.starts_with(bytes) {
            return Err(Error::TruncatedFile("missing magic".into()));
        }
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < 16 {
        return Err(Error::TruncatedFile("missing header length".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::TruncatedFile(format!("header of {len} bytes exceeds file")))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes[16..end])?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::ShapeMismatch("header lacks format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::VersionMismatch {
            found: version as u32,
            expected: FORMAT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(value)?;
    Ok((header, &bytes[end..]))
}

fn read_tensors(header: &Header, cfg: &ConverterConfig, data: &[u8]) -> Result<ConverterParams> {
    cfg.validate()?;
    let mut params = ConverterParams::zeros(cfg);
    let expected = manifest(&params);
    if expected.len() != header.tensors.len() {
        return Err(Error::ShapeMismatch(format!(
            "expected {} tensors, file has {}",
            expected.len(),
            header.tensors.len()
        )));
    }
    for ((en, ee), (fname, fe)) in expected.iter().zip(&header.tensors) {
        if en != fname || ee != fe {
            return Err(Error::ShapeMismatch(format!(
                "{en} {:?}@{} vs file {fname} {:?}@{}",
                ee.shape, ee.offset, fe.shape, fe.offset
            )));
        }
    }
    let total = params.num_params() * 4;
    if data.len() < total {
        return Err(Error::TruncatedFile(format!(
            "need {total} bytes of tensor data, found {}",
            data.len()
        )));
    }
    let mut floats = data[..total]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    for (_, lin) in params.named_linears_mut() {
        let (i, o) = lin.weight().dim();
        lin.set_weight(
            Array2::from_shape_vec((i, o), floats.by_ref().take(i * o).collect()).expect("sized by manifest"),
        );
        lin.bias = Array1::from(floats.by_ref().take(o).collect::<Vec<_>>());
    }
    Ok(params)
}
