//! Checkpoint files.
//!
//! ```text
//! magic    8 bytes   "P2NCKPT\0"
//! version  u32 LE    currently 1
//! hlen     u32 LE    length of the JSON header in bytes
//! header   hlen      {"version":1,"arch":{..},"tensors":[{"name":..,"shape":[..]},..]}
//! data     f32 LE    every tensor, in header order, row-major
//! ```
//!
//! Convolution weights have shape `[cout, cin, 3, 3]`, biases `[cout]`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{ArchConfig, EncoderDecoder};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"P2NCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    arch: ArchConfig,
    tensors: Vec<TensorInfo>,
}

fn expected_tensors(arch: &ArchConfig) -> Vec<TensorInfo> {
    arch.layer_names()
        .into_iter()
        .zip(arch.layer_dims())
        .flat_map(|(name, (cin, cout))| {
            [
                TensorInfo {
                    name: format!("{name}.weight"),
                    shape: vec![cout, cin, 3, 3],
                },
                TensorInfo {
                    name: format!("{name}.bias"),
                    shape: vec![cout],
                },
            ]
        })
        .collect()
}

pub fn to_bytes(model: &EncoderDecoder) -> Result<Vec<u8>> {
    let header = Header {
        version: VERSION,
        arch: *model.config(),
        tensors: expected_tensors(model.config()),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.parameters() {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<EncoderDecoder> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    header.arch.validate()?;
    let expected = expected_tensors(&header.arch);
    if header.tensors.len() != expected.len()
        || header
            .tensors
            .iter()
            .zip(&expected)
            .any(|(a, b)| a.name != b.name || a.shape != b.shape)
    {
        return Err(bad("tensor table does not match the architecture"));
    }
    let mut model = EncoderDecoder::zeroed(header.arch)?;
    let mut data = &bytes[16 + hlen..];
    for p in model.parameters_mut() {
        let need = 4 * p.len();
        if data.len() < need {
            return Err(bad("truncated tensor data"));
        }
        for (v, chunk) in p.iter_mut().zip(data[..need].chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        data = &data[need..];
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    if !model.parameters_finite() {
        return Err(bad("non-finite parameter"));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &EncoderDecoder, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderDecoder> {
    let path = path.as_ref();
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
