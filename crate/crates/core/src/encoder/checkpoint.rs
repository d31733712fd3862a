use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, Params, SetEncoder};
use crate::error::{Error, Result};
use crate::framing;
use crate::numgrad::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSC1";

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    /// Free-form run metadata (kind, seed, epoch).
    #[serde(default)]
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// Serializes an encoder plus run metadata into checkpoint bytes.
pub fn checkpoint_bytes(enc: &SetEncoder, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut arrays = Vec::with_capacity(enc.params.len());
    let mut payload = Vec::with_capacity(enc.params.num_values());
    for (name, m) in enc.params.iter() {
        arrays.push(ArrayEntry {
            name: name.clone(),
            shape: [m.rows(), m.cols()],
            offset: payload.len(),
        });
        payload.extend_from_slice(m.as_slice());
    }
    let header = serde_json::to_vec(&Header {
        config: enc.config.clone(),
        meta: meta.clone(),
        arrays,
    })?;
    Ok(framing::encode(CHECKPOINT_MAGIC, &header, &payload))
}

/// Parses checkpoint bytes into the encoder and its metadata.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(SetEncoder, serde_json::Value)> {
    let (header, payload) = framing::decode(CHECKPOINT_MAGIC, bytes)?;
    let header: Header = serde_json::from_slice(header)?;
    header.config.validate()?;
    let values = framing::read_f64s(payload);
    let mut params = Params::default();
    for a in header.arrays {
        let n = a.shape[0] * a.shape[1];
        let end = a
            .offset
            .checked_add(n)
            .filter(|&e| e <= values.len())
            .ok_or_else(|| Error::Truncated(format!("array {:?} runs past the payload", a.name)))?;
        let m = Matrix::from_vec(a.shape[0], a.shape[1], values[a.offset..end].to_vec())?;
        params.insert(a.name, m);
    }
    Ok((
        SetEncoder {
            config: header.config,
            params,
        },
        header.meta,
    ))
}

pub fn save_checkpoint(path: &Path, enc: &SetEncoder, meta: &serde_json::Value) -> Result<()> {
    framing::write_file(path, &checkpoint_bytes(enc, meta)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(SetEncoder, serde_json::Value)> {
    checkpoint_from_bytes(&fs::read(path)?)
}
