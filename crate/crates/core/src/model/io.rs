//! Flat little-endian weight file.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "MKVW"
//!      4     2  version (u16)
//!      6     2  n_layers (u16)
//!      8     2  n_query_heads (u16)
//!     10     2  n_kv_heads (u16)
//!     12     2  head_dim (u16)
//!     14     2  ffn multiplier (u16)
//!     16     4  vocab_size (u32)
//!     20     8  seed (u64)
//!     28     4  payload scalar count (u32)
//!     32   8·n  f64 payload, matrices row-major in generation order
//! ```

use std::path::Path;

use super::{weight_shapes, DecoderWeights, ModelConfig, FFN_MULTIPLIER};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const WEIGHT_MAGIC: [u8; 4] = *b"MKVW";
pub const WEIGHT_VERSION: u16 = 1;
const HEADER_LEN: usize = 32;

pub fn export_weights<T: Scalar>(weights: &DecoderWeights<T>) -> Vec<u8> {
    let cfg = weights.config();
    let count: usize = weights.matrices().iter().map(|m| m.as_slice().len()).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * count);
    out.extend_from_slice(&WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    for v in [
        cfg.n_layers,
        cfg.n_query_heads,
        cfg.n_kv_heads,
        cfg.head_dim,
        FFN_MULTIPLIER,
    ] {
        out.extend_from_slice(&(v as u16).to_le_bytes());
    }
    out.extend_from_slice(&(cfg.vocab_size as u32).to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for m in weights.matrices() {
        for &x in m.as_slice() {
            out.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
        }
    }
    out
}

fn u16_at(b: &[u8], at: usize) -> usize {
    u16::from_le_bytes([b[at], b[at + 1]]) as usize
}

pub fn import_weights<T: Scalar>(bytes: &[u8]) -> Result<DecoderWeights<T>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::WeightFormat(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if bytes[..4] != WEIGHT_MAGIC {
        return Err(Error::WeightFormat("bad magic".into()));
    }
    let version = u16_at(bytes, 4) as u16;
    if version != WEIGHT_VERSION {
        return Err(Error::WeightFormat(format!("unsupported version {version}")));
    }
    if u16_at(bytes, 14) != FFN_MULTIPLIER {
        return Err(Error::WeightFormat(format!(
            "ffn multiplier {} unsupported",
            u16_at(bytes, 14)
        )));
    }
    let config = ModelConfig {
        n_layers: u16_at(bytes, 6),
        n_query_heads: u16_at(bytes, 8),
        n_kv_heads: u16_at(bytes, 10),
        head_dim: u16_at(bytes, 12),
        vocab_size: u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize,
        seed: u64::from_le_bytes(bytes[20..28].try_into().unwrap()),
    };
    config.validate()?;
    let count = u32::from_le_bytes(bytes[28..32].try_into().unwrap()) as usize;
    let shapes = weight_shapes(&config);
    let expected: usize = shapes.iter().map(|(r, c)| r * c).sum();
    if count != expected || bytes.len() != HEADER_LEN + 8 * count {
        return Err(Error::WeightFormat(format!(
            "payload holds {count} scalars in {} bytes, config needs {expected}",
            bytes.len() - HEADER_LEN
        )));
    }
    let mut values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())));
    let mats = shapes
        .into_iter()
        .map(|(r, c)| Matrix::from_vec(r, c, values.by_ref().take(r * c).collect()))
        .collect::<Result<Vec<_>>>()?;
    DecoderWeights::from_matrices(config, mats)
}

pub fn save_weights<T: Scalar>(weights: &DecoderWeights<T>, path: &Path) -> Result<()> {
    std::fs::write(path, export_weights(weights)).map_err(|e| Error::io(path, e))
}

pub fn load_weights<T: Scalar>(path: &Path) -> Result<DecoderWeights<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    import_weights(&bytes)
}
