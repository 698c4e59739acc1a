//! Binary weight checkpoints.
//!
//! Layout: `b"GALA"`, version `u32`, header length `u32`, header JSON, then
//! the parameters as little-endian `f32` in declaration order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EncoderConfig, TowerRole, TowerWeights};
use crate::error::{GalaError, Result};

pub const MAGIC: &[u8; 4] = b"GALA";
pub const VERSION: u32 = 1;
const MAX_HEADER: usize = 1 << 20;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    role: TowerRole,
    trainable: bool,
    fingerprint: String,
}

pub fn encode_checkpoint(weights: &TowerWeights) -> Vec<u8> {
    let header = Header {
        config: weights.config().clone(),
        role: weights.role,
        trainable: weights.trainable,
        fingerprint: weights.fingerprint().to_string(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 4 * weights.params().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in weights.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TowerWeights> {
    let err = |r: &str| GalaError::format("checkpoint", r);
    if bytes.len() < 12 {
        return Err(err("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(err("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(err(&format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if len > MAX_HEADER || bytes.len() < 12 + len {
        return Err(err("truncated config block"));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + len]).map_err(|e| err(&e.to_string()))?;
    header.config.validate()?;
    let expected = header.config.fingerprint();
    if header.fingerprint != expected {
        return Err(GalaError::FingerprintMismatch {
            expected,
            found: header.fingerprint,
        });
    }
    let body = &bytes[12 + len..];
    let network = header.config.network()?;
    if body.len() != 4 * network.param_count() {
        return Err(err(&format!(
            "expected {} parameter bytes, found {}",
            4 * network.param_count(),
            body.len()
        )));
    }
    let params = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    TowerWeights::from_params(header.config, header.role, header.trainable, params)
}

/// Hex sha256 of the encoded checkpoint.
pub fn checkpoint_hash(weights: &TowerWeights) -> String {
    Sha256::digest(encode_checkpoint(weights))
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn save_checkpoint(weights: &TowerWeights, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(weights)).map_err(|e| GalaError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TowerWeights> {
    let bytes = std::fs::read(path).map_err(|e| GalaError::io(path, e))?;
    decode_checkpoint(&bytes)
}
