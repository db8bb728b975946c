//! Weights file: `u32` little-endian header length, a JSON header, then the
//! parameters as little-endian `f32`, layer by layer, weight before bias.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::net::NetworkWeights;
use super::spec::NetSpec;
use crate::error::{Error, Result};
use crate::image::write_atomic;

const FORMAT: &str = "focuslab-weights";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    spec: NetSpec,
    seed: u64,
    #[serde(default)]
    metadata: serde_json::Value,
    param_count: usize,
    /// SHA-256 of the tensor blob, hex encoded.
    checksum: String,
}

pub fn encode_weights(w: &NetworkWeights) -> Result<Vec<u8>> {
    let mut blob = Vec::with_capacity(4 * w.param_count());
    for p in &w.params {
        for &v in p.weight.iter().chain(&p.bias) {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        spec: w.spec.clone(),
        seed: w.seed,
        metadata: w.metadata.clone(),
        param_count: w.param_count(),
        checksum: hex::encode(Sha256::digest(&blob)),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(4 + json.len() + blob.len());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode_weights(bytes: &[u8], path: &Path) -> Result<NetworkWeights> {
    let bad = |msg: String| Error::Format {
        path: path.to_owned(),
        msg,
    };
    if bytes.len() < 4 {
        return Err(bad("file too short for header length".into()));
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let json = bytes
        .get(4..4 + hlen)
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(bad(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let blob = &bytes[4 + hlen..];
    if hex::encode(Sha256::digest(blob)) != header.checksum {
        return Err(bad("checksum mismatch".into()));
    }
    let mut w = NetworkWeights::zeros(&header.spec)?;
    if blob.len() != 4 * w.param_count() || header.param_count != w.param_count() {
        return Err(bad(format!(
            "blob holds {} values, spec needs {}",
            blob.len() / 4,
            w.param_count()
        )));
    }
    let mut vals = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    for p in w.params.iter_mut() {
        for v in p.weight.iter_mut().chain(p.bias.iter_mut()) {
            *v = vals.next().unwrap();
        }
    }
    if !w.is_finite() {
        return Err(bad("non-finite parameter".into()));
    }
    w.seed = header.seed;
    w.metadata = header.metadata;
    Ok(w)
}

pub fn save_weights(path: &Path, w: &NetworkWeights) -> Result<()> {
    write_atomic(path, &encode_weights(w)?)
}

pub fn load_weights(path: &Path) -> Result<NetworkWeights> {
    decode_weights(&std::fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::build_discriminator_spec;

    #[test]
    fn round_trip_preserves_f32_values() {
        let mut w = NetworkWeights::init(&build_discriminator_spec(), 3).unwrap();
        w.metadata = serde_json::json!({"epochs": 2});
        for p in w.params.iter_mut() {
            for v in p.weight.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        let bytes = encode_weights(&w).unwrap();
        let back = decode_weights(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let w = NetworkWeights::init(&build_discriminator_spec(), 3).unwrap();
        let mut bytes = encode_weights(&w).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0x40;
        let err = decode_weights(&bytes, Path::new("mem"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("checksum"), "{err}");
    }
}
