//! Checkpoint files: one JSON header line, `\n`, then the parameters as
//! little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{NetSpec, PolicyParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub net: NetSpec,
    pub seed: u64,
    pub updates: u64,
    pub param_count: usize,
    /// Free-form run configuration recorded by the caller.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<serde_json::Value>,
}

pub fn encode_checkpoint(params: &PolicyParams, updates: u64, run: Option<serde_json::Value>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_FORMAT_VERSION,
        net: params.spec.clone(),
        seed: params.seed,
        updates,
        param_count: params.len(),
        run,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(params.len() * 4);
    for &v in &params.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, PolicyParams)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
            header.format_version
        )));
    }
    let body = &bytes[nl + 1..];
    if header.param_count != header.net.param_count() || body.len() != header.param_count * 4 {
        return Err(Error::Checkpoint(format!(
            "parameter block has {} bytes, network needs {}",
            body.len(),
            header.net.param_count() * 4
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let params = PolicyParams::from_values(header.net.clone(), header.seed, values)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((header, params))
}

pub fn save_checkpoint(path: &Path, params: &PolicyParams, updates: u64, run: Option<serde_json::Value>) -> Result<()> {
    fs::write(path, encode_checkpoint(params, updates, run)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, PolicyParams)> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_rounds_to_f32() {
        let spec = NetSpec::uniform(3, 2, &[1]);
        let p = PolicyParams::init(&spec, 5).unwrap();
        let bytes = encode_checkpoint(&p, 12, Some(serde_json::json!({"lr": 0.1}))).unwrap();
        let (h, q) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(h.updates, 12);
        assert_eq!(h.seed, 5);
        assert_eq!(q.spec, spec);
        for (a, b) in p.values.iter().zip(&q.values) {
            assert_eq!(*b, f64::from(*a as f32));
        }
        // Re-encoding f32-exact values is lossless.
        let again = encode_checkpoint(&q, 12, Some(serde_json::json!({"lr": 0.1}))).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let p = PolicyParams::init(&NetSpec::uniform(3, 2, &[1]), 5).unwrap();
        let bytes = encode_checkpoint(&p, 0, None).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(b"{}").is_err());
        let text = String::from_utf8_lossy(&bytes).replace("\"format_version\":1", "\"format_version\":9");
        assert!(decode_checkpoint(text.as_bytes()).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let p = PolicyParams::init(&NetSpec::uniform(3, 2, &[2]), 1).unwrap();
        save_checkpoint(&path, &p, 3, None).unwrap();
        let (h, _) = load_checkpoint(&path).unwrap();
        assert_eq!(h.param_count, p.len());
        assert!(h.run.is_none());
    }
}
