//! Versioned binary weight container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `SFUNET\0\0` |
//! | 4     | format version (u32, currently 1) |
//! | 4     | header length `h` (u32) |
//! | h     | UTF-8 JSON header: `{"config": UNetConfig, "block_lens": [..]}` |
//! | rest  | f32 values of every block, concatenated |
//!
//! Block order is [`UNetWeights::visit_all`]: for each layer in forward order
//! (encoder stages 0..depth, then decoder levels depth-1..0) the conv weight
//! `[cout][cin][k][k]`, conv bias, and when batch norm is present gamma, beta,
//! running mean, running variance; finally the 1x1 head weight and bias.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::unet::{UNetConfig, UNetWeights};

pub const MAGIC: &[u8; 8] = b"SFUNET\0\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: UNetConfig,
    block_lens: Vec<usize>,
}

pub fn to_bytes(weights: &UNetWeights<f32>) -> Result<Vec<u8>> {
    let mut block_lens = Vec::new();
    weights.visit_all(|_, b| block_lens.push(b.len()));
    let header = serde_json::to_vec(&Header {
        config: weights.config.clone(),
        block_lens,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + 4 * weights.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    weights.visit_all(|_, b| {
        for v in b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<UNetWeights<f32>> {
    let err = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(err("not a weight checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let header_bytes = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| err("truncated header"))?;
    let header: Header = serde_json::from_slice(header_bytes)?;
    let mut weights = UNetWeights::<f32>::zeros(&header.config)?;
    let mut expected = Vec::new();
    weights.visit_all(|_, b| expected.push(b.len()));
    if expected != header.block_lens {
        return Err(err("block sizes do not match the stored configuration"));
    }
    let payload = &bytes[16 + hlen..];
    let total: usize = expected.iter().sum();
    if payload.len() != 4 * total {
        return Err(Error::Checkpoint(format!(
            "expected {} payload bytes, found {}",
            4 * total,
            payload.len()
        )));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    weights.visit_all_mut(|_, b| {
        for v in b.iter_mut() {
            *v = values.next().expect("length checked");
        }
    });
    if !weights.all_finite() {
        return Err(err("non-finite parameter"));
    }
    Ok(weights)
}

pub fn save(path: &Path, weights: &UNetWeights<f32>) -> Result<()> {
    let bytes = to_bytes(weights)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<UNetWeights<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn toy() -> UNetWeights<f32> {
        let mut cfg = UNetConfig::with_depth(2, 4);
        cfg.in_channels = 3;
        cfg.out_channels = 3;
        cfg.spatial = 8;
        let mut w = UNetWeights::init(&cfg, &mut stream(1, 1)).unwrap();
        w.encoder[0].bn.as_mut().unwrap().running_var[1] = 2.5;
        w
    }

    #[test]
    fn round_trip_is_exact() {
        let w = toy();
        let bytes = to_bytes(&w).unwrap();
        assert_eq!(from_bytes(&bytes).unwrap(), w);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        save(&path, &w).unwrap();
        assert_eq!(load(&path).unwrap(), w);
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn damaged_files_rejected() {
        let bytes = to_bytes(&toy()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(_))));
        assert!(from_bytes(&bytes[..10]).is_err());
    }
}
