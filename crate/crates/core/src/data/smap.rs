//! `SMAP` score-map files: magic `"SMAP"`, u32 width, u32 height (both
//! little-endian), then `width * height` little-endian f32 values row-major.

use std::io::Write;
use std::path::Path;

use super::ScoreMap;
use crate::error::{Error, Result};

pub const SMAP_MAGIC: &[u8; 4] = b"SMAP";

pub fn encode_score_map(map: &ScoreMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * map.scores().len());
    out.extend_from_slice(SMAP_MAGIC);
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    for v in map.scores() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_score_map(bytes: &[u8]) -> Result<ScoreMap> {
    if bytes.len() < 12 {
        return Err(Error::Format("truncated SMAP header".into()));
    }
    if &bytes[..4] != SMAP_MAGIC {
        return Err(Error::Format("bad SMAP magic".into()));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("SMAP dimensions overflow".into()))?;
    let body = &bytes[12..];
    if body.len() != expected {
        return Err(Error::Format(format!(
            "SMAP body has {} bytes, expected {expected}",
            body.len()
        )));
    }
    let scores = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ScoreMap::new(height, width, scores).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_score_map(map: &ScoreMap, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_score_map(map))?;
    Ok(())
}

pub fn read_score_map(path: &Path) -> Result<ScoreMap> {
    decode_score_map(&std::fs::read(path)?)
}
