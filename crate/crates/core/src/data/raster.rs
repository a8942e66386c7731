use std::path::Path;

use crate::error::{Error, Result};

/// Disparity in pixels; zero (or negative) marks an invalid measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl DisparityMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape("disparity map size".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }
}

/// Binary 16-bit PGM (P5, maxval 65535), stored value = round(disparity * 256).
pub fn write_disparity_pgm(map: &DisparityMap, path: &Path) -> Result<()> {
    let mut out = format!("P5\n{} {}\n65535\n", map.width, map.height).into_bytes();
    for &d in &map.values {
        let q = (d.max(0.0) * 256.0).round().min(65535.0) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_disparity_pgm(path: &Path) -> Result<DisparityMap> {
    let bytes = std::fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::Format("disparity file is not a binary PGM".into()));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM header field {s}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    let body = bytes.get(pos..).unwrap_or(&[]);
    let values: Vec<f32> = if maxval > 255 {
        if body.len() != 2 * w * h {
            return Err(Error::Format("truncated PGM body".into()));
        }
        body.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 256.0)
            .collect()
    } else {
        if body.len() != w * h {
            return Err(Error::Format("truncated PGM body".into()));
        }
        body.iter().map(|&b| b as f32 / 256.0).collect()
    };
    DisparityMap::new(h, w, values)
}
