//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//! `"OSCK"`, u32 version, u32+bytes kind tag, u32+bytes JSON metadata
//! (carries the config echo), u32 tensor count, then per tensor:
//! u32+bytes name, u8 dtype (0 = f32, 1 = f64), u32 rank, u64 dims, raw values.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

fn put_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated file".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn get_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let n = get_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated file".into()))?;
    Ok(b)
}

impl Checkpoint {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert_all(&mut self, prefix: &str, tensors: BTreeMap<String, Tensor>) {
        for (k, v) in tensors {
            self.tensors.insert(format!("{prefix}{k}"), v);
        }
    }

    /// Tensors under `prefix`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        put_bytes(w, self.kind.as_bytes())?;
        put_bytes(w, serde_json::to_string(&self.meta)?.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            put_bytes(w, name.as_bytes())?;
            let shape = t.dims().to_vec();
            let t = t.flatten_all()?;
            match t.dtype() {
                DType::F64 => {
                    w.write_all(&[1u8])?;
                    write_dims(w, &shape)?;
                    for v in t.to_vec1::<f64>()? {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                _ => {
                    w.write_all(&[0u8])?;
                    write_dims(w, &shape)?;
                    for v in t.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated file".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = get_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let kind = String::from_utf8(get_bytes(r)?)
            .map_err(|_| Error::Checkpoint("kind tag is not utf-8".into()))?;
        let meta: serde_json::Value = serde_json::from_slice(&get_bytes(r)?)?;
        let count = get_u32(r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = String::from_utf8(get_bytes(r)?)
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)
                .map_err(|_| Error::Checkpoint("truncated file".into()))?;
            let rank = get_u32(r)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)
                    .map_err(|_| Error::Checkpoint("truncated file".into()))?;
                dims.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = dims.iter().product();
            let t = match tag[0] {
                1 => {
                    let mut buf = vec![0u8; n * 8];
                    r.read_exact(&mut buf)
                        .map_err(|_| Error::Checkpoint("truncated file".into()))?;
                    let vals: Vec<f64> = buf
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(vals, dims, &Device::Cpu)?
                }
                0 => {
                    let mut buf = vec![0u8; n * 4];
                    r.read_exact(&mut buf)
                        .map_err(|_| Error::Checkpoint("truncated file".into()))?;
                    let vals: Vec<f32> = buf
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(vals, dims, &Device::Cpu)?
                }
                other => return Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
            };
            tensors.insert(name, t);
        }
        Ok(Self {
            kind,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Load and check the kind tag.
    pub fn load(path: &Path, expected_kind: &str) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck = Self::read_from(&mut f)?;
        if ck.kind != expected_kind {
            return Err(Error::Checkpoint(format!(
                "expected a {expected_kind} checkpoint, found {}",
                ck.kind
            )));
        }
        Ok(ck)
    }
}

fn write_dims<W: Write>(w: &mut W, dims: &[usize]) -> Result<()> {
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in dims {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    Ok(())
}
