//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SPLNCKPT"
//! version    u32
//! cfg_hash   32 bytes SHA-256 of the model config JSON
//! cfg_len    u32, then cfg_len bytes of model config JSON
//! n_groups   u32, then per group: name (u32 len + utf8)
//! n_params   u32, then per param in id order:
//!            group index u32, name (u32 len + utf8), rank u32, dims u32 * rank,
//!            step u64, values f32 * n, first moment f32 * n, second moment f32 * n
//! ```
//!
//! Freeze flags are training configuration and are not stored.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::{GroupId, GroupInfo, Param, ParamStore};
use super::{MathError, Tensor};

pub const MAGIC: &[u8; 8] = b"SPLNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_json: String,
    pub config_hash: [u8; 32],
    pub store: ParamStore<f32>,
}

pub fn config_hash(config_json: &str) -> [u8; 32] {
    let digest = Sha256::digest(config_json.as_bytes());
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn put_f32s(w: &mut impl Write, vals: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn write_checkpoint(w: &mut impl Write, store: &ParamStore<f32>, config_json: &str) -> Result<(), MathError> {
    w.write_all(MAGIC)?;
    put_u32(w, FORMAT_VERSION)?;
    w.write_all(&config_hash(config_json))?;
    put_str(w, config_json)?;
    put_u32(w, store.groups().len() as u32)?;
    for g in store.groups() {
        put_str(w, &g.name)?;
    }
    put_u32(w, store.len() as u32)?;
    for p in store.params() {
        put_u32(w, p.group.0 as u32)?;
        put_str(w, &p.name)?;
        put_u32(w, p.value.rank() as u32)?;
        for &d in p.value.shape() {
            put_u32(w, d as u32)?;
        }
        w.write_all(&p.step.to_le_bytes())?;
        put_f32s(w, p.value.data())?;
        put_f32s(w, p.m.data())?;
        put_f32s(w, p.v.data())?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, MathError> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| MathError::Checkpoint(format!("truncated file: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32, MathError> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, MathError> {
        let b = self.bytes(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(&b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self) -> Result<String, MathError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?).map_err(|_| MathError::Checkpoint("invalid utf-8 string".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, MathError> {
        let b = self.bytes(n * 4)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

pub fn read_checkpoint(r: impl Read) -> Result<Checkpoint, MathError> {
    let mut r = Reader { inner: r };
    if r.bytes(8)? != MAGIC {
        return Err(MathError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(MathError::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut hash = [0u8; 32];
    hash.copy_from_slice(&r.bytes(32)?);
    let config_json = r.string()?;
    if config_hash(&config_json) != hash {
        return Err(MathError::Checkpoint("config hash mismatch".into()));
    }
    let n_groups = r.u32()? as usize;
    let mut groups = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        groups.push(GroupInfo { name: r.string()?, frozen: false });
    }
    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let group = r.u32()? as usize;
        if group >= groups.len() {
            return Err(MathError::Checkpoint(format!("parameter refers to group #{group}")));
        }
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let step = r.u64()?;
        let value = Tensor::new(shape.clone(), r.f32s(n)?)?;
        let m = Tensor::new(shape.clone(), r.f32s(n)?)?;
        let v = Tensor::new(shape, r.f32s(n)?)?;
        params.push(Param { name, group: GroupId(group), value, m, v, step });
    }
    Ok(Checkpoint { config_json, config_hash: hash, store: ParamStore::from_parts(params, groups) })
}

pub fn save(path: &Path, store: &ParamStore<f32>, config_json: &str) -> Result<(), MathError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, store, config_json)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, MathError> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}
