//! `FTK1` checkpoints: named f64 tensors, little-endian.
//!
//! Layout: magic `FTK1`, `u64` record count, then per record a `u64` name
//! length, UTF-8 name, `u64` rank, `rank × u64` dims and the f64 payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FTK1";

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * store.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(buf: &[u8]) -> Result<ParamStore> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = buf
            .get(pos..pos.saturating_add(n))
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {pos}")))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(Error::Format("not an FTK1 checkpoint".into()));
    }
    let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes"));
    let count = u64_at(take(8)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u64_at(take(8)?) as usize;
        let name = std::str::from_utf8(take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = u64_at(take(8)?) as usize;
        if rank > 8 {
            return Err(Error::Format(format!("`{name}` has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64_at(take(8)?) as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if store.names().contains(&name) {
            return Err(Error::Format(format!("duplicate parameter `{name}`")));
        }
        store.add(name, Tensor::new(&shape, data)?);
    }
    if pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", buf.len() - pos)));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, encode(store))?;
    Ok(())
}

/// Load `path` into `store`, which fixes the expected architecture.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let loaded = decode(&fs::read(path)?)?;
    store.load_from(loaded)
}
