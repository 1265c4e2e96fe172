//! Parameter checkpoints: `AMCKPT01`, a little-endian u64 header length, a
//! JSON header, then for every entry the value, first moment and second
//! moment payloads in the header's dtype.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

use super::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"AMCKPT01";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub trainable: bool,
    pub step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Header {
    pub step: u64,
    pub dtype: String,
    /// Free-form run metadata (resolved config, model kind, ...).
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub entries: Vec<Entry>,
}

/// Loaded checkpoint, converted to the requested element type.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub step: u64,
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub params: ParamStore<T>,
}

fn put<T: Real>(out: &mut Vec<u8>, data: &[T]) {
    for v in data {
        if T::DTYPE == "f32" {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&v.f64().to_le_bytes());
        }
    }
}

pub fn to_bytes<T: Real>(
    params: &ParamStore<T>,
    step: u64,
    meta: &serde_json::Map<String, serde_json::Value>,
) -> Vec<u8> {
    let header = Header {
        step,
        dtype: T::DTYPE.to_string(),
        meta: meta.clone(),
        entries: params
            .iter()
            .map(|p| Entry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                dtype: T::DTYPE.to_string(),
                trainable: p.trainable,
                step: p.step,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params.iter() {
        put(&mut out, &p.value);
        put(&mut out, &p.m);
        put(&mut out, &p.v);
    }
    out
}

pub fn from_bytes<T: Real>(bytes: &[u8], path: &Path) -> Result<Checkpoint<T>> {
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        d => return Err(bad(format!("unsupported dtype {d}"))),
    };
    let mut pos = 16 + hlen;
    let mut take = |n: usize| -> Result<Vec<T>> {
        let end = pos + n * width;
        let raw = bytes.get(pos..end).ok_or_else(|| bad("truncated payload".into()))?;
        pos = end;
        Ok(raw
            .chunks_exact(width)
            .map(|c| {
                if width == 4 {
                    T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64)
                } else {
                    T::of(f64::from_le_bytes(c.try_into().unwrap()))
                }
            })
            .collect())
    };
    let mut params = ParamStore::new();
    for e in &header.entries {
        let n: usize = e.shape.iter().product();
        let value = take(n)?;
        let m = take(n)?;
        let v = take(n)?;
        let id = params.add(&e.name, &e.shape, value, e.trainable)?;
        let p = params.get_mut(id);
        p.m = m;
        p.v = v;
        p.step = e.step;
    }
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(Checkpoint {
        step: header.step,
        meta: header.meta,
        params,
    })
}

pub fn save<T: Real>(
    path: &Path,
    params: &ParamStore<T>,
    step: u64,
    meta: &serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let bytes = to_bytes(params, step, meta);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    from_bytes(&bytes, path)
}
