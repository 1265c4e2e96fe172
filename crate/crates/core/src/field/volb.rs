//! "VOLB" tensor files.
//!
//! Layout: the 8-byte magic `VOLB0001`; for vector fields one kind byte
//! (0 = velocity, 1 = displacement); then little-endian `u32` fields
//! `D, C, dims[D]`; then `C * prod(dims)` little-endian `f32` values,
//! channel-major and row-major within a channel.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::grid::{FieldKind, Grid, LabelMap, VectorField, Volume};

pub const MAGIC: &[u8; 8] = b"VOLB0001";

fn push_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn encode(kind: Option<FieldKind>, grid: &Grid, channels: usize, data: &[f64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 4 * data.len());
    buf.extend_from_slice(MAGIC);
    if let Some(k) = kind {
        buf.push(k.code());
    }
    push_u32(&mut buf, grid.ndim());
    push_u32(&mut buf, channels);
    for &d in grid.dims() {
        push_u32(&mut buf, d);
    }
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

struct Decoded {
    kind: Option<FieldKind>,
    dims: Vec<usize>,
    channels: usize,
    data: Vec<f64>,
}

fn decode(bytes: &[u8], with_kind: bool, path: &Path) -> Result<Decoded> {
    let bad = |msg: &str| Error::format(path, msg.to_string());
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(bad("bad VOLB magic"));
    }
    let mut pos = 8;
    let kind = if with_kind {
        let code = *bytes.get(pos).ok_or_else(|| bad("truncated kind byte"))?;
        pos += 1;
        Some(FieldKind::from_code(code).ok_or_else(|| bad("unknown field kind"))?)
    } else {
        None
    };
    let read_u32 = |pos: &mut usize| -> Result<usize> {
        let end = *pos + 4;
        let b = bytes.get(*pos..end).ok_or_else(|| bad("truncated header"))?;
        *pos = end;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    };
    let d = read_u32(&mut pos)?;
    if !(2..=3).contains(&d) {
        return Err(bad("unsupported dimensionality"));
    }
    let channels = read_u32(&mut pos)?;
    let mut dims = Vec::with_capacity(d);
    for _ in 0..d {
        dims.push(read_u32(&mut pos)?);
    }
    let count = channels * dims.iter().product::<usize>();
    let payload = &bytes[pos..];
    if payload.len() != 4 * count {
        return Err(bad(&format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            4 * count
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(Decoded {
        kind,
        dims,
        channels,
        data,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn volume_to_bytes(vol: &Volume) -> Vec<u8> {
    encode(None, vol.grid(), vol.channels(), vol.data())
}

pub fn volume_from_bytes(bytes: &[u8], path: &Path) -> Result<Volume> {
    let d = decode(bytes, false, path)?;
    let grid = Grid::new(&d.dims).map_err(|e| Error::format(path, e.to_string()))?;
    Volume::new(grid, d.channels, d.data)
}

pub fn write_volume(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    write_bytes(path.as_ref(), &volume_to_bytes(vol))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    volume_from_bytes(&read_bytes(path)?, path)
}

pub fn field_to_bytes(u: &VectorField) -> Vec<u8> {
    encode(Some(u.kind()), u.grid(), u.grid().ndim(), u.data())
}

pub fn write_field(path: impl AsRef<Path>, u: &VectorField) -> Result<()> {
    write_bytes(path.as_ref(), &field_to_bytes(u))
}

pub fn read_field(path: impl AsRef<Path>) -> Result<VectorField> {
    let path = path.as_ref();
    let d = decode(&read_bytes(path)?, true, path)?;
    if d.channels != d.dims.len() {
        return Err(Error::format(path, "vector field channel count != rank"));
    }
    let grid = Grid::new(&d.dims).map_err(|e| Error::format(path, e.to_string()))?;
    VectorField::new(grid, d.kind.expect("kind decoded"), d.data)
}

/// Label maps are stored as single-channel VOLB files holding label indices.
pub fn labels_to_bytes(labels: &LabelMap) -> Vec<u8> {
    let data: Vec<f64> = labels.labels().iter().map(|&l| l as f64).collect();
    encode(None, labels.grid(), 1, &data)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    write_bytes(path.as_ref(), &labels_to_bytes(labels))
}

pub fn read_labels(path: impl AsRef<Path>, num_labels: usize) -> Result<LabelMap> {
    let path = path.as_ref();
    let vol = read_volume(path)?;
    if vol.channels() != 1 {
        return Err(Error::format(path, "label file must have one channel"));
    }
    let mut labels = Vec::with_capacity(vol.data().len());
    for &v in vol.data() {
        if v.fract() != 0.0 || v < 0.0 || v >= num_labels as f64 {
            return Err(Error::format(path, format!("invalid label value {v}")));
        }
        labels.push(v as u8);
    }
    LabelMap::new(vol.grid().clone(), num_labels, labels)
}
