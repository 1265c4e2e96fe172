use crate::error::{Error, Result};

use super::grid::{FieldKind, Grid, LabelMap, VectorField, Volume};
use super::kernels::{self, Geom};

/// Default number of scaling-and-squaring steps.
pub const DEFAULT_STEPS: usize = 7;

/// Identity sampling coordinates (`ndim x len`).
pub fn identity_coords(grid: &Grid) -> Vec<f64> {
    let geom = grid.geom();
    let n = geom.len;
    let mut out = vec![0.0; geom.ndim * n];
    for lin in 0..n {
        let c = geom.coord(lin);
        for a in 0..geom.ndim {
            out[a * n + lin] = c[a] as f64;
        }
    }
    out
}

/// Samples `vol` at continuous voxel coordinates, one point per voxel of
/// `vol`'s grid; out-of-grid coordinates are clamped to the boundary.
pub fn interpolate(vol: &Volume, coords: &[f64]) -> Result<Volume> {
    let grid = vol.grid();
    if coords.len() != grid.ndim() * grid.len() {
        return Err(Error::contract(format!(
            "interpolate: coords length {} != {} x {}",
            coords.len(),
            grid.ndim(),
            grid.len()
        )));
    }
    if coords.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("interpolate: coordinates".into()));
    }
    let mut out = vec![0.0; vol.data().len()];
    kernels::interpolate_into(vol.data(), vol.channels(), &grid.geom(), coords, &mut out);
    Volume::new(grid.clone(), vol.channels(), out)
}

fn require_displacement(u: &VectorField, what: &str) -> Result<()> {
    if u.kind() == FieldKind::Displacement {
        Ok(())
    } else {
        Err(Error::contract(format!("{what}: expected a displacement field")))
    }
}

/// `out(x) = vol(x + u(x))`.
pub fn warp(vol: &Volume, u: &VectorField) -> Result<Volume> {
    require_displacement(u, "warp")?;
    vol.grid().check_same(u.grid(), "warp")?;
    let mut out = vec![0.0; vol.data().len()];
    kernels::warp_into(vol.data(), vol.channels(), &u.geom(), u.data(), &mut out);
    Volume::new(vol.grid().clone(), vol.channels(), out)
}

/// Warps a label map through its one-hot encoding; the result is the
/// argmax of the interpolated label probabilities.
pub fn warp_labels(labels: &LabelMap, u: &VectorField) -> Result<LabelMap> {
    Ok(warp(&labels.one_hot(), u)?.argmax())
}

/// Displacement of `(Id + outer) o (Id + inner)`.
pub fn compose(outer: &VectorField, inner: &VectorField) -> Result<VectorField> {
    require_displacement(outer, "compose")?;
    require_displacement(inner, "compose")?;
    outer.grid().check_same(inner.grid(), "compose")?;
    let mut out = vec![0.0; inner.data().len()];
    kernels::compose_into(outer.data(), inner.data(), &inner.geom(), &mut out);
    VectorField::new(inner.grid().clone(), FieldKind::Displacement, out)
}

/// Scaling and squaring: `u_0 = v / 2^K`, then `u <- u o u` K times.
pub fn integrate_velocity(v: &VectorField, steps: usize) -> Result<VectorField> {
    if v.kind() != FieldKind::Velocity {
        return Err(Error::contract("integrate_velocity: expected a velocity field"));
    }
    if steps == 0 {
        return Err(Error::contract("integrate_velocity: steps must be >= 1"));
    }
    let geom = v.geom();
    let scale = 0.5f64.powi(steps as i32);
    let mut u: Vec<f64> = v.data().iter().map(|x| x * scale).collect();
    let mut next = vec![0.0; u.len()];
    for _ in 0..steps {
        kernels::compose_into(&u, &u, &geom, &mut next);
        std::mem::swap(&mut u, &mut next);
    }
    VectorField::new(v.grid().clone(), FieldKind::Displacement, u)
}

/// Displacement of the inverse map, `exp(-v)`.
pub fn invert_velocity(v: &VectorField, steps: usize) -> Result<VectorField> {
    let neg = v.scaled(-1.0);
    integrate_velocity(&neg, steps)
}

/// Per-channel, per-axis spatial derivatives, `channels x ndim x len`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientStack {
    pub channels: usize,
    pub ndim: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl GradientStack {
    /// Derivative of channel `c` along `axis`.
    pub fn get(&self, c: usize, axis: usize) -> &[f64] {
        let off = (c * self.ndim + axis) * self.len;
        &self.data[off..off + self.len]
    }

    /// Frobenius norm of the per-voxel derivative matrix.
    pub fn frobenius(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for c in 0..self.channels {
            for a in 0..self.ndim {
                for (o, g) in out.iter_mut().zip(self.get(c, a)) {
                    *o += g * g;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = v.sqrt());
        out
    }
}

/// Forward differences (backward at the last index) of every channel.
pub fn spatial_gradient(data: &[f64], channels: usize, grid: &Grid) -> Result<GradientStack> {
    let geom = grid.geom();
    if data.len() != channels * geom.len {
        return Err(Error::contract("spatial_gradient: data length mismatch"));
    }
    let n = geom.len;
    let mut out = vec![0.0; channels * geom.ndim * n];
    let mut buf = vec![0.0; n];
    for c in 0..channels {
        let ch = &data[c * n..(c + 1) * n];
        for a in 0..geom.ndim {
            kernels::diff_into(ch, 1, &geom, a, &mut buf);
            let off = (c * geom.ndim + a) * n;
            out[off..off + n].copy_from_slice(&buf);
        }
    }
    Ok(GradientStack {
        channels,
        ndim: geom.ndim,
        len: n,
        data: out,
    })
}

/// `det(I + du/dx)` per voxel, using the [`spatial_gradient`] stencils.
pub fn jacobian_determinant(u: &VectorField) -> Result<Volume> {
    require_displacement(u, "jacobian_determinant")?;
    let grid = u.grid();
    let d = grid.ndim();
    let g = spatial_gradient(u.data(), d, grid)?;
    let n = grid.len();
    let det: Vec<f64> = (0..n)
        .map(|i| {
            let j = |c: usize, a: usize| g.get(c, a)[i] + if c == a { 1.0 } else { 0.0 };
            if d == 2 {
                j(0, 0) * j(1, 1) - j(0, 1) * j(1, 0)
            } else {
                j(0, 0) * (j(1, 1) * j(2, 2) - j(1, 2) * j(2, 1)) - j(0, 1) * (j(1, 0) * j(2, 2) - j(1, 2) * j(2, 0))
                    + j(0, 2) * (j(1, 0) * j(2, 1) - j(1, 1) * j(2, 0))
            }
        })
        .collect();
    Volume::new(grid.clone(), 1, det)
}

/// Window reduction used by ×2 downsampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    Max,
    Mean,
}

pub(crate) fn pool_channels(data: &[f64], channels: usize, geom: &Geom, pool: Pool) -> (Vec<usize>, Vec<f64>) {
    let out_dims: Vec<usize> = geom.dims().iter().map(|&d| d.div_ceil(2)).collect();
    let og = Geom::new(&out_dims);
    let n = geom.len;
    let mut out = vec![0.0; channels * og.len];
    for c in 0..channels {
        let ch = &data[c * n..(c + 1) * n];
        for olin in 0..og.len {
            let oc = og.coord(olin);
            let mut acc = match pool {
                Pool::Max => f64::NEG_INFINITY,
                Pool::Mean => 0.0,
            };
            // Odd trailing windows replicate the last slice.
            let mut count = 0usize;
            for k in 0..(1usize << geom.ndim) {
                let mut lin = 0;
                for a in 0..geom.ndim {
                    let i = (2 * oc[a] + (k >> a & 1)).min(geom.dims[a] - 1);
                    lin += i * geom.strides[a];
                }
                match pool {
                    Pool::Max => acc = acc.max(ch[lin]),
                    Pool::Mean => acc += ch[lin],
                }
                count += 1;
            }
            if pool == Pool::Mean {
                acc /= count as f64;
            }
            out[c * og.len + olin] = acc;
        }
    }
    (out_dims, out)
}

fn repeat_channels(data: &[f64], channels: usize, geom: &Geom) -> (Vec<usize>, Vec<f64>) {
    let out_dims: Vec<usize> = geom.dims().iter().map(|&d| d * 2).collect();
    let og = Geom::new(&out_dims);
    let n = geom.len;
    let mut out = vec![0.0; channels * og.len];
    for c in 0..channels {
        for olin in 0..og.len {
            let oc = og.coord(olin);
            let lin: usize = (0..geom.ndim).map(|a| (oc[a] / 2) * geom.strides[a]).sum();
            out[c * og.len + olin] = data[c * n + lin];
        }
    }
    (out_dims, out)
}

/// ×2 downsampling by max- or mean-pooling over 2^D windows.
pub fn downsample_volume(vol: &Volume, pool: Pool) -> Result<Volume> {
    let (dims, data) = pool_channels(vol.data(), vol.channels(), &vol.grid().geom(), pool);
    let spacing: Vec<f64> = vol.grid().spacing().iter().map(|s| s * 2.0).collect();
    Volume::new(Grid::with_spacing(&dims, &spacing)?, vol.channels(), data)
}

/// ×2 nearest-neighbour upsampling.
pub fn upsample_volume(vol: &Volume) -> Result<Volume> {
    let (dims, data) = repeat_channels(vol.data(), vol.channels(), &vol.grid().geom());
    let spacing: Vec<f64> = vol.grid().spacing().iter().map(|s| s * 0.5).collect();
    Volume::new(Grid::with_spacing(&dims, &spacing)?, vol.channels(), data)
}

/// Mean-pools a field to half resolution, halving vectors (voxel units).
pub fn downsample_field(u: &VectorField) -> Result<VectorField> {
    let d = u.grid().ndim();
    let (dims, mut data) = pool_channels(u.data(), d, &u.geom(), Pool::Mean);
    data.iter_mut().for_each(|v| *v *= 0.5);
    let spacing: Vec<f64> = u.grid().spacing().iter().map(|s| s * 2.0).collect();
    VectorField::new(Grid::with_spacing(&dims, &spacing)?, u.kind(), data)
}

/// Nearest-neighbour ×2 field upsampling, doubling vectors (voxel units).
pub fn upsample_field(u: &VectorField) -> Result<VectorField> {
    let d = u.grid().ndim();
    let (dims, mut data) = repeat_channels(u.data(), d, &u.geom());
    data.iter_mut().for_each(|v| *v *= 2.0);
    let spacing: Vec<f64> = u.grid().spacing().iter().map(|s| s * 0.5).collect();
    VectorField::new(Grid::with_spacing(&dims, &spacing)?, u.kind(), data)
}

/// Linear resampling onto `target`, aligning voxel centres of the two grids.
pub fn resample_linear(vol: &Volume, target: &Grid) -> Result<Volume> {
    let src = vol.grid();
    if src.ndim() != target.ndim() {
        return Err(Error::contract("resample_linear: rank mismatch"));
    }
    let sg = src.geom();
    let tg = target.geom();
    let n = tg.len;
    let mut out = vec![0.0; vol.channels() * n];
    let coords_for = |lin: usize| {
        let c = tg.coord(lin);
        let mut p = [0.0; 3];
        for a in 0..tg.ndim {
            let r = sg.dims[a] as f64 / tg.dims[a] as f64;
            p[a] = (c[a] as f64 + 0.5) * r - 0.5;
        }
        p
    };
    for lin in 0..n {
        let p = coords_for(lin);
        for c in 0..vol.channels() {
            out[c * n + lin] = sample_one(vol.channel(c), &sg, p);
        }
    }
    Volume::new(target.clone(), vol.channels(), out)
}

fn sample_one(ch: &[f64], geom: &Geom, p: [f64; 3]) -> f64 {
    let mut coords = vec![0.0; geom.ndim];
    coords.copy_from_slice(&p[..geom.ndim]);
    let mut acc = 0.0;
    for k in 0..(1usize << geom.ndim) {
        let mut idx = 0;
        let mut w = 1.0;
        for a in 0..geom.ndim {
            let n = geom.dims[a];
            let pc = coords[a].clamp(0.0, (n - 1) as f64);
            let i0 = (pc.floor() as usize).min(n.saturating_sub(2));
            let f = if n == 1 { 0.0 } else { pc - i0 as f64 };
            if k >> a & 1 == 1 {
                idx += (i0 + 1).min(n - 1) * geom.strides[a];
                w *= f;
            } else {
                idx += i0 * geom.strides[a];
                w *= 1.0 - f;
            }
        }
        acc += w * ch[idx];
    }
    acc
}
