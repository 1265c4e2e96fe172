//! Slice-level kernels shared by the field operations and the autodiff tape.
//!
//! Every kernel is generic over [`Real`] and works on channel-major buffers
//! described by a [`Geom`]. Spatial rank is 1 to 3; unused axes have size 1.

use rayon::prelude::*;

use crate::real::Real;

/// Flattened geometry of a row-major grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geom {
    pub ndim: usize,
    pub dims: [usize; 3],
    pub strides: [usize; 3],
    pub len: usize,
}

impl Geom {
    pub fn new(dims: &[usize]) -> Self {
        assert!(
            (1..=3).contains(&dims.len()),
            "geometry rank {} unsupported",
            dims.len()
        );
        let ndim = dims.len();
        let mut d = [1usize; 3];
        d[..ndim].copy_from_slice(dims);
        let mut strides = [0usize; 3];
        let mut s = 1;
        for a in (0..ndim).rev() {
            strides[a] = s;
            s *= d[a];
        }
        Geom {
            ndim,
            dims: d,
            strides,
            len: s,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.ndim]
    }

    #[inline]
    pub fn coord(&self, mut lin: usize) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..self.ndim {
            c[a] = lin / self.strides[a];
            lin %= self.strides[a];
        }
        c
    }

    /// Voxel not on any face of the grid.
    #[inline]
    pub fn is_interior(&self, lin: usize) -> bool {
        let c = self.coord(lin);
        (0..self.ndim).all(|a| c[a] > 0 && c[a] + 1 < self.dims[a])
    }

    /// Voxel at least `margin` voxels away from every face.
    pub fn is_inside(&self, lin: usize, margin: usize) -> bool {
        let c = self.coord(lin);
        (0..self.ndim).all(|a| c[a] >= margin && c[a] + margin < self.dims[a])
    }
}

/// Linear interpolation stencil along one axis.
#[derive(Clone, Copy, Debug)]
struct AxisStencil<T> {
    i0: usize,
    i1: usize,
    frac: T,
    /// False when the coordinate was clamped (or sits on the last node),
    /// in which case the derivative along this axis is defined as zero.
    active: bool,
}

#[inline]
fn axis_stencil<T: Real>(p: T, n: usize) -> AxisStencil<T> {
    if n == 1 {
        return AxisStencil {
            i0: 0,
            i1: 0,
            frac: T::zero(),
            active: false,
        };
    }
    let hi = T::of((n - 1) as f64);
    let active = p >= T::zero() && p < hi;
    let pc = if p < T::zero() {
        T::zero()
    } else if p > hi {
        hi
    } else {
        p
    };
    let fl = pc.floor().to_usize().unwrap_or(0).min(n - 2);
    AxisStencil {
        i0: fl,
        i1: fl + 1,
        frac: pc - T::of(fl as f64),
        active,
    }
}

/// Corner offsets and weights of a multilinear stencil.
struct Stencil<T> {
    ndim: usize,
    axes: [AxisStencil<T>; 3],
    strides: [usize; 3],
}

impl<T: Real> Stencil<T> {
    #[inline]
    fn new(geom: &Geom, p: [T; 3]) -> Self {
        let dummy = AxisStencil {
            i0: 0,
            i1: 0,
            frac: T::zero(),
            active: false,
        };
        let mut axes = [dummy; 3];
        for a in 0..geom.ndim {
            axes[a] = axis_stencil(p[a], geom.dims[a]);
        }
        Stencil {
            ndim: geom.ndim,
            axes,
            strides: geom.strides,
        }
    }

    #[inline]
    fn corners(&self) -> usize {
        1 << self.ndim
    }

    /// Linear index and weight of corner `k`.
    #[inline]
    fn corner(&self, k: usize) -> (usize, T) {
        let mut idx = 0;
        let mut w = T::one();
        for a in 0..self.ndim {
            let s = &self.axes[a];
            if k >> a & 1 == 1 {
                idx += s.i1 * self.strides[a];
                w *= s.frac;
            } else {
                idx += s.i0 * self.strides[a];
                w *= T::one() - s.frac;
            }
        }
        (idx, w)
    }

    /// Derivative of corner `k`'s weight with respect to the coordinate on `axis`.
    #[inline]
    fn corner_dweight(&self, k: usize, axis: usize) -> T {
        if !self.axes[axis].active {
            return T::zero();
        }
        let mut w = T::one();
        for a in 0..self.ndim {
            let s = &self.axes[a];
            let bit = k >> a & 1 == 1;
            if a == axis {
                if !bit {
                    w = -w;
                }
            } else if bit {
                w *= s.frac;
            } else {
                w *= T::one() - s.frac;
            }
        }
        w
    }
}

#[inline]
fn sample_coord<T: Real>(geom: &Geom, coords: &[T], lin: usize) -> [T; 3] {
    let mut p = [T::zero(); 3];
    for (a, pa) in p.iter_mut().enumerate().take(geom.ndim) {
        *pa = coords[a * geom.len + lin];
    }
    p
}

#[inline]
fn displaced_coord<T: Real>(geom: &Geom, disp: &[T], lin: usize) -> [T; 3] {
    let c = geom.coord(lin);
    let mut p = [T::zero(); 3];
    for a in 0..geom.ndim {
        p[a] = T::of(c[a] as f64) + disp[a * geom.len + lin];
    }
    p
}

/// Multilinear sampling of every channel of `src` at absolute coordinates
/// `coords` (`ndim x len`, voxel units), clamped to the grid.
pub fn interpolate_into<T: Real>(src: &[T], channels: usize, geom: &Geom, coords: &[T], out: &mut [T]) {
    let n = geom.len;
    debug_assert_eq!(src.len(), channels * n);
    debug_assert_eq!(coords.len(), geom.ndim * n);
    out.par_chunks_mut(n).enumerate().for_each(|(c, dst)| {
        let ch = &src[c * n..(c + 1) * n];
        for (lin, o) in dst.iter_mut().enumerate() {
            let st = Stencil::new(geom, sample_coord(geom, coords, lin));
            let mut acc = T::zero();
            for k in 0..st.corners() {
                let (idx, w) = st.corner(k);
                acc += w * ch[idx];
            }
            *o = acc;
        }
    });
}

/// `out(x) = src(x + disp(x))` for every channel, clamped to the grid.
pub fn warp_into<T: Real>(src: &[T], channels: usize, geom: &Geom, disp: &[T], out: &mut [T]) {
    let n = geom.len;
    debug_assert_eq!(src.len(), channels * n);
    debug_assert_eq!(disp.len(), geom.ndim * n);
    out.par_chunks_mut(n).enumerate().for_each(|(c, dst)| {
        let ch = &src[c * n..(c + 1) * n];
        for (lin, o) in dst.iter_mut().enumerate() {
            let st = Stencil::new(geom, displaced_coord(geom, disp, lin));
            let mut acc = T::zero();
            for k in 0..st.corners() {
                let (idx, w) = st.corner(k);
                acc += w * ch[idx];
            }
            *o = acc;
        }
    });
}

/// Adjoint of [`warp_into`]: accumulates into the source and displacement
/// gradients given the output gradient `gout`.
pub fn warp_backward<T: Real>(
    src: &[T],
    channels: usize,
    geom: &Geom,
    disp: &[T],
    gout: &[T],
    gsrc: Option<&mut [T]>,
    gdisp: Option<&mut [T]>,
) {
    let n = geom.len;
    if let Some(gs) = gsrc {
        gs.par_chunks_mut(n).enumerate().for_each(|(c, dst)| {
            let g = &gout[c * n..(c + 1) * n];
            for lin in 0..n {
                let st = Stencil::new(geom, displaced_coord(geom, disp, lin));
                for k in 0..st.corners() {
                    let (idx, w) = st.corner(k);
                    dst[idx] += w * g[lin];
                }
            }
        });
    }
    if let Some(gd) = gdisp {
        let per_voxel: Vec<[T; 3]> = (0..n)
            .into_par_iter()
            .map(|lin| {
                let st = Stencil::new(geom, displaced_coord(geom, disp, lin));
                let mut d = [T::zero(); 3];
                for k in 0..st.corners() {
                    let (idx, _) = st.corner(k);
                    let mut acc = T::zero();
                    for c in 0..channels {
                        acc += gout[c * n + lin] * src[c * n + idx];
                    }
                    for (a, da) in d.iter_mut().enumerate().take(geom.ndim) {
                        *da += st.corner_dweight(k, a) * acc;
                    }
                }
                d
            })
            .collect();
        for (lin, d) in per_voxel.iter().enumerate() {
            for a in 0..geom.ndim {
                gd[a * n + lin] += d[a];
            }
        }
    }
}

/// Forward difference along `axis` per channel; the last slice uses the
/// backward difference. Axes of size 1 give zero.
pub fn diff_into<T: Real>(src: &[T], channels: usize, geom: &Geom, axis: usize, out: &mut [T]) {
    let n = geom.len;
    let len = geom.dims[axis];
    let s = geom.strides[axis];
    debug_assert_eq!(src.len(), channels * n);
    out.par_chunks_mut(n).enumerate().for_each(|(c, dst)| {
        let ch = &src[c * n..(c + 1) * n];
        if len < 2 {
            dst.iter_mut().for_each(|v| *v = T::zero());
            return;
        }
        for (lin, o) in dst.iter_mut().enumerate() {
            let i = (lin / s) % len;
            *o = if i + 1 < len {
                ch[lin + s] - ch[lin]
            } else {
                ch[lin] - ch[lin - s]
            };
        }
    });
}

/// Adjoint of [`diff_into`].
pub fn diff_backward<T: Real>(gout: &[T], channels: usize, geom: &Geom, axis: usize, gsrc: &mut [T]) {
    let n = geom.len;
    let len = geom.dims[axis];
    let s = geom.strides[axis];
    if len < 2 {
        return;
    }
    for c in 0..channels {
        let g = &gout[c * n..(c + 1) * n];
        let dst = &mut gsrc[c * n..(c + 1) * n];
        for lin in 0..n {
            let i = (lin / s) % len;
            if i + 1 < len {
                dst[lin + s] += g[lin];
                dst[lin] -= g[lin];
            } else {
                dst[lin] += g[lin];
                dst[lin - s] -= g[lin];
            }
        }
    }
}

/// Displacement composition `u = inner + outer(x + inner(x))`.
pub fn compose_into<T: Real>(outer: &[T], inner: &[T], geom: &Geom, out: &mut [T]) {
    warp_into(outer, geom.ndim, geom, inner, out);
    for (o, i) in out.iter_mut().zip(inner) {
        *o += *i;
    }
}
