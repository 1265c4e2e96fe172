//! 3-wide "same" convolution with zero padding, stride 1, for 2D and 3D.
//!
//! Weights are `[O, I, 3, 3]` (2D) or `[O, I, 3, 3, 3]` (3D). 2D inputs are
//! treated as a single z-slice so one set of loops serves both ranks.

use rayon::prelude::*;

use crate::real::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub nz: usize,
    pub ny: usize,
    pub nx: usize,
    /// Kernel taps along z: 1 for 2D, 3 for 3D.
    pub kz: usize,
}

impl ConvGeom {
    pub fn new(spatial: &[usize]) -> Self {
        match *spatial {
            [ny, nx] => ConvGeom { nz: 1, ny, nx, kz: 1 },
            [nz, ny, nx] => ConvGeom { nz, ny, nx, kz: 3 },
            _ => panic!("conv supports 2D or 3D spatial shapes, got {spatial:?}"),
        }
    }

    pub fn len(&self) -> usize {
        self.nz * self.ny * self.nx
    }

    pub fn taps(&self) -> usize {
        self.kz * 9
    }

    /// Offsets `(dz, dy, dx)` of tap `t`.
    #[inline]
    fn offset(&self, t: usize) -> (isize, isize, isize) {
        let dz = if self.kz == 1 { 0 } else { (t / 9) as isize - 1 };
        let r = t % 9;
        (dz, (r / 3) as isize - 1, (r % 3) as isize - 1)
    }
}

#[inline]
fn valid(n: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { n - d as usize } else { n };
    (lo, hi.max(lo))
}

/// Calls `f(out_start, in_start, len)` for every contiguous row segment that
/// tap `(dz, dy, dx)` touches.
#[inline]
fn for_rows(g: &ConvGeom, (dz, dy, dx): (isize, isize, isize), mut f: impl FnMut(usize, usize, usize)) {
    let (z0, z1) = valid(g.nz, dz);
    let (y0, y1) = valid(g.ny, dy);
    let (x0, x1) = valid(g.nx, dx);
    if x1 <= x0 {
        return;
    }
    for z in z0..z1 {
        let zi = (z as isize + dz) as usize;
        for y in y0..y1 {
            let yi = (y as isize + dy) as usize;
            let orow = (z * g.ny + y) * g.nx;
            let irow = (zi * g.ny + yi) * g.nx;
            f(orow + x0, (irow as isize + x0 as isize + dx) as usize, x1 - x0);
        }
    }
}

pub(crate) fn forward<T: Real>(x: &[T], w: &[T], b: &[T], cin: usize, cout: usize, g: &ConvGeom, out: &mut [T]) {
    let n = g.len();
    let taps = g.taps();
    out.par_chunks_mut(n).enumerate().for_each(|(o, dst)| {
        dst.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..cin {
            let src = &x[i * n..(i + 1) * n];
            let wk = &w[(o * cin + i) * taps..(o * cin + i + 1) * taps];
            for (t, &wv) in wk.iter().enumerate() {
                if wv == T::zero() {
                    continue;
                }
                for_rows(g, g.offset(t), |os, is, len| {
                    for (d, s) in dst[os..os + len].iter_mut().zip(&src[is..is + len]) {
                        *d += wv * *s;
                    }
                });
            }
        }
    });
    debug_assert_eq!(out.len(), cout * n);
}

/// Accumulates the input gradient.
pub(crate) fn backward_input<T: Real>(gout: &[T], w: &[T], cin: usize, cout: usize, g: &ConvGeom, gx: &mut [T]) {
    let n = g.len();
    let taps = g.taps();
    gx.par_chunks_mut(n).enumerate().for_each(|(i, dst)| {
        for o in 0..cout {
            let go = &gout[o * n..(o + 1) * n];
            let wk = &w[(o * cin + i) * taps..(o * cin + i + 1) * taps];
            for (t, &wv) in wk.iter().enumerate() {
                if wv == T::zero() {
                    continue;
                }
                for_rows(g, g.offset(t), |os, is, len| {
                    for (d, s) in dst[is..is + len].iter_mut().zip(&go[os..os + len]) {
                        *d += wv * *s;
                    }
                });
            }
        }
    });
}

/// Dot product with independent lane accumulators so the loop vectorizes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| *x * *y).sum();
    for (x, y) in ac.zip(bc) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    lanes.iter().copied().sum::<T>() + tail
}

/// Accumulates weight and bias gradients.
pub(crate) fn backward_params<T: Real>(gout: &[T], x: &[T], cin: usize, g: &ConvGeom, gw: &mut [T], gb: &mut [T]) {
    let n = g.len();
    let taps = g.taps();
    gw.par_chunks_mut(cin * taps)
        .zip(gb.par_iter_mut())
        .enumerate()
        .for_each(|(o, (gwo, gbo))| {
            let go = &gout[o * n..(o + 1) * n];
            *gbo += go.iter().copied().sum::<T>();
            for i in 0..cin {
                let src = &x[i * n..(i + 1) * n];
                for t in 0..taps {
                    let mut acc = T::zero();
                    for_rows(g, g.offset(t), |os, is, len| {
                        acc += dot(&go[os..os + len], &src[is..is + len]);
                    });
                    gwo[i * taps + t] += acc;
                }
            }
        });
}
