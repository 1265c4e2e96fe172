use log::warn;
use serde::Serialize;

use crate::field::kernels::Geom;
use crate::field::{jacobian_determinant, spatial_gradient, LabelMap, VectorField};
use crate::{Error, Result};

/// Hard Dice per label. Index 0 (background) is always `None`, as is any
/// label absent from both maps.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiceScores {
    pub per_label: Vec<Option<f64>>,
    pub mean: f64,
}

fn check_pair(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    pred.grid().check_same(gt.grid(), "predicted labels")?;
    if pred.num_labels() != gt.num_labels() {
        return Err(Error::contract(format!(
            "label vocabularies differ: {} vs {}",
            pred.num_labels(),
            gt.num_labels()
        )));
    }
    Ok(())
}

pub fn dice(pred: &LabelMap, gt: &LabelMap) -> Result<DiceScores> {
    check_pair(pred, gt)?;
    let c = pred.num_labels();
    let (mut inter, mut np, mut ng) = (vec![0usize; c], vec![0usize; c], vec![0usize; c]);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        np[p as usize] += 1;
        ng[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
    }
    let per_label: Vec<Option<f64>> = (0..c)
        .map(|l| (l > 0 && np[l] + ng[l] > 0).then(|| 2.0 * inter[l] as f64 / (np[l] + ng[l]) as f64))
        .collect();
    let present: Vec<f64> = per_label.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        warn!("dice: no foreground label present in either map");
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(DiceScores { per_label, mean })
}

/// Mean symmetric surface distance per label, in world units.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SurfaceDistance {
    pub per_label: Vec<Option<f64>>,
    /// Average over the evaluated labels; `None` when every label was skipped.
    pub mean: Option<f64>,
}

/// Foreground voxels with a face neighbor outside the mask. Voxels on the
/// grid edge count as boundary.
fn boundary(mask: &[bool], geom: &Geom) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let c = geom.coord(i);
        let edge = (0..geom.ndim)
            .any(|a| c[a] == 0 || c[a] + 1 == geom.dims[a] || !mask[i - geom.strides[a]] || !mask[i + geom.strides[a]]);
        if edge {
            out.push(c);
        }
    }
    out
}

fn mean_nearest(from: &[[usize; 3]], to: &[[usize; 3]], spacing: &[f64]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    spacing
                        .iter()
                        .enumerate()
                        .map(|(a, s)| ((p[a] as f64 - q[a] as f64) * s).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    total / from.len() as f64
}

/// Brute-force nearest-boundary search in both directions; the two means
/// are averaged. Labels empty in either map are skipped with a warning.
pub fn surface_distance(pred: &LabelMap, gt: &LabelMap, spacing: &[f64]) -> Result<SurfaceDistance> {
    check_pair(pred, gt)?;
    let geom = pred.grid().geom();
    if spacing.len() != geom.ndim || spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::contract(format!(
            "spacing {spacing:?} invalid for a {}D grid",
            geom.ndim
        )));
    }
    let per_label: Vec<Option<f64>> = (0..pred.num_labels())
        .map(|l| {
            if l == 0 {
                return None;
            }
            let bp = boundary(&pred.mask(l), &geom);
            let bg = boundary(&gt.mask(l), &geom);
            if bp.is_empty() || bg.is_empty() {
                if bp.len() + bg.len() > 0 {
                    warn!("surface distance: label {l} empty in one map, skipped");
                }
                return None;
            }
            Some(0.5 * (mean_nearest(&bp, &bg, spacing) + mean_nearest(&bg, &bp, spacing)))
        })
        .collect();
    let present: Vec<f64> = per_label.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(SurfaceDistance { per_label, mean })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Regularity {
    /// Fraction of interior voxels with a non-positive Jacobian determinant.
    pub neg_jac_fraction: f64,
    /// Mean Frobenius norm of the displacement gradient.
    pub mean_grad_norm: f64,
}

pub fn regularity(u: &VectorField) -> Result<Regularity> {
    let det = jacobian_determinant(u)?;
    let geom = u.grid().geom();
    let (mut neg, mut interior) = (0usize, 0usize);
    for (i, &d) in det.data().iter().enumerate() {
        let c = geom.coord(i);
        if (0..geom.ndim).all(|a| c[a] > 0 && c[a] + 1 < geom.dims[a]) {
            interior += 1;
            if d <= 0.0 {
                neg += 1;
            }
        }
    }
    let g = spatial_gradient(u.data(), geom.ndim, u.grid())?;
    let norms = g.frobenius();
    Ok(Regularity {
        neg_jac_fraction: if interior == 0 {
            0.0
        } else {
            neg as f64 / interior as f64
        },
        mean_grad_norm: norms.iter().sum::<f64>() / norms.len() as f64,
    })
}

/// Mean and 95% confidence half-width `1.96 sd / sqrt(n)` with the sample
/// standard deviation. A single value has half-width 0.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}
