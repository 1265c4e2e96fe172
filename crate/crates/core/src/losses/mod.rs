//! Loss terms and the centrality machinery.
//!
//! All terms are graph builders so they differentiate through the template
//! and the displacement fields. Image and smoothness terms are normalized by
//! the voxel count.

mod kde;

pub use kde::{
    kde_density, kde_log_density, kde_log_weights, kde_weights, normalize_log_weights, sample_weighted,
    CentralityBatch, CentralityMode, CentralitySampler,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::real::Real;

pub const DICE_EPS: f64 = 1e-5;
pub const CE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegLossKind {
    SoftDice,
    CrossEntropy,
}

impl fmt::Display for SegLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SegLossKind::SoftDice => "soft-dice",
            SegLossKind::CrossEntropy => "cross-entropy",
        })
    }
}

impl FromStr for SegLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "soft-dice" => Ok(SegLossKind::SoftDice),
            "cross-entropy" => Ok(SegLossKind::CrossEntropy),
            other => Err(Error::Config(format!("unknown segmentation loss {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub img: f64,
    pub seg: f64,
    /// Smoothness weight `lambda_a`.
    pub smooth: f64,
    /// Centrality weight `lambda_c`.
    pub central: f64,
    /// Attribute kernel width of the centrality weights.
    pub sigma_kde: f64,
    /// Kernel width of the density correction.
    pub sigma_d: f64,
    pub seg_kind: SegLossKind,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            img: 20.0,
            seg: 0.2,
            smooth: 1.0,
            central: 0.1,
            sigma_kde: 2.0,
            sigma_d: 1.0,
            seg_kind: SegLossKind::SoftDice,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_img", self.img),
            ("lambda_seg", self.seg),
            ("lambda_a", self.smooth),
            ("lambda_c", self.central),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        for (name, v) in [("sigma_kde", self.sigma_kde), ("sigma_d", self.sigma_d)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

fn voxels<T: Real>(g: &Graph<T>, v: Var) -> usize {
    g.shape(v)[1..].iter().product()
}

/// `(lambda/2) * mean (x - t o phi)^2`.
pub fn loss_img<T: Real>(g: &mut Graph<T>, x: Var, t_img: Var, u: Var, lambda: f64) -> Var {
    let w = g.warp(t_img, u);
    let r = g.sub(x, w);
    let r2 = g.square(r);
    let m = g.mean(r2);
    g.scale(m, lambda / 2.0)
}

/// Per-label soft Dice `[C]` between `s` and `w`.
pub fn soft_dice<T: Real>(g: &mut Graph<T>, s: Var, w: Var) -> Var {
    let sw = g.mul(s, w);
    let inter = g.channel_sum(sw);
    let ss = g.channel_sum(s);
    let ws = g.channel_sum(w);
    let den = g.add(ss, ws);
    let den = g.add_scalar(den, DICE_EPS);
    let num = g.scale(inter, 2.0);
    g.div(num, den)
}

/// Segmentation term between one-hot labels `s` and the warped template
/// label probabilities.
pub fn loss_seg<T: Real>(g: &mut Graph<T>, s: Var, t_seg: Var, u: Var, lambda: f64, kind: SegLossKind) -> Var {
    let w = g.warp(t_seg, u);
    match kind {
        SegLossKind::SoftDice => {
            let d = soft_dice(g, s, w);
            let m = g.mean(d);
            g.scale(m, -lambda)
        }
        SegLossKind::CrossEntropy => {
            let n = voxels(g, s);
            let l = g.ln(w, CE_EPS);
            let p = g.mul(s, l);
            let t = g.sum(p);
            g.scale(t, -lambda / n as f64)
        }
    }
}

/// `(lambda_a/2) * sum over components and axes of squared forward
/// differences, divided by the voxel count`.
pub fn loss_smooth<T: Real>(g: &mut Graph<T>, u: Var, lambda: f64) -> Var {
    let n = voxels(g, u);
    let d = g.shape(u).len() - 1;
    let mut total = None;
    for axis in 0..d {
        let du = g.diff(u, axis);
        let sq = g.square(du);
        let s = g.sum(sq);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s),
        });
    }
    let total = total.expect("at least one axis");
    g.scale(total, lambda / (2.0 * n as f64))
}

/// `lambda_c * mean over voxels of |u_bar|^2` with `u_bar` the weighted
/// average of `us`.
pub fn loss_central<T: Real>(g: &mut Graph<T>, us: &[Var], weights: &[f64], lambda: f64) -> Result<Var> {
    if us.is_empty() || us.len() != weights.len() {
        return Err(Error::contract(format!(
            "centrality needs one weight per field ({} fields, {} weights)",
            us.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::contract("centrality weights must have a positive finite sum"));
    }
    let mut bar = None;
    for (&u, &w) in us.iter().zip(weights) {
        let t = g.scale(u, w / total);
        bar = Some(match bar {
            None => t,
            Some(b) => g.add(b, t),
        });
    }
    let bar = bar.unwrap();
    let n = voxels(g, bar);
    let sq = g.square(bar);
    let s = g.sum(sq);
    Ok(g.scale(s, lambda / n as f64))
}

/// Unweighted batch average: the global-centrality baseline.
pub fn loss_central_global<T: Real>(g: &mut Graph<T>, us: &[Var], lambda: f64) -> Result<Var> {
    loss_central(g, us, &vec![1.0; us.len()], lambda)
}

/// One training subject as graph inputs.
#[derive(Clone, Debug)]
pub struct SubjectTensors<T> {
    /// `[1, dims]`.
    pub image: Tensor<T>,
    /// `[C, dims]`.
    pub one_hot: Tensor<T>,
    pub attributes: Vec<f64>,
}

/// Per-term values of one evaluation; image, segmentation and smoothness
/// are summed over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub img: f64,
    pub seg: f64,
    pub smooth: f64,
    pub central: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.img, self.seg, self.smooth, self.central, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "img={:.6e} seg={:.6e} smooth={:.6e} central={:.6e} total={:.6e}",
            self.img, self.seg, self.smooth, self.central, self.total
        )
    }
}

/// Full objective over a batch. `central_weights` selects the centrality
/// term: `None` disables it, otherwise one weight per batch subject.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    model: &Model,
    store: &ParamStore<T>,
    batch: &[SubjectTensors<T>],
    weights: &LossWeights,
    central_weights: Option<&[f64]>,
) -> Result<(Var, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let with_seg = model.config.variant.has_seg() && weights.seg > 0.0;
    let mut terms: Vec<Var> = Vec::new();
    let (mut img, mut seg, mut smooth) = (Vec::new(), Vec::new(), Vec::new());
    let mut us = Vec::with_capacity(batch.len());
    for s in batch {
        let x = g.constant(s.image.clone());
        let a = model.config.variant.conditional().then_some(s.attributes.as_slice());
        let (_, t, u) = model.forward(g, store, x, a)?;
        img.push(loss_img(g, x, t.img, u, weights.img));
        if with_seg {
            let t_seg = t.seg.ok_or_else(|| Error::contract("variant has no template labels"))?;
            let oh = g.constant(s.one_hot.clone());
            seg.push(loss_seg(g, oh, t_seg, u, weights.seg, weights.seg_kind));
        }
        smooth.push(loss_smooth(g, u, weights.smooth));
        us.push(u);
    }
    let central = match central_weights {
        Some(w) if weights.central > 0.0 => Some(loss_central(g, &us, w, weights.central)?),
        _ => None,
    };
    let mut sum_of = |g: &mut Graph<T>, vs: &[Var]| -> f64 {
        terms.extend_from_slice(vs);
        vs.iter().map(|&v| g.value(v).item().f64()).sum()
    };
    let mut b = LossBreakdown {
        img: sum_of(g, &img),
        seg: sum_of(g, &seg),
        smooth: sum_of(g, &smooth),
        central: 0.0,
        total: 0.0,
    };
    if let Some(c) = central {
        b.central = sum_of(g, &[c]);
    }
    let mut root = terms[0];
    for &t in &terms[1..] {
        root = g.add(root, t);
    }
    b.total = g.value(root).item().f64();
    if !b.is_finite() {
        return Err(Error::NonFinite(format!("loss terms: {b}")));
    }
    Ok((root, b))
}

#[cfg(test)]
mod tests;
