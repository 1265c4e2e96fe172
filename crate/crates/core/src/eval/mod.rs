//! Evaluation: overlap and surface metrics, deformation regularity,
//! template label propagation, post-hoc template labels for variants
//! trained without segmentations, and population trend curves.
//!
//! Surface distance is the mean symmetric surface distance throughout.

mod metrics;
mod trend;

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::ParamStore;
use crate::field::{integrate_velocity, warp, LabelMap, VectorField, Volume};
use crate::models::{AttributeRecord, Model, POSTHOC_SEG};
use crate::synth::Subject;
use crate::{Error, Real, Result};

pub use metrics::{dice, mean_ci, regularity, surface_distance, DiceScores, Regularity, SurfaceDistance};
pub use trend::{
    nadaraya_watson, template_label_volumes, trend_analysis, TrendReport, TrendRow, TrendSample, TREND_BANDWIDTH,
};

/// Template propagated onto one subject.
#[derive(Clone, Debug)]
pub struct Registration {
    pub v: VectorField,
    pub u: VectorField,
    pub template_image: Volume,
    pub template_labels: Volume,
    /// `template_image` warped into subject space.
    pub warped_image: Volume,
    pub labels: LabelMap,
}

fn attribute_vector(model: &Model, rec: &AttributeRecord) -> Result<Option<Vec<f64>>> {
    if model.config.variant.conditional() {
        Ok(Some(model.encoder.encode(rec)?))
    } else {
        Ok(None)
    }
}

/// Template for the subject's attributes, its velocity and displacement,
/// and the argmax of the warped template labels (ties to the lowest label).
pub fn register_and_segment<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    image: &Volume,
    attributes: &AttributeRecord,
) -> Result<Registration> {
    let a = attribute_vector(model, attributes)?;
    let (t_img, t_seg) = model.template_volumes(store, a.as_deref())?;
    let t_seg =
        t_seg.ok_or_else(|| Error::contract("model has no template label map (run the post-hoc step first)"))?;
    let v = model.predict_velocity(store, &t_img, image)?;
    let u = integrate_velocity(&v, model.config.steps)?;
    let warped_image = warp(&t_img, &u)?;
    let labels = warp(&t_seg, &u)?.argmax();
    Ok(Registration {
        v,
        u,
        template_image: t_img,
        template_labels: t_seg,
        warped_image,
        labels,
    })
}

/// Probabilistic and hard template labels recovered from subjects.
#[derive(Clone, Debug)]
pub struct PosthocLabels {
    pub probabilities: Volume,
    pub hard: LabelMap,
}

/// Inverse-warps each subject's one-hot labels into template space with
/// `exp(-v)`, averages, and renormalizes per voxel.
pub fn posthoc_template_labels<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    subjects: &[Subject],
) -> Result<PosthocLabels> {
    if subjects.is_empty() {
        return Err(Error::contract(
            "post-hoc template labels need at least one training subject",
        ));
    }
    let c = model.config.labels;
    let velocities: Vec<VectorField> = subjects
        .par_iter()
        .map(|s| {
            let a = attribute_vector(model, &s.attributes)?;
            let (t_img, _) = model.template_volumes(store, a.as_deref())?;
            model.predict_velocity(store, &t_img, &s.image)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<&LabelMap> = subjects.iter().map(|s| &s.labels).collect();
    if let Some(s) = subjects.iter().find(|s| s.labels.num_labels() != c) {
        return Err(Error::contract(format!(
            "subject {} has {} labels, model expects {c}",
            s.id,
            s.labels.num_labels()
        )));
    }
    average_inverse_warped(&labels, &velocities, model.config.steps)
}

/// Average of one-hot `labels[i]` pulled back through `exp(-velocities[i])`,
/// renormalized per voxel. Voxels with no mass fall to background.
pub fn average_inverse_warped(labels: &[&LabelMap], velocities: &[VectorField], steps: usize) -> Result<PosthocLabels> {
    if labels.is_empty() || labels.len() != velocities.len() {
        return Err(Error::contract(format!(
            "need matching nonempty label maps and velocities, got {} and {}",
            labels.len(),
            velocities.len()
        )));
    }
    let warped: Vec<Volume> = labels
        .par_iter()
        .zip(velocities)
        .map(|(l, v)| {
            let inv = integrate_velocity(&v.scaled(-1.0), steps)?;
            warp(&l.one_hot(), &inv)
        })
        .collect::<Result<_>>()?;
    let grid = labels[0].grid().clone();
    let c = labels[0].num_labels();
    let n = grid.len();
    let mut acc = vec![0.0; c * n];
    for w in &warped {
        if w.channels() != c {
            return Err(Error::contract("label vocabularies differ across subjects"));
        }
        for (a, v) in acc.iter_mut().zip(w.data()) {
            *a += v;
        }
    }
    for i in 0..n {
        let total: f64 = (0..c).map(|k| acc[k * n + i]).sum();
        for k in 0..c {
            acc[k * n + i] = if total > 0.0 {
                acc[k * n + i] / total
            } else if k == 0 {
                1.0
            } else {
                0.0
            };
        }
    }
    let probabilities = Volume::new(grid, c, acc)?;
    let hard = probabilities.argmax();
    Ok(PosthocLabels { probabilities, hard })
}

/// Stores post-hoc labels as the frozen template label map of `store`.
pub fn attach_posthoc<T: Real>(model: &Model, store: &mut ParamStore<T>, labels: &PosthocLabels) -> Result<()> {
    let shape = model.config.spatial(model.config.labels);
    let value = labels.probabilities.data().iter().map(|&v| T::of(v)).collect();
    store.set_frozen(POSTHOC_SEG, &shape, value)?;
    Ok(())
}

/// Metrics of one test subject.
#[derive(Clone, Debug, Serialize)]
pub struct SubjectMetrics {
    pub id: String,
    pub dice: DiceScores,
    pub surface: SurfaceDistance,
    pub regularity: Regularity,
}

/// Mean and 95% half-width of one statistic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub ci95: f64,
}

impl Aggregate {
    fn of(values: &[f64]) -> Self {
        let (mean, ci95) = mean_ci(values);
        Aggregate { mean, ci95 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    pub subjects: Vec<SubjectMetrics>,
    /// Per label; background and labels never evaluated are `None`.
    pub dice_per_label: Vec<Option<Aggregate>>,
    pub dice: Aggregate,
    pub surface_distance: Aggregate,
    pub neg_jac_fraction: Aggregate,
    pub mean_grad_norm: Aggregate,
}

/// Registers every subject, in parallel, and aggregates in subject order.
pub fn evaluate<T: Real>(model: &Model, store: &ParamStore<T>, subjects: &[Subject]) -> Result<MetricReport> {
    if subjects.is_empty() {
        return Err(Error::contract("evaluation needs at least one subject"));
    }
    let rows: Vec<SubjectMetrics> = subjects
        .par_iter()
        .map(|s| {
            let r = register_and_segment(model, store, &s.image, &s.attributes)?;
            Ok(SubjectMetrics {
                id: s.id.clone(),
                dice: dice(&r.labels, &s.labels)?,
                surface: surface_distance(&r.labels, &s.labels, s.labels.grid().spacing())?,
                regularity: regularity(&r.u)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(report_from(rows))
}

fn report_from(rows: Vec<SubjectMetrics>) -> MetricReport {
    let c = rows.iter().map(|r| r.dice.per_label.len()).max().unwrap_or(0);
    let dice_per_label = (0..c)
        .map(|l| {
            let v: Vec<f64> = rows
                .iter()
                .filter_map(|r| r.dice.per_label.get(l).copied().flatten())
                .collect();
            (!v.is_empty()).then(|| Aggregate::of(&v))
        })
        .collect();
    let col =
        |f: &dyn Fn(&SubjectMetrics) -> Option<f64>| Aggregate::of(&rows.iter().filter_map(f).collect::<Vec<_>>());
    MetricReport {
        dice_per_label,
        dice: col(&|r| Some(r.dice.mean)),
        surface_distance: col(&|r| r.surface.mean),
        neg_jac_fraction: col(&|r| Some(r.regularity.neg_jac_fraction)),
        mean_grad_norm: col(&|r| Some(r.regularity.mean_grad_norm)),
        subjects: rows,
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl MetricReport {
    /// One row per subject per evaluated label, plus a `mean` row per
    /// subject. Distances are mean symmetric surface distances.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record([
            "id",
            "label",
            "dice",
            "mean_symmetric_surface_distance",
            "neg_jac_fraction",
            "mean_grad_norm",
        ])?;
        for s in &self.subjects {
            let reg = [
                format!("{}", s.regularity.neg_jac_fraction),
                format!("{}", s.regularity.mean_grad_norm),
            ];
            for (l, d) in s.dice.per_label.iter().enumerate() {
                if let Some(d) = d {
                    let sd = s.surface.per_label.get(l).copied().flatten();
                    w.write_record([
                        s.id.clone(),
                        l.to_string(),
                        d.to_string(),
                        opt(sd),
                        reg[0].clone(),
                        reg[1].clone(),
                    ])?;
                }
            }
            w.write_record([
                s.id.clone(),
                "mean".into(),
                s.dice.mean.to_string(),
                opt(s.surface.mean),
                reg[0].clone(),
                reg[1].clone(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Aggregate statistics with 95% confidence half-widths.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["metric", "mean", "ci95"])?;
        let mut put = |name: String, a: &Aggregate| w.write_record([name, a.mean.to_string(), a.ci95.to_string()]);
        for (l, a) in self.dice_per_label.iter().enumerate() {
            if let Some(a) = a {
                put(format!("dice_label{l}"), a)?;
            }
        }
        put("dice_mean".into(), &self.dice)?;
        put("mean_symmetric_surface_distance".into(), &self.surface_distance)?;
        put("neg_jac_fraction".into(), &self.neg_jac_fraction)?;
        put("mean_grad_norm".into(), &self.mean_grad_norm)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

impl TrendReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record([
            "age",
            "sex",
            "structure",
            "template_vol",
            "kde_vol",
            "lt2019_vol",
            "rel_err",
            "lt2019_rel_err",
            "out_of_support",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.age.to_string(),
                self.sex.to_string(),
                r.structure.to_string(),
                r.template_vol.to_string(),
                opt(r.kde_vol),
                opt(r.lt2019_vol),
                opt(r.rel_err),
                opt(r.lt2019_rel_err),
                r.out_of_support.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
