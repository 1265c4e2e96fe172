use serde::Serialize;

use crate::autodiff::ParamStore;
use crate::models::{AttributeRecord, Model, Sex};
use crate::{Error, Real, Result};

/// Kernel bandwidth in years for population curves.
pub const TREND_BANDWIDTH: f64 = 5.0;

/// Gaussian Nadaraya–Watson estimate at `query`; `None` when no sample
/// carries kernel mass. Evaluated with a max shift so distant queries
/// do not underflow to 0/0.
pub fn nadaraya_watson(ages: &[f64], values: &[f64], query: f64, bandwidth: f64) -> Option<f64> {
    assert_eq!(ages.len(), values.len(), "nadaraya_watson: length mismatch");
    let logk: Vec<f64> = ages
        .iter()
        .map(|a| -(query - a).powi(2) / (2.0 * bandwidth * bandwidth))
        .collect();
    let m = logk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return None;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (l, v) in logk.iter().zip(values) {
        let k = (l - m).exp();
        num += k * v;
        den += k;
    }
    Some(num / den)
}

/// One population sample for trend curves.
#[derive(Clone, Debug)]
pub struct TrendSample {
    pub age: f64,
    pub sex: Sex,
    /// Ground-truth voxel count per label.
    pub volumes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrendRow {
    pub age: f64,
    pub structure: usize,
    pub template_vol: f64,
    pub kde_vol: Option<f64>,
    pub lt2019_vol: Option<f64>,
    pub rel_err: Option<f64>,
    pub lt2019_rel_err: Option<f64>,
    /// Query age lies outside the observed age range.
    pub out_of_support: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrendReport {
    pub sex: Sex,
    pub bandwidth: f64,
    pub rows: Vec<TrendRow>,
}

impl TrendReport {
    fn mean_of(&self, structure: usize, f: impl Fn(&TrendRow) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.structure == structure)
            .filter_map(f)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_rel_error(&self, structure: usize) -> Option<f64> {
        self.mean_of(structure, |r| r.rel_err)
    }

    pub fn mean_lt2019_rel_error(&self, structure: usize) -> Option<f64> {
        self.mean_of(structure, |r| r.lt2019_rel_err)
    }

    /// Template volume curve for one structure, in query order.
    pub fn template_curve(&self, structure: usize) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.structure == structure)
            .map(|r| (r.age, r.template_vol))
            .collect()
    }
}

/// World-unit volume of each label in the argmax of the template for
/// `(age, sex)`.
pub fn template_label_volumes<T: Real>(model: &Model, store: &ParamStore<T>, age: f64, sex: Sex) -> Result<Vec<f64>> {
    let a = if model.config.variant.conditional() {
        Some(model.encoder.encode(&AttributeRecord::new(age, sex))?)
    } else {
        None
    };
    let (_, seg) = model.template_volumes(store, a.as_deref())?;
    let seg = seg.ok_or_else(|| Error::contract("model has no template label map (run the post-hoc step first)"))?;
    let vox = seg.grid().voxel_volume();
    Ok(seg.argmax().counts().iter().map(|&c| c as f64 * vox).collect())
}

/// Template structure volumes across `ages` for one sex against the
/// same-sex population curve, optionally overlaying a second model.
#[allow(clippy::too_many_arguments)]
pub fn trend_analysis<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    population: &[TrendSample],
    sex: Sex,
    ages: &[f64],
    bandwidth: f64,
    structures: &[usize],
    lt2019: Option<(&Model, &ParamStore<T>)>,
) -> Result<TrendReport> {
    if !(bandwidth > 0.0) {
        return Err(Error::contract(format!("bandwidth {bandwidth} must be positive")));
    }
    let group: Vec<&TrendSample> = population.iter().filter(|s| s.sex == sex).collect();
    if group.is_empty() {
        return Err(Error::contract(format!("no population samples of sex {sex}")));
    }
    let pop_ages: Vec<f64> = group.iter().map(|s| s.age).collect();
    let (lo, hi) = pop_ages
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &a| (l.min(a), h.max(a)));
    let vox = model.config.grid()?.voxel_volume();
    let mut rows = Vec::new();
    for &age in ages {
        let tv = template_label_volumes(model, store, age, sex)?;
        let lv = lt2019
            .map(|(m, s)| template_label_volumes(m, s, age, sex))
            .transpose()?;
        for &c in structures {
            if c >= tv.len() {
                return Err(Error::contract(format!("structure {c} outside the label vocabulary")));
            }
            let vols: Vec<f64> = group.iter().map(|s| s.volumes[c] as f64 * vox).collect();
            let kde = nadaraya_watson(&pop_ages, &vols, age, bandwidth);
            let rel = |v: f64| kde.filter(|&k| k > 0.0).map(|k| (v - k).abs() / k);
            let lt = lv.as_ref().map(|l| l[c]);
            rows.push(TrendRow {
                age,
                structure: c,
                template_vol: tv[c],
                kde_vol: kde,
                lt2019_vol: lt,
                rel_err: rel(tv[c]),
                lt2019_rel_err: lt.and_then(rel),
                out_of_support: age < lo || age > hi,
            });
        }
    }
    Ok(TrendReport { sex, bandwidth, rows })
}
