use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{join_list, Config};
use crate::error::{Error, Result};
use crate::field::{integrate_velocity, resample_linear, FieldKind, Grid, LabelMap, VectorField, Volume};
use crate::models::{AttributeRecord, Sex};

use super::dataset::{Dataset, Subject, SubjectMeta};

/// Generator parameters. Lengths are fractions of the grid half-width
/// unless stated otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub n_subjects: usize,
    pub dims: Vec<usize>,
    pub age_min: f64,
    pub age_max: f64,
    pub male_fraction: f64,
    pub brain_radius: f64,
    pub cortex_thickness: f64,
    /// Ventricle radius at `age_min` and its increase over the age range.
    pub ventricle_radius: f64,
    pub ventricle_slope: f64,
    /// Hippocampus radius at `age_min` and its decrease over the age range.
    pub hippocampus_radius: f64,
    pub hippocampus_slope: f64,
    /// Structure radius scale per sex `[F, M]`.
    pub sex_scale: [f64; 2],
    /// Relative std of the per-subject radius jitter.
    pub shape_noise: f64,
    /// Peak displacement of the random warp, in voxels.
    pub deform_amplitude: f64,
    /// Control points per axis of the random velocity.
    pub deform_control: usize,
    /// Mean intensity per tissue: label order, then the unlabeled brain interior.
    pub intensity: [f64; 6],
    /// Std of the per-subject intensity offset of each tissue.
    pub intensity_jitter: f64,
    pub noise_std: f64,
    /// Gaussian blur width in voxels (0 disables).
    pub blur: f64,
    pub seed: u64,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        PopulationSpec {
            n_subjects: 500,
            dims: vec![96, 96],
            age_min: 10.0,
            age_max: 90.0,
            male_fraction: 0.5,
            brain_radius: 0.80,
            cortex_thickness: 0.14,
            ventricle_radius: 0.10,
            ventricle_slope: 0.12,
            hippocampus_radius: 0.12,
            hippocampus_slope: 0.04,
            sex_scale: [0.95, 1.05],
            shape_noise: 0.03,
            deform_amplitude: 1.5,
            deform_control: 4,
            intensity: [0.0, 0.35, 0.1, 0.5, 0.85, 0.65],
            intensity_jitter: 0.02,
            noise_std: 0.02,
            blur: 0.5,
            seed: 0,
        }
    }
}

/// Per-subject geometry in half-width units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub brain: f64,
    pub cortex: f64,
    pub ventricle: f64,
    pub hippocampus: f64,
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2..=3).contains(&self.dims.len()) || self.dims.iter().any(|&d| d < 16) {
            return bad(format!(
                "population grid {:?} must be 2D or 3D with sides >= 16",
                self.dims
            ));
        }
        if self.n_subjects == 0 {
            return bad("population needs at least one subject".into());
        }
        if !(self.age_max > self.age_min) {
            return bad(format!("empty age range [{}, {}]", self.age_min, self.age_max));
        }
        if !(0.0..=1.0).contains(&self.male_fraction) {
            return bad(format!("male fraction {} outside [0, 1]", self.male_fraction));
        }
        if self.ventricle_slope <= 0.0 || self.hippocampus_slope <= 0.0 {
            return bad("ventricle must grow and hippocampus shrink with age (positive slopes)".into());
        }
        if self.hippocampus_slope >= self.hippocampus_radius {
            return bad("hippocampus radius would vanish within the age range".into());
        }
        if self.deform_control < 2 {
            return bad("deformation needs at least 2 control points per axis".into());
        }
        // Worst case radii, three jitter stds out.
        let s = self.sex_scale[0].max(self.sex_scale[1]) * (1.0 + 3.0 * self.shape_noise);
        let margin = self.deform_amplitude / self.half_width();
        if self.brain_radius * s + margin >= 1.0 {
            return bad("brain exceeds the grid".into());
        }
        let inner = (self.brain_radius - self.cortex_thickness)
            * self.sex_scale[0].min(self.sex_scale[1])
            * (1.0 - 3.0 * self.shape_noise);
        let v = (self.ventricle_radius + self.ventricle_slope) * s;
        let h = self.hippocampus_radius * s;
        let hd = HIPPO_OFFSET.0.hypot(HIPPO_OFFSET.1);
        if v >= MIDLINE_BOTTOM || hd + h >= inner || v + h >= hd || h >= HIPPO_OFFSET.0 {
            return bad("structures overlap or exceed the brain interior".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(&self.dims)
    }

    fn half_width(&self) -> f64 {
        *self.dims.iter().min().unwrap() as f64 / 2.0
    }

    fn age_t(&self, age: f64) -> f64 {
        (age - self.age_min) / (self.age_max - self.age_min)
    }

    /// Noise-free geometry for `(age, sex)`.
    pub fn mean_shape(&self, age: f64, sex: Sex) -> Shape {
        let s = self.sex_scale[sex.index()];
        let t = self.age_t(age);
        Shape {
            brain: self.brain_radius * s,
            cortex: self.cortex_thickness * s,
            ventricle: (self.ventricle_radius + self.ventricle_slope * t) * s,
            hippocampus: (self.hippocampus_radius - self.hippocampus_slope * t) * s,
        }
    }
}

/// Hippocampus centres at `(±x, +y)` and the midline bar extent.
const HIPPO_OFFSET: (f64, f64) = (0.32, 0.24);
const MIDLINE_HALF_WIDTH: f64 = 0.06;
const MIDLINE_BOTTOM: f64 = 0.32;

impl Shape {
    /// Label and tissue at normalized position `(x, y, z)` from the centre
    /// (`z = 0` in 2D). Tissue 5 is the unlabeled interior.
    pub fn classify(&self, x: f64, y: f64, z: f64) -> (u8, usize) {
        let r = (x * x + y * y + z * z).sqrt();
        if r >= self.brain {
            return (0, 0);
        }
        if r >= self.brain - self.cortex {
            return (1, 1);
        }
        if r < self.ventricle {
            return (2, 2);
        }
        let hx = x.abs() - HIPPO_OFFSET.0;
        let hy = y - HIPPO_OFFSET.1;
        if (hx * hx + hy * hy + z * z).sqrt() < self.hippocampus {
            return (3, 3);
        }
        if x.abs() < MIDLINE_HALF_WIDTH && y < -MIDLINE_BOTTOM && z.abs() < 2.0 * MIDLINE_HALF_WIDTH {
            return (4, 4);
        }
        (0, 5)
    }

    /// Labels and tissue indices with the shape pulled back through `u`
    /// (`label(x) = shape(x + u(x))`).
    pub fn rasterize(&self, grid: &Grid, u: Option<&VectorField>) -> (Vec<u8>, Vec<usize>) {
        let geom = grid.geom();
        let d = grid.ndim();
        let dims = grid.dims();
        let half = *dims.iter().min().unwrap() as f64 / 2.0;
        (0..grid.len())
            .into_par_iter()
            .map(|lin| {
                let c = geom.coord(lin);
                let mut p = [0.0; 3];
                for a in 0..d {
                    let disp = u.map_or(0.0, |u| u.component(a)[lin]);
                    p[a] = (c[a] as f64 + disp - (dims[a] as f64 - 1.0) / 2.0) / half;
                }
                // Last axis is x, then y, then z.
                let (x, y, z) = if d == 2 { (p[1], p[0], 0.0) } else { (p[2], p[1], p[0]) };
                self.classify(x, y, z)
            })
            .unzip()
    }
}

fn gaussian_blur(data: &mut [f64], grid: &Grid, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let geom = grid.geom();
    for axis in 0..grid.ndim() {
        let len = geom.dims[axis] as isize;
        let s = geom.strides[axis];
        let src = data.to_vec();
        for (lin, out) in data.iter_mut().enumerate() {
            let i = ((lin / s) % len as usize) as isize;
            let base = lin as isize - i * s as isize;
            let mut acc = 0.0;
            for (k, w) in (-radius..=radius).zip(&kernel) {
                let j = (i + k).clamp(0, len - 1);
                acc += w * src[(base + j * s as isize) as usize];
            }
            *out = acc / norm;
        }
    }
}

pub(super) fn random_velocity<R: Rng>(spec: &PopulationSpec, grid: &Grid, rng: &mut R) -> Result<VectorField> {
    let d = grid.ndim();
    let coarse = Grid::new(&vec![spec.deform_control; d])?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let raw: Vec<f64> = (0..d * coarse.len()).map(|_| normal.sample(rng)).collect();
    let fine = resample_linear(&Volume::new(coarse, d, raw)?, grid)?;
    let v = VectorField::new(grid.clone(), FieldKind::Velocity, fine.into_data())?;
    let m = v.max_abs();
    Ok(if m > 0.0 {
        v.scaled(spec.deform_amplitude / m)
    } else {
        v
    })
}

fn subject_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Generates subject `index` of the population. Subjects use independent
/// RNG streams, so any subset can be regenerated on its own.
pub fn generate_subject(spec: &PopulationSpec, index: usize) -> Result<Subject> {
    let mut rng = subject_rng(spec.seed, index);
    let age = rng.random_range(spec.age_min..spec.age_max);
    let sex = if rng.random_bool(spec.male_fraction) {
        Sex::M
    } else {
        Sex::F
    };
    subject_with(spec, index, AttributeRecord::new(age, sex), &mut rng)
}

/// Like [`generate_subject`] with the attributes fixed instead of drawn.
pub fn generate_subject_at(spec: &PopulationSpec, index: usize, record: AttributeRecord) -> Result<Subject> {
    subject_with(spec, index, record, &mut subject_rng(spec.seed, index))
}

fn subject_with(spec: &PopulationSpec, index: usize, record: AttributeRecord, rng: &mut ChaCha8Rng) -> Result<Subject> {
    let (age, sex) = (record.age, record.sex);
    let deform_seed: u64 = rng.random();
    let mut draws = |x: f64| -> f64 {
        if spec.shape_noise > 0.0 {
            x * (1.0 + spec.shape_noise * Normal::new(0.0, 1.0).unwrap().sample(rng))
        } else {
            x
        }
    };
    let mean = spec.mean_shape(age, sex);
    let shape = Shape {
        brain: draws(mean.brain),
        cortex: mean.cortex,
        ventricle: draws(mean.ventricle),
        hippocampus: draws(mean.hippocampus),
    };
    let jitter: Vec<f64> = (0..6)
        .map(|_| {
            if spec.intensity_jitter > 0.0 {
                spec.intensity_jitter * Normal::new(0.0, 1.0).unwrap().sample(rng)
            } else {
                0.0
            }
        })
        .collect();
    let noise: Vec<f64> = {
        let n = spec.grid()?.len();
        if spec.noise_std > 0.0 {
            let d = Normal::new(0.0, spec.noise_std).unwrap();
            (0..n).map(|_| d.sample(rng)).collect()
        } else {
            vec![0.0; n]
        }
    };
    render(spec, index, record, shape, deform_seed, &jitter, &noise)
}

fn render(
    spec: &PopulationSpec,
    index: usize,
    attributes: AttributeRecord,
    shape: Shape,
    deform_seed: u64,
    jitter: &[f64],
    noise: &[f64],
) -> Result<Subject> {
    let grid = spec.grid()?;
    let u = if spec.deform_amplitude > 0.0 {
        let v = random_velocity(spec, &grid, &mut ChaCha8Rng::seed_from_u64(deform_seed))?;
        Some(integrate_velocity(&v, crate::field::DEFAULT_STEPS)?)
    } else {
        None
    };
    let (labels, tissue) = shape.rasterize(&grid, u.as_ref());
    let mut img: Vec<f64> = tissue
        .iter()
        .map(|&t| {
            if t == 0 {
                spec.intensity[0]
            } else {
                spec.intensity[t] + jitter[t]
            }
        })
        .collect();
    gaussian_blur(&mut img, &grid, spec.blur);
    for (v, e) in img.iter_mut().zip(noise) {
        // Stored as f32 on disk; quantize so in-memory and loaded data agree.
        *v = (*v + e) as f32 as f64;
    }
    let labels = LabelMap::new(grid.clone(), super::LABEL_NAMES.len(), labels)?;
    let volumes = labels.counts();
    Ok(Subject {
        id: format!("s{index:05}"),
        attributes,
        image: Volume::new(grid, 1, img)?,
        labels,
        volumes,
        meta: SubjectMeta { shape, deform_seed },
    })
}

pub fn generate_population(spec: &PopulationSpec) -> Result<Dataset> {
    spec.validate()?;
    let subjects = (0..spec.n_subjects)
        .into_par_iter()
        .map(|i| generate_subject(spec, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        subjects,
    })
}

/// Subjects that are one known template warped by known velocity fields.
#[derive(Clone, Debug)]
pub struct ClosedLoop {
    pub template: LabelMap,
    /// Noise-free renderings of the warped template.
    pub subjects: Vec<Subject>,
    /// Velocity with `subject_i = template o exp(v_i)`.
    pub velocities: Vec<VectorField>,
}

/// Closed-loop fixture: the mean shape at `(age, sex)` warped by `n`
/// random velocity fields of the spec's amplitude.
pub fn closed_loop_population(spec: &PopulationSpec, age: f64, sex: Sex, n: usize) -> Result<ClosedLoop> {
    spec.validate()?;
    let grid = spec.grid()?;
    let shape = spec.mean_shape(age, sex);
    let (t, _) = shape.rasterize(&grid, None);
    let template = LabelMap::new(grid.clone(), super::LABEL_NAMES.len(), t)?;
    let jitter = vec![0.0; spec.intensity.len()];
    let noise = vec![0.0; grid.len()];
    let mut subjects = Vec::with_capacity(n);
    let mut velocities = Vec::with_capacity(n);
    for i in 0..n {
        let deform_seed = subject_rng(spec.seed ^ 0x5eed, i).random();
        let rec = AttributeRecord::new(age, sex);
        subjects.push(render(spec, i, rec, shape, deform_seed, &jitter, &noise)?);
        velocities.push(random_velocity(
            spec,
            &grid,
            &mut ChaCha8Rng::seed_from_u64(deform_seed),
        )?);
    }
    Ok(ClosedLoop {
        template,
        subjects,
        velocities,
    })
}

impl PopulationSpec {
    /// Reads population keys from `cfg`; absent keys keep their defaults.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = PopulationSpec::default();
        let sex_scale = cfg.get_list("sex_scale", d.sex_scale.to_vec())?;
        let intensity = cfg.get_list("intensity", d.intensity.to_vec())?;
        let spec = PopulationSpec {
            n_subjects: cfg.get("n_subjects", d.n_subjects)?,
            dims: cfg.get_list("dims", d.dims)?,
            age_min: cfg.get("age_min", d.age_min)?,
            age_max: cfg.get("age_max", d.age_max)?,
            male_fraction: cfg.get("male_fraction", d.male_fraction)?,
            brain_radius: cfg.get("brain_radius", d.brain_radius)?,
            cortex_thickness: cfg.get("cortex_thickness", d.cortex_thickness)?,
            ventricle_radius: cfg.get("ventricle_radius", d.ventricle_radius)?,
            ventricle_slope: cfg.get("ventricle_slope", d.ventricle_slope)?,
            hippocampus_radius: cfg.get("hippocampus_radius", d.hippocampus_radius)?,
            hippocampus_slope: cfg.get("hippocampus_slope", d.hippocampus_slope)?,
            sex_scale: sex_scale
                .try_into()
                .map_err(|_| Error::Config("sex_scale needs 2 values (F, M)".into()))?,
            shape_noise: cfg.get("shape_noise", d.shape_noise)?,
            deform_amplitude: cfg.get("deform_amplitude", d.deform_amplitude)?,
            deform_control: cfg.get("deform_control", d.deform_control)?,
            intensity: intensity
                .try_into()
                .map_err(|_| Error::Config("intensity needs 6 values".into()))?,
            intensity_jitter: cfg.get("intensity_jitter", d.intensity_jitter)?,
            noise_std: cfg.get("noise_std", d.noise_std)?,
            blur: cfg.get("blur", d.blur)?,
            seed: cfg.get("seed", d.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn write_into(&self, cfg: &mut Config) {
        cfg.set("n_subjects", self.n_subjects);
        cfg.set("dims", join_list(&self.dims));
        cfg.set("age_min", self.age_min);
        cfg.set("age_max", self.age_max);
        cfg.set("male_fraction", self.male_fraction);
        cfg.set("brain_radius", self.brain_radius);
        cfg.set("cortex_thickness", self.cortex_thickness);
        cfg.set("ventricle_radius", self.ventricle_radius);
        cfg.set("ventricle_slope", self.ventricle_slope);
        cfg.set("hippocampus_radius", self.hippocampus_radius);
        cfg.set("hippocampus_slope", self.hippocampus_slope);
        cfg.set("sex_scale", join_list(&self.sex_scale));
        cfg.set("shape_noise", self.shape_noise);
        cfg.set("deform_amplitude", self.deform_amplitude);
        cfg.set("deform_control", self.deform_control);
        cfg.set("intensity", join_list(&self.intensity));
        cfg.set("intensity_jitter", self.intensity_jitter);
        cfg.set("noise_std", self.noise_std);
        cfg.set("blur", self.blur);
        cfg.set("seed", self.seed);
    }
}
