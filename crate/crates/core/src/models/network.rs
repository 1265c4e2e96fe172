use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{FieldKind, Grid, VectorField, Volume};
use crate::real::Real;

use super::attributes::AttributeEncoder;

pub const POSTHOC_SEG: &str = "posthoc.seg";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Cond,
    CondNoSeg,
    Uncond,
    UncondNoSeg,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Cond, Variant::CondNoSeg, Variant::Uncond, Variant::UncondNoSeg];

    pub fn conditional(self) -> bool {
        matches!(self, Variant::Cond | Variant::CondNoSeg)
    }

    /// Whether the template carries a learned label map trained with the
    /// segmentation loss.
    pub fn has_seg(self) -> bool {
        matches!(self, Variant::Cond | Variant::Uncond)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cond => "cond",
            Variant::CondNoSeg => "cond-no-seg",
            Variant::Uncond => "uncond",
            Variant::UncondNoSeg => "uncond-no-seg",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: Vec<usize>,
    pub labels: usize,
    /// Upsampling stages in the decoder.
    pub upsamples: usize,
    /// Decoder feature count.
    pub base_features: usize,
    pub enc_features: Vec<usize>,
    pub dec_features: Vec<usize>,
    /// Scaling-and-squaring steps.
    pub steps: usize,
    /// Standard deviation of the output-head weights at initialization.
    pub head_std: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dims: vec![96, 96],
            labels: 5,
            upsamples: 3,
            base_features: 16,
            enc_features: vec![16, 32, 32, 32],
            dec_features: vec![32, 32, 32, 32, 32, 16, 16],
            steps: 7,
            head_std: 1e-5,
            variant: Variant::Cond,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2..=3).contains(&self.dims.len()) {
            return bad(format!("grid must be 2D or 3D, got {:?}", self.dims));
        }
        if self.labels < 2 || self.labels > 255 {
            return bad(format!("label count {} out of range", self.labels));
        }
        let levels = self.enc_features.len();
        if levels == 0 || self.dec_features.len() < levels {
            return bad(format!(
                "registration network needs at least one encoder level and as many decoder layers ({} vs {})",
                self.dec_features.len(),
                levels
            ));
        }
        let factor = 1usize << levels.max(self.upsamples);
        if self.dims.iter().any(|&d| d % factor != 0 || d / factor == 0) {
            return bad(format!("grid {:?} must be divisible by {factor}", self.dims));
        }
        if self.steps == 0 || self.base_features == 0 {
            return bad("steps and base feature count must be positive".into());
        }
        Ok(())
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(&self.dims)
    }

    fn coarse_dims(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d >> self.upsamples).collect()
    }

    /// Tensor shape `[channels, dims]`.
    pub fn spatial(&self, channels: usize) -> Vec<usize> {
        let mut s = vec![channels];
        s.extend_from_slice(&self.dims);
        s
    }
}

/// Template nodes on a graph: intensity `[1, dims]` and label probabilities
/// `[C, dims]` when the variant learns labels.
#[derive(Clone, Copy, Debug)]
pub struct TemplateVars {
    pub img: Var,
    pub seg: Option<Var>,
}

/// Architecture plus attribute encoding. Parameters live in a separate store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: AttributeEncoder,
}

fn he<R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Vec<f64> {
    gaussian(rng, n, (2.0 / fan_in as f64).sqrt())
}

fn gaussian<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let d = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn cast<T: Real>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::of).collect()
}

impl Model {
    pub fn new(config: ModelConfig, encoder: AttributeEncoder) -> Result<Self> {
        config.validate()?;
        Ok(Model { config, encoder })
    }

    fn kernel(&self, cout: usize, cin: usize) -> Vec<usize> {
        let mut s = vec![cout, cin];
        s.extend(std::iter::repeat_n(3, self.config.ndim()));
        s
    }

    fn add_conv<T: Real, R: Rng>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        std: Option<f64>,
    ) -> Result<()> {
        let shape = self.kernel(cout, cin);
        let n: usize = shape.iter().product();
        let fan_in = cin * 3usize.pow(self.config.ndim() as u32);
        let w = match std {
            Some(s) => gaussian(rng, n, s),
            None => he(rng, n, fan_in),
        };
        store.add(&format!("{name}.w"), &shape, cast(w), true)?;
        store.add(&format!("{name}.b"), &[cout], vec![T::zero(); cout], true)?;
        Ok(())
    }

    /// Fresh parameters. `init_image` becomes the frozen bias volume `b0`
    /// (conditional) or the initial intensity tensor (unconditional).
    pub fn init_params<T: Real, R: Rng>(&self, init_image: &[f64], rng: &mut R) -> Result<ParamStore<T>> {
        let cfg = &self.config;
        if init_image.len() != cfg.voxels() {
            return Err(Error::contract(format!(
                "init image has {} voxels, grid {:?} has {}",
                init_image.len(),
                cfg.dims,
                cfg.voxels()
            )));
        }
        let mut store = ParamStore::new();
        let img_shape = cfg.spatial(1);
        let seg_shape = cfg.spatial(cfg.labels);
        if cfg.variant.conditional() {
            let f0 = cfg.base_features;
            let coarse: usize = cfg.coarse_dims().iter().product();
            let a = self.encoder.dim();
            store.add(
                "dec.dense.w",
                &[f0 * coarse, a],
                cast(he(rng, f0 * coarse * a, a)),
                true,
            )?;
            store.add("dec.dense.b", &[f0 * coarse], vec![T::zero(); f0 * coarse], true)?;
            for i in 0..cfg.upsamples {
                self.add_conv(&mut store, rng, &format!("dec.conv{i}"), f0, f0, None)?;
            }
            self.add_conv(&mut store, rng, "dec.img", f0, 1, Some(cfg.head_std))?;
            if cfg.variant.has_seg() {
                self.add_conv(&mut store, rng, "dec.seg", f0, cfg.labels, Some(cfg.head_std))?;
            }
            store.add("template.b0", &img_shape, cast(init_image.to_vec()), false)?;
        } else {
            store.add("template.img", &img_shape, cast(init_image.to_vec()), true)?;
            if cfg.variant.has_seg() {
                let n = seg_shape.iter().product();
                store.add("template.seg", &seg_shape, vec![T::zero(); n], true)?;
            }
        }
        let mut cin = 2;
        let mut skips = vec![2];
        for (i, &f) in cfg.enc_features.iter().enumerate() {
            self.add_conv(&mut store, rng, &format!("unet.enc{i}"), cin, f, None)?;
            cin = f;
            skips.push(f);
        }
        skips.pop();
        for (i, &f) in cfg.dec_features.iter().enumerate() {
            self.add_conv(&mut store, rng, &format!("unet.dec{i}"), cin, f, None)?;
            cin = f;
            if i < cfg.enc_features.len() {
                cin += skips[skips.len() - 1 - i];
            }
        }
        // Zero flow head: v = 0 and the identity map at step 0.
        self.add_conv(&mut store, rng, "unet.flow", cin, cfg.ndim(), Some(0.0))?;
        Ok(store)
    }

    fn conv_layer<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
        let w = g.param(store, store.require(&format!("{name}.w"))?);
        let b = g.param(store, store.require(&format!("{name}.b"))?);
        Ok(g.conv(x, w, b))
    }

    /// Template for attribute vector `a` (ignored by unconditional variants).
    pub fn template<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        a: Option<&[f64]>,
    ) -> Result<TemplateVars> {
        let cfg = &self.config;
        if !cfg.variant.conditional() {
            let img = g.param(store, store.require("template.img")?);
            let seg = match store.id("template.seg") {
                Some(id) if cfg.variant.has_seg() => {
                    let logits = g.param(store, id);
                    Some(g.softmax(logits))
                }
                _ => None,
            };
            return Ok(TemplateVars { img, seg });
        }
        let a = a.ok_or_else(|| Error::contract("conditional template needs an attribute vector"))?;
        if a.len() != self.encoder.dim() {
            return Err(Error::contract(format!(
                "attribute vector has length {}, expected {}",
                a.len(),
                self.encoder.dim()
            )));
        }
        let av = g.constant(Tensor::new(vec![a.len()], a.iter().map(|&v| T::of(v)).collect())?);
        let w = g.param(store, store.require("dec.dense.w")?);
        let b = g.param(store, store.require("dec.dense.b")?);
        let h = g.dense(av, w, b);
        let mut shape = vec![cfg.base_features];
        shape.extend(cfg.coarse_dims());
        let mut h = g.reshape(h, &shape);
        for i in 0..cfg.upsamples {
            h = self.conv_layer(g, store, &format!("dec.conv{i}"), h)?;
            h = g.relu(h);
            h = g.upsample2(h);
        }
        let raw = self.conv_layer(g, store, "dec.img", h)?;
        let b0 = g.param(store, store.require("template.b0")?);
        let img = g.add(raw, b0);
        let seg = if cfg.variant.has_seg() {
            let logits = self.conv_layer(g, store, "dec.seg", h)?;
            Some(g.softmax(logits))
        } else {
            None
        };
        Ok(TemplateVars { img, seg })
    }

    /// Velocity field `[D, dims]` registering template `t_img` to `x`.
    pub fn velocity<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, t_img: Var, x: Var) -> Result<Var> {
        let cfg = &self.config;
        let want = cfg.spatial(1);
        for (what, v) in [("template", t_img), ("subject", x)] {
            if g.shape(v) != want.as_slice() {
                return Err(Error::contract(format!(
                    "{what} image shape {:?} does not match grid {:?}",
                    g.shape(v),
                    want
                )));
            }
        }
        let input = g.concat(&[t_img, x]);
        let mut h = input;
        let mut skips = vec![input];
        for i in 0..cfg.enc_features.len() {
            h = self.conv_layer(g, store, &format!("unet.enc{i}"), h)?;
            h = g.relu(h);
            h = g.max_pool2(h);
            skips.push(h);
        }
        skips.pop();
        for i in 0..cfg.dec_features.len() {
            h = self.conv_layer(g, store, &format!("unet.dec{i}"), h)?;
            h = g.relu(h);
            if i < cfg.enc_features.len() {
                h = g.upsample2(h);
                let s = skips[skips.len() - 1 - i];
                h = g.concat(&[h, s]);
            }
        }
        self.conv_layer(g, store, "unet.flow", h)
    }

    /// Velocity, template and displacement `u = exp(v)` for one subject.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        a: Option<&[f64]>,
    ) -> Result<(Var, TemplateVars, Var)> {
        let t = self.template(g, store, a)?;
        let v = self.velocity(g, store, t.img, x)?;
        let u = g.integrate_velocity(v, self.config.steps);
        Ok((v, t, u))
    }

    fn volume_of<T: Real>(&self, g: &Graph<T>, v: Var) -> Result<Volume> {
        let t = g.value(v);
        Volume::new(self.config.grid()?, t.shape()[0], t.to_f64())
    }

    /// Evaluated template: intensity and label probabilities. Variants
    /// trained without labels return the post-hoc map when one is stored.
    pub fn template_volumes<T: Real>(
        &self,
        store: &ParamStore<T>,
        a: Option<&[f64]>,
    ) -> Result<(Volume, Option<Volume>)> {
        let mut g = Graph::new();
        let t = self.template(&mut g, store, a)?;
        let img = self.volume_of(&g, t.img)?;
        let seg = match t.seg {
            Some(s) => Some(self.volume_of(&g, s)?),
            None => match store.by_name(POSTHOC_SEG) {
                Some(p) => Some(Volume::new(
                    self.config.grid()?,
                    self.config.labels,
                    p.value.iter().map(|v| v.f64()).collect(),
                )?),
                None => None,
            },
        };
        Ok((img, seg))
    }

    /// Velocity predicted for subject image `x` against template image `t_img`.
    pub fn predict_velocity<T: Real>(&self, store: &ParamStore<T>, t_img: &Volume, x: &Volume) -> Result<VectorField> {
        t_img.grid().check_same(x.grid(), "subject image")?;
        let mut g = Graph::new();
        let shape = self.config.spatial(1);
        let tv = g.constant(Tensor::new(
            shape.clone(),
            t_img.data().iter().map(|&v| T::of(v)).collect(),
        )?);
        let xv = g.constant(Tensor::new(shape, x.data().iter().map(|&v| T::of(v)).collect())?);
        let v = self.velocity(&mut g, store, tv, xv)?;
        let data = g.value(v).to_f64();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("velocity component {i}")));
        }
        VectorField::new(self.config.grid()?, FieldKind::Velocity, data)
    }
}
