//! Training loop and its configuration.
//!
//! Every step derives its own RNG from `(seed, step)`, so a run resumed
//! from a checkpoint draws the same batches as an uninterrupted one.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::autodiff::{checkpoint, Adam, Graph, ParamStore, Tensor};
use crate::config::{join_list, Config};
use crate::eval::{attach_posthoc, dice, posthoc_template_labels, register_and_segment};
use crate::losses::{total_loss, CentralityMode, CentralitySampler, LossBreakdown, LossWeights, SubjectTensors};
use crate::models::{init_image, AttributeEncoder, InitSpec, Model, ModelConfig, Variant};
use crate::synth::Subject;
use crate::{Error, Real, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const VALIDATION_FILE: &str = "validation.csv";

/// Units of the ages the centrality kernels see.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KdeUnits {
    Years,
    /// Ages mapped to the encoder's `[-1, 1]` range.
    Normalized,
}

impl fmt::Display for KdeUnits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KdeUnits::Years => "years",
            KdeUnits::Normalized => "normalized",
        })
    }
}

impl FromStr for KdeUnits {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "years" => Ok(KdeUnits::Years),
            "normalized" => Ok(KdeUnits::Normalized),
            other => Err(Error::Config(format!("unknown kde_units {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub variant: Variant,
    pub centrality: CentralityMode,
    pub init: InitSpec,
    pub weights: LossWeights,
    pub kde_units: KdeUnits,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Defaults to one pass over the training set per epoch.
    pub steps_per_epoch: Option<usize>,
    /// Hard cap on the total step count.
    pub max_steps: Option<usize>,
    /// Steps between checkpoints; the final state is always saved.
    pub checkpoint_every: usize,
    /// Epochs between validation passes; 0 disables validation.
    pub val_every: usize,
    /// Validation subjects used, from the front of the split.
    pub val_subjects: usize,
    /// Epoch window and minimum Dice gain of the convergence test.
    pub convergence_window: usize,
    pub convergence_delta: f64,
    /// Training subjects averaged into post-hoc template labels.
    pub posthoc_subjects: usize,
    pub float64: bool,
    pub upsamples: usize,
    pub base_features: usize,
    pub enc_features: Vec<usize>,
    pub dec_features: Vec<usize>,
    pub integration_steps: usize,
    pub head_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            seed: 0,
            variant: Variant::Cond,
            centrality: CentralityMode::Conditional,
            init: InitSpec::MeanOf(100),
            weights: LossWeights::default(),
            kde_units: KdeUnits::Years,
            lr: 1e-4,
            batch: 3,
            epochs: 300,
            steps_per_epoch: None,
            max_steps: None,
            checkpoint_every: 500,
            val_every: 1,
            val_subjects: usize::MAX,
            convergence_window: 20,
            convergence_delta: 1e-3,
            posthoc_subjects: usize::MAX,
            float64: false,
            upsamples: m.upsamples,
            base_features: m.base_features,
            enc_features: m.enc_features,
            dec_features: m.dec_features,
            integration_steps: m.steps,
            head_std: m.head_std,
        }
    }
}

fn optional(cfg: &Config, key: &str) -> Result<Option<usize>> {
    match cfg.raw(key) {
        None | Some("none") | Some("all") => Ok(None),
        Some(_) => cfg.require(key).map(Some),
    }
}

fn show_optional(v: Option<usize>) -> String {
    v.map(|n| n.to_string()).unwrap_or_else(|| "none".into())
}

fn cap(v: usize) -> String {
    if v == usize::MAX {
        "all".into()
    } else {
        v.to_string()
    }
}

impl TrainConfig {
    /// Reads training keys from `cfg`; absent keys keep their defaults.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = TrainConfig::default();
        let w = d.weights;
        let c = TrainConfig {
            seed: cfg.get("seed", d.seed)?,
            variant: cfg.get("variant", d.variant)?,
            centrality: cfg.get("centrality_mode", d.centrality)?,
            init: cfg.get("init_spec", d.init)?,
            weights: LossWeights {
                img: cfg.get("lambda_img", w.img)?,
                seg: cfg.get("lambda_seg", w.seg)?,
                smooth: cfg.get("lambda_a", w.smooth)?,
                central: cfg.get("lambda_c", w.central)?,
                sigma_kde: cfg.get("sigma_kde", w.sigma_kde)?,
                sigma_d: cfg.get("sigma_d", w.sigma_d)?,
                seg_kind: cfg.get("seg_loss", w.seg_kind)?,
            },
            kde_units: cfg.get("kde_units", d.kde_units)?,
            lr: cfg.get("lr", d.lr)?,
            batch: cfg.get("batch", d.batch)?,
            epochs: cfg.get("epochs", d.epochs)?,
            steps_per_epoch: optional(cfg, "steps_per_epoch")?,
            max_steps: optional(cfg, "max_steps")?,
            checkpoint_every: cfg.get("checkpoint_every", d.checkpoint_every)?,
            val_every: cfg.get("val_every", d.val_every)?,
            val_subjects: optional(cfg, "val_subjects")?.unwrap_or(usize::MAX),
            convergence_window: cfg.get("convergence_window", d.convergence_window)?,
            convergence_delta: cfg.get("convergence_delta", d.convergence_delta)?,
            posthoc_subjects: optional(cfg, "posthoc_subjects")?.unwrap_or(usize::MAX),
            float64: cfg.get("float64", d.float64)?,
            upsamples: cfg.get("upsamples", d.upsamples)?,
            base_features: cfg.get("base_features", d.base_features)?,
            enc_features: cfg.get_list("enc_features", d.enc_features)?,
            dec_features: cfg.get_list("dec_features", d.dec_features)?,
            integration_steps: cfg.get("integration_steps", d.integration_steps)?,
            head_std: cfg.get("head_std", d.head_std)?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Writes every training key into `cfg`.
    pub fn write_into(&self, cfg: &mut Config) {
        let w = &self.weights;
        cfg.set("seed", self.seed);
        cfg.set("variant", self.variant);
        cfg.set("centrality_mode", self.centrality);
        cfg.set("init_spec", self.init);
        cfg.set("lambda_img", w.img);
        cfg.set("lambda_seg", w.seg);
        cfg.set("lambda_a", w.smooth);
        cfg.set("lambda_c", w.central);
        cfg.set("sigma_kde", w.sigma_kde);
        cfg.set("sigma_d", w.sigma_d);
        cfg.set("seg_loss", w.seg_kind);
        cfg.set("kde_units", self.kde_units);
        cfg.set("lr", self.lr);
        cfg.set("batch", self.batch);
        cfg.set("epochs", self.epochs);
        cfg.set("steps_per_epoch", show_optional(self.steps_per_epoch));
        cfg.set("max_steps", show_optional(self.max_steps));
        cfg.set("checkpoint_every", self.checkpoint_every);
        cfg.set("val_every", self.val_every);
        cfg.set("val_subjects", cap(self.val_subjects));
        cfg.set("convergence_window", self.convergence_window);
        cfg.set("convergence_delta", self.convergence_delta);
        cfg.set("posthoc_subjects", cap(self.posthoc_subjects));
        cfg.set("float64", self.float64);
        cfg.set("upsamples", self.upsamples);
        cfg.set("base_features", self.base_features);
        cfg.set("enc_features", join_list(&self.enc_features));
        cfg.set("dec_features", join_list(&self.dec_features));
        cfg.set("integration_steps", self.integration_steps);
        cfg.set("head_std", self.head_std);
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    /// Centrality actually applied: unconditional templates have no
    /// attributes to condition on and use the global average instead.
    pub fn effective_centrality(&self) -> CentralityMode {
        if !self.variant.conditional() && self.centrality == CentralityMode::Conditional {
            CentralityMode::Lt2019
        } else {
            self.centrality
        }
    }

    pub fn model_config(&self, dims: &[usize], labels: usize) -> ModelConfig {
        ModelConfig {
            dims: dims.to_vec(),
            labels,
            upsamples: self.upsamples,
            base_features: self.base_features,
            enc_features: self.enc_features.clone(),
            dec_features: self.dec_features.clone(),
            steps: self.integration_steps,
            head_std: self.head_std,
            variant: self.variant,
        }
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut c = Config::new();
        self.write_into(&mut c);
        write!(f, "{c}")
    }
}

/// Training and validation subjects plus the attribute range the encoder
/// normalizes ages against.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a [Subject],
    pub val: &'a [Subject],
    pub age_range: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub anchor: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Total steps taken, including those before a resume.
    pub steps: usize,
    pub converged: bool,
    /// `(epoch, mean validation Dice)` per validation pass.
    pub val_history: Vec<(usize, f64)>,
    /// Steps run by this invocation.
    pub losses: Vec<StepLog>,
}

/// A trained model with its parameters widened to `f64`.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub params: ParamStore<f64>,
    pub outcome: TrainOutcome,
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

fn tensors<T: Real>(model: &Model, s: &Subject) -> Result<SubjectTensors<T>> {
    let cfg = &model.config;
    let cast = |d: &[f64]| d.iter().map(|&v| T::of(v)).collect::<Vec<T>>();
    if s.labels.num_labels() != cfg.labels {
        return Err(Error::contract(format!(
            "subject {} has {} labels, model expects {}",
            s.id,
            s.labels.num_labels(),
            cfg.labels
        )));
    }
    Ok(SubjectTensors {
        image: Tensor::new(cfg.spatial(1), cast(s.image.data()))?,
        one_hot: Tensor::new(cfg.spatial(cfg.labels), cast(s.labels.one_hot().data()))?,
        attributes: model.encoder.encode(&s.attributes)?,
    })
}

/// Mean validation Dice. Variants without template labels are scored
/// through post-hoc labels built from `posthoc` training subjects.
pub fn validation_dice<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    val: &[Subject],
    posthoc: &[Subject],
) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::contract("empty validation set"));
    }
    let scored;
    let store = if model.config.variant.has_seg() {
        store
    } else {
        let mut s = store.clone();
        attach_posthoc(model, &mut s, &posthoc_template_labels(model, store, posthoc)?)?;
        scored = s;
        &scored
    };
    let d: Vec<f64> = val
        .par_iter()
        .map(|s| {
            let r = register_and_segment(model, store, &s.image, &s.attributes)?;
            Ok(dice(&r.labels, &s.labels)?.mean)
        })
        .collect::<Result<_>>()?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Builds the model for `cfg` on the grid and label vocabulary of the data.
pub fn build_model(cfg: &TrainConfig, data: &TrainData) -> Result<Model> {
    let first = data
        .train
        .first()
        .ok_or_else(|| Error::contract("empty training set"))?;
    let encoder = AttributeEncoder::new(data.age_range.0, data.age_range.1)?;
    Model::new(
        cfg.model_config(first.image.grid().dims(), first.labels.num_labels()),
        encoder,
    )
}

struct Run<'a, T> {
    cfg: &'a TrainConfig,
    model: Model,
    store: ParamStore<T>,
    data: TrainData<'a>,
    batch: Vec<SubjectTensors<T>>,
    sampler: CentralitySampler,
    adam: Adam,
    out: Option<&'a Path>,
    val_history: Vec<(usize, f64)>,
}

/// Trains from scratch, or from the checkpoint in `out` when `resume` is set.
/// With `out`, writes the loss and validation CSVs, the resolved config,
/// and checkpoints there.
pub fn train(cfg: &TrainConfig, data: &TrainData, out: Option<&Path>, resume: bool) -> Result<Trained> {
    if cfg.float64 {
        train_as::<f64>(cfg, data, out, resume)
    } else {
        train_as::<f32>(cfg, data, out, resume)
    }
}

fn train_as<T: Real>(cfg: &TrainConfig, data: &TrainData, out: Option<&Path>, resume: bool) -> Result<Trained> {
    cfg.validate()?;
    if data.train.len() < cfg.batch {
        return Err(Error::contract(format!(
            "batch size {} exceeds {} training subjects",
            cfg.batch,
            data.train.len()
        )));
    }
    let model = build_model(cfg, data)?;
    let mode = cfg.effective_centrality();
    if mode != cfg.centrality {
        warn!("variant {} has no attributes; using {} centrality", cfg.variant, mode);
    }
    let ages: Vec<f64> = data
        .train
        .iter()
        .map(|s| match cfg.kde_units {
            KdeUnits::Years => Ok(s.attributes.age),
            KdeUnits::Normalized => model.encoder.normalize_age(s.attributes.age),
        })
        .collect::<Result<_>>()?;
    let sexes = data.train.iter().map(|s| s.attributes.sex).collect();
    let sampler = CentralitySampler::new(mode, ages, sexes, cfg.weights.sigma_kde, cfg.weights.sigma_d, cfg.batch)?;
    let batch: Vec<SubjectTensors<T>> = data
        .train
        .par_iter()
        .map(|s| tensors(&model, s))
        .collect::<Result<_>>()?;

    let (store, start, val_history) = match (resume, out) {
        (true, Some(dir)) => {
            let ck: checkpoint::Checkpoint<T> = checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
            let saved: Model = serde_json::from_value(ck.meta.get("model").cloned().unwrap_or(Value::Null))
                .map_err(|e| Error::format(dir.join(CHECKPOINT_FILE), format!("model: {e}")))?;
            if saved != model {
                return Err(Error::Config(
                    "checkpoint model differs from the configured model".into(),
                ));
            }
            let hist =
                serde_json::from_value(ck.meta.get("val_history").cloned().unwrap_or(json!([]))).unwrap_or_default();
            truncate_csv(&dir.join(LOSS_FILE), ck.step as usize)?;
            truncate_csv(&dir.join(VALIDATION_FILE), ck.step as usize)?;
            info!("resuming from step {}", ck.step);
            (ck.params, ck.step as usize, hist)
        }
        (true, None) => return Err(Error::contract("resume needs an output directory")),
        (false, _) => {
            let mut rng = step_rng(cfg.seed, usize::MAX - 1);
            let imgs: Vec<&crate::field::Volume> = data.train.iter().map(|s| &s.image).collect();
            let init = init_image(cfg.init, &imgs, &mut rng)?;
            let store = model.init_params::<T, _>(&init, &mut rng)?;
            if let Some(dir) = out {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write_header(&dir.join(LOSS_FILE), "step,epoch,anchor,img,seg,smooth,central,total")?;
                write_header(&dir.join(VALIDATION_FILE), "step,epoch,val_dice")?;
            }
            (store, 0, Vec::new())
        }
    };
    if let Some(dir) = out {
        fs::write(dir.join("train_config.txt"), cfg.to_string()).map_err(|e| Error::io(dir, e))?;
    }
    let mut run = Run {
        cfg,
        model,
        store,
        data: *data,
        batch,
        sampler,
        adam: Adam::new(cfg.lr),
        out,
        val_history,
    };
    let outcome = run.go(start)?;
    let mut params = run.store.cast::<f64>();
    if !run.model.config.variant.has_seg() {
        let n = cfg.posthoc_subjects.min(data.train.len());
        let labels = posthoc_template_labels(&run.model, &params, &data.train[..n])?;
        attach_posthoc(&run.model, &mut params, &labels)?;
        run.store = params.cast::<T>();
        run.save(outcome.steps)?;
    }
    Ok(Trained {
        model: run.model,
        params,
        outcome,
    })
}

fn write_header(path: &Path, header: &str) -> Result<()> {
    fs::write(path, format!("{header}\n")).map_err(|e| Error::io(path, e))
}

/// Drops CSV rows whose leading step exceeds `step` (work done after the
/// last checkpoint of an interrupted run) and partially written rows.
fn truncate_csv(path: &Path, step: usize) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let mut kept = String::new();
    let mut width = 0;
    if let Some(h) = lines.next() {
        kept.push_str(h);
        kept.push('\n');
        width = h.split(',').count();
    }
    // A row cut short by the interruption has fewer fields.
    for l in lines.filter(|l| l.split(',').count() == width) {
        let s: usize = l
            .split(',')
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(path, format!("bad row {l:?}")))?;
        if s <= step {
            kept.push_str(l);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn append(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

impl<T: Real> Run<'_, T> {
    fn steps_per_epoch(&self) -> usize {
        self.cfg
            .steps_per_epoch
            .unwrap_or_else(|| self.data.train.len().div_ceil(self.cfg.batch))
    }

    fn meta(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert(
            "model".into(),
            serde_json::to_value(&self.model).expect("model serializes"),
        );
        m.insert("train_config".into(), Value::String(self.cfg.to_string()));
        m.insert(
            "val_history".into(),
            serde_json::to_value(&self.val_history).expect("history serializes"),
        );
        m
    }

    fn save(&self, step: usize) -> Result<()> {
        if let Some(dir) = self.out {
            checkpoint::save(&dir.join(CHECKPOINT_FILE), &self.store, step as u64, &self.meta())?;
        }
        Ok(())
    }

    /// One optimizer step; `step` counts from 1.
    fn step(&mut self, step: usize) -> Result<StepLog> {
        let mut rng = step_rng(self.cfg.seed, step);
        let cb = self.sampler.draw(&mut rng)?;
        let batch: Vec<SubjectTensors<T>> = cb.indices.iter().map(|&i| self.batch[i].clone()).collect();
        let mut g = Graph::new();
        let cw = (!cb.weights.is_empty()).then_some(cb.weights.as_slice());
        let (root, loss) = total_loss(&mut g, &self.model, &self.store, &batch, &self.cfg.weights, cw)
            .map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?;
        let grads = g.backward(root);
        grads.accumulate_into(&g, &mut self.store);
        self.adam
            .step(&mut self.store)
            .map_err(|e| Error::NonFinite(format!("step {step}: {e}; loss terms: {loss}")))?;
        Ok(StepLog {
            step,
            epoch: (step - 1) / self.steps_per_epoch() + 1,
            anchor: cb.anchor,
            loss,
        })
    }

    fn validate(&self) -> Result<f64> {
        let n = self.cfg.val_subjects.min(self.data.val.len());
        let p = self.cfg.posthoc_subjects.min(self.data.train.len()).min(32);
        validation_dice(&self.model, &self.store, &self.data.val[..n], &self.data.train[..p])
    }

    fn converged(&self) -> bool {
        let w = self.cfg.convergence_window;
        let Some(&(last_epoch, _)) = self.val_history.last() else {
            return false;
        };
        if w == 0 || last_epoch < w {
            return false;
        }
        let best = |upto: usize| {
            self.val_history
                .iter()
                .filter(|(e, _)| *e <= upto)
                .map(|&(_, d)| d)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let before = best(last_epoch - w);
        before.is_finite() && best(last_epoch) - before < self.cfg.convergence_delta
    }

    fn go(&mut self, start: usize) -> Result<TrainOutcome> {
        let spe = self.steps_per_epoch();
        let mut total = self.cfg.epochs * spe;
        if let Some(m) = self.cfg.max_steps {
            total = total.min(m);
        }
        let do_val = self.cfg.val_every > 0 && !self.data.val.is_empty();
        let mut losses = Vec::new();
        let mut converged = self.converged();
        let mut step = start;
        while step < total && !converged {
            step += 1;
            let log = self.step(step)?;
            if let Some(dir) = self.out {
                let l = log.loss;
                append(
                    &dir.join(LOSS_FILE),
                    &format!(
                        "{},{},{},{},{},{},{},{}",
                        step, log.epoch, log.anchor, l.img, l.seg, l.smooth, l.central, l.total
                    ),
                )?;
            }
            losses.push(log);
            let epoch_end = step.is_multiple_of(spe);
            if epoch_end && do_val && log.epoch % self.cfg.val_every == 0 {
                let d = self.validate()?;
                info!("epoch {} step {step}: {} val_dice={d:.4}", log.epoch, log.loss);
                self.val_history.push((log.epoch, d));
                if let Some(dir) = self.out {
                    append(&dir.join(VALIDATION_FILE), &format!("{step},{},{d}", log.epoch))?;
                }
                converged = self.converged();
            }
            if step.is_multiple_of(self.cfg.checkpoint_every) {
                self.save(step)?;
            }
        }
        self.save(step)?;
        if converged {
            info!("converged at step {step}");
        }
        Ok(TrainOutcome {
            steps: step,
            converged,
            val_history: self.val_history.clone(),
            losses,
        })
    }
}

/// Model and `f64` parameters from a training checkpoint.
pub fn load_trained(path: &Path) -> Result<(Model, ParamStore<f64>, Map<String, Value>)> {
    let ck: checkpoint::Checkpoint<f64> = checkpoint::load(path)?;
    let model: Model = serde_json::from_value(ck.meta.get("model").cloned().unwrap_or(Value::Null))
        .map_err(|e| Error::format(path, format!("checkpoint has no model description: {e}")))?;
    Ok((model, ck.params, ck.meta))
}

/// Output directory of a run: `root/<name>-<n>` with the first unused `n`.
pub fn run_dir(root: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for n in 1.. {
        let dir = root.join(format!("{name}-{n:03}"));
        if !dir.exists() {
            fs::create_dir(&dir).map_err(|e| Error::io(&dir, e))?;
            return Ok(dir);
        }
    }
    unreachable!()
}
