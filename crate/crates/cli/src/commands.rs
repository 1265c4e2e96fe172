use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};

use condatlas::autodiff::ParamStore;
use condatlas::config::{join_list, Config};
use condatlas::eval::{self, dice, TrendSample, TREND_BANDWIDTH};
use condatlas::field::volb::{read_volume, write_field, write_labels, write_volume};
use condatlas::field::{invert_velocity, jacobian_determinant, Volume};
use condatlas::gradsuite::{self, SuiteRow};
use condatlas::manifest::write_run_manifest;
use condatlas::models::{AttributeRecord, Model, Sex};
use condatlas::plot::{label_montage, pgm_montage, svg_line_chart, write_file, Series};
use condatlas::synth::{
    generate_population, load_dataset, save_dataset, split, Dataset, PopulationSpec, Split, Subject, HIPPOCAMPUS,
    LABEL_NAMES, VENTRICLE,
};
use condatlas::train::{self, load_trained, run_dir, TrainConfig, TrainData, CHECKPOINT_FILE};

use crate::{Cli, Command, EvaluateArgs, Global, RegisterArgs, TemplateArgs, TrainArgs, TrendArgs};

pub const CONFIG_FILE: &str = "config.txt";
pub const SPLIT_FILE: &str = "split.json";
pub const DATA_ENV: &str = "AM_DATA_DIR";
/// Keys read by the driver rather than the library.
const CLI_KEYS: [&str; 3] = ["data", "split", "split_seed"];
const DEFAULT_SPLIT: [f64; 3] = [0.8, 0.1, 0.1];

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cfg = resolve_config(&cli.global, Config::new())?;
    let out = &cli.global.out;
    match cli.command {
        Command::Synth => synth(cfg, out),
        Command::Train(a) => train_cmd(cfg, &cli.global, a),
        Command::Template(a) => template(cfg, out, a),
        Command::Register(a) => register(cfg, out, a),
        Command::Evaluate(a) => evaluate(cfg, out, a),
        Command::Trend(a) => trend(cfg, out, a),
        Command::Gradcheck => gradcheck(cfg, out),
    }
}

/// Layers the config file, `--set` overrides and flag overrides onto `base`.
fn resolve_config(g: &Global, base: Config) -> Result<Config> {
    let mut cfg = base;
    if let Some(p) = &g.config {
        for (k, v) in Config::load(p)?.iter() {
            cfg.set(k, v);
        }
    }
    for o in &g.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| anyhow!("override {o:?} is not KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim());
    }
    if let Some(s) = g.seed {
        cfg.set("seed", s);
    }
    if g.float64 {
        cfg.set("float64", true);
    }
    Ok(cfg)
}

fn freeze(dir: &Path, cfg: &Config) -> Result<()> {
    let p = dir.join(CONFIG_FILE);
    fs::write(&p, cfg.to_string()).with_context(|| format!("writing {}", p.display()))
}

fn finish(dir: &Path) -> Result<()> {
    write_run_manifest(dir)?;
    println!("{}", dir.display());
    Ok(())
}

/// Dataset directory from the flag, the `data` key, or the environment.
fn data_dir(flag: Option<&Path>, cfg: &Config) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    if let Some(p) = cfg.raw("data") {
        return Ok(PathBuf::from(p));
    }
    std::env::var_os(DATA_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| anyhow!("no dataset: pass --data, set the data key, or set {DATA_ENV}"))
}

/// `(checkpoint file, its run directory)` for a file or directory argument.
fn checkpoint_paths(p: &Path) -> (PathBuf, PathBuf) {
    if p.is_dir() {
        (p.join(CHECKPOINT_FILE), p.to_path_buf())
    } else {
        let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
        (p.to_path_buf(), dir)
    }
}

/// Config frozen by the training run a checkpoint came from, if present.
fn training_config(run: &Path) -> Result<Option<Config>> {
    let p = run.join(CONFIG_FILE);
    if p.exists() {
        Ok(Some(Config::load(&p)?))
    } else {
        Ok(None)
    }
}

fn load_model(p: &Path) -> Result<(Model, ParamStore<f64>, PathBuf)> {
    let (file, run) = checkpoint_paths(p);
    let (model, store, _) = load_trained(&file).with_context(|| format!("loading {}", file.display()))?;
    Ok((model, store, run))
}

fn dataset_split(ds: &Dataset, cfg: &Config) -> Result<Split> {
    let fr: Vec<f64> = cfg.get_list("split", DEFAULT_SPLIT.to_vec())?;
    let fr: [f64; 3] = fr.try_into().map_err(|_| anyhow!("split needs three fractions"))?;
    let seed = cfg.get("split_seed", cfg.get("seed", 0u64)?)?;
    Ok(split(ds.len(), fr, seed)?)
}

/// The split saved beside a training run, else the one `cfg` describes.
fn run_split(run: &Path, ds: &Dataset, cfg: &Config) -> Result<Split> {
    let p = run.join(SPLIT_FILE);
    if p.exists() {
        let s: Split =
            serde_json::from_str(&fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?;
        let n = s.train.len() + s.val.len() + s.test.len();
        if n != ds.len() {
            bail!("{} covers {n} subjects, the dataset has {}", p.display(), ds.len());
        }
        return Ok(s);
    }
    dataset_split(ds, cfg)
}

fn select(ds: &Dataset, sp: &Split, name: &str) -> Result<Vec<Subject>> {
    let idx: Vec<usize> = match name {
        "train" => sp.train.clone(),
        "val" => sp.val.clone(),
        "test" => sp.test.clone(),
        "all" => (0..ds.len()).collect(),
        other => bail!("unknown split {other:?} (expected train, val, test or all)"),
    };
    Ok(idx.into_iter().map(|i| ds.subjects[i].clone()).collect())
}

fn parse_sexes(v: &[String]) -> Result<Vec<Sex>> {
    v.iter().map(|s| Ok(s.parse::<Sex>()?)).collect()
}

/// Dataset, and the training run's config merged under `cfg`.
fn dataset_for(run: &Path, flag: Option<&Path>, cfg: &mut Config) -> Result<Dataset> {
    if let Some(tc) = training_config(run)? {
        for (k, v) in tc.iter() {
            if !cfg.contains(k) {
                cfg.set(k, v);
            }
        }
    }
    let dir = data_dir(flag, cfg)?;
    cfg.set("data", dir.display());
    load_dataset(&dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn synth(mut cfg: Config, out: &Path) -> Result<()> {
    let spec = PopulationSpec::from_config(&cfg)?;
    spec.write_into(&mut cfg);
    let dir = run_dir(out, "synth")?;
    let ds = generate_population(&spec)?;
    save_dataset(&ds, &dir.join("dataset"))?;
    freeze(&dir, &cfg)?;
    info!("{} subjects of {:?} written", ds.len(), spec.dims);
    finish(&dir)
}

fn train_cmd(cfg: Config, g: &Global, a: TrainArgs) -> Result<()> {
    let (mut cfg, dir, resume) = match &a.resume {
        Some(d) => {
            let frozen =
                Config::load(d.join(CONFIG_FILE)).with_context(|| format!("{} is not a training run", d.display()))?;
            (resolve_config(g, frozen)?, d.clone(), true)
        }
        None => {
            let tc = TrainConfig::from_config(&cfg)?;
            let dir = run_dir(&g.out, &format!("train-{}", tc.variant))?;
            (cfg, dir, false)
        }
    };
    let data = data_dir(a.data.as_deref(), &cfg)?;
    cfg.set("data", data.display());
    let tc = TrainConfig::from_config(&cfg)?;
    tc.write_into(&mut cfg);
    let ds = load_dataset(&data).with_context(|| format!("loading dataset {}", data.display()))?;
    let sp = if resume {
        run_split(&dir, &ds, &cfg)?
    } else {
        dataset_split(&ds, &cfg)?
    };
    let fr: Vec<f64> = cfg.get_list("split", DEFAULT_SPLIT.to_vec())?;
    cfg.set("split", join_list(&fr));
    cfg.set("split_seed", cfg.get("split_seed", tc.seed)?);
    freeze(&dir, &cfg)?;
    fs::write(dir.join(SPLIT_FILE), serde_json::to_string_pretty(&sp)?)?;
    for k in cfg.unused().into_iter().filter(|k| !CLI_KEYS.contains(&k.as_str())) {
        warn!("config key {k:?} is not used by training");
    }

    let train_set = select(&ds, &sp, "train")?;
    let val_set = select(&ds, &sp, "val")?;
    let td = TrainData {
        train: &train_set,
        val: &val_set,
        age_range: (ds.spec.age_min, ds.spec.age_max),
    };
    info!(
        "training {} on {} subjects ({} validation) into {}",
        tc.variant,
        train_set.len(),
        val_set.len(),
        dir.display()
    );
    let t = train::train(&tc, &td, Some(&dir), resume)?;
    let o = &t.outcome;
    fs::write(
        dir.join("outcome.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "steps": o.steps,
            "converged": o.converged,
            "val_history": o.val_history,
        }))?,
    )?;
    if let Some(l) = o.losses.last() {
        info!("step {}: {}", l.step, l.loss);
    }
    finish(&dir)
}

fn template(mut cfg: Config, out: &Path, a: TemplateArgs) -> Result<()> {
    let (model, store, _) = load_model(&a.checkpoint)?;
    cfg.set("checkpoint", a.checkpoint.display());
    cfg.set("ages", join_list(&a.ages));
    cfg.set("sex", a.sex.join(","));
    let dir = run_dir(out, "template")?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let cols;
    if model.config.variant.conditional() {
        let sexes = parse_sexes(&a.sex)?;
        cols = a.ages.len();
        for &sex in &sexes {
            for &age in &a.ages {
                let attr = model.encoder.encode(&AttributeRecord::new(age, sex))?;
                let (img, seg) = model.template_volumes(&store, Some(&attr))?;
                save_template(&dir, &format!("template_{sex}_{age}"), &img, seg.as_ref(), &mut labels)?;
                images.push(img);
            }
        }
    } else {
        warn!("unconditional model: one template regardless of attributes");
        cols = 1;
        let (img, seg) = model.template_volumes(&store, None)?;
        save_template(&dir, "template", &img, seg.as_ref(), &mut labels)?;
        images.push(img);
    }
    let refs: Vec<&Volume> = images.iter().collect();
    write_file(&dir.join("montage_image.pgm"), &pgm_montage(&refs, cols)?)?;
    if !labels.is_empty() {
        let refs: Vec<_> = labels.iter().collect();
        write_file(&dir.join("montage_labels.pgm"), &label_montage(&refs, cols)?)?;
    }
    freeze(&dir, &cfg)?;
    finish(&dir)
}

fn save_template(
    dir: &Path,
    stem: &str,
    img: &Volume,
    seg: Option<&Volume>,
    labels: &mut Vec<condatlas::field::LabelMap>,
) -> Result<()> {
    write_volume(dir.join(format!("{stem}_image.volb")), img)?;
    if let Some(s) = seg {
        write_volume(dir.join(format!("{stem}_probabilities.volb")), s)?;
        let hard = s.argmax();
        write_labels(dir.join(format!("{stem}_labels.volb")), &hard)?;
        labels.push(hard);
    }
    Ok(())
}

fn register(mut cfg: Config, out: &Path, a: RegisterArgs) -> Result<()> {
    let (model, store, run) = load_model(&a.checkpoint)?;
    cfg.set("checkpoint", a.checkpoint.display());
    let (image, attr, truth) = match (&a.subject, &a.image) {
        (Some(id), _) => {
            let ds = dataset_for(&run, a.data.as_deref(), &mut cfg)?;
            cfg.set("subject", id);
            let s = ds
                .subjects
                .into_iter()
                .find(|s| &s.id == id)
                .ok_or_else(|| anyhow!("no subject {id:?} in the dataset"))?;
            (s.image, s.attributes, Some(s.labels))
        }
        (None, Some(p)) => {
            let age = a.age.expect("clap requires --age");
            let sex: Sex = a.sex.as_deref().expect("clap requires --sex").parse()?;
            cfg.set("image", p.display());
            cfg.set("age", age);
            cfg.set("sex", sex);
            (read_volume(p)?, AttributeRecord::new(age, sex), None)
        }
        (None, None) => bail!("pass --subject ID or --image FILE"),
    };
    let dir = run_dir(out, "register")?;
    let r = eval::register_and_segment(&model, &store, &image, &attr)?;
    let inverse = invert_velocity(&r.v, model.config.steps)?;
    let jac = jacobian_determinant(&r.u)?;
    write_field(dir.join("velocity.volb"), &r.v)?;
    write_field(dir.join("displacement.volb"), &r.u)?;
    write_field(dir.join("inverse_displacement.volb"), &inverse)?;
    write_volume(dir.join("template_image.volb"), &r.template_image)?;
    write_volume(dir.join("warped_template.volb"), &r.warped_image)?;
    write_labels(dir.join("labels.volb"), &r.labels)?;
    write_volume(dir.join("jacobian.volb"), &jac)?;
    let folded = jac.data().iter().filter(|&&d| d <= 0.0).count();
    info!("{folded} voxels with non-positive Jacobian determinant");
    let tiles = [&image, &r.template_image, &r.warped_image];
    write_file(&dir.join("panel_images.pgm"), &pgm_montage(&tiles, tiles.len())?)?;
    write_file(&dir.join("panel_jacobian.pgm"), &pgm_montage(&[&jac], 1)?)?;
    let mut maps = vec![&r.labels];
    if let Some(t) = &truth {
        maps.insert(0, t);
        let d = dice(&r.labels, t)?;
        println!("dice {:.4}", d.mean);
    }
    write_file(&dir.join("panel_labels.pgm"), &label_montage(&maps, maps.len())?)?;
    freeze(&dir, &cfg)?;
    finish(&dir)
}

fn evaluate(mut cfg: Config, out: &Path, a: EvaluateArgs) -> Result<()> {
    let (model, store, run) = load_model(&a.checkpoint)?;
    cfg.set("checkpoint", a.checkpoint.display());
    let ds = dataset_for(&run, a.data.as_deref(), &mut cfg)?;
    let sp = run_split(&run, &ds, &cfg)?;
    let subjects = select(&ds, &sp, &a.split)?;
    if subjects.is_empty() {
        bail!("split {:?} is empty", a.split);
    }
    cfg.set("eval_split", &a.split);
    let dir = run_dir(out, "evaluate")?;
    let report = eval::evaluate(&model, &store, &subjects)?;
    report.write_csv(&dir.join("metrics.csv"))?;
    report.write_summary_csv(&dir.join("summary.csv"))?;
    println!(
        "dice {:.4} ± {:.4}  surface {:.4}  neg_jac {:.6}  ({} subjects)",
        report.dice.mean,
        report.dice.ci95,
        report.surface_distance.mean,
        report.neg_jac_fraction.mean,
        subjects.len()
    );
    freeze(&dir, &cfg)?;
    finish(&dir)
}

fn trend(mut cfg: Config, out: &Path, a: TrendArgs) -> Result<()> {
    let (model, store, run) = load_model(&a.checkpoint)?;
    if !model.config.variant.conditional() {
        bail!("trend analysis needs an attribute-conditioned model");
    }
    cfg.set("checkpoint", a.checkpoint.display());
    let other = a.lt2019.as_deref().map(load_model).transpose()?;
    if let Some(p) = &a.lt2019 {
        cfg.set("lt2019", p.display());
    }
    let ds = dataset_for(&run, a.data.as_deref(), &mut cfg)?;
    let sp = run_split(&run, &ds, &cfg)?;
    let population: Vec<TrendSample> = select(&ds, &sp, &a.split)?
        .into_iter()
        .map(|s| TrendSample {
            age: s.attributes.age,
            sex: s.attributes.sex,
            volumes: s.volumes,
        })
        .collect();
    let ages = if a.ages.is_empty() {
        let (lo, hi) = (ds.spec.age_min, ds.spec.age_max);
        (0..)
            .map(|k| lo + 5.0 * k as f64)
            .take_while(|&x| x <= hi + 1e-9)
            .collect()
    } else {
        a.ages.clone()
    };
    let bw = a.bandwidth.unwrap_or(TREND_BANDWIDTH);
    cfg.set("trend_split", &a.split);
    cfg.set("ages", join_list(&ages));
    cfg.set("bandwidth", bw);
    let dir = run_dir(out, "trend")?;
    let structures = [VENTRICLE, HIPPOCAMPUS];
    for sex in parse_sexes(&a.sex)? {
        let lt = other.as_ref().map(|(m, s, _)| (m, s));
        let rep = eval::trend_analysis(&model, &store, &population, sex, &ages, bw, &structures, lt)?;
        rep.write_csv(&dir.join(format!("trend_{sex}.csv")))?;
        for &c in &structures {
            let name = LABEL_NAMES[c];
            let rows = rep.rows.iter().filter(|r| r.structure == c);
            let mut series = vec![Series {
                name: "template".into(),
                points: rep.template_curve(c),
            }];
            series.push(Series {
                name: "population".into(),
                points: rows.clone().filter_map(|r| r.kde_vol.map(|v| (r.age, v))).collect(),
            });
            if other.is_some() {
                series.push(Series {
                    name: "lt2019".into(),
                    points: rows.filter_map(|r| r.lt2019_vol.map(|v| (r.age, v))).collect(),
                });
            }
            let svg = svg_line_chart(&format!("{name} volume, sex {sex}"), "age (years)", "volume", &series);
            write_file(&dir.join(format!("trend_{name}_{sex}.svg")), svg.as_bytes())?;
            let show = |v: Option<f64>| v.map_or("n/a".to_string(), |e| format!("{:.2}%", 100.0 * e));
            println!(
                "{sex} {name}: mean relative error {}{}",
                show(rep.mean_rel_error(c)),
                if other.is_some() {
                    format!(" (lt2019 {})", show(rep.mean_lt2019_rel_error(c)))
                } else {
                    String::new()
                }
            );
        }
    }
    freeze(&dir, &cfg)?;
    finish(&dir)
}

fn gradcheck(cfg: Config, out: &Path) -> Result<()> {
    let seed = cfg.get("seed", 0u64)?;
    let dir = run_dir(out, "gradcheck")?;
    let mut rows: Vec<SuiteRow> = gradsuite::op_suite(seed);
    rows.extend(gradsuite::full_loss_suite(seed));
    let mut csv = String::from("name,max_rel_error,checked,passed\n");
    println!("{:<32} {:>14} {:>8}  result", "check", "max rel error", "entries");
    for r in &rows {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!("{:<32} {:>14.3e} {:>8}  {verdict}", r.name, r.max_rel_error, r.checked);
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.name,
            r.max_rel_error,
            r.checked,
            r.passed()
        ));
    }
    fs::write(dir.join("gradcheck.csv"), csv)?;
    freeze(&dir, &cfg)?;
    finish(&dir)?;
    let failed = rows.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        bail!(
            "{failed} of {} gradient checks exceed {:e}",
            rows.len(),
            gradsuite::TOLERANCE
        );
    }
    Ok(())
}
