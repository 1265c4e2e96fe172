//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails. The trained criteria share runs on a 48x48 desk
//! profile: 500 subjects per seed, a reduced network and a fixed step budget.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use condatlas::autodiff::{Graph, Tensor};
use condatlas::eval::{
    self, dice, posthoc_template_labels, template_label_volumes, trend_analysis, TrendSample, TREND_BANDWIDTH,
};
use condatlas::field::{compose, integrate_velocity, invert_velocity, FieldKind, Grid, LabelMap, VectorField};
use condatlas::gradsuite;
use condatlas::losses::{self, total_loss, CentralityMode, LossWeights, DICE_EPS};
use condatlas::models::{InitSpec, Sex, Variant};
use condatlas::synth::{
    closed_loop_population, generate_population, load_dataset, save_dataset, split, Dataset, PopulationSpec, Subject,
    HIPPOCAMPUS, VENTRICLE,
};
use condatlas::train::{train, TrainConfig, TrainData, Trained};

const SEEDS: [u64; 3] = [0, 1, 2];
const DIMS: [usize; 2] = [48, 48];
const SUBJECTS: usize = 500;
const STEPS: usize = 1500;
const LR: f64 = 1e-3;
/// Centrality weight of the desk profile; the default 0.1 barely moves the
/// template at this scale.
const LAMBDA_C: f64 = 1.0;
const TREND_AGES: [f64; 7] = [20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0];

fn report(n: usize, pass: bool, detail: &str) -> bool {
    // Written past the harness capture so the lines always reach the log.
    let mut e = std::io::stderr().lock();
    let _ = writeln!(e, "criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn note(msg: &str) {
    let _ = writeln!(std::io::stderr().lock(), "  {msg}");
}

fn population_spec(seed: u64) -> PopulationSpec {
    PopulationSpec {
        n_subjects: SUBJECTS,
        dims: DIMS.to_vec(),
        deform_amplitude: 1.0,
        seed,
        ..PopulationSpec::default()
    }
}

struct Population {
    dataset: Dataset,
    train: Vec<Subject>,
    val: Vec<Subject>,
    test: Vec<Subject>,
}

fn population(seed: u64) -> Arc<Population> {
    static CACHE: OnceLock<Mutex<HashMap<u64, Arc<Population>>>> = OnceLock::new();
    let mut cache = CACHE.get_or_init(Default::default).lock().unwrap();
    cache
        .entry(seed)
        .or_insert_with(|| {
            let dataset = generate_population(&population_spec(seed)).unwrap();
            let sp = split(dataset.len(), [0.8, 0.1, 0.1], seed).unwrap();
            let pick = |idx: &[usize]| idx.iter().map(|&i| dataset.subjects[i].clone()).collect();
            Arc::new(Population {
                train: pick(&sp.train),
                val: pick(&sp.val),
                test: pick(&sp.test),
                dataset,
            })
        })
        .clone()
}

fn desk_config(variant: Variant, centrality: CentralityMode, init: InitSpec, seed: u64) -> TrainConfig {
    let weights = LossWeights {
        central: LAMBDA_C,
        ..LossWeights::default()
    };
    TrainConfig {
        weights,
        seed,
        variant,
        centrality,
        init,
        lr: LR,
        max_steps: Some(STEPS),
        val_every: 0,
        base_features: 8,
        enc_features: vec![8, 16, 16],
        dec_features: vec![16, 16, 16, 16, 8],
        ..TrainConfig::default()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
struct RunKey {
    variant: Variant,
    centrality: CentralityMode,
    init: InitSpec,
    seed: u64,
}

struct RunResult {
    trained: Trained,
    test_dice: f64,
    neg_jac: f64,
}

fn run(variant: Variant, centrality: CentralityMode, init: InitSpec, seed: u64) -> Arc<RunResult> {
    static CACHE: OnceLock<Mutex<HashMap<RunKey, Arc<RunResult>>>> = OnceLock::new();
    let key = RunKey {
        variant,
        centrality,
        init,
        seed,
    };
    if let Some(r) = CACHE.get_or_init(Default::default).lock().unwrap().get(&key) {
        return r.clone();
    }
    let pop = population(seed);
    let cfg = desk_config(variant, centrality, init, seed);
    let t = Instant::now();
    let data = TrainData {
        train: &pop.train,
        val: &pop.val,
        age_range: (pop.dataset.spec.age_min, pop.dataset.spec.age_max),
    };
    let trained = train(&cfg, &data, None, false).unwrap();
    let rep = eval::evaluate(&trained.model, &trained.params, &pop.test).unwrap();
    note(&format!(
        "trained {variant} centrality={centrality} init={init} seed={seed} in {:.0}s: test dice {:.4}, neg-jac {:.2e}",
        t.elapsed().as_secs_f64(),
        rep.dice.mean,
        rep.neg_jac_fraction.mean
    ));
    let r = Arc::new(RunResult {
        trained,
        test_dice: rep.dice.mean,
        neg_jac: rep.neg_jac_fraction.mean,
    });
    CACHE.get().unwrap().lock().unwrap().insert(key, r.clone());
    r
}

fn main_run(variant: Variant, seed: u64) -> Arc<RunResult> {
    run(variant, CentralityMode::Conditional, InitSpec::MeanOf(100), seed)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn criterion_1() -> bool {
    let t = Instant::now();
    let mut rows = gradsuite::op_suite(0);
    rows.extend(gradsuite::full_loss_suite(0));
    let secs = t.elapsed().as_secs_f64();
    let worst = rows.iter().fold(0.0f64, |m, r| m.max(r.max_rel_error));
    for r in rows.iter().filter(|r| !r.passed()) {
        note(&format!("{} max relative error {:.3e}", r.name, r.max_rel_error));
    }
    let pass = rows.iter().all(|r| r.passed()) && secs < 120.0;
    report(
        1,
        pass,
        &format!(
            "{} checks, worst relative error {worst:.2e} (< 1e-4), {secs:.1}s (< 120s)",
            rows.len()
        ),
    )
}

fn interior(grid: &Grid, margin: usize, lin: usize) -> bool {
    let mut rest = lin;
    let dims = grid.dims();
    for a in (0..dims.len()).rev() {
        let c = rest % dims[a];
        rest /= dims[a];
        if c < margin || c + margin >= dims[a] {
            return false;
        }
    }
    true
}

fn smooth_velocity(grid: &Grid, amp: f64, seed: u64) -> VectorField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n0, n1) = (grid.dims()[0], grid.dims()[1]);
    let n = grid.len();
    let mut data = vec![0.0; 2 * n];
    for c in 0..2 {
        let waves: Vec<[f64; 4]> = (0..3)
            .map(|_| {
                [
                    rng.random_range(0.5..1.5) * std::f64::consts::PI / n0 as f64,
                    rng.random_range(0.5..1.5) * std::f64::consts::PI / n1 as f64,
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        for lin in 0..n {
            let (y, x) = ((lin / n1) as f64, (lin % n1) as f64);
            data[c * n + lin] = waves.iter().map(|w| w[3] * (w[0] * y + w[1] * x + w[2]).sin()).sum();
        }
    }
    let m = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    data.iter_mut().for_each(|v| *v *= amp / m);
    VectorField::new(grid.clone(), FieldKind::Velocity, data).unwrap()
}

fn criterion_2() -> bool {
    let t = Instant::now();
    // Constant velocity integrates to the same constant displacement.
    let g = Grid::new(&[24, 24]).unwrap();
    let c = [1.3, -0.7];
    let v = VectorField::uniform(g.clone(), FieldKind::Velocity, &c).unwrap();
    let u = integrate_velocity(&v, 7).unwrap();
    let n = g.len();
    let e_const = (0..n)
        .filter(|&l| interior(&g, 1, l))
        .map(|l| (u.data()[l] - c[0]).abs().max((u.data()[n + l] - c[1]).abs()))
        .fold(0.0f64, f64::max);

    // Linear flow v = a (x - c) along axis 0: u = (e^a - 1)(x - c).
    let m = 64;
    let g = Grid::new(&[m, m]).unwrap();
    let a = 0.05;
    let center = (m as f64 - 1.0) / 2.0;
    let n = g.len();
    let mut data = vec![0.0; 2 * n];
    for lin in 0..n {
        data[lin] = a * ((lin / m) as f64 - center);
    }
    let u = integrate_velocity(&VectorField::new(g.clone(), FieldKind::Velocity, data).unwrap(), 7).unwrap();
    let e_lin = (0..n)
        .filter(|&l| ((l / m) as f64 - center).abs() * a.exp() <= center - 1.0)
        .map(|l| {
            let exact = (a.exp() - 1.0) * ((l / m) as f64 - center);
            (u.data()[l] - exact).abs().max(u.data()[n + l].abs())
        })
        .fold(0.0f64, f64::max);

    // exp(v) o exp(-v) is the identity up to the residual.
    let g = Grid::new(&[32, 32]).unwrap();
    let mut e_inv = 0.0f64;
    for seed in 0..4 {
        let v = smooth_velocity(&g, 2.0, 100 + seed);
        let u = integrate_velocity(&v, 7).unwrap();
        let inv = invert_velocity(&v, 7).unwrap();
        let r = compose(&u, &inv).unwrap();
        let n = g.len();
        let idx: Vec<usize> = (0..n).filter(|&l| interior(&g, 3, l)).collect();
        let mean_res = idx
            .iter()
            .map(|&l| (r.data()[l].powi(2) + r.data()[n + l].powi(2)).sqrt())
            .sum::<f64>()
            / idx.len() as f64;
        e_inv = e_inv.max(mean_res);
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = e_const < 1e-6 && e_lin < 1e-3 && e_inv < 0.05 && secs < 60.0;
    report(
        2,
        pass,
        &format!(
            "constant {e_const:.1e} (< 1e-6), linear {e_lin:.1e} (< 1e-3), inverse residual {e_inv:.3} voxels (< 0.05), {secs:.1}s"
        ),
    )
}

fn criterion_3() -> bool {
    let r = main_run(Variant::Cond, 0);
    report(
        3,
        r.neg_jac < 0.005,
        &format!("test negative-Jacobian fraction {:.3e} (< 5e-3)", r.neg_jac),
    )
}

fn criterion_4() -> bool {
    let dice_of = |v: Variant| -> f64 { mean(&SEEDS.map(|s| main_run(v, s).test_dice)) };
    let (cond, no_seg, uncond) = (
        dice_of(Variant::Cond),
        dice_of(Variant::CondNoSeg),
        dice_of(Variant::Uncond),
    );
    let pass = cond - no_seg >= 0.01 && cond - uncond >= 0.01;
    report(
        4,
        pass,
        &format!(
            "mean test dice over {} seeds: cond {cond:.4}, cond-no-seg {no_seg:.4}, uncond {uncond:.4}; margins {:.4}, {:.4} (>= 0.01)",
            SEEDS.len(),
            cond - no_seg,
            cond - uncond
        ),
    )
}

fn trend_samples(subjects: &[Subject]) -> Vec<TrendSample> {
    subjects
        .iter()
        .map(|s| TrendSample {
            age: s.attributes.age,
            sex: s.attributes.sex,
            volumes: s.volumes.clone(),
        })
        .collect()
}

/// Ventricle relative error over the trend ages, averaged over both sexes.
fn ventricle_error(r: &RunResult, seed: u64) -> f64 {
    let pop = trend_samples(&population(seed).train);
    let errs: Vec<f64> = Sex::ALL
        .iter()
        .map(|&sex| {
            let rep = trend_analysis(
                &r.trained.model,
                &r.trained.params,
                &pop,
                sex,
                &TREND_AGES,
                TREND_BANDWIDTH,
                &[VENTRICLE],
                None,
            )
            .unwrap();
            rep.mean_rel_error(VENTRICLE).unwrap()
        })
        .collect();
    mean(&errs)
}

fn criterion_5() -> bool {
    let cond: Vec<f64> = SEEDS
        .iter()
        .map(|&s| ventricle_error(&main_run(Variant::Cond, s), s))
        .collect();
    let lt: Vec<f64> = SEEDS
        .iter()
        .map(|&s| ventricle_error(&run(Variant::Cond, CentralityMode::Lt2019, InitSpec::MeanOf(100), s), s))
        .collect();
    note(&format!(
        "ventricle relative error per seed: conditional {cond:.4?}, lt2019 {lt:.4?}"
    ));
    let (c, l) = (mean(&cond), mean(&lt));
    report(
        5,
        c < l && c < 0.15,
        &format!(
            "ventricle mean relative error: conditional {:.2}% vs lt2019 {:.2}% (conditional lower, < 15%)",
            100.0 * c,
            100.0 * l
        ),
    )
}

fn criterion_6() -> bool {
    let r = main_run(Variant::Cond, 0);
    let mut pass = true;
    let mut detail = Vec::new();
    for sex in Sex::ALL {
        let vols: Vec<Vec<f64>> = [20.0, 50.0, 80.0]
            .iter()
            .map(|&a| template_label_volumes(&r.trained.model, &r.trained.params, a, sex).unwrap())
            .collect();
        let vent: Vec<f64> = vols.iter().map(|v| v[VENTRICLE]).collect();
        let hip: Vec<f64> = vols.iter().map(|v| v[HIPPOCAMPUS]).collect();
        pass &= vent.windows(2).all(|w| w[1] > w[0]) && hip.windows(2).all(|w| w[1] < w[0]);
        detail.push(format!("{sex} ventricle {vent:?} hippocampus {hip:?}"));
    }
    report(6, pass, &format!("volumes at ages 20/50/80: {}", detail.join("; ")))
}

fn criterion_7() -> bool {
    let multi: Vec<f64> = SEEDS.iter().map(|&s| main_run(Variant::Cond, s).test_dice).collect();
    let single: Vec<f64> = SEEDS
        .iter()
        .map(|&s| run(Variant::Cond, CentralityMode::Conditional, InitSpec::SingleSubject, s).test_dice)
        .collect();
    let pass = mean(&multi) > mean(&single) && sample_sd(&multi) < sample_sd(&single);
    report(
        7,
        pass,
        &format!(
            "test dice mean-of-100 {:.4} ± {:.4} (sd) vs single-subject {:.4} ± {:.4}",
            mean(&multi),
            sample_sd(&multi),
            mean(&single),
            sample_sd(&single)
        ),
    )
}

fn criterion_8() -> bool {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    // Template label maps lie on the simplex.
    let r = main_run(Variant::Cond, 0);
    let model = &r.trained.model;
    let a = model
        .encoder
        .encode(&condatlas::models::AttributeRecord::new(45.0, Sex::M))
        .unwrap();
    let (_, seg) = model.template_volumes(&r.trained.params, Some(&a)).unwrap();
    let seg = seg.unwrap();
    let n = seg.grid().len();
    let simplex = (0..n).all(|l| {
        let s: f64 = (0..seg.channels()).map(|c| seg.channel(c)[l]).sum();
        (s - 1.0).abs() < 1e-6 && (0..seg.channels()).all(|c| seg.channel(c)[l] >= 0.0)
    });
    check("template simplex", simplex);

    // Dice identities on fixtures.
    let g = Grid::new(&[4, 4]).unwrap();
    let map = |f: &dyn Fn(usize) -> u8| LabelMap::new(g.clone(), 2, (0..16).map(f).collect()).unwrap();
    let half_a = map(&|i| u8::from(i < 8));
    let half_b = map(&|i| u8::from(i >= 8));
    let quarter = map(&|i| u8::from((4..12).contains(&i)));
    check("dice self = 1", dice(&half_a, &half_a).unwrap().mean == 1.0);
    check("dice disjoint = 0", dice(&half_a, &half_b).unwrap().mean == 0.0);
    check(
        "dice half overlap = 0.5",
        (dice(&half_a, &quarter).unwrap().mean - 0.5).abs() < 1e-12,
    );

    // Zero flow at step 0: only the data terms remain.
    let (tmodel, mut store, batch) = gradsuite::toy_problem(3);
    for name in ["unet.flow.w", "unet.flow.b"] {
        let id = store.require(name).unwrap();
        store.get_mut(id).value.iter_mut().for_each(|v| *v = 0.0);
    }
    let w = LossWeights::default();
    let mut graph = Graph::new();
    let (_, b) = total_loss(&mut graph, &tmodel, &store, &batch, &w, Some(&[0.5, 0.5])).unwrap();
    let mut expect = 0.0;
    for s in &batch {
        let (t_img, t_seg) = tmodel.template_volumes(&store, Some(&s.attributes)).unwrap();
        let t_seg = t_seg.unwrap();
        let nv = t_img.grid().len() as f64;
        expect += w.img
            * 0.5
            * s.image
                .data()
                .iter()
                .zip(t_img.data())
                .map(|(x, t)| (x - t).powi(2))
                .sum::<f64>()
            / nv;
        let c = t_seg.channels();
        let mut d = 0.0;
        for k in 0..c {
            let (sc, wc) = (
                &s.one_hot.data()[k * nv as usize..(k + 1) * nv as usize],
                t_seg.channel(k),
            );
            let inter: f64 = sc.iter().zip(wc).map(|(a, b)| a * b).sum();
            d += 2.0 * inter / (sc.iter().sum::<f64>() + wc.iter().sum::<f64>() + DICE_EPS);
        }
        expect -= w.seg * d / c as f64;
    }
    check(
        "zero-flow loss decomposition",
        b.smooth == 0.0 && b.central == 0.0 && (b.total - expect).abs() < 1e-10,
    );

    // Scaling the KDE weights leaves the centrality term unchanged.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fields: Vec<Tensor<f64>> = (0..3)
        .map(|_| Tensor::new(vec![2, 6, 6], (0..72).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    let weights = [0.2, 1.3, 0.7];
    let central = |scale: f64| {
        let mut g = Graph::new();
        let us: Vec<_> = fields.iter().map(|f| g.constant(f.clone())).collect();
        let ws: Vec<f64> = weights.iter().map(|w| w * scale).collect();
        let l = losses::loss_central(&mut g, &us, &ws, 1.0).unwrap();
        g.value(l).item()
    };
    let base = central(1.0);
    check(
        "centrality weight scaling",
        [1e-3, 7.0, 1e4]
            .iter()
            .all(|&k| (central(k) - base).abs() <= 1e-12 * base.abs().max(1.0)),
    );

    // Dataset round trip is bit-exact.
    let small = generate_population(&PopulationSpec {
        n_subjects: 6,
        dims: vec![32, 32],
        deform_amplitude: 1.0,
        seed: 9,
        ..PopulationSpec::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&small, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    let bits = |d: &Dataset| -> Vec<u32> {
        d.subjects
            .iter()
            .flat_map(|s| s.image.data().iter().map(|&v| (v as f32).to_bits()))
            .collect()
    };
    check(
        "dataset round trip",
        back.subjects.len() == small.subjects.len()
            && bits(&back) == bits(&small)
            && back
                .subjects
                .iter()
                .zip(&small.subjects)
                .all(|(a, b)| a.labels == b.labels && a.attributes == b.attributes),
    );

    // Seeded runs reproduce exactly.
    let short = |seed: u64| {
        let data = TrainData {
            train: &small.subjects[..5],
            val: &small.subjects[5..],
            age_range: (10.0, 90.0),
        };
        let cfg = TrainConfig {
            seed,
            init: InitSpec::MeanOf(5),
            max_steps: Some(4),
            val_every: 0,
            base_features: 4,
            enc_features: vec![4, 8],
            dec_features: vec![8, 8, 4],
            float64: true,
            ..TrainConfig::default()
        };
        train(&cfg, &data, None, false).unwrap()
    };
    let (x, y) = (short(11), short(11));
    check(
        "seeded reproducibility",
        x.params == y.params && x.outcome.losses == y.outcome.losses,
    );

    let detail = if failures.is_empty() {
        "simplex, dice identities, zero-flow decomposition, weight scaling, round trip, reproducibility".to_string()
    } else {
        format!("failed: {}", failures.join(", "))
    };
    report(8, failures.is_empty(), &detail)
}

fn criterion_9() -> bool {
    let spec = PopulationSpec {
        dims: DIMS.to_vec(),
        deform_amplitude: 1.0,
        seed: 21,
        ..PopulationSpec::default()
    };
    let cl = closed_loop_population(&spec, 50.0, Sex::F, 120).unwrap();
    let (train_set, val_set) = cl.subjects.split_at(100);
    let cfg = TrainConfig {
        max_steps: Some(STEPS),
        ..desk_config(Variant::UncondNoSeg, CentralityMode::Lt2019, InitSpec::MeanOf(100), 21)
    };
    let data = TrainData {
        train: train_set,
        val: val_set,
        age_range: (spec.age_min, spec.age_max),
    };
    let t = Instant::now();
    let trained = train(&cfg, &data, None, false).unwrap();
    let labels = posthoc_template_labels(&trained.model, &trained.params, train_set).unwrap();
    let d = dice(&labels.hard, &cl.template).unwrap();
    note(&format!("closed-loop training took {:.0}s", t.elapsed().as_secs_f64()));
    report(
        9,
        d.mean > 0.9,
        &format!(
            "post-hoc template labels vs generating template: dice {:.4} (> 0.9)",
            d.mean
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [fn() -> bool; 9] = [
        criterion_1,
        criterion_2,
        criterion_3,
        criterion_4,
        criterion_5,
        criterion_6,
        criterion_7,
        criterion_8,
        criterion_9,
    ];
    let failed: Vec<usize> = criteria
        .iter()
        .enumerate()
        .filter(|(_, c)| !c())
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
