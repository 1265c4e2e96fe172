use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Graph, ParamStore, Tensor};
use crate::field::{Grid, Volume};

fn small_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        dims: vec![16, 16],
        labels: 3,
        enc_features: vec![4, 8, 8, 8],
        dec_features: vec![8, 8, 8, 8, 8, 4, 4],
        base_features: 4,
        variant,
        ..ModelConfig::default()
    }
}

fn encoder() -> AttributeEncoder {
    AttributeEncoder::new(10.0, 90.0).unwrap()
}

fn ramp(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i % 16) as f64 / 15.0).collect()
}

#[test]
fn encode_midpoint_and_max() {
    let e = encoder();
    assert_eq!(
        e.encode(&AttributeRecord::new(50.0, Sex::M)).unwrap(),
        vec![0.0, 0.0, 1.0]
    );
    assert_eq!(
        e.encode(&AttributeRecord::new(90.0, Sex::F)).unwrap(),
        vec![1.0, 1.0, 0.0]
    );
    assert_eq!(e.encode(&AttributeRecord::new(10.0, Sex::F)).unwrap()[0], -1.0);
}

#[test]
fn encode_rejects_unknown_values() {
    let e = encoder().with_extra("stage", &["CN", "MCI", "AD"]);
    let mut r = AttributeRecord::new(40.0, Sex::F);
    assert!(e.encode(&r).is_err());
    r.extras.insert("stage".into(), "XX".into());
    assert!(e.encode(&r).is_err());
    r.extras.insert("stage".into(), "MCI".into());
    assert_eq!(e.encode(&r).unwrap(), vec![-0.25, 1.0, 0.0, 0.0, 1.0, 0.0]);
    assert!(e.encode(&AttributeRecord::new(95.0, Sex::F)).is_err());
    assert!("X".parse::<Sex>().is_err());
}

#[test]
fn roster_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let roster: Vec<AttributeRecord> = (0..200)
        .map(|_| {
            let mut r = AttributeRecord::new(
                rng.random_range(10.0..90.0),
                if rng.random_bool(0.5) { Sex::F } else { Sex::M },
            );
            r.extras
                .insert("stage".into(), ["CN", "MCI", "AD"][rng.random_range(0..3)].into());
            r
        })
        .collect();
    let e = AttributeEncoder::fit(&roster)
        .unwrap()
        .with_extra("stage", &["CN", "MCI", "AD"]);
    for r in &roster {
        let a = e.encode(r).unwrap();
        assert!((-1.0..=1.0).contains(&a[0]));
        assert_eq!(a[1] + a[2], 1.0);
        assert_eq!(a[3..].iter().sum::<f64>(), 1.0);
        let d = e.decode(&a).unwrap();
        assert!((d.age - r.age).abs() < 1e-9);
        assert_eq!(d.sex, r.sex);
        assert_eq!(d.extras, r.extras);
    }
}

#[test]
fn fresh_conditional_template_matches_bias() {
    let model = Model::new(small_config(Variant::Cond), encoder()).unwrap();
    let b0 = ramp(256);
    let store: ParamStore<f32> = model.init_params(&b0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    for age in [15.0, 50.0, 85.0] {
        let a = model.encoder.encode(&AttributeRecord::new(age, Sex::F)).unwrap();
        let (img, seg) = model.template_volumes(&store, Some(&a)).unwrap();
        let err = img
            .data()
            .iter()
            .zip(&b0)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "age {age}: {err}");
        let seg = seg.unwrap();
        for j in 0..256 {
            let s: f64 = (0..3).map(|c| seg.channel(c)[j]).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!((0..3).all(|c| seg.channel(c)[j] >= 0.0));
        }
    }
}

#[test]
fn conditional_template_is_deterministic() {
    let model = Model::new(small_config(Variant::Cond), encoder()).unwrap();
    let mut store: ParamStore<f32> = model
        .init_params(&ramp(256), &mut ChaCha8Rng::seed_from_u64(3))
        .unwrap();
    // Larger head weights so the attributes actually matter.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for name in ["dec.img.w", "dec.seg.w"] {
        let id = store.require(name).unwrap();
        store
            .get_mut(id)
            .value
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.3..0.3));
    }
    let a = model.encoder.encode(&AttributeRecord::new(30.0, Sex::M)).unwrap();
    let b = model.encoder.encode(&AttributeRecord::new(70.0, Sex::M)).unwrap();
    let (x1, s1) = model.template_volumes(&store, Some(&a)).unwrap();
    let (x2, s2) = model.template_volumes(&store, Some(&a)).unwrap();
    assert_eq!(x1, x2);
    assert_eq!(s1, s2);
    let (x3, _) = model.template_volumes(&store, Some(&b)).unwrap();
    assert_ne!(x1, x3);
}

#[test]
fn unconditional_template_ignores_attributes() {
    let model = Model::new(small_config(Variant::Uncond), encoder()).unwrap();
    let mut store: ParamStore<f64> = model
        .init_params(&ramp(256), &mut ChaCha8Rng::seed_from_u64(5))
        .unwrap();
    let id = store.require("template.seg").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    store
        .get_mut(id)
        .value
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-2.0..2.0));
    let a = model.encoder.encode(&AttributeRecord::new(20.0, Sex::F)).unwrap();
    let b = model.encoder.encode(&AttributeRecord::new(80.0, Sex::M)).unwrap();
    let ta = model.template_volumes(&store, Some(&a)).unwrap();
    let tb = model.template_volumes(&store, Some(&b)).unwrap();
    let tn = model.template_volumes(&store, None).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(ta, tn);
    assert_eq!(ta.0.data(), &ramp(256)[..]);
}

#[test]
fn no_seg_variants_expose_posthoc_map() {
    let model = Model::new(small_config(Variant::CondNoSeg), encoder()).unwrap();
    let mut store: ParamStore<f32> = model
        .init_params(&ramp(256), &mut ChaCha8Rng::seed_from_u64(7))
        .unwrap();
    assert!(store.id("dec.seg.w").is_none());
    let a = model.encoder.encode(&AttributeRecord::new(40.0, Sex::F)).unwrap();
    assert!(model.template_volumes(&store, Some(&a)).unwrap().1.is_none());
    let probs = vec![1.0 / 3.0; 3 * 256];
    store
        .set_frozen(POSTHOC_SEG, &[3, 16, 16], probs.iter().map(|&v| v as f32).collect())
        .unwrap();
    let seg = model.template_volumes(&store, Some(&a)).unwrap().1.unwrap();
    assert_eq!(seg.channels(), 3);
}

#[test]
fn registration_output_shape_at_default_size() {
    let model = Model::new(ModelConfig::default(), encoder()).unwrap();
    let n = 96 * 96;
    let store: ParamStore<f32> = model
        .init_params(&vec![0.5; n], &mut ChaCha8Rng::seed_from_u64(8))
        .unwrap();
    let grid = Grid::new(&[96, 96]).unwrap();
    let t = Volume::constant(grid.clone(), 1, 0.5);
    let x = Volume::new(grid, 1, (0..n).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let v = model.predict_velocity(&store, &t, &x).unwrap();
    assert_eq!(v.data().len(), 2 * n);
    assert_eq!(v.grid().dims(), &[96, 96]);
    // Zero flow head: identity map at step 0.
    assert!(v.data().iter().all(|&c| c == 0.0));
}

#[test]
fn registration_rejects_grid_mismatch() {
    let model = Model::new(small_config(Variant::Cond), encoder()).unwrap();
    let store: ParamStore<f32> = model
        .init_params(&ramp(256), &mut ChaCha8Rng::seed_from_u64(9))
        .unwrap();
    let mut g = Graph::new();
    let t = g.constant(Tensor::zeros(vec![1, 16, 16]));
    let x = g.constant(Tensor::zeros(vec![1, 32, 32]));
    assert!(model.velocity(&mut g, &store, t, x).is_err());
}

#[test]
fn swapping_inputs_changes_velocity() {
    let model = Model::new(small_config(Variant::Cond), encoder()).unwrap();
    let mut store: ParamStore<f64> = model
        .init_params(&ramp(256), &mut ChaCha8Rng::seed_from_u64(10))
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let id = store.require("unet.flow.w").unwrap();
    store
        .get_mut(id)
        .value
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-0.2..0.2));
    let grid = Grid::new(&[16, 16]).unwrap();
    let t = Volume::new(grid.clone(), 1, ramp(256)).unwrap();
    let x = Volume::new(grid, 1, (0..256).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let v1 = model.predict_velocity(&store, &t, &x).unwrap();
    let v2 = model.predict_velocity(&store, &x, &t).unwrap();
    assert!(v1.max_abs() > 0.0);
    let diff = v1
        .data()
        .iter()
        .zip(v2.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff > 1e-6, "{diff}");
}

#[test]
fn rejects_bad_configs() {
    let mut c = small_config(Variant::Cond);
    c.dims = vec![24, 24];
    assert!(Model::new(c, encoder()).is_err());
    let mut c = small_config(Variant::Cond);
    c.dec_features = vec![8, 8];
    assert!(c.validate().is_err());
    assert_eq!("cond-no-seg".parse::<Variant>().unwrap(), Variant::CondNoSeg);
    assert!("other".parse::<Variant>().is_err());
}

#[test]
fn init_specs() {
    let grid = Grid::new(&[8, 8]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let c = Volume::constant(grid.clone(), 1, 0.7);
    assert_eq!(init_image(InitSpec::MeanOf(1), &[&c], &mut rng).unwrap(), vec![0.7; 64]);
    assert_eq!(init_image(InitSpec::Zeros, &[&c], &mut rng).unwrap(), vec![0.0; 64]);
    assert!(init_image(InitSpec::MeanOf(2), &[&c], &mut rng).is_err());
    assert!(init_image(InitSpec::Zeros, &[], &mut rng).is_err());

    let vols: Vec<Volume> = (0..30)
        .map(|_| Volume::new(grid.clone(), 1, (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
        .collect();
    let refs: Vec<&Volume> = vols.iter().collect();
    let mean = init_image(InitSpec::MeanOf(30), &refs, &mut rng).unwrap();
    // Streaming (Welford-style running) mean as an independent accumulation.
    let mut run = vec![0.0; 64];
    for (k, v) in vols.iter().enumerate() {
        for (r, x) in run.iter_mut().zip(v.data()) {
            *r += (x - *r) / (k + 1) as f64;
        }
    }
    for (a, b) in mean.iter().zip(&run) {
        assert!((a - b).abs() < 1e-12);
    }
    let one = init_image(InitSpec::SingleSubject, &refs, &mut rng).unwrap();
    assert!(vols.iter().any(|v| v.data() == &one[..]));
    assert_eq!("mean-of-100".parse::<InitSpec>().unwrap(), InitSpec::MeanOf(100));
    assert!("mean-of-0".parse::<InitSpec>().is_err());
}
