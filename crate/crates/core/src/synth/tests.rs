use super::*;
use crate::field::{integrate_velocity, jacobian_determinant, warp_labels, Grid};
use crate::models::{AttributeRecord, Sex};

fn desk_spec(n: usize) -> PopulationSpec {
    PopulationSpec {
        n_subjects: n,
        dims: vec![32, 32],
        deform_amplitude: 1.0,
        ..PopulationSpec::default()
    }
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

#[test]
fn noise_free_subjects_are_identical() {
    let spec = PopulationSpec {
        shape_noise: 0.0,
        deform_amplitude: 0.0,
        intensity_jitter: 0.0,
        noise_std: 0.0,
        ..desk_spec(2)
    };
    let r = AttributeRecord::new(47.0, Sex::F);
    let a = generate_subject_at(&spec, 0, r.clone()).unwrap();
    let b = generate_subject_at(&spec, 1, r).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.volumes, b.volumes);
}

#[test]
fn generation_is_deterministic_per_index() {
    let spec = desk_spec(4);
    let ds = generate_population(&spec).unwrap();
    let again = generate_subject(&spec, 2).unwrap();
    assert_eq!(ds.subjects[2], again);
    assert_ne!(ds.subjects[1].image, ds.subjects[2].image);
}

#[test]
fn ventricle_grows_and_hippocampus_shrinks_across_seeds() {
    let spec = desk_spec(1);
    let (mut dv, mut dh) = (0.0, 0.0);
    for seed in 0..20u64 {
        let s = PopulationSpec { seed, ..spec.clone() };
        for sex in Sex::ALL {
            let young = generate_subject_at(&s, 0, AttributeRecord::new(20.0, sex)).unwrap();
            let old = generate_subject_at(&s, 0, AttributeRecord::new(80.0, sex)).unwrap();
            dv += old.volumes[VENTRICLE] as f64 - young.volumes[VENTRICLE] as f64;
            dh += old.volumes[HIPPOCAMPUS] as f64 - young.volumes[HIPPOCAMPUS] as f64;
        }
    }
    assert!(dv > 0.0 && dh < 0.0, "{dv} {dh}");
}

#[test]
fn mean_shape_laws_are_monotone() {
    let spec = PopulationSpec::default();
    for sex in Sex::ALL {
        let mut prev = spec.mean_shape(10.0, sex);
        for age in (11..=90).map(f64::from) {
            let s = spec.mean_shape(age, sex);
            assert!(s.ventricle > prev.ventricle && s.hippocampus < prev.hippocampus);
            prev = s;
        }
    }
    let f = spec.mean_shape(50.0, Sex::F);
    let m = spec.mean_shape(50.0, Sex::M);
    assert!(m.ventricle > f.ventricle && m.brain > f.brain);
}

#[test]
fn volumes_match_label_counts() {
    let ds = generate_population(&desk_spec(6)).unwrap();
    for s in &ds.subjects {
        let mut counts = [0usize; 5];
        for &l in s.labels.labels() {
            counts[l as usize] += 1;
        }
        assert_eq!(s.volumes, counts.to_vec());
        assert!(s.volumes.iter().all(|&v| v > 0), "{:?}", s.volumes);
    }
}

#[test]
fn population_age_ventricle_correlation() {
    for (dims, base) in [
        (vec![32, 32], desk_spec(200)),
        (vec![96, 96], PopulationSpec::default()),
    ] {
        let spec = PopulationSpec {
            n_subjects: 200,
            dims: dims.clone(),
            ..base
        };
        let ds = generate_population(&spec).unwrap();
        let ages: Vec<f64> = ds.subjects.iter().map(|s| s.attributes.age).collect();
        let vent: Vec<f64> = ds.subjects.iter().map(|s| s.volumes[VENTRICLE] as f64).collect();
        let r = pearson(&ages, &vent);
        assert!(r > 0.8, "{dims:?}: r = {r}");
    }
}

#[test]
fn generated_warps_are_diffeomorphic() {
    let spec = desk_spec(40);
    let grid = spec.grid().unwrap();
    let (mut pos, mut total) = (0usize, 0usize);
    for i in 0..40 {
        let s = generate_subject(&spec, i).unwrap();
        let v = shapes_velocity(&spec, &grid, s.meta.deform_seed);
        let u = integrate_velocity(&v, 7).unwrap();
        let j = jacobian_determinant(&u).unwrap();
        pos += j.data().iter().filter(|&&d| d > 0.0).count();
        total += j.data().len();
    }
    assert!(pos as f64 / total as f64 >= 0.999);
}

fn shapes_velocity(spec: &PopulationSpec, grid: &Grid, seed: u64) -> crate::field::VectorField {
    use rand::SeedableRng;
    shapes::random_velocity(spec, grid, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn rejects_oversized_structures() {
    let spec = PopulationSpec {
        brain_radius: 0.99,
        ..desk_spec(1)
    };
    assert!(generate_population(&spec).is_err());
    let spec = PopulationSpec {
        hippocampus_radius: 0.3,
        ..desk_spec(1)
    };
    assert!(spec.validate().is_err());
    assert!(PopulationSpec {
        dims: vec![8, 8],
        ..desk_spec(1)
    }
    .validate()
    .is_err());
}

#[test]
fn three_dimensional_smoke_spec() {
    let spec = PopulationSpec {
        n_subjects: 2,
        dims: vec![48, 48, 48],
        ..PopulationSpec::default()
    };
    let ds = generate_population(&spec).unwrap();
    for s in &ds.subjects {
        assert!(s.volumes[1..].iter().all(|&v| v > 0), "{:?}", s.volumes);
    }
}

#[test]
fn split_cases() {
    let s = split(1000, [0.8, 0.1, 0.1], 3).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (800, 100, 100));
    let mut all: Vec<usize> = [s.train.clone(), s.val.clone(), s.test.clone()].concat();
    all.sort();
    assert_eq!(all, (0..1000).collect::<Vec<_>>());
    assert_eq!(split(1000, [0.8, 0.1, 0.1], 3).unwrap(), s);
    assert_ne!(split(1000, [0.8, 0.1, 0.1], 4).unwrap(), s);
    let t = split(10, [1.0, 0.0, 0.0], 0).unwrap();
    assert_eq!(t.train.len(), 10);
    assert!(split(10, [0.5, 0.2, 0.2], 0).is_err());
}

#[test]
fn dataset_round_trip_is_exact() {
    let ds = generate_population(&desk_spec(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    save_dataset(&ds, &a).unwrap();
    let loaded = load_dataset(&a).unwrap();
    assert_eq!(loaded, ds);
    save_dataset(&loaded, &b).unwrap();
    let mut files: Vec<_> = walk(&a);
    files.sort();
    assert_eq!(files.len(), 2 + 2 * 5);
    for f in &files {
        let rel = f.strip_prefix(&a).unwrap();
        assert_eq!(
            std::fs::read(f).unwrap(),
            std::fs::read(b.join(rel)).unwrap(),
            "{rel:?}"
        );
    }
    let csv = std::fs::read_to_string(a.join("attributes.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);

    // Every checksum in the manifest matches a fresh hash.
    use sha2::{Digest, Sha256};
    let manifest = std::fs::read_to_string(a.join("manifest.txt")).unwrap();
    let sums: Vec<&str> = manifest
        .split("[checksums]")
        .nth(1)
        .unwrap()
        .lines()
        .filter(|l| !l.is_empty())
        .collect();
    assert_eq!(sums.len(), files.len() - 1);
    for line in sums {
        let (name, sum) = line.split_once(" = ").unwrap();
        assert_eq!(hex::encode(Sha256::digest(std::fs::read(a.join(name)).unwrap())), sum);
    }
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn corrupt_dataset_reports_path() {
    let ds = generate_population(&desk_spec(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let img = dir.path().join("subjects/s00001_image.volb");
    let mut bytes = std::fs::read(&img).unwrap();
    bytes[0] = b'X';
    std::fs::write(&img, bytes).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("s00001_image.volb"), "{err}");

    let m = dir.path().join("manifest.txt");
    std::fs::write(&m, "format = other\n").unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("manifest.txt"), "{err}");
}

#[test]
fn closed_loop_inverse_warps_recover_template() {
    let spec = desk_spec(1);
    let cl = closed_loop_population(&spec, 50.0, Sex::F, 4).unwrap();
    for (s, v) in cl.subjects.iter().zip(&cl.velocities) {
        assert_ne!(s.labels, cl.template);
        let back = warp_labels(&s.labels, &crate::field::invert_velocity(v, 7).unwrap()).unwrap();
        let agree = back
            .labels()
            .iter()
            .zip(cl.template.labels())
            .filter(|(a, b)| a == b)
            .count();
        assert!(agree as f64 / 1024.0 > 0.95, "{agree}");
    }
}

#[test]
fn spec_config_round_trip() {
    let spec = desk_spec(17);
    let mut c = crate::config::Config::new();
    spec.write_into(&mut c);
    assert_eq!(PopulationSpec::from_config(&c).unwrap(), spec);
    c.set("dims", "8,8");
    assert!(PopulationSpec::from_config(&c).is_err());
    c.set("dims", "32,32");
    c.set("sex_scale", "1.0");
    assert!(PopulationSpec::from_config(&c).is_err());
}
