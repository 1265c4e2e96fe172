use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{GradCheck, Graph, ParamStore, Tensor};
use crate::gradsuite::toy_problem;
use crate::models::Sex;

fn t2(c: usize, ny: usize, nx: usize, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(vec![c, ny, nx], data).unwrap()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn bilinear(img: &[f64], ny: usize, nx: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (ny - 1) as f64);
    let x = x.clamp(0.0, (nx - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(ny - 1), (x0 + 1).min(nx - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |a: usize, b: usize| img[a * nx + b];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

fn scalar(g: &Graph<f64>, v: crate::autodiff::Var) -> f64 {
    g.value(v).item()
}

#[test]
fn img_term_zero_and_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = rand_vec(&mut rng, 48, 0.0, 1.0);
    let mut g = Graph::new();
    let tv = g.constant(t2(1, 6, 8, t.clone()));
    let u = g.constant(Tensor::zeros(vec![2, 6, 8]));
    let l = loss_img(&mut g, tv, tv, u, 20.0);
    assert_eq!(scalar(&g, l), 0.0);

    let (c, delta) = (0.4, 0.15);
    let tv = g.constant(t2(1, 6, 8, vec![c; 48]));
    let xv = g.constant(t2(1, 6, 8, vec![c + delta; 48]));
    let l = loss_img(&mut g, xv, tv, u, 20.0);
    assert!((scalar(&g, l) - 10.0 * delta * delta).abs() < 1e-14);
}

#[test]
fn img_term_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (ny, nx) = (7, 9);
    let n = ny * nx;
    let t = rand_vec(&mut rng, n, 0.0, 1.0);
    let x = rand_vec(&mut rng, n, 0.0, 1.0);
    let u = rand_vec(&mut rng, 2 * n, -2.5, 2.5);
    let mut g = Graph::new();
    let (tv, xv, uv) = (
        g.constant(t2(1, ny, nx, t.clone())),
        g.constant(t2(1, ny, nx, x.clone())),
        g.constant(t2(2, ny, nx, u.clone())),
    );
    let l = loss_img(&mut g, xv, tv, uv, 20.0);
    let mut acc = 0.0;
    for i in 0..ny {
        for j in 0..nx {
            let k = i * nx + j;
            let w = bilinear(&t, ny, nx, i as f64 + u[k], j as f64 + u[n + k]);
            acc += (x[k] - w).powi(2);
        }
    }
    assert!((scalar(&g, l) - 10.0 * acc / n as f64).abs() < 1e-10);
}

fn one_hot(labels: &[usize], c: usize) -> Vec<f64> {
    let n = labels.len();
    let mut v = vec![0.0; c * n];
    for (i, &l) in labels.iter().enumerate() {
        v[l * n + i] = 1.0;
    }
    v
}

#[test]
fn dice_fixtures() {
    let mut g = Graph::new();
    let u = g.constant(Tensor::zeros(vec![2, 4, 4]));
    let labels: Vec<usize> = (0..16).map(|i| i % 3).collect();
    let s = g.constant(t2(3, 4, 4, one_hot(&labels, 3)));
    let l = loss_seg(&mut g, s, s, u, 0.2, SegLossKind::SoftDice);
    assert!((scalar(&g, l) + 0.2).abs() < 1e-6);

    let a: Vec<f64> = (0..16).map(|i| if i < 2 { 1.0 } else { 0.0 }).collect();
    let b: Vec<f64> = (0..16).map(|i| if (2..4).contains(&i) { 1.0 } else { 0.0 }).collect();
    let c: Vec<f64> = (0..16).map(|i| if (1..3).contains(&i) { 1.0 } else { 0.0 }).collect();
    let (av, bv, cv) = (
        g.constant(t2(1, 4, 4, a)),
        g.constant(t2(1, 4, 4, b)),
        g.constant(t2(1, 4, 4, c)),
    );
    let disjoint = soft_dice(&mut g, av, bv);
    assert_eq!(g.value(disjoint).item(), 0.0);
    let half = soft_dice(&mut g, av, cv);
    assert!((g.value(half).item() - 0.5).abs() < 1e-5);
    assert!((g.value(half).item() - 2.0 / (4.0 + DICE_EPS)).abs() < 1e-15);
}

#[test]
fn cross_entropy_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels: Vec<usize> = (0..20).map(|_| rng.random_range(0..3)).collect();
    let logits = rand_vec(&mut rng, 60, -2.0, 2.0);
    let mut g = Graph::new();
    let s = g.constant(t2(3, 4, 5, one_hot(&labels, 3)));
    let lv = g.constant(t2(3, 4, 5, logits.clone()));
    let p = g.softmax(lv);
    let u = g.constant(Tensor::zeros(vec![2, 4, 5]));
    let l = loss_seg(&mut g, s, p, u, 0.5, SegLossKind::CrossEntropy);
    let mut acc = 0.0;
    for (i, &lab) in labels.iter().enumerate() {
        let z: f64 = (0..3).map(|c| logits[c * 20 + i].exp()).sum();
        acc -= (logits[lab * 20 + i].exp() / z + CE_EPS).ln();
    }
    assert!((scalar(&g, l) - 0.5 * acc / 20.0).abs() < 1e-12);
}

#[test]
fn smooth_term_cases() {
    let (ny, nx) = (6, 8);
    let n = ny * nx;
    let mut g = Graph::new();
    let uniform = g.constant(t2(2, ny, nx, [vec![0.3; n], vec![-1.2; n]].concat()));
    let l = loss_smooth(&mut g, uniform, 1.0);
    assert_eq!(scalar(&g, l), 0.0);

    let ramp: Vec<f64> = (0..n).map(|i| 0.2 * (i % nx) as f64).collect();
    let r = g.constant(t2(2, ny, nx, [vec![0.0; n], ramp].concat()));
    let l = loss_smooth(&mut g, r, 1.0);
    assert!((scalar(&g, l) - 0.5 * 0.04).abs() < 1e-14);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let u = rand_vec(&mut rng, 2 * n, -1.0, 1.0);
    let uv = g.constant(t2(2, ny, nx, u.clone()));
    let l = loss_smooth(&mut g, uv, 1.5);
    let at = |c: usize, y: usize, x: usize| u[c * n + y * nx + x];
    let mut acc = 0.0;
    for c in 0..2 {
        for y in 0..ny {
            for x in 0..nx {
                let dy = if y + 1 < ny {
                    at(c, y + 1, x) - at(c, y, x)
                } else {
                    at(c, y, x) - at(c, y - 1, x)
                };
                let dx = if x + 1 < nx {
                    at(c, y, x + 1) - at(c, y, x)
                } else {
                    at(c, y, x) - at(c, y, x - 1)
                };
                acc += dy * dy + dx * dx;
            }
        }
    }
    assert!((scalar(&g, l) - 0.75 * acc / n as f64).abs() < 1e-12);
}

#[test]
fn density_examples() {
    assert_eq!(kde_density(&[40.0, 40.0], 1.0).unwrap(), vec![1.0, 1.0]);
    let q = kde_density(&[30.0, 50.0], 1.0).unwrap();
    let want = (-400.0f64).exp();
    assert!(q.iter().all(|&v| ((v - want) / want).abs() < 1e-12));
    let ages = [20.0, 31.5, 40.0, 48.5, 60.0];
    let q = kde_density(&ages, 50.0).unwrap();
    for i in 0..5 {
        assert!((q[i] - q[4 - i]).abs() < 1e-15);
    }
    assert!(kde_density(&[1.0], 1.0).is_err());
    // Underflow-free far apart rosters.
    let lq = kde_log_density(&[0.0, 100.0], 1.0).unwrap();
    assert_eq!(lq, vec![-10000.0, -10000.0]);
}

#[test]
fn weights_examples() {
    let ages = [22.0, 35.0, 41.0, 47.0, 70.0];
    let (sd, s) = (30.0, 20.0);
    let lq = kde_log_density(&ages, sd).unwrap();
    let w = kde_weights(40.0, &ages, &lq, s);
    for i in 0..5 {
        let q: f64 = (0..5)
            .filter(|&j| j != i)
            .map(|j| (-(ages[i] - ages[j]).powi(2) / sd).exp())
            .sum();
        let direct = (-(40.0f64 - ages[i]).powi(2) / s).exp() / q;
        assert!(((w[i] - direct) / direct).abs() < 1e-12, "{i}");
    }
    let same = [50.0; 4];
    let lq = kde_log_density(&same, 1.0).unwrap();
    let w = kde_weights(50.0, &same, &lq, 2.0);
    assert!(w.iter().all(|&v| v == w[0]));
    let ages = [40.0, 41.0, 42.0, 89.0, 90.0];
    let lq = kde_log_density(&ages, 1.0).unwrap();
    let w = kde_weights(41.0, &ages, &lq, 2.0);
    assert!(w[4] < 1e-100);
}

#[test]
fn sampling_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut all = sample_weighted(&[1.0, 2.0, 3.0], 3, &mut rng).unwrap();
    all.sort();
    assert_eq!(all, vec![0, 1, 2]);
    for _ in 0..50 {
        let s = sample_weighted(&[0.0, 0.0, 5.0, 0.0], 2, &mut rng).unwrap();
        assert!(s.contains(&2));
        assert_ne!(s[0], s[1]);
    }
    assert!(sample_weighted(&[1.0], 2, &mut rng).is_err());
    assert_eq!(sample_weighted(&[0.0, 0.0], 1, &mut rng).unwrap().len(), 1);
}

#[test]
fn sampling_inclusion_matches_sequential_oracle() {
    let w = [4.0, 3.0, 2.0, 1.0];
    let total: f64 = w.iter().sum();
    let trials = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut hits = [0usize; 4];
    for _ in 0..trials {
        for i in sample_weighted(&w, 2, &mut rng).unwrap() {
            hits[i] += 1;
        }
    }
    for i in 0..4 {
        let first = w[i] / total;
        let second: f64 = (0..4)
            .filter(|&j| j != i)
            .map(|j| w[j] / total * w[i] / (total - w[j]))
            .sum();
        let p = first + second;
        let sd = (p * (1.0 - p) / trials as f64).sqrt();
        let emp = hits[i] as f64 / trials as f64;
        assert!((emp - p).abs() < 3.0 * sd, "subject {i}: {emp} vs {p}");
    }
}

fn fields(rng: &mut ChaCha8Rng, k: usize, n: usize) -> Vec<Vec<f64>> {
    (0..k).map(|_| rand_vec(rng, 2 * n, -1.0, 1.0)).collect()
}

fn central_value(us: &[Vec<f64>], w: &[f64], lambda: f64) -> f64 {
    let mut g = Graph::new();
    let vs: Vec<_> = us.iter().map(|u| g.constant(t2(2, 4, 5, u.clone()))).collect();
    let l = loss_central(&mut g, &vs, w, lambda).unwrap();
    scalar(&g, l)
}

#[test]
fn central_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 20;
    assert_eq!(central_value(&[vec![0.0; 40], vec![0.0; 40]], &[0.3, 0.7], 0.1), 0.0);
    let u = rand_vec(&mut rng, 40, -1.0, 1.0);
    let neg: Vec<f64> = u.iter().map(|v| -v).collect();
    assert!(central_value(&[u.clone(), neg], &[2.0, 2.0], 0.1).abs() < 1e-16);

    let us = fields(&mut rng, 3, n);
    let w = [0.2, 1.3, 0.5];
    let s: f64 = w.iter().sum();
    let mut acc = 0.0;
    for k in 0..n {
        for c in 0..2 {
            let bar: f64 = (0..3).map(|i| w[i] * us[i][c * n + k]).sum::<f64>() / s;
            acc += bar * bar;
        }
    }
    assert!((central_value(&us, &w, 0.1) - 0.1 * acc / n as f64).abs() < 1e-14);

    let one = central_value(&us[..1], &[1.0], 0.1);
    let direct: f64 = us[0].iter().map(|v| v * v).sum::<f64>() / n as f64;
    assert!((one - 0.1 * direct).abs() < 1e-14);
}

#[test]
fn global_centrality_equals_equal_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let us = fields(&mut rng, 3, 20);
    let mut g = Graph::new();
    let vs: Vec<_> = us.iter().map(|u| g.constant(t2(2, 4, 5, u.clone()))).collect();
    let l = loss_central_global(&mut g, &vs, 0.1).unwrap();
    assert!((scalar(&g, l) - central_value(&us, &[0.5, 0.5, 0.5], 0.1)).abs() < 1e-15);
}

#[test]
fn distant_opposite_fields_discriminate_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let u = rand_vec(&mut rng, 40, -1.0, 1.0);
    let us = [u.clone(), u.iter().map(|v| -v).collect::<Vec<_>>()];
    let ages = [20.0, 80.0];
    let lq = kde_log_density(&ages, 1.0).unwrap();
    let mut g = Graph::new();
    let vs: Vec<_> = us.iter().map(|u| g.constant(t2(2, 4, 5, u.clone()))).collect();
    let global = loss_central_global(&mut g, &vs, 0.1).unwrap();
    assert!(scalar(&g, global).abs() < 1e-16);
    for anchor in ages {
        let w = normalize_log_weights(&kde_log_weights(anchor, &ages, &lq, 2.0));
        assert!(central_value(&us, &w, 0.1) > 1e-3, "anchor {anchor}");
    }
}

#[test]
fn scaling_density_leaves_average_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let ages = [30.0, 31.0, 33.0, 36.0];
    let lq = kde_log_density(&ages, 1.0).unwrap();
    let shifted: Vec<f64> = lq.iter().map(|v| v + 5.0f64.ln()).collect();
    let w1 = kde_weights(32.0, &ages, &lq, 2.0);
    let w2 = kde_weights(32.0, &ages, &shifted, 2.0);
    let us = fields(&mut rng, 4, 20);
    let (a, b) = (central_value(&us, &w1, 0.1), central_value(&us, &w2, 0.1));
    assert!(((a - b) / a).abs() < 1e-12);
    let (s1, s2): (f64, f64) = (w1.iter().sum(), w2.iter().sum());
    for (x, y) in w1.iter().zip(&w2) {
        assert!((x / s1 - y / s2).abs() < 1e-12);
    }
}

#[test]
fn sampler_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 60;
    let ages: Vec<f64> = (0..n).map(|_| rng.random_range(10.0..90.0)).collect();
    let sexes: Vec<Sex> = (0..n).map(|i| if i % 3 == 0 { Sex::M } else { Sex::F }).collect();
    let s = CentralitySampler::new(CentralityMode::Conditional, ages.clone(), sexes.clone(), 2.0, 1.0, 3).unwrap();
    assert_eq!(s.mode(), CentralityMode::Conditional);
    for _ in 0..100 {
        let b = s.draw(&mut rng).unwrap();
        assert_eq!(b.indices.len(), 3);
        assert_eq!(b.indices[0], b.anchor);
        let mut d = b.indices.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 3);
        assert!(b.indices.iter().all(|&i| sexes[i] == sexes[b.anchor]));
        assert!((b.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let g = CentralitySampler::new(CentralityMode::Lt2019, ages.clone(), sexes.clone(), 2.0, 1.0, 3).unwrap();
    assert_eq!(g.draw(&mut rng).unwrap().weights, vec![1.0 / 3.0; 3]);
    let off = CentralitySampler::new(CentralityMode::Off, ages, sexes, 2.0, 1.0, 3).unwrap();
    assert!(off.draw(&mut rng).unwrap().weights.is_empty());
}

#[test]
fn full_loss_gradient_check() {
    let (model, store, batch) = toy_problem(12);
    let weights = LossWeights::default();
    let cw = [0.7, 0.3];
    let build =
        |g: &mut Graph<f64>, s: &ParamStore<f64>| total_loss(g, &model, s, &batch, &weights, Some(&cw)).unwrap().0;
    let mut g = Graph::new();
    let (_, b) = total_loss(&mut g, &model, &store, &batch, &weights, Some(&cw)).unwrap();
    assert!(b.img > 0.0 && b.seg < 0.0 && b.smooth > 0.0 && b.central > 0.0, "{b}");
    // A step of 1e-4 lets some of the ~10^4 interpolation sample points
    // cross a grid line, where the interpolant has a kink.
    let reports = GradCheck::new(1e-5, 32, 3).check_all(&store, &build);
    for r in &reports {
        if store.by_name(&r.name).unwrap().trainable {
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }
}

fn zero_flow(store: &mut ParamStore<f64>) {
    for name in ["unet.flow.w", "unet.flow.b"] {
        let id = store.require(name).unwrap();
        store.get_mut(id).value.iter_mut().for_each(|v| *v = 0.0);
    }
}

#[test]
fn zero_flow_step_zero_loss_has_only_data_terms() {
    let (model, mut store, batch) = toy_problem(13);
    zero_flow(&mut store);
    let weights = LossWeights::default();
    let mut g = Graph::new();
    let (_, b) = total_loss(&mut g, &model, &store, &batch, &weights, Some(&[0.5, 0.5])).unwrap();
    assert_eq!(b.smooth, 0.0);
    assert_eq!(b.central, 0.0);
    assert!((b.total - (b.img + b.seg)).abs() < 1e-12);

    // With u = 0 the data terms reduce to direct comparisons with the template.
    let mut expect = 0.0;
    for s in &batch {
        let (t_img, t_seg) = model.template_volumes(&store, Some(&s.attributes)).unwrap();
        let t_seg = t_seg.unwrap();
        let n = 256.0;
        expect += 10.0
            * s.image
                .data()
                .iter()
                .zip(t_img.data())
                .map(|(x, t)| (x - t).powi(2))
                .sum::<f64>()
            / n;
        let mut dice = 0.0;
        for c in 0..3 {
            let sc = &s.one_hot.data()[c * 256..(c + 1) * 256];
            let wc = t_seg.channel(c);
            let inter: f64 = sc.iter().zip(wc).map(|(a, b)| a * b).sum();
            dice += 2.0 * inter / (sc.iter().sum::<f64>() + wc.iter().sum::<f64>() + DICE_EPS);
        }
        expect -= 0.2 * dice / 3.0;
    }
    assert!((b.total - expect).abs() < 1e-10, "{} vs {}", b.total, expect);
}

#[test]
fn perfect_fit_has_zero_loss() {
    let (model, mut store, mut batch) = toy_problem(14);
    zero_flow(&mut store);
    for s in &mut batch {
        let (t, _) = model.template_volumes(&store, Some(&s.attributes)).unwrap();
        s.image = Tensor::new(vec![1, 16, 16], t.data().to_vec()).unwrap();
    }
    let weights = LossWeights {
        seg: 0.0,
        smooth: 0.0,
        central: 0.0,
        ..LossWeights::default()
    };
    let mut g = Graph::new();
    let (_, b) = total_loss(&mut g, &model, &store, &batch, &weights, Some(&[0.5, 0.5])).unwrap();
    assert_eq!(b.total, 0.0);
}

#[test]
fn weights_validation() {
    assert!(LossWeights::default().validate().is_ok());
    assert!(LossWeights {
        sigma_d: 0.0,
        ..LossWeights::default()
    }
    .validate()
    .is_err());
    assert!(LossWeights {
        central: -1.0,
        ..LossWeights::default()
    }
    .validate()
    .is_err());
    assert_eq!(
        "cross-entropy".parse::<SegLossKind>().unwrap(),
        SegLossKind::CrossEntropy
    );
    assert_eq!("lt2019".parse::<CentralityMode>().unwrap(), CentralityMode::Lt2019);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn terms_are_non_negative_and_dice_bounded(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 20;
        let mut g = Graph::new();
        let x = g.constant(t2(1, 4, 5, rand_vec(&mut rng, n, 0.0, 1.0)));
        let t = g.constant(t2(1, 4, 5, rand_vec(&mut rng, n, 0.0, 1.0)));
        let u = g.constant(t2(2, 4, 5, rand_vec(&mut rng, 2 * n, -2.0, 2.0)));
        let li = loss_img(&mut g, x, t, u, 20.0);
        let ls = loss_smooth(&mut g, u, 1.0);
        prop_assert!(loss_central(&mut g, &[u], &[0.0], 0.1).is_err());
        let lc = loss_central(&mut g, &[u], &[1.0], 0.1).unwrap();
        prop_assert!(scalar(&g, li) >= 0.0 && scalar(&g, ls) >= 0.0 && scalar(&g, lc) >= 0.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let s = g.constant(t2(3, 4, 5, one_hot(&labels, 3)));
        let lg = g.constant(t2(3, 4, 5, rand_vec(&mut rng, 3 * n, -3.0, 3.0)));
        let p = g.softmax(lg);
        let d = soft_dice(&mut g, s, p);
        prop_assert!(g.value(d).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn central_is_permutation_invariant(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let us = fields(&mut rng, 3, 20);
        let w = rand_vec(&mut rng, 3, 0.1, 2.0);
        let a = central_value(&us, &w, 0.1);
        let b = central_value(&[us[2].clone(), us[0].clone(), us[1].clone()], &[w[2], w[0], w[1]], 0.1);
        prop_assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
    }
}
