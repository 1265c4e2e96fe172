//! Gradient checks over every differentiable op and the full objective,
//! as run by the `gradcheck` command and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{GradCheck, Graph, ParamId, ParamStore, Tensor, Var};
use crate::losses::{
    loss_central, loss_seg, loss_smooth, soft_dice, total_loss, LossWeights, SegLossKind, SubjectTensors,
};
use crate::models::{AttributeEncoder, AttributeRecord, Model, ModelConfig, Sex, Variant};

/// Acceptance threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteRow {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect()
}

/// Displacements whose sample points stay away from grid nodes, where the
/// interpolant has kinks.
fn off_grid(rng: &mut ChaCha8Rng, d: usize, n: usize, max: i32) -> Vec<f64> {
    (0..d * n)
        .map(|_| rng.random_range(-max..max) as f64 + rng.random_range(0.1..0.9))
        .collect()
}

type Input = (Vec<usize>, Vec<f64>);

/// Checks every input of `loss = sum(op(inputs) * r)` for a fixed random `r`.
fn check_op<F>(name: &str, inputs: Vec<Input>, seed: u64, op: F) -> SuiteRow
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, (shape, data))| {
            store
                .add(&format!("{name}.in{i}"), &shape, data, true)
                .expect("unique names")
        })
        .collect();
    let mut probe = Graph::new();
    let vars: Vec<Var> = ids.iter().map(|&id| probe.param(&store, id)).collect();
    let out = op(&mut probe, &vars);
    let shape = probe.shape(out).to_vec();
    let n = shape.iter().product();
    let r = Tensor::new(shape, randn(&mut ChaCha8Rng::seed_from_u64(seed ^ 99), n, 1.0)).expect("shape");
    let build = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
        let y = op(g, &vars);
        let rv = g.constant(r.clone());
        let p = g.mul(y, rv);
        g.sum(p)
    };
    let reports = GradCheck::new(1e-4, 32, seed).check_all(&store, &build);
    SuiteRow {
        name: name.to_string(),
        max_rel_error: reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
        checked: reports.iter().map(|r| r.checked).sum(),
    }
}

/// One row per op (and per loss term), each checked at a random point.
pub fn op_suite(seed: u64) -> Vec<SuiteRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut rows = Vec::new();
    let s = vec![3, 4];
    let (a, b) = (randn(rng, 12, 1.0), randn(rng, 12, 1.0));
    let pos: Vec<f64> = (0..12).map(|_| rng.random_range(0.5..2.0)).collect();
    let away: Vec<f64> = randn(rng, 40, 1.0)
        .into_iter()
        .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
        .collect();
    // Distinct values spaced well above h so the argmax never flips.
    let mut ranks: Vec<f64> = (0..60).map(|i| i as f64 * 0.01).collect();
    for i in (1..ranks.len()).rev() {
        ranks.swap(i, rng.random_range(0..=i));
    }

    rows.push(check_op(
        "conv2d",
        vec![
            (vec![2, 5, 6], randn(rng, 60, 1.0)),
            (vec![3, 2, 3, 3], randn(rng, 54, 0.5)),
            (vec![3], randn(rng, 3, 0.5)),
        ],
        seed,
        |g, v| g.conv(v[0], v[1], v[2]),
    ));
    rows.push(check_op(
        "conv3d",
        vec![
            (vec![2, 4, 3, 5], randn(rng, 120, 1.0)),
            (vec![2, 2, 3, 3, 3], randn(rng, 108, 0.5)),
            (vec![2], randn(rng, 2, 0.5)),
        ],
        seed,
        |g, v| g.conv(v[0], v[1], v[2]),
    ));
    rows.push(check_op("relu", vec![(vec![2, 4, 5], away)], seed, |g, v| g.relu(v[0])));
    rows.push(check_op(
        "max_pool2",
        vec![(vec![2, 5, 6], ranks.clone())],
        seed,
        |g, v| g.max_pool2(v[0]),
    ));
    rows.push(check_op(
        "upsample2",
        vec![(vec![2, 3, 4], randn(rng, 24, 1.0))],
        seed,
        |g, v| g.upsample2(v[0]),
    ));
    rows.push(check_op(
        "dense",
        vec![
            (vec![5], randn(rng, 5, 1.0)),
            (vec![7, 5], randn(rng, 35, 1.0)),
            (vec![7], randn(rng, 7, 1.0)),
        ],
        seed,
        |g, v| g.dense(v[0], v[1], v[2]),
    ));
    rows.push(check_op(
        "softmax",
        vec![(vec![3, 4, 4], randn(rng, 48, 2.0))],
        seed,
        |g, v| g.softmax(v[0]),
    ));
    rows.push(check_op(
        "concat",
        vec![
            (vec![1, 3, 4], randn(rng, 12, 1.0)),
            (vec![2, 3, 4], randn(rng, 24, 1.0)),
        ],
        seed,
        |g, v| g.concat(&[v[0], v[1]]),
    ));
    rows.push(check_op(
        "reshape",
        vec![(vec![24], randn(rng, 24, 1.0))],
        seed,
        |g, v| g.reshape(v[0], &[2, 3, 4]),
    ));
    rows.push(check_op(
        "add",
        vec![(s.clone(), a.clone()), (s.clone(), b.clone())],
        seed,
        |g, v| g.add(v[0], v[1]),
    ));
    rows.push(check_op(
        "sub",
        vec![(s.clone(), a.clone()), (s.clone(), b.clone())],
        seed,
        |g, v| g.sub(v[0], v[1]),
    ));
    rows.push(check_op(
        "mul",
        vec![(s.clone(), a.clone()), (s.clone(), b.clone())],
        seed,
        |g, v| g.mul(v[0], v[1]),
    ));
    rows.push(check_op(
        "div",
        vec![(s.clone(), a.clone()), (s.clone(), pos.clone())],
        seed,
        |g, v| g.div(v[0], v[1]),
    ));
    rows.push(check_op("scale", vec![(s.clone(), a.clone())], seed, |g, v| {
        g.scale(v[0], -2.5)
    }));
    rows.push(check_op("add_scalar", vec![(s.clone(), a.clone())], seed, |g, v| {
        g.add_scalar(v[0], 0.7)
    }));
    rows.push(check_op("square", vec![(s.clone(), a.clone())], seed, |g, v| {
        g.square(v[0])
    }));
    rows.push(check_op("ln", vec![(s.clone(), pos.clone())], seed, |g, v| {
        g.ln(v[0], 1e-5)
    }));
    rows.push(check_op("sum", vec![(s.clone(), a.clone())], seed, |g, v| g.sum(v[0])));
    rows.push(check_op("mean", vec![(s.clone(), a.clone())], seed, |g, v| {
        g.mean(v[0])
    }));
    rows.push(check_op("channel_sum", vec![(s.clone(), a.clone())], seed, |g, v| {
        g.channel_sum(v[0])
    }));

    let (ny, nx) = (6, 7);
    let n = ny * nx;
    rows.push(check_op(
        "warp2d",
        vec![
            (vec![2, ny, nx], randn(rng, 2 * n, 1.0)),
            (vec![2, ny, nx], off_grid(rng, 2, n, 2)),
        ],
        seed,
        |g, v| g.warp(v[0], v[1]),
    ));
    let n3 = 4 * 5 * 4;
    rows.push(check_op(
        "warp3d",
        vec![
            (vec![1, 4, 5, 4], randn(rng, n3, 1.0)),
            (vec![3, 4, 5, 4], off_grid(rng, 3, n3, 1)),
        ],
        seed,
        |g, v| g.warp(v[0], v[1]),
    ));
    rows.push(check_op(
        "diff",
        vec![(vec![2, ny, nx], randn(rng, 2 * n, 1.0))],
        seed,
        |g, v| {
            let a = g.diff(v[0], 0);
            let b = g.diff(v[0], 1);
            g.concat(&[a, b])
        },
    ));
    let m = 64;
    rows.push(check_op(
        "compose",
        vec![
            (vec![2, 8, 8], off_grid(rng, 2, m, 1)),
            (vec![2, 8, 8], off_grid(rng, 2, m, 1)),
        ],
        seed,
        |g, v| g.compose(v[0], v[1]),
    ));
    let vel: Vec<f64> = (0..2 * m)
        .map(|i| {
            let (y, x) = ((i % m) / 8, i % 8);
            0.9 * ((0.7 * y as f64 + 0.3).sin() * (0.5 * x as f64 + 1.1 * (i / m) as f64).cos())
        })
        .collect();
    rows.push(check_op(
        "integrate_velocity",
        vec![(vec![2, 8, 8], vel)],
        seed,
        |g, v| g.integrate_velocity(v[0], 7),
    ));

    // Loss terms on probability-like and displacement-like inputs.
    let probs = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..48).map(|_| rng.random_range(0.05..1.0)).collect() };
    let (p, q) = (probs(rng), probs(rng));
    rows.push(check_op(
        "soft_dice",
        vec![(vec![3, 4, 4], p.clone()), (vec![3, 4, 4], q.clone())],
        seed,
        |g, v| soft_dice(g, v[0], v[1]),
    ));
    let onehot: Vec<f64> = (0..48)
        .map(|i| if (i / 16) == (i % 16) % 3 { 1.0 } else { 0.0 })
        .collect();
    let u0 = off_grid(rng, 2, 16, 1);
    rows.push(check_op(
        "loss_seg_cross_entropy",
        vec![(vec![3, 4, 4], p), (vec![2, 4, 4], u0.clone())],
        seed,
        move |g, v| {
            let s = g.constant(Tensor::new(vec![3, 4, 4], onehot.clone()).unwrap());
            loss_seg(g, s, v[0], v[1], 0.7, SegLossKind::CrossEntropy)
        },
    ));
    rows.push(check_op("loss_smooth", vec![(vec![2, 4, 4], u0)], seed, |g, v| {
        loss_smooth(g, v[0], 1.3)
    }));
    rows.push(check_op(
        "loss_central",
        vec![
            (vec![2, 4, 4], randn(rng, 32, 1.0)),
            (vec![2, 4, 4], randn(rng, 32, 1.0)),
            (vec![2, 4, 4], randn(rng, 32, 1.0)),
        ],
        seed,
        |g, v| loss_central(g, v, &[0.5, 0.3, 0.2], 0.9).unwrap(),
    ));
    rows
}

fn one_hot(labels: &[usize], c: usize) -> Vec<f64> {
    let n = labels.len();
    let mut v = vec![0.0; c * n];
    for (i, &l) in labels.iter().enumerate() {
        v[l * n + i] = 1.0;
    }
    v
}

/// 16x16, three-label conditional instance with nonzero flow and biases,
/// so every loss term is active and no ReLU sits on its kink.
pub fn toy_problem(seed: u64) -> (Model, ParamStore<f64>, Vec<SubjectTensors<f64>>) {
    let config = ModelConfig {
        dims: vec![16, 16],
        labels: 3,
        upsamples: 3,
        base_features: 3,
        enc_features: vec![3, 4],
        dec_features: vec![4, 4, 3],
        steps: 4,
        head_std: 0.3,
        variant: Variant::Cond,
    };
    let model = Model::new(config, AttributeEncoder::new(10.0, 90.0).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 256;
    let init: Vec<f64> = (0..n)
        .map(|i| 0.5 + 0.3 * ((i / 16) as f64 * 0.4).sin() * ((i % 16) as f64 * 0.3).cos())
        .collect();
    let mut store: ParamStore<f64> = model.init_params(&init, &mut rng).unwrap();
    let id = store.require("unet.flow.w").unwrap();
    store
        .get_mut(id)
        .value
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-0.3..0.3));
    let biases: Vec<_> = store.ids().filter(|&i| store.get(i).name.ends_with(".b")).collect();
    for i in biases {
        store
            .get_mut(i)
            .value
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.1..0.1));
    }
    let batch = (0..2)
        .map(|k| {
            let labels: Vec<usize> = (0..n)
                .map(|i| {
                    let (y, x) = ((i / 16) as f64 - 7.5, (i % 16) as f64 - 7.5);
                    let r = (y * y + x * x).sqrt() + k as f64;
                    if r < 3.0 {
                        2
                    } else if r < 6.0 {
                        1
                    } else {
                        0
                    }
                })
                .collect();
            let image: Vec<f64> = labels
                .iter()
                .map(|&l| 0.2 + 0.3 * l as f64 + rng.random_range(-0.05..0.05))
                .collect();
            SubjectTensors {
                image: Tensor::new(vec![1, 16, 16], image).unwrap(),
                one_hot: Tensor::new(vec![3, 16, 16], one_hot(&labels, 3)).unwrap(),
                attributes: model
                    .encoder
                    .encode(&AttributeRecord::new(30.0 + 30.0 * k as f64, Sex::F))
                    .unwrap(),
            }
        })
        .collect();
    (model, store, batch)
}

/// One row per trainable parameter of the four-term objective on the toy
/// problem. The step is 1e-5: with 1e-4 a few of the ~10^4 interpolation
/// sample points cross grid lines, where the interpolant has a kink.
pub fn full_loss_suite(seed: u64) -> Vec<SuiteRow> {
    let (model, store, batch) = toy_problem(seed);
    let weights = LossWeights::default();
    let cw = [0.7, 0.3];
    let build =
        |g: &mut Graph<f64>, s: &ParamStore<f64>| total_loss(g, &model, s, &batch, &weights, Some(&cw)).unwrap().0;
    GradCheck::new(1e-5, 32, seed)
        .check_all(&store, &build)
        .into_iter()
        .filter(|r| store.by_name(&r.name).is_some_and(|p| p.trainable))
        .map(|r| SuiteRow {
            name: format!("loss/{}", r.name),
            max_rel_error: r.max_rel_error,
            checked: r.checked,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        let rows = op_suite(3);
        assert!(rows.len() >= 28);
        for r in &rows {
            assert!(r.passed() && r.checked > 0, "{r:?}");
        }
    }
}
