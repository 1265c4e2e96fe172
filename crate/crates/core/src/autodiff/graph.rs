use std::collections::HashMap;

use crate::field::kernels::{self, Geom};
use crate::real::Real;

use super::conv::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    Conv { x: Var, w: Var, b: Var },
    Relu(Var),
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2(Var),
    Dense { x: Var, w: Var, b: Var },
    Softmax(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Ln(Var, T),
    Sum(Var),
    Mean(Var),
    ChannelSum(Var),
    Reshape(Var),
    Warp { src: Var, disp: Var },
    Diff { x: Var, axis: usize },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Reverse-mode tape. Values are computed when nodes are created.
#[derive(Debug, Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

fn spatial_geom(shape: &[usize]) -> Geom {
    Geom::new(&shape[1..])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: shape mismatch between node {} and node {}",
            a.0,
            b.0
        );
    }

    /// Constant input (no gradient is routed anywhere).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Parameter leaf; repeated calls for the same parameter share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let t = Tensor::new(p.shape.clone(), p.value.clone()).expect("parameter shape");
        let v = self.push(Op::Param, t);
        self.params.insert(id, v);
        v
    }

    /// Convolution, kernel 3, stride 1, zero "same" padding.
    pub fn conv(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let d = xs.len() - 1;
        assert!(
            (2..=3).contains(&d) && ws.len() == d + 2 && ws[2..].iter().all(|&k| k == 3),
            "conv: node {} shape {:?} incompatible with weight node {} shape {:?}",
            x.0,
            xs,
            w.0,
            ws
        );
        assert_eq!(
            ws[1], xs[0],
            "conv: node {} has {} channels, weight node {} expects {}",
            x.0, xs[0], w.0, ws[1]
        );
        assert_eq!(self.shape(b), &[ws[0]], "conv: bias node {} has wrong shape", b.0);
        let g = ConvGeom::new(&xs[1..]);
        let mut shape = xs.clone();
        shape[0] = ws[0];
        let mut out = Tensor::zeros(shape);
        conv::forward(
            self.data(x),
            self.data(w),
            self.data(b),
            xs[0],
            ws[0],
            &g,
            out.data_mut(),
        );
        self.push(Op::Conv { x, w, b }, out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data).unwrap();
        self.push(Op::Relu(x), out)
    }

    /// 2^D max-pooling with stride 2. Odd trailing windows are clipped;
    /// ties resolve to the lowest linear index.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ig = spatial_geom(&xs);
        let odims: Vec<usize> = xs[1..].iter().map(|&d| d.div_ceil(2)).collect();
        let og = Geom::new(&odims);
        let c = xs[0];
        let src = self.data(x);
        let mut out = vec![T::zero(); c * og.len];
        let mut argmax = vec![0usize; c * og.len];
        for ch in 0..c {
            let s = &src[ch * ig.len..(ch + 1) * ig.len];
            for olin in 0..og.len {
                let oc = og.coord(olin);
                let mut best_idx = usize::MAX;
                let mut best = T::neg_infinity();
                for k in 0..(1usize << ig.ndim) {
                    let mut idx = 0;
                    let mut inside = true;
                    for a in 0..ig.ndim {
                        let i = 2 * oc[a] + (k >> a & 1);
                        if i >= ig.dims[a] {
                            inside = false;
                            break;
                        }
                        idx += i * ig.strides[a];
                    }
                    if !inside {
                        continue;
                    }
                    let v = s[idx];
                    if v > best || (v == best && idx < best_idx) {
                        best = v;
                        best_idx = idx;
                    }
                }
                out[ch * og.len + olin] = best;
                argmax[ch * og.len + olin] = best_idx;
            }
        }
        let mut shape = vec![c];
        shape.extend_from_slice(&odims);
        let out = Tensor::new(shape, out).unwrap();
        self.push(Op::MaxPool2 { x, argmax }, out)
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ig = spatial_geom(&xs);
        let odims: Vec<usize> = xs[1..].iter().map(|&d| d * 2).collect();
        let og = Geom::new(&odims);
        let c = xs[0];
        let src = self.data(x);
        let mut out = vec![T::zero(); c * og.len];
        for ch in 0..c {
            for olin in 0..og.len {
                let oc = og.coord(olin);
                let idx: usize = (0..ig.ndim).map(|a| (oc[a] / 2) * ig.strides[a]).sum();
                out[ch * og.len + olin] = src[ch * ig.len + idx];
            }
        }
        let mut shape = vec![c];
        shape.extend_from_slice(&odims);
        let out = Tensor::new(shape, out).unwrap();
        self.push(Op::Upsample2(x), out)
    }

    /// Fully connected layer on the flattened input: `w [out, in]`, `b [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Var {
        let ws = self.shape(w).to_vec();
        let nin = self.value(x).len();
        assert!(
            ws.len() == 2 && ws[1] == nin,
            "dense: input node {} has {} values, weight node {} shape {:?}",
            x.0,
            nin,
            w.0,
            ws
        );
        assert_eq!(self.shape(b), &[ws[0]], "dense: bias node {} has wrong shape", b.0);
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let out: Vec<T> = (0..ws[0])
            .map(|o| {
                let row = &wd[o * nin..(o + 1) * nin];
                bd[o] + row.iter().zip(xd).map(|(a, b)| *a * *b).sum::<T>()
            })
            .collect();
        let out = Tensor::new(vec![ws[0]], out).unwrap();
        self.push(Op::Dense { x, w, b }, out)
    }

    /// Softmax across axis 0 (channels) at every position.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.shape()[0];
        let n = t.len() / c;
        let src = t.data();
        let mut out = vec![T::zero(); t.len()];
        for j in 0..n {
            let mut m = T::neg_infinity();
            for k in 0..c {
                m = m.max(src[k * n + j]);
            }
            let mut z = T::zero();
            for k in 0..c {
                let e = (src[k * n + j] - m).exp();
                out[k * n + j] = e;
                z += e;
            }
            for k in 0..c {
                out[k * n + j] = out[k * n + j] / z;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out).unwrap();
        self.push(Op::Softmax(x), out)
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no inputs");
        let rest = self.shape(parts[0])[1..].to_vec();
        let mut c = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(
                &s[1..],
                &rest[..],
                "concat: node {} shape {:?} vs node {}",
                p.0,
                s,
                parts[0].0
            );
            c += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![c];
        shape.extend_from_slice(&rest);
        let out = Tensor::new(shape, data).unwrap();
        self.push(Op::Concat(parts.to_vec()), out)
    }

    fn zip_with(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T, name: &str) -> Var {
        self.same_shape(name, a, b);
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        self.push(op, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(Op::Add(a, b), a, b, |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(Op::Div(a, b), a, b, |x, y| x / y, "div")
    }

    fn map(&mut self, op: Op<T>, x: Var, f: impl Fn(T) -> T) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).unwrap();
        self.push(op, out)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let k = T::of(k);
        self.map(Op::Scale(x, k), x, |v| v * k)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.map(Op::AddScalar(x), x, |v| v + c)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(Op::Square(x), x, |v| v * v)
    }

    /// `ln(x + eps)`.
    pub fn ln(&mut self, x: Var, eps: f64) -> Var {
        let e = T::of(eps);
        self.map(Op::Ln(x, e), x, |v| (v + e).ln())
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::of(t.len() as f64);
        self.push(Op::Mean(x), Tensor::scalar(s))
    }

    /// Sum over all positions of each channel: `[C, ...] -> [C]`.
    pub fn channel_sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.shape()[0];
        let n = t.len() / c;
        let data = (0..c)
            .map(|k| t.data()[k * n..(k + 1) * n].iter().copied().sum())
            .collect();
        self.push(Op::ChannelSum(x), Tensor::new(vec![c], data).unwrap())
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x);
        assert_eq!(
            shape.iter().product::<usize>(),
            t.len(),
            "reshape: node {} of shape {:?} cannot become {:?}",
            x.0,
            t.shape(),
            shape
        );
        let out = Tensor::new(shape.to_vec(), t.data().to_vec()).unwrap();
        self.push(Op::Reshape(x), out)
    }

    /// `out(x) = src(x + disp(x))` with multilinear interpolation and edge
    /// clamping; differentiable in both arguments.
    pub fn warp(&mut self, src: Var, disp: Var) -> Var {
        let ss = self.shape(src).to_vec();
        let ds = self.shape(disp).to_vec();
        assert!(
            ss.len() >= 2 && ss[1..] == ds[1..] && ds[0] == ds.len() - 1,
            "warp: source node {} shape {:?} incompatible with displacement node {} shape {:?}",
            src.0,
            ss,
            disp.0,
            ds
        );
        let geom = spatial_geom(&ss);
        let mut out = Tensor::zeros(ss.clone());
        kernels::warp_into(self.data(src), ss[0], &geom, self.data(disp), out.data_mut());
        self.push(Op::Warp { src, disp }, out)
    }

    /// Spatial forward difference along `axis` (backward at the last index).
    pub fn diff(&mut self, x: Var, axis: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(axis + 1 < s.len(), "diff: axis {axis} out of range for node {}", x.0);
        let geom = spatial_geom(&s);
        let mut out = Tensor::zeros(s.clone());
        kernels::diff_into(self.data(x), s[0], &geom, axis, out.data_mut());
        self.push(Op::Diff { x, axis }, out)
    }

    /// Displacement of `(Id + outer) o (Id + inner)`.
    pub fn compose(&mut self, outer: Var, inner: Var) -> Var {
        let w = self.warp(outer, inner);
        self.add(inner, w)
    }

    /// Scaling and squaring, unrolled so the backward pass runs through all
    /// `steps` compositions.
    pub fn integrate_velocity(&mut self, v: Var, steps: usize) -> Var {
        assert!(steps >= 1, "integrate_velocity: steps must be >= 1");
        let mut u = self.scale(v, 0.5f64.powi(steps as i32));
        for _ in 0..steps {
            u = self.compose(u, u);
        }
        u
    }

    /// Adjoints of every node reachable from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward: root node {} is not scalar",
            root.0
        );
        let mut adj: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            self.backward_node(id, &g, &mut adj);
            adj[id] = Some(g);
        }
        Gradients { adj }
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Vec<T>>], v: Var) -> &'a mut Vec<T> {
        let len = self.nodes[v.0].value.len();
        adj[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn take(&self, adj: &mut [Option<Vec<T>>], v: Var) -> Vec<T> {
        adj[v.0]
            .take()
            .unwrap_or_else(|| vec![T::zero(); self.nodes[v.0].value.len()])
    }

    fn backward_node(&self, id: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        macro_rules! grad {
            ($v:expr) => {
                self.slot(adj, $v)
            };
        }
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let geom = ConvGeom::new(&xs[1..]);
                let (cin, cout) = (ws[1], ws[0]);
                conv::backward_input(g, self.data(*w), cin, cout, &geom, grad!(*x));
                let mut gw = self.take(adj, *w);
                let mut gb = self.take(adj, *b);
                conv::backward_params(g, self.data(*x), cin, &geom, &mut gw, &mut gb);
                adj[w.0] = Some(gw);
                adj[b.0] = Some(gb);
            }
            Op::Relu(x) => {
                let gx = grad!(*x);
                for ((d, &go), &o) in gx.iter_mut().zip(g).zip(out) {
                    if o > T::zero() {
                        *d += go;
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let xs = self.shape(*x);
                let cin = xs[0];
                let nin = self.value(*x).len() / cin;
                let nout = out.len() / cin;
                let gx = grad!(*x);
                for (k, (&go, &idx)) in g.iter().zip(argmax).enumerate() {
                    gx[(k / nout) * nin + idx] += go;
                }
            }
            Op::Upsample2(x) => {
                let xs = self.shape(*x);
                let ig = spatial_geom(xs);
                let og = spatial_geom(node.value.shape());
                let c = xs[0];
                let gx = grad!(*x);
                for ch in 0..c {
                    for olin in 0..og.len {
                        let oc = og.coord(olin);
                        let idx: usize = (0..ig.ndim).map(|a| (oc[a] / 2) * ig.strides[a]).sum();
                        gx[ch * ig.len + idx] += g[ch * og.len + olin];
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let nin = self.value(*x).len();
                let (xd, wd) = (self.data(*x), self.data(*w));
                {
                    let gx = grad!(*x);
                    for (o, &go) in g.iter().enumerate() {
                        let row = &wd[o * nin..(o + 1) * nin];
                        for (d, &wv) in gx.iter_mut().zip(row) {
                            *d += go * wv;
                        }
                    }
                }
                {
                    let gw = grad!(*w);
                    for (o, &go) in g.iter().enumerate() {
                        for (d, &xv) in gw[o * nin..(o + 1) * nin].iter_mut().zip(xd) {
                            *d += go * xv;
                        }
                    }
                }
                let gb = grad!(*b);
                for (d, &go) in gb.iter_mut().zip(g) {
                    *d += go;
                }
            }
            Op::Softmax(x) => {
                let c = node.value.shape()[0];
                let n = out.len() / c;
                let gx = grad!(*x);
                for j in 0..n {
                    let dot: T = (0..c).map(|k| out[k * n + j] * g[k * n + j]).sum();
                    for k in 0..c {
                        gx[k * n + j] += out[k * n + j] * (g[k * n + j] - dot);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let gp = grad!(p);
                    for (d, &go) in gp.iter_mut().zip(&g[off..off + len]) {
                        *d += go;
                    }
                    off += len;
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    let gv = grad!(v);
                    for (d, &go) in gv.iter_mut().zip(g) {
                        *d += go;
                    }
                }
            }
            Op::Sub(a, b) => {
                {
                    let ga = grad!(*a);
                    for (d, &go) in ga.iter_mut().zip(g) {
                        *d += go;
                    }
                }
                let gb = grad!(*b);
                for (d, &go) in gb.iter_mut().zip(g) {
                    *d -= go;
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                {
                    let ga = grad!(*a);
                    for ((d, &go), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *d += go * bv;
                    }
                }
                let gb = grad!(*b);
                for ((d, &go), &av) in gb.iter_mut().zip(g).zip(ad) {
                    *d += go * av;
                }
            }
            Op::Div(a, b) => {
                let bd = self.data(*b);
                {
                    let ga = grad!(*a);
                    for ((d, &go), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *d += go / bv;
                    }
                }
                let gb = grad!(*b);
                for (((d, &go), &bv), &o) in gb.iter_mut().zip(g).zip(bd).zip(out) {
                    *d -= go * o / bv;
                }
            }
            Op::Scale(x, k) => {
                let gx = grad!(*x);
                for (d, &go) in gx.iter_mut().zip(g) {
                    *d += go * *k;
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let gx = grad!(*x);
                for (d, &go) in gx.iter_mut().zip(g) {
                    *d += go;
                }
            }
            Op::Square(x) => {
                let xd = self.data(*x);
                let gx = grad!(*x);
                let two = T::of(2.0);
                for ((d, &go), &xv) in gx.iter_mut().zip(g).zip(xd) {
                    *d += two * xv * go;
                }
            }
            Op::Ln(x, eps) => {
                let xd = self.data(*x);
                let gx = grad!(*x);
                for ((d, &go), &xv) in gx.iter_mut().zip(g).zip(xd) {
                    *d += go / (xv + *eps);
                }
            }
            Op::Sum(x) => {
                let gx = grad!(*x);
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let gx = grad!(*x);
                let k = g[0] / T::of(gx.len() as f64);
                gx.iter_mut().for_each(|d| *d += k);
            }
            Op::ChannelSum(x) => {
                let gx = grad!(*x);
                let c = g.len();
                let n = gx.len() / c;
                for (k, &go) in g.iter().enumerate() {
                    gx[k * n..(k + 1) * n].iter_mut().for_each(|d| *d += go);
                }
            }
            Op::Warp { src, disp } => {
                let ss = self.shape(*src);
                let geom = spatial_geom(ss);
                let c = ss[0];
                if src == disp {
                    let mut gs = vec![T::zero(); self.value(*src).len()];
                    let mut gd = vec![T::zero(); gs.len()];
                    kernels::warp_backward(
                        self.data(*src),
                        c,
                        &geom,
                        self.data(*disp),
                        g,
                        Some(&mut gs),
                        Some(&mut gd),
                    );
                    let gx = grad!(*src);
                    for ((d, a), b) in gx.iter_mut().zip(gs).zip(gd) {
                        *d += a + b;
                    }
                } else {
                    let mut gs = self.take(adj, *src);
                    let mut gd = self.take(adj, *disp);
                    kernels::warp_backward(
                        self.data(*src),
                        c,
                        &geom,
                        self.data(*disp),
                        g,
                        Some(&mut gs),
                        Some(&mut gd),
                    );
                    adj[src.0] = Some(gs);
                    adj[disp.0] = Some(gd);
                }
            }
            Op::Diff { x, axis } => {
                let s = self.shape(*x);
                let geom = spatial_geom(s);
                let gx = grad!(*x);
                kernels::diff_backward(g, s[0], &geom, *axis, gx);
            }
        }
    }
}

/// Adjoints from one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    adj: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Adjoint of `v`, or `None` if `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.adj.get(v.0).and_then(|a| a.as_deref())
    }

    /// Adds parameter adjoints into the store's gradient buffers.
    pub fn accumulate_into(&self, graph: &Graph<T>, store: &mut ParamStore<T>) {
        for (&id, &v) in &graph.params {
            if let Some(g) = self.get(v) {
                let p = store.get_mut(id);
                for (d, &x) in p.grad.iter_mut().zip(g) {
                    *d += x;
                }
            }
        }
    }
}
