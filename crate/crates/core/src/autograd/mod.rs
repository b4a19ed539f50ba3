//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every op appends a node to a [`Tape`]; nodes are stored in creation order,
//! which is already a topological order, so [`Tape::backward`] is a single
//! reverse sweep and produces bit-identical gradients on every run.
//!
//! Feature maps use a channels-last layout (`[B, H, W, C]`) throughout, which
//! lets pointwise convolutions, linear layers and attention all work on the
//! trailing axis without transposes.

use std::cell::{Ref, RefCell};
use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::param::ParamId;
use crate::tensor::{
    broadcast_zip, gemm_acc, gemm_nt_acc, numel, reduce_to_shape, roll_axis, split_axis, transpose2, Scalar,
    Tensor,
};

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softmax(usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    MatMul(usize, usize),
    BatchMatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    GlobalAvgPool(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Roll {
        x: usize,
        axis: usize,
        shift: isize,
    },
    Pad {
        x: usize,
        axis: usize,
    },
    GatherRows {
        x: usize,
        index: Vec<usize>,
    },
    Sum(usize),
    Mean(usize),
    MaskedMse {
        pred: usize,
        diff: Vec<T>,
        mask: Vec<bool>,
        count: usize,
    },
}

/// Recording of one forward computation.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Batch statistics from a training-mode batch norm, for running-stat updates.
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    /// Unbiased variance (biased when only one sample per channel exists).
    pub var: Tensor<T>,
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    params: BTreeMap<ParamId, Tensor<T>>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&var.id)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a constant or an input. Gradients are kept for it when
    /// `requires_grad` is set.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub(crate) fn param(&self, id: ParamId, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Param(id), true)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Sign (-1, 0 or 1) of every ReLU input, in recording order. Two
    /// passes with equal signs took the same linear piece of every ReLU;
    /// a 0 marks an input sitting exactly on the kink.
    pub fn relu_signs(&self) -> Vec<i8> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for n in nodes.iter() {
            if let Op::Relu(a) = n.op {
                out.extend(nodes[a].value.data().iter().map(|v| {
                    if *v > T::zero() {
                        1
                    } else if *v < T::zero() {
                        -1
                    } else {
                        0
                    }
                }));
            }
        }
        out
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id].value;
        if root.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(Tensor::ones(root.shape()));
        let mut out = Gradients {
            params: BTreeMap::new(),
            leaves: HashMap::new(),
        };
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(id, g);
                }
                Op::Param(pid) => match out.params.get_mut(pid) {
                    Some(acc) => add_into(acc, &g),
                    None => {
                        out.params.insert(*pid, g);
                    }
                },
                op => backward_op(op, id, g, &nodes, &mut grads),
            }
        }
        Ok(out)
    }
}

fn add_into<T: Scalar>(acc: &mut Tensor<T>, g: &Tensor<T>) {
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += *b;
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    id: usize,
    g: Tensor<T>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => add_into(acc, &g),
        slot => *slot = Some(g),
    }
}

/// Channels-last same-padded patches: rows are `(b, i, j)`, columns are
/// `(ki, kj, ci)` in row-major order.
fn im2col<T: Scalar>(x: &[T], b: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let pad = k / 2;
    let kc = k * k * c;
    let mut cols = vec![T::zero(); b * h * w * kc];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let row = ((bi * h + i) * w + j) * kc;
                for ki in 0..k {
                    let si = i + ki;
                    if si < pad || si - pad >= h {
                        continue;
                    }
                    let si = si - pad;
                    for kj in 0..k {
                        let sj = j + kj;
                        if sj < pad || sj - pad >= w {
                            continue;
                        }
                        let sj = sj - pad;
                        let src = ((bi * h + si) * w + sj) * c;
                        let dst = row + (ki * k + kj) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], b: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let pad = k / 2;
    let kc = k * k * c;
    let mut x = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let row = ((bi * h + i) * w + j) * kc;
                for ki in 0..k {
                    let si = i + ki;
                    if si < pad || si - pad >= h {
                        continue;
                    }
                    let si = si - pad;
                    for kj in 0..k {
                        let sj = j + kj;
                        if sj < pad || sj - pad >= w {
                            continue;
                        }
                        let sj = sj - pad;
                        let dst = ((bi * h + si) * w + sj) * c;
                        let src = row + (ki * k + kj) * c;
                        for (xv, cv) in x[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *xv += *cv;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Conv weight `[co, ci, k, k]` flattened as `[co, (ki, kj, ci)]`.
fn conv_weight_rows<T: Scalar>(w: &Tensor<T>) -> Vec<T> {
    w.permute(&[0, 2, 3, 1]).expect("rank-4 weight").into_data()
}

fn column_sums<T: Scalar>(g: &[T], cols: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); cols];
    for row in g.chunks_exact(cols) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += *v;
        }
    }
    acc
}

/// Row-wise normalization backward shared by layer and batch norm:
/// `inv * (gx̂ - mean(gx̂) - x̂ * mean(gx̂ * x̂))`.
fn norm_backward_rows<T: Scalar>(gxhat: &[T], xhat: &[T], inv: T, out: &mut [T]) {
    let n = T::lit(gxhat.len() as f64);
    let mean_g = gxhat.iter().copied().sum::<T>() / n;
    let mean_gx = gxhat.iter().zip(xhat).map(|(a, b)| *a * *b).sum::<T>() / n;
    for ((o, g), x) in out.iter_mut().zip(gxhat).zip(xhat) {
        *o = inv * (*g - mean_g - *x * mean_gx);
    }
}

fn backward_op<T: Scalar>(
    op: &Op<T>,
    id: usize,
    g: Tensor<T>,
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
) {
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    match op {
        Op::Leaf | Op::Param(_) => unreachable!("handled by the driver"),
        Op::Add(a, b) => {
            if needs(*a) {
                accumulate(nodes, grads, *a, reduce_to_shape(&g, val(*a).shape()));
            }
            if needs(*b) {
                accumulate(nodes, grads, *b, reduce_to_shape(&g, val(*b).shape()));
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                accumulate(nodes, grads, *a, reduce_to_shape(&g, val(*a).shape()));
            }
            if needs(*b) {
                let r = reduce_to_shape(&g, val(*b).shape()).map(|v| -v);
                accumulate(nodes, grads, *b, r);
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let ga = broadcast_zip(&g, val(*b), "mul", |x, y| x * y).expect("forward shapes");
                accumulate(nodes, grads, *a, reduce_to_shape(&ga, val(*a).shape()));
            }
            if needs(*b) {
                let gb = broadcast_zip(&g, val(*a), "mul", |x, y| x * y).expect("forward shapes");
                accumulate(nodes, grads, *b, reduce_to_shape(&gb, val(*b).shape()));
            }
        }
        Op::Scale(a, s) => {
            let s = *s;
            accumulate(nodes, grads, *a, g.map(|v| v * s));
        }
        Op::Relu(a) => {
            let x = val(*a);
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                .collect();
            accumulate(nodes, grads, *a, Tensor::from_parts(x.shape().to_vec(), data));
        }
        Op::Sigmoid(a) => {
            let y = val(id);
            let data = g
                .data()
                .iter()
                .zip(y.data())
                .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                .collect();
            accumulate(nodes, grads, *a, Tensor::from_parts(y.shape().to_vec(), data));
        }
        Op::Tanh(a) => {
            let y = val(id);
            let data = g
                .data()
                .iter()
                .zip(y.data())
                .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                .collect();
            accumulate(nodes, grads, *a, Tensor::from_parts(y.shape().to_vec(), data));
        }
        Op::Softmax(a) => {
            let y = val(id);
            let n = *y.shape().last().expect("softmax rank >= 1");
            let mut out = vec![T::zero(); y.numel()];
            for ((o, yr), gr) in out
                .chunks_exact_mut(n)
                .zip(y.data().chunks_exact(n))
                .zip(g.data().chunks_exact(n))
            {
                let dot = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum::<T>();
                for ((ov, yv), gv) in o.iter_mut().zip(yr).zip(gr) {
                    *ov = *yv * (*gv - dot);
                }
            }
            accumulate(nodes, grads, *a, Tensor::from_parts(y.shape().to_vec(), out));
        }
        Op::Linear { x, w, b } => {
            let wv = val(*w);
            let (dout, din) = (wv.shape()[0], wv.shape()[1]);
            let m = g.numel() / dout;
            if needs(*x) {
                let mut gx = vec![T::zero(); m * din];
                gemm_acc(g.data(), wv.data(), &mut gx, m, dout, din);
                accumulate(nodes, grads, *x, Tensor::from_parts(val(*x).shape().to_vec(), gx));
            }
            if needs(*w) {
                let gt = transpose2(g.data(), m, dout);
                let mut gw = vec![T::zero(); dout * din];
                gemm_acc(&gt, val(*x).data(), &mut gw, dout, m, din);
                accumulate(nodes, grads, *w, Tensor::from_parts(vec![dout, din], gw));
            }
            if let Some(b) = b {
                if needs(*b) {
                    accumulate(nodes, grads, *b, Tensor::from_vec(column_sums(g.data(), dout)));
                }
            }
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if needs(*a) {
                let bt = transpose2(bv.data(), k, n);
                let mut ga = vec![T::zero(); m * k];
                gemm_acc(g.data(), &bt, &mut ga, m, n, k);
                accumulate(nodes, grads, *a, Tensor::from_parts(vec![m, k], ga));
            }
            if needs(*b) {
                let at = transpose2(av.data(), m, k);
                let mut gb = vec![T::zero(); k * n];
                gemm_acc(&at, g.data(), &mut gb, k, m, n);
                accumulate(nodes, grads, *b, Tensor::from_parts(vec![k, n], gb));
            }
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = g.shape()[2];
            if needs(*a) {
                let mut ga = vec![T::zero(); batch * m * k];
                for bi in 0..batch {
                    let bs = &bv.data()[bi * k * n..(bi + 1) * k * n];
                    // b_eff^T is [n, k]; when trans_b the stored b already is.
                    let bt_owned;
                    let bt: &[T] = if *trans_b {
                        bs
                    } else {
                        bt_owned = transpose2(bs, k, n);
                        &bt_owned
                    };
                    gemm_acc(
                        &g.data()[bi * m * n..(bi + 1) * m * n],
                        bt,
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                accumulate(nodes, grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
            }
            if needs(*b) {
                let mut gb = vec![T::zero(); batch * k * n];
                for bi in 0..batch {
                    let as_ = &av.data()[bi * m * k..(bi + 1) * m * k];
                    let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
                    let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                    if *trans_b {
                        let gt = transpose2(gs, m, n);
                        gemm_acc(&gt, as_, dst, n, m, k);
                    } else {
                        let at = transpose2(as_, m, k);
                        gemm_acc(&at, gs, dst, k, m, n);
                    }
                }
                accumulate(nodes, grads, *b, Tensor::from_parts(bv.shape().to_vec(), gb));
            }
        }
        Op::Conv2d { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (bn, h, wd, ci) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
            let (co, k) = (wv.shape()[0], wv.shape()[2]);
            let m = bn * h * wd;
            let kc = k * k * ci;
            if needs(*w) {
                let cols = im2col(xv.data(), bn, h, wd, ci, k);
                let gt = transpose2(g.data(), m, co);
                let mut gwr = vec![T::zero(); co * kc];
                gemm_acc(&gt, &cols, &mut gwr, co, m, kc);
                let gw = Tensor::from_parts(vec![co, k, k, ci], gwr)
                    .permute(&[0, 3, 1, 2])
                    .expect("rank-4");
                accumulate(nodes, grads, *w, gw);
            }
            if needs(*x) {
                let wr = conv_weight_rows(wv);
                let mut gcols = vec![T::zero(); m * kc];
                gemm_acc(g.data(), &wr, &mut gcols, m, co, kc);
                let gx = col2im(&gcols, bn, h, wd, ci, k);
                accumulate(nodes, grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
            }
            if let Some(b) = b {
                if needs(*b) {
                    accumulate(nodes, grads, *b, Tensor::from_vec(column_sums(g.data(), co)));
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gam = val(*gamma).data();
            let d = gam.len();
            if needs(*gamma) {
                let mut gg = vec![T::zero(); d];
                for (gr, xr) in g.data().chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for ((a, gv), xv) in gg.iter_mut().zip(gr).zip(xr) {
                        *a += *gv * *xv;
                    }
                }
                accumulate(nodes, grads, *gamma, Tensor::from_vec(gg));
            }
            if needs(*beta) {
                accumulate(nodes, grads, *beta, Tensor::from_vec(column_sums(g.data(), d)));
            }
            if needs(*x) {
                let mut gx = vec![T::zero(); g.numel()];
                let mut gxhat = vec![T::zero(); d];
                for (((o, gr), xr), inv) in gx
                    .chunks_exact_mut(d)
                    .zip(g.data().chunks_exact(d))
                    .zip(xhat.chunks_exact(d))
                    .zip(inv_std)
                {
                    for ((t, gv), gm) in gxhat.iter_mut().zip(gr).zip(gam) {
                        *t = *gv * *gm;
                    }
                    norm_backward_rows(&gxhat, xr, *inv, o);
                }
                accumulate(nodes, grads, *x, Tensor::from_parts(g.shape().to_vec(), gx));
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let gam = val(*gamma).data();
            let c = gam.len();
            let rows = g.numel() / c;
            if needs(*gamma) {
                let mut gg = vec![T::zero(); c];
                for (gr, xr) in g.data().chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ((a, gv), xv) in gg.iter_mut().zip(gr).zip(xr) {
                        *a += *gv * *xv;
                    }
                }
                accumulate(nodes, grads, *gamma, Tensor::from_vec(gg));
            }
            if needs(*beta) {
                accumulate(nodes, grads, *beta, Tensor::from_vec(column_sums(g.data(), c)));
            }
            if needs(*x) {
                let mut gx = vec![T::zero(); g.numel()];
                if *train {
                    // Work channel by channel on strided columns.
                    let mut gcol = vec![T::zero(); rows];
                    let mut xcol = vec![T::zero(); rows];
                    let mut ocol = vec![T::zero(); rows];
                    for ch in 0..c {
                        for r in 0..rows {
                            gcol[r] = g.data()[r * c + ch] * gam[ch];
                            xcol[r] = xhat[r * c + ch];
                        }
                        norm_backward_rows(&gcol, &xcol, inv_std[ch], &mut ocol);
                        for r in 0..rows {
                            gx[r * c + ch] = ocol[r];
                        }
                    }
                } else {
                    for (o, gr) in gx.chunks_exact_mut(c).zip(g.data().chunks_exact(c)) {
                        for ch in 0..c {
                            o[ch] = gr[ch] * gam[ch] * inv_std[ch];
                        }
                    }
                }
                accumulate(nodes, grads, *x, Tensor::from_parts(g.shape().to_vec(), gx));
            }
        }
        Op::GlobalAvgPool(a) => {
            let xs = val(*a).shape();
            let (bn, hw, c) = (xs[0], xs[1] * xs[2], xs[3]);
            let scale = T::one() / T::lit(hw as f64);
            let mut gx = Vec::with_capacity(bn * hw * c);
            for bi in 0..bn {
                let row = &g.data()[bi * c..(bi + 1) * c];
                for _ in 0..hw {
                    gx.extend(row.iter().map(|v| *v * scale));
                }
            }
            accumulate(nodes, grads, *a, Tensor::from_parts(xs.to_vec(), gx));
        }
        Op::Reshape(a) => {
            let shape = val(*a).shape().to_vec();
            accumulate(nodes, grads, *a, g.reshape(&shape).expect("same numel"));
        }
        Op::Permute(a, axes) => {
            let mut inv = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inv[ax] = i;
            }
            accumulate(nodes, grads, *a, g.permute(&inv).expect("valid permutation"));
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(g.shape(), *axis);
            let mut start = 0;
            for &inp in inputs {
                let shape = val(inp).shape().to_vec();
                let n = shape[*axis];
                if needs(inp) {
                    let mut part = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        part.extend_from_slice(&g.data()[base..base + n * inner]);
                    }
                    accumulate(nodes, grads, inp, Tensor::from_parts(shape, part));
                }
                start += n;
            }
        }
        Op::Slice { x, axis, start } => {
            let shape = val(*x).shape().to_vec();
            let (outer, n, inner) = split_axis(&shape, *axis);
            let len = g.shape()[*axis];
            let mut gx = vec![T::zero(); numel(&shape)];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            accumulate(nodes, grads, *x, Tensor::from_parts(shape, gx));
        }
        Op::Roll { x, axis, shift } => {
            let data = roll_axis(g.data(), g.shape(), *axis, -*shift);
            accumulate(nodes, grads, *x, Tensor::from_parts(g.shape().to_vec(), data));
        }
        Op::Pad { x, axis } => {
            let shape = val(*x).shape().to_vec();
            let (outer, padded, inner) = split_axis(g.shape(), *axis);
            let n = shape[*axis];
            let mut gx = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                let base = o * padded * inner;
                gx.extend_from_slice(&g.data()[base..base + n * inner]);
            }
            accumulate(nodes, grads, *x, Tensor::from_parts(shape, gx));
        }
        Op::GatherRows { x, index } => {
            let shape = val(*x).shape().to_vec();
            let row = numel(&shape[1..]);
            let mut gx = vec![T::zero(); numel(&shape)];
            for (i, &src) in index.iter().enumerate() {
                for (d, s) in gx[src * row..(src + 1) * row]
                    .iter_mut()
                    .zip(&g.data()[i * row..(i + 1) * row])
                {
                    *d += *s;
                }
            }
            accumulate(nodes, grads, *x, Tensor::from_parts(shape, gx));
        }
        Op::Sum(a) => {
            let shape = val(*a).shape().to_vec();
            accumulate(nodes, grads, *a, Tensor::full(&shape, g.item()));
        }
        Op::Mean(a) => {
            let shape = val(*a).shape().to_vec();
            let n = T::lit(numel(&shape) as f64);
            accumulate(nodes, grads, *a, Tensor::full(&shape, g.item() / n));
        }
        Op::MaskedMse {
            pred,
            diff,
            mask,
            count,
        } => {
            let scale = g.item() * T::lit(2.0) / T::lit(*count as f64);
            let data = diff
                .iter()
                .zip(mask)
                .map(|(d, &m)| if m { *d * scale } else { T::zero() })
                .collect();
            let shape = val(*pred).shape().to_vec();
            accumulate(nodes, grads, *pred, Tensor::from_parts(shape, data));
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(&[self.id])
    }

    fn unary(self, out: Tensor<T>, op: Op<T>) -> Self {
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(out, op, rg)
    }

    fn binary(
        self,
        other: Self,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Self> {
        let out = broadcast_zip(&self.value(), &other.value(), name, f)?;
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(out, op, rg))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(self, other: Self) -> Result<Self> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, s: f64) -> Self {
        let s = T::lit(s);
        let out = self.value().map(|v| v * s);
        self.unary(out, Op::Scale(self.id, s))
    }

    pub fn relu(self) -> Self {
        let out = self.value().map(|v| if v > T::zero() { v } else { T::zero() });
        self.unary(out, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Self {
        let out = self.value().map(|v| T::one() / (T::one() + (-v).exp()));
        self.unary(out, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Self {
        let out = self.value().map(|v| v.tanh());
        self.unary(out, Op::Tanh(self.id))
    }

    /// Softmax over the trailing axis, max-shifted for stability.
    pub fn softmax(self) -> Result<Self> {
        let out = {
            let x = self.value();
            let n = *x
                .shape()
                .last()
                .ok_or_else(|| Error::Contract("softmax of a scalar".into()))?;
            let mut out = x.data().to_vec();
            for row in out.chunks_exact_mut(n) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        };
        Ok(self.unary(out, Op::Softmax(self.id)))
    }

    /// `x · wᵀ + b` over the trailing axis; `w` is `[d_out, d_in]`.
    pub fn linear(self, w: Self, b: Option<Self>) -> Result<Self> {
        let out = {
            let (x, wv) = (self.value(), w.value());
            let xs = x.shape();
            if wv.rank() != 2 || xs.is_empty() || xs[xs.len() - 1] != wv.shape()[1] {
                return Err(Error::shape("linear", xs, wv.shape()));
            }
            let (dout, din) = (wv.shape()[0], wv.shape()[1]);
            let m = x.numel() / din;
            let mut y = vec![T::zero(); m * dout];
            gemm_nt_acc(x.data(), wv.data(), &mut y, m, din, dout);
            if let Some(b) = b {
                let bv = b.value();
                if bv.shape() != [dout] {
                    return Err(Error::shape("linear bias", bv.shape(), &[dout]));
                }
                for row in y.chunks_exact_mut(dout) {
                    for (v, bb) in row.iter_mut().zip(bv.data()) {
                        *v += *bb;
                    }
                }
            }
            let mut shape = xs.to_vec();
            *shape.last_mut().expect("rank >= 1") = dout;
            Tensor::from_parts(shape, y)
        };
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let rg = self.tape.needs(&ids);
        Ok(self.tape.push(
            out,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            rg,
        ))
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        let out = crate::tensor::matmul(&self.value(), &other.value())?;
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id), rg))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]` when
    /// `trans_b`, multiplying by its transpose).
    pub fn bmm(self, other: Self, trans_b: bool) -> Result<Self> {
        let out = {
            let (a, b) = (self.value(), other.value());
            let (as_, bs) = (a.shape(), b.shape());
            let ok = as_.len() == 3 && bs.len() == 3 && as_[0] == bs[0];
            let inner = if trans_b { bs.get(2) } else { bs.get(1) };
            if !ok || inner != Some(&as_[2]) {
                return Err(Error::shape("bmm", as_, bs));
            }
            let (batch, m, k) = (as_[0], as_[1], as_[2]);
            let n = if trans_b { bs[1] } else { bs[2] };
            let mut c = vec![T::zero(); batch * m * n];
            for bi in 0..batch {
                let bsl = &b.data()[bi * k * n..(bi + 1) * k * n];
                let asl = &a.data()[bi * m * k..(bi + 1) * m * k];
                let csl = &mut c[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    gemm_nt_acc(asl, bsl, csl, m, k, n);
                } else {
                    gemm_acc(asl, bsl, csl, m, k, n);
                }
            }
            Tensor::from_parts(vec![batch, m, n], c)
        };
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(
            out,
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
            rg,
        ))
    }

    /// Same-padded stride-1 cross-correlation of a channels-last input
    /// `[B, H, W, C_in]` with `w: [C_out, C_in, k, k]` (k odd).
    ///
    /// Each output sums kernel positions row-major and input channels
    /// innermost, then adds the bias.
    pub fn conv2d(self, w: Self, b: Option<Self>) -> Result<Self> {
        let out = {
            let (x, wv) = (self.value(), w.value());
            let (xs, ws) = (x.shape(), wv.shape());
            if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[3] || ws[2] != ws[3] {
                return Err(Error::shape("conv2d", xs, ws));
            }
            let k = ws[2];
            if k % 2 == 0 {
                return Err(Error::Contract(format!("conv2d kernel must be odd, got {k}")));
            }
            let (bn, h, wd, ci, co) = (xs[0], xs[1], xs[2], xs[3], ws[0]);
            let kc = k * k * ci;
            let cols = im2col(x.data(), bn, h, wd, ci, k);
            // Sequential summation over the kernel keeps the order fixed.
            let wt = transpose2(&conv_weight_rows(&wv), co, kc);
            let m = bn * h * wd;
            let mut y = vec![T::zero(); m * co];
            gemm_acc(&cols, &wt, &mut y, m, kc, co);
            if let Some(b) = b {
                let bv = b.value();
                if bv.shape() != [co] {
                    return Err(Error::shape("conv2d bias", bv.shape(), &[co]));
                }
                for row in y.chunks_exact_mut(co) {
                    for (v, bb) in row.iter_mut().zip(bv.data()) {
                        *v += *bb;
                    }
                }
            }
            Tensor::from_parts(vec![bn, h, wd, co], y)
        };
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let rg = self.tape.needs(&ids);
        Ok(self.tape.push(
            out,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            rg,
        ))
    }

    /// Normalizes each trailing-axis vector to zero mean and unit variance.
    pub fn layer_norm(self, gamma: Self, beta: Self, eps: f64) -> Result<Self> {
        let (out, xhat, inv_std) = {
            let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
            let d = *x.shape().last().unwrap_or(&1);
            if gv.shape() != [d] || bv.shape() != [d] {
                return Err(Error::shape("layer_norm", x.shape(), gv.shape()));
            }
            let eps = T::lit(eps);
            let dn = T::lit(d as f64);
            let mut xhat = Vec::with_capacity(x.numel());
            let mut inv_std = Vec::with_capacity(x.numel() / d);
            let mut y = Vec::with_capacity(x.numel());
            for row in x.data().chunks_exact(d) {
                let shift = row[0];
                let mean = shift + row.iter().map(|v| *v - shift).sum::<T>() / dn;
                let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
                let inv = T::one() / (var + eps).sqrt();
                inv_std.push(inv);
                for ((v, g), b) in row.iter().zip(gv.data()).zip(bv.data()) {
                    let xh = (*v - mean) * inv;
                    xhat.push(xh);
                    y.push(xh * *g + *b);
                }
            }
            (Tensor::from_parts(x.shape().to_vec(), y), xhat, inv_std)
        };
        let rg = self.tape.needs(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    fn check_bn(&self, gamma: &Self, beta: &Self) -> Result<usize> {
        let x = self.value();
        let c = *x.shape().last().unwrap_or(&1);
        if x.rank() < 2 || gamma.value().shape() != [c] || beta.value().shape() != [c] {
            return Err(Error::shape("batch_norm", x.shape(), gamma.value().shape()));
        }
        Ok(c)
    }

    /// Batch normalization over every axis but the trailing channel axis,
    /// using the batch's own statistics.
    pub fn batch_norm_train(
        self,
        gamma: Self,
        beta: Self,
        eps: f64,
    ) -> Result<(Self, BatchStats<T>)> {
        let c = self.check_bn(&gamma, &beta)?;
        let (out, xhat, inv_std, stats) = {
            let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
            let rows = x.numel() / c;
            let rn = T::lit(rows as f64);
            // Shifted by the first row so constant channels have an exact mean.
            let shift = &x.data()[..c];
            let mut mean = vec![T::zero(); c];
            for row in x.data().chunks_exact(c) {
                for ((m, v), s) in mean.iter_mut().zip(row).zip(shift) {
                    *m += *v - *s;
                }
            }
            for (m, s) in mean.iter_mut().zip(shift) {
                *m = *s + *m / rn;
            }
            let mut var = vec![T::zero(); c];
            for row in x.data().chunks_exact(c) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (*v - *m) * (*v - *m);
                }
            }
            var.iter_mut().for_each(|s| *s /= rn);
            let eps = T::lit(eps);
            let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
            let mut xhat = Vec::with_capacity(x.numel());
            let mut y = Vec::with_capacity(x.numel());
            for row in x.data().chunks_exact(c) {
                for ch in 0..c {
                    let xh = (row[ch] - mean[ch]) * inv_std[ch];
                    xhat.push(xh);
                    y.push(xh * gv.data()[ch] + bv.data()[ch]);
                }
            }
            let unbias = if rows > 1 {
                rn / T::lit((rows - 1) as f64)
            } else {
                T::one()
            };
            let stats = BatchStats {
                mean: Tensor::from_vec(mean),
                var: Tensor::from_vec(var.iter().map(|v| *v * unbias).collect()),
            };
            (Tensor::from_parts(x.shape().to_vec(), y), xhat, inv_std, stats)
        };
        let rg = self.tape.needs(&[self.id, gamma.id, beta.id]);
        let v = self.tape.push(
            out,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                train: true,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Self,
        beta: Self,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: f64,
    ) -> Result<Self> {
        let c = self.check_bn(&gamma, &beta)?;
        if mean.shape() != [c] || var.shape() != [c] {
            return Err(Error::shape("batch_norm running stats", mean.shape(), &[c]));
        }
        let (out, xhat, inv_std) = {
            let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
            let eps = T::lit(eps);
            let inv_std: Vec<T> = var.data().iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
            let mut xhat = Vec::with_capacity(x.numel());
            let mut y = Vec::with_capacity(x.numel());
            for row in x.data().chunks_exact(c) {
                for ch in 0..c {
                    let xh = (row[ch] - mean.data()[ch]) * inv_std[ch];
                    xhat.push(xh);
                    y.push(xh * gv.data()[ch] + bv.data()[ch]);
                }
            }
            (Tensor::from_parts(x.shape().to_vec(), y), xhat, inv_std)
        };
        let rg = self.tape.needs(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            out,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                train: false,
            },
            rg,
        ))
    }

    /// `[B, H, W, C] -> [B, C]` spatial mean.
    pub fn global_avg_pool(self) -> Result<Self> {
        let out = {
            let x = self.value();
            let xs = x.shape();
            if xs.len() != 4 {
                return Err(Error::shape("global_avg_pool", xs, &[0, 0, 0, 0]));
            }
            let (bn, hw, c) = (xs[0], xs[1] * xs[2], xs[3]);
            let n = T::lit(hw as f64);
            let mut y = vec![T::zero(); bn * c];
            for bi in 0..bn {
                let acc = &mut y[bi * c..(bi + 1) * c];
                for cell in x.data()[bi * hw * c..(bi + 1) * hw * c].chunks_exact(c) {
                    for (a, v) in acc.iter_mut().zip(cell) {
                        *a += *v;
                    }
                }
                acc.iter_mut().for_each(|a| *a /= n);
            }
            Tensor::from_parts(vec![bn, c], y)
        };
        Ok(self.unary(out, Op::GlobalAvgPool(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let out = self.value().clone().reshape(shape)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Self> {
        let out = self.value().permute(axes)?;
        Ok(self.unary(out, Op::Permute(self.id, axes.to_vec())))
    }

    pub fn concat(vars: &[Self], axis: usize) -> Result<Self> {
        let first = vars
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tape = first.tape;
        let out = {
            let values: Vec<Ref<'_, Tensor<T>>> = vars.iter().map(|v| v.value()).collect();
            let base = values[0].shape().to_vec();
            if axis >= base.len() {
                return Err(Error::shape("concat", &base, &[axis]));
            }
            let mut total = 0;
            for v in &values {
                let s = v.shape();
                let compatible = s.len() == base.len()
                    && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::shape("concat", &base, s));
                }
                total += s[axis];
            }
            let (outer, _, inner) = split_axis(&base, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &values {
                    let n = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * n..(o + 1) * n]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::from_parts(shape, data)
        };
        let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
        let rg = tape.needs(&ids);
        Ok(tape.push(out, Op::Concat { inputs: ids, axis }, rg))
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let out = {
            let x = self.value();
            let xs = x.shape();
            if axis >= xs.len() || len == 0 || start + len > xs[axis] {
                return Err(Error::shape("slice", xs, &[axis, start, len]));
            }
            let (outer, n, inner) = split_axis(xs, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                data.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            let mut shape = xs.to_vec();
            shape[axis] = len;
            Tensor::from_parts(shape, data)
        };
        Ok(self.unary(
            out,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    /// Cyclic roll along `axis`: element `i` moves to `i + shift (mod n)`.
    pub fn roll(self, axis: usize, shift: isize) -> Result<Self> {
        let out = {
            let x = self.value();
            if axis >= x.rank() {
                return Err(Error::shape("roll", x.shape(), &[axis]));
            }
            Tensor::from_parts(x.shape().to_vec(), roll_axis(x.data(), x.shape(), axis, shift))
        };
        Ok(self.unary(
            out,
            Op::Roll {
                x: self.id,
                axis,
                shift,
            },
        ))
    }

    /// Zero-pads the end of `axis` up to `new_len`.
    pub fn pad(self, axis: usize, new_len: usize) -> Result<Self> {
        let out = {
            let x = self.value();
            let xs = x.shape();
            if axis >= xs.len() || new_len < xs[axis] {
                return Err(Error::shape("pad", xs, &[axis, new_len]));
            }
            let (outer, n, inner) = split_axis(xs, axis);
            let mut data = Vec::with_capacity(outer * new_len * inner);
            for o in 0..outer {
                data.extend_from_slice(&x.data()[o * n * inner..(o + 1) * n * inner]);
                data.extend(std::iter::repeat(T::zero()).take((new_len - n) * inner));
            }
            let mut shape = xs.to_vec();
            shape[axis] = new_len;
            Tensor::from_parts(shape, data)
        };
        Ok(self.unary(out, Op::Pad { x: self.id, axis }))
    }

    /// Selects rows along axis 0 (rows may repeat).
    pub fn gather_rows(self, index: &[usize]) -> Result<Self> {
        let out = {
            let x = self.value();
            let xs = x.shape();
            if xs.is_empty() || index.is_empty() || index.iter().any(|&i| i >= xs[0]) {
                return Err(Error::shape("gather_rows", xs, &[index.len()]));
            }
            let row = numel(&xs[1..]);
            let mut data = Vec::with_capacity(index.len() * row);
            for &i in index {
                data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
            }
            let mut shape = xs.to_vec();
            shape[0] = index.len();
            Tensor::from_parts(shape, data)
        };
        Ok(self.unary(
            out,
            Op::GatherRows {
                x: self.id,
                index: index.to_vec(),
            },
        ))
    }

    pub fn sum(self) -> Self {
        let out = Tensor::scalar(self.value().sum());
        self.unary(out, Op::Sum(self.id))
    }

    pub fn mean(self) -> Self {
        let out = {
            let x = self.value();
            Tensor::scalar(x.sum() / T::lit(x.numel() as f64))
        };
        self.unary(out, Op::Mean(self.id))
    }

    /// Mean squared error over entries where `mask` is set.
    pub fn masked_mse(self, target: &Tensor<T>, mask: &[bool]) -> Result<Self> {
        let (out, diff, count) = {
            let p = self.value();
            if p.shape() != target.shape() || mask.len() != p.numel() {
                return Err(Error::shape("mse", p.shape(), target.shape()));
            }
            let count = mask.iter().filter(|m| **m).count();
            if count == 0 {
                return Err(Error::Contract("mse over an empty mask".into()));
            }
            let diff: Vec<T> = p.data().iter().zip(target.data()).map(|(a, b)| *a - *b).collect();
            let sq = diff
                .iter()
                .zip(mask)
                .filter(|(_, m)| **m)
                .map(|(d, _)| *d * *d)
                .sum::<T>();
            (Tensor::scalar(sq / T::lit(count as f64)), diff, count)
        };
        Ok(self.unary(
            out,
            Op::MaskedMse {
                pred: self.id,
                diff,
                mask: mask.to_vec(),
                count,
            },
        ))
    }
}
