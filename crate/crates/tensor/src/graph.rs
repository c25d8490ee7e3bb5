//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of
//! a scalar with respect to every node that requires one. Parameters are
//! bound from a [`ParamStore`]; binding the same parameter twice yields the
//! same node, so weight sharing simply means using one [`Var`] many times.

use std::collections::HashMap;

use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MulConst(Var, Tensor),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Ln(Var),
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    ConcatBatch(Vec<Var>),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    NarrowBatch {
        x: Var,
        start: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    ElemMax {
        xs: Vec<Var>,
        winner: Vec<u32>,
    },
    LogSoftmax(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<(u64, usize), Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf that receives gradients (used by gradient checks).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.bound.insert(key, v);
        v
    }

    /// Cuts the tape: returns a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Div(a, b), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::MulScalar(a, s), rg)
    }

    /// Elementwise product with a constant tensor (masks, one-hot targets).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let out = self.value(a).zip_map(&c, |x, y| x * y);
        let rg = self.rg(a);
        self.push(out, Op::MulConst(a, c), rg)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.mul_scalar(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(out, Op::Ln(a), rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&tensors);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::Concat(parts.to_vec()), rg)
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).narrow_channels(start, len);
        let rg = self.rg(x);
        self.push(out, Op::Narrow { x, start }, rg)
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_leading(&tensors);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatBatch(parts.to_vec()), rg)
    }

    /// Entries `start..start + len` of the leading axis.
    pub fn narrow_batch(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        if start == 0 && len == t.shape()[0] {
            return x;
        }
        let out = t.narrow_leading(start, len);
        let rg = self.rg(x);
        self.push(out, Op::NarrowBatch { x, start }, rg)
    }

    /// Flat gather: `out[i] = x[idx[i]]`, reshaped to `shape`. Used for
    /// pixel permutations; the backward pass scatter-adds.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Var {
        let src = self.value(x).data();
        let data: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        let out = Tensor::from_vec(shape, data);
        let rg = self.rg(x);
        self.push(out, Op::Gather { x, idx }, rg)
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0usize; n * c * oh * ow];
        {
            let dst = out.data_mut();
            for p in 0..n * c {
                let base = p * h * w;
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut best = base + 2 * y * w + 2 * xo;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                        let o = (p * oh + y) * ow + xo;
                        dst[o] = src[best];
                        argmax[o] = best;
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::MaxPool2 { x, argmax }, rg)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        {
            let dst = out.data_mut();
            for p in 0..n * c {
                for y in 0..2 * h {
                    for xo in 0..2 * w {
                        dst[(p * 2 * h + y) * 2 * w + xo] = src[(p * h + y / 2) * w + xo / 2];
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Upsample2(x), rg)
    }

    /// Elementwise maximum across equally shaped nodes. Ties go to the
    /// earliest node.
    pub fn elem_max(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "elem_max of nothing");
        if xs.len() == 1 {
            return xs[0];
        }
        let mut out = self.value(xs[0]).clone();
        let mut winner = vec![0u32; out.numel()];
        for (i, &v) in xs.iter().enumerate().skip(1) {
            let t = self.value(v);
            assert_eq!(t.shape(), out.shape(), "elem_max shape mismatch");
            for ((o, w), &val) in out.data_mut().iter_mut().zip(&mut winner).zip(t.data()) {
                if val > *o {
                    *o = val;
                    *w = i as u32;
                }
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(
            out,
            Op::ElemMax {
                xs: xs.to_vec(),
                winner,
            },
            rg,
        )
    }

    /// Log-softmax over the channel axis of a 4-D tensor.
    pub fn log_softmax_channels(&mut self, x: Var) -> Var {
        let out = log_softmax_channels(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    /// Softmax over the channel axis of a 4-D tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let out = log_softmax_channels(self.value(x)).map(f64::exp);
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).reshape(shape);
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // only leaves that require gradients keep their entries
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Gradients { grads }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> &'a mut Tensor {
        let shape = self.value(v).shape();
        grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
    }

    fn take_slot(&self, grads: &mut [Option<Tensor>], v: Var) -> Tensor {
        grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl Fn(usize) -> f64) {
        if !self.rg(v) {
            return;
        }
        let slot = self.slot(grads, v);
        for (i, d) in slot.data_mut().iter_mut().enumerate() {
            *d += f(i);
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let mut gx = self.rg(*x).then(|| self.take_slot(grads, *x));
                let mut gw = self.rg(*w).then(|| self.take_slot(grads, *w));
                let mut gb = b.filter(|b| self.rg(*b)).map(|b| self.take_slot(grads, b));
                kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    gx.as_mut(),
                    gw.as_mut(),
                    gb.as_mut(),
                );
                if let Some(t) = gx {
                    grads[x.0] = Some(t);
                }
                if let Some(t) = gw {
                    grads[w.0] = Some(t);
                }
                if let (Some(t), Some(b)) = (gb, b) {
                    grads[b.0] = Some(t);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |k| gd[k]);
                self.accumulate(grads, *b, |k| gd[k]);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |k| gd[k]);
                self.accumulate(grads, *b, |k| -gd[k]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |k| gd[k] * bv[k]);
                self.accumulate(grads, *b, |k| gd[k] * av[k]);
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |k| gd[k] / bv[k]);
                self.accumulate(grads, *b, |k| -gd[k] * av[k] / (bv[k] * bv[k]));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, |k| gd[k]),
            Op::MulScalar(a, s) => self.accumulate(grads, *a, |k| gd[k] * s),
            Op::MulConst(a, c) => {
                let cd = c.data();
                self.accumulate(grads, *a, |k| gd[k] * cd[k]);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |k| gd[k] * y[k] * (1.0 - y[k]));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |k| gd[k] * (1.0 - y[k] * y[k]));
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                self.accumulate(grads, *a, |k| if xv[k] > 0.0 { gd[k] } else { 0.0 });
            }
            Op::Ln(a) => {
                let xv = self.value(*a).data();
                self.accumulate(grads, *a, |k| gd[k] / xv[k]);
            }
            Op::Concat(parts) => {
                let (n, total_c, h, w) = g.dims4();
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    if self.rg(p) {
                        let slot = self.slot(grads, p);
                        let sd = slot.data_mut();
                        for s in 0..n {
                            let src = &gd[(s * total_c + offset) * hw..(s * total_c + offset + c) * hw];
                            for (d, &v) in sd[s * c * hw..(s + 1) * c * hw].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Narrow { x, start } => {
                if self.rg(*x) {
                    let (n, len, h, w) = g.dims4();
                    let c = self.value(*x).shape()[1];
                    let hw = h * w;
                    let slot = self.slot(grads, *x);
                    let sd = slot.data_mut();
                    for s in 0..n {
                        let dst = &mut sd[(s * c + start) * hw..(s * c + start + len) * hw];
                        for (d, &v) in dst.iter_mut().zip(&gd[s * len * hw..(s + 1) * len * hw]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::ConcatBatch(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.rg(p) {
                        let src = &gd[offset..offset + n];
                        for (d, &v) in self.slot(grads, p).data_mut().iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                    offset += n;
                }
            }
            Op::Gather { x, idx } => {
                if self.rg(*x) {
                    let slot = self.slot(grads, *x);
                    let sd = slot.data_mut();
                    for (&i, &v) in idx.iter().zip(gd) {
                        sd[i] += v;
                    }
                }
            }
            Op::NarrowBatch { x, start } => {
                if self.rg(*x) {
                    let inner = gd.len() / g.shape()[0];
                    let slot = self.slot(grads, *x);
                    let dst = &mut slot.data_mut()[start * inner..start * inner + gd.len()];
                    for (d, &v) in dst.iter_mut().zip(gd) {
                        *d += v;
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.rg(*x) {
                    let slot = self.slot(grads, *x);
                    let sd = slot.data_mut();
                    for (o, &src) in argmax.iter().enumerate() {
                        sd[src] += gd[o];
                    }
                }
            }
            Op::Upsample2(x) => {
                if self.rg(*x) {
                    let (_, _, h, w) = self.value(*x).dims4();
                    let (oh, ow) = (2 * h, 2 * w);
                    let planes = self.value(*x).numel() / (h * w);
                    let slot = self.slot(grads, *x);
                    let sd = slot.data_mut();
                    for p in 0..planes {
                        for y in 0..oh {
                            for xo in 0..ow {
                                sd[(p * h + y / 2) * w + xo / 2] += gd[(p * oh + y) * ow + xo];
                            }
                        }
                    }
                }
            }
            Op::ElemMax { xs, winner } => {
                for (idx, &v) in xs.iter().enumerate() {
                    let idx = idx as u32;
                    self.accumulate(grads, v, |k| if winner[k] == idx { gd[k] } else { 0.0 });
                }
            }
            Op::LogSoftmax(x) => {
                if self.rg(*x) {
                    let (n, c, h, w) = g.dims4();
                    let hw = h * w;
                    let y = node.value.data();
                    let slot = self.slot(grads, *x);
                    let sd = slot.data_mut();
                    for s in 0..n {
                        for p in 0..hw {
                            let gsum: f64 = (0..c).map(|ch| gd[(s * c + ch) * hw + p]).sum();
                            for ch in 0..c {
                                let k = (s * c + ch) * hw + p;
                                sd[k] += gd[k] - y[k].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if self.rg(*x) {
                    let (n, c, h, w) = g.dims4();
                    let hw = h * w;
                    let y = node.value.data();
                    let slot = self.slot(grads, *x);
                    let sd = slot.data_mut();
                    for s in 0..n {
                        for p in 0..hw {
                            let dot: f64 = (0..c)
                                .map(|ch| {
                                    let k = (s * c + ch) * hw + p;
                                    gd[k] * y[k]
                                })
                                .sum();
                            for ch in 0..c {
                                let k = (s * c + ch) * hw + p;
                                sd[k] += y[k] * (gd[k] - dot);
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                self.accumulate(grads, *x, |_| g0);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1) as f64;
                let g0 = gd[0] / n;
                self.accumulate(grads, *x, |_| g0);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |k| gd[k]),
        }
    }

    /// Gradients for every parameter of `store`, zero for unused ones.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.bound
                    .get(&(store.uid(), id.index()))
                    .and_then(|&v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}

/// Numerically stable log-softmax over the channel axis of `[N, C, H, W]`.
pub fn log_softmax_channels(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let xd = x.data();
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    for s in 0..n {
        for p in 0..hw {
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(xd[(s * c + ch) * hw + p]);
            }
            let lse = m + (0..c)
                .map(|ch| (xd[(s * c + ch) * hw + p] - m).exp())
                .sum::<f64>()
                .ln();
            for ch in 0..c {
                let k = (s * c + ch) * hw + p;
                od[k] = xd[k] - lse;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn central_difference(
        f: impl Fn(&Tensor) -> f64,
        at: &Tensor,
        eps: f64,
    ) -> Tensor {
        let mut out = Tensor::zeros(at.shape());
        for i in 0..at.numel() {
            let mut plus = at.clone();
            plus.data_mut()[i] += eps;
            let mut minus = at.clone();
            minus.data_mut()[i] -= eps;
            out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        out
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        for (x, y) in a.data().iter().zip(b.data()) {
            let scale = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / scale < tol || (x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn conv_chain_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::randn(&[2, 2, 6, 6], 1.0, &mut rng);
        let w0 = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng);
        let b0 = Tensor::randn(&[3], 0.5, &mut rng);
        let w1 = Tensor::randn(&[2, 3, 3, 3], 0.5, &mut rng);

        let eval = |x: &Tensor, w: &Tensor| -> (f64, Tensor, Tensor) {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let wv = g.leaf(w.clone());
            let bv = g.input(b0.clone());
            let w1v = g.input(w1.clone());
            let h = g.conv2d(xv, wv, Some(bv), 2, 1);
            let h = g.tanh(h);
            let h = g.upsample2(h);
            let p = g.max_pool2(h);
            let y = g.conv2d(p, w1v, None, 1, 1);
            let ls = g.log_softmax_channels(y);
            let s = g.sigmoid(ls);
            let loss = g.mean(s);
            let grads = g.backward(loss);
            (
                g.value(loss).item(),
                grads.get(xv).unwrap().clone(),
                grads.get(wv).unwrap().clone(),
            )
        };
        let (_, gx, gw) = eval(&x0, &w0);
        let fx = central_difference(|x| eval(x, &w0).0, &x0, 1e-6);
        let fw = central_difference(|w| eval(&x0, w).0, &w0, 1e-6);
        assert_close(&gx, &fx, 1e-5);
        assert_close(&gw, &fw, 1e-5);
    }

    #[test]
    fn batch_concat_and_narrow_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let a0 = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng);
        let b0 = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng);
        let eval = |a: &Tensor, b: &Tensor| -> (f64, Tensor, Tensor) {
            let mut g = Graph::new();
            let av = g.leaf(a.clone());
            let bv = g.leaf(b.clone());
            let cat = g.concat_batch(&[av, bv, av]);
            let mid = g.narrow_batch(cat, 1, 3);
            let n = g.value(mid).numel();
            let idx: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).chain(0..5).collect();
            let mid = g.gather(mid, idx, &[n + 5]);
            let sq = g.mul(mid, mid);
            let t = g.tanh(sq);
            let loss = g.sum(t);
            let grads = g.backward(loss);
            (
                g.value(loss).item(),
                grads.get(av).unwrap().clone(),
                grads.get(bv).unwrap().clone(),
            )
        };
        let (_, ga, gb) = eval(&a0, &b0);
        assert_close(&ga, &central_difference(|a| eval(a, &b0).0, &a0, 1e-6), 1e-5);
        assert_close(&gb, &central_difference(|b| eval(&a0, b).0, &b0, 1e-6), 1e-5);
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a0 = Tensor::randn(&[1, 3, 2, 2], 1.0, &mut rng);
        let b0 = Tensor::randn(&[1, 3, 2, 2], 1.0, &mut rng).map(|v| v.abs() + 0.5);
        let eval = |a: &Tensor, b: &Tensor| -> (f64, Tensor, Tensor) {
            let mut g = Graph::new();
            let av = g.leaf(a.clone());
            let bv = g.leaf(b.clone());
            let m = g.mul(av, bv);
            let d = g.div(m, bv);
            let d = g.sub(d, av);
            let e = g.add(d, bv);
            let r = g.relu(e);
            let l = g.ln(bv);
            let mx = g.elem_max(&[r, l, av]);
            let cat = g.concat_channels(&[mx, av]);
            let nar = g.narrow_channels(cat, 2, 3);
            let sm = g.softmax_channels(nar);
            let c = g.mul_const(sm, Tensor::full(&[1, 3, 2, 2], 3.0));
            let c = g.one_minus(c);
            let c = g.reshape(c, &[12]);
            let loss = g.sum(c);
            let loss = g.mul(loss, loss);
            let grads = g.backward(loss);
            (
                g.value(loss).item(),
                grads.get(av).unwrap().clone(),
                grads.get(bv).unwrap().clone(),
            )
        };
        let (_, ga, gb) = eval(&a0, &b0);
        let fa = central_difference(|a| eval(a, &b0).0, &a0, 1e-6);
        let fb = central_difference(|b| eval(&a0, b).0, &b0, 1e-6);
        assert_close(&ga, &fa, 1e-5);
        assert_close(&gb, &fb, 1e-5);
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let p = g.mul(a, b);
        let grads = g.backward(p);
        assert_eq!(g.param_grads(&grads, &store)[0].item(), 6.0);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(2.0));
        let d = g.detach(a);
        let p = g.mul(a, d);
        let grads = g.backward(p);
        assert_eq!(grads.get(a).unwrap().item(), 2.0);
    }
}
