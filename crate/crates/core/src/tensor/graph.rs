use super::conv::{conv2d_backward, conv2d_forward, Conv2dGeometry};
use super::{broadcast_index_map, broadcast_shape, reduce_to_shape, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::resample::{bilinear_planes, bilinear_planes_backward, ResizeSpec};

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    DivOrZero(Var, Var),
    Affine { x: Var, scale: f64 },
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Max { x: Var, argmax: Vec<usize> },
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: Conv2dGeometry },
    Resize { x: Var, src: (usize, usize) },
    PadReplicate { x: Var, pad: usize },
    Concat { xs: Vec<Var>, axis: usize },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::DivOrZero(a, b) => vec![*a, *b],
            Op::Affine { x, .. }
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Log(x)
            | Op::Clamp { x, .. }
            | Op::Sum(x)
            | Op::Max { x, .. }
            | Op::Reshape(x)
            | Op::Softmax { x, .. }
            | Op::Resize { x, .. }
            | Op::PadReplicate { x, .. } => vec![*x],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Concat { xs, .. } => xs.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::DivOrZero(..) => "div",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Clamp { .. } => "clamp",
            Op::Sum(_) => "sum",
            Op::Max { .. } => "max",
            Op::Reshape(_) => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::Resize { .. } => "resize",
            Op::PadReplicate { .. } => "pad",
            Op::Concat { .. } => "concat",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Nodes are appended in execution order, so every input of a
/// node has a smaller index than the node itself.
///
/// A graph is single-use: build it, call [`Graph::backward`] once per loss,
/// then drop it. Model parameters are bound as the first leaves via
/// [`crate::params::ParamStore::graph`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_count: usize,
    param_log: Vec<ParamId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the leaves of a graph.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of a leaf; `None` if the leaf does not require grad or was
    /// not reached from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient of a model parameter bound on this graph.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.get(Var(id.index()))
    }
}

fn axes_valid(shape: &[usize], axes: &[usize]) -> Result<()> {
    if let Some(&a) = axes.iter().find(|&&a| a >= shape.len()) {
        return Err(Error::shape(format!("axis {a} out of range for shape {shape:?}")));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_count: 0,
            param_log: Vec::new(),
        }
    }

    pub(crate) fn with_params<'a>(params: impl Iterator<Item = &'a Tensor<T>>) -> Self {
        let mut g = Self::new();
        for p in params {
            g.push(p.clone(), Op::Leaf, true);
        }
        g.param_count = g.nodes.len();
        g
    }

    /// Variable bound to a model parameter. Every call is logged so callers
    /// can audit which parameters a sub-computation touched.
    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(id.index() < self.param_count, "parameter {id:?} not bound to this graph");
        self.param_log.push(id);
        Var(id.index())
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// All parameter lookups so far, in order.
    pub fn param_log(&self) -> &[ParamId] {
        &self.param_log
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Kinds of the recorded ops in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Input ids of each node; used to verify topological order.
    pub fn edges(&self) -> Vec<(usize, Vec<usize>)> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (i, n.op.inputs().iter().map(|v| v.0).collect()))
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op) -> Var {
        let rg = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb)?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            xa.iter().zip(xb).map(|(&p, &q)| f(p, q)).collect()
        } else {
            let ma = (sa != out).then(|| broadcast_index_map(&sa, &out));
            let mb = (sb != out).then(|| broadcast_index_map(&sb, &out));
            let at = |m: &Option<Vec<usize>>, i: usize| m.as_ref().map_or(i, |m| m[i]);
            (0..out.iter().product::<usize>())
                .map(|i| f(xa[at(&ma, i)], xb[at(&mb, i)]))
                .collect()
        };
        Tensor::new(out, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |p, q| p + q)?;
        Ok(self.record(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |p, q| p - q)?;
        Ok(self.record(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |p, q| p * q)?;
        Ok(self.record(t, Op::Mul(a, b)))
    }

    /// `a / b` elementwise, with `x / 0 = 0` and zero gradient where `b == 0`.
    pub fn div_or_zero(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |p, q| if q == T::zero() { T::zero() } else { p / q })?;
        Ok(self.record(t, Op::DivOrZero(a, b)))
    }

    /// Sum a list of same-shaped (or broadcastable) tensors left to right.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::shape("add_all of an empty list"))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::of(scale), T::of(shift));
        let t = self.value(x).map(|v| s * v + c);
        self.record(t, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.record(t, Op::Relu(x))
    }

    /// Logistic function, kept strictly inside (0, 1) in the working precision.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let hi = T::one() - T::epsilon() / T::of(2.0);
        let lo = T::min_positive_value();
        let t = self.value(x).map(|v| {
            let s = if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            };
            if s.is_nan() {
                s
            } else {
                s.max(lo).min(hi)
            }
        });
        self.record(t, Op::Sigmoid(x))
    }

    /// Natural log. Every input value must be strictly positive; clamp first.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|v| **v <= T::zero() || v.is_nan()) {
            return Err(Error::InvalidInput(format!(
                "log of non-positive value {v}; clamp the argument first"
            )));
        }
        let t = self.value(x).map(|v| v.ln());
        Ok(self.record(t, Op::Log(x)))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::of(lo), T::of(hi));
        // NaN passes through so divergence stays visible downstream.
        let t = self.value(x).map(|v| if v.is_nan() { v } else { v.max(l).min(h) });
        self.record(t, Op::Clamp { x, lo, hi })
    }

    fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
        shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect()
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        axes_valid(&shape, axes)?;
        let out = Self::reduced_shape(&shape, axes);
        let data = reduce_to_shape(self.value(x).data(), &shape, &out);
        let t = Tensor::new(out, data)?;
        Ok(self.record(t, Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let count: usize = axes.iter().filter_map(|&a| shape.get(a)).product();
        let s = self.sum(x, axes)?;
        Ok(self.scale(s, 1.0 / count as f64))
    }

    /// Sum of every element, as a one-element tensor of shape `[1]`.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let s = self.sum(x, &axes)?;
        self.reshape(s, [1])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Maximum over `axes`, keeping them as size-1 dimensions. Ties resolve to
    /// the first element in row-major order.
    pub fn max(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        axes_valid(&shape, axes)?;
        let out = Self::reduced_shape(&shape, axes);
        let numel: usize = out.iter().product();
        let map = broadcast_index_map(&out, &shape);
        let xs = self.value(x).data();
        let mut best = vec![T::neg_infinity(); numel];
        let mut argmax = vec![usize::MAX; numel];
        for (i, (&o, &v)) in map.iter().zip(xs).enumerate() {
            if argmax[o] == usize::MAX || v > best[o] {
                best[o] = v;
                argmax[o] = i;
            }
        }
        let t = Tensor::new(out, best)?;
        Ok(self.record(t, Op::Max { x, argmax }))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.record(t, Op::Reshape(x)))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        axes_valid(&shape, &[axis])?;
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |k: usize| base + k * inner;
                let m = (0..len).map(|k| xs[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..len {
                    let e = (xs[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    total = total + e;
                }
                for k in 0..len {
                    out[idx(k)] = out[idx(k)] / total;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.record(t, Op::Softmax { x, axis }))
    }

    /// 2-d convolution with zero padding. `x: [N,Cin,H,W]`, `w: [Cout,Cin,kH,kW]`, `b: [Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = Conv2dGeometry::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.out_channels] {
                return Err(Error::shape(format!(
                    "conv2d bias must be [{}], got {:?}",
                    geom.out_channels,
                    self.shape(b)
                )));
            }
        }
        let data = conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(geom.out_shape().to_vec(), data)?;
        Ok(self.record(t, Op::Conv2d { x, w, b, geom }))
    }

    /// Bilinear resize of the two trailing axes (see [`crate::resample`]).
    pub fn resize(&mut self, x: Var, spec: ResizeSpec) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(format!("resize needs at least 2 dims, got {shape:?}")));
        }
        let n = shape.len();
        let src = (shape[n - 2], shape[n - 1]);
        if src == (spec.target_h, spec.target_w) {
            return Ok(x);
        }
        let planes = self.value(x).numel() / (src.0 * src.1);
        let data = bilinear_planes(self.value(x).data(), planes, src, (spec.target_h, spec.target_w));
        let mut out = shape;
        out[n - 2] = spec.target_h;
        out[n - 1] = spec.target_w;
        let t = Tensor::new(out, data)?;
        Ok(self.record(t, Op::Resize { x, src }))
    }

    /// Pad the spatial axes of `[N,C,H,W]` by repeating border pixels.
    pub fn pad_replicate(&mut self, x: Var, pad: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if pad == 0 {
            return Ok(x);
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ph * pw);
        for p in 0..n * c {
            let plane = &xs[p * h * w..(p + 1) * h * w];
            for y in 0..ph {
                let sy = y.saturating_sub(pad).min(h - 1);
                for xx in 0..pw {
                    let sx = xx.saturating_sub(pad).min(w - 1);
                    out.push(plane[sy * w + sx]);
                }
            }
        }
        let t = Tensor::new([n, c, ph, pw], out)?;
        Ok(self.record(t, Op::PadReplicate { x, pad }))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::shape("concat of an empty list"))?)
            .to_vec();
        axes_valid(&first, &[axis])?;
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!("concat: {s:?} incompatible with {first:?}")));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * out_shape[axis] * inner);
        for o in 0..outer {
            for &v in xs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(out_shape, data)?;
        Ok(self.record(t, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Reverse pass from a one-element tensor. Visits every node at most once,
    /// in reverse recording order. Only leaf gradients are kept.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a one-element loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Grads {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
                .collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out_shape = node.value.shape();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                if self.wants(*a) {
                    self.accumulate(grads, *a, reduce_to_shape(g, out_shape, self.shape(*a)));
                }
                if self.wants(*b) {
                    let mut gb = reduce_to_shape(g, out_shape, self.shape(*b));
                    if negate {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) | Op::DivOrZero(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let index = |s: &[usize]| (s != out_shape).then(|| broadcast_index_map(s, out_shape));
                let (ma, mb) = (index(sa), index(sb));
                let at = |m: &Option<Vec<usize>>, i: usize| m.as_ref().map_or(i, |m| m[i]);
                let is_div = matches!(node.op, Op::DivOrZero(..));
                if self.wants(*a) {
                    let full: Vec<T> = (0..g.len())
                        .map(|i| {
                            let q = xb[at(&mb, i)];
                            if !is_div {
                                g[i] * q
                            } else if q == T::zero() {
                                T::zero()
                            } else {
                                g[i] / q
                            }
                        })
                        .collect();
                    self.accumulate(grads, *a, reduce_to_shape(&full, out_shape, sa));
                }
                if self.wants(*b) {
                    let full: Vec<T> = (0..g.len())
                        .map(|i| {
                            let (p, q) = (xa[at(&ma, i)], xb[at(&mb, i)]);
                            if !is_div {
                                g[i] * p
                            } else if q == T::zero() {
                                T::zero()
                            } else {
                                -g[i] * p / (q * q)
                            }
                        })
                        .collect();
                    self.accumulate(grads, *b, reduce_to_shape(&full, out_shape, sb));
                }
            }
            Op::Affine { x, scale } => {
                let s = T::of(*scale);
                self.accumulate(grads, *x, g.iter().map(|&v| v * s).collect());
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(xs)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s)).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Log(x) => {
                let xs = self.value(*x).data();
                let gx = g.iter().zip(xs).map(|(&gv, &xv)| gv / xv).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Clamp { x, lo, hi } => {
                let (l, h) = (T::of(*lo), T::of(*hi));
                let xs = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(xs)
                    .map(|(&gv, &xv)| if xv >= l && xv <= h { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let map = broadcast_index_map(out_shape, self.shape(*x));
                self.accumulate(grads, *x, map.iter().map(|&o| g[o]).collect());
            }
            Op::Max { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (o, &i) in argmax.iter().enumerate() {
                    gx[i] = gx[i] + g[o];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Softmax { x, axis } => {
                let len = out_shape[*axis];
                let inner: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..*axis].iter().product();
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: T = (0..len).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
                        for k in 0..len {
                            let j = base + k * inner;
                            gx[j] = y[j] * (g[j] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Conv2d { x, w, b, geom } => {
                let want = (self.wants(*x), self.wants(*w), b.map(|b| self.wants(b)).unwrap_or(false));
                let out = conv2d_backward(geom, self.value(*x).data(), self.value(*w).data(), g, want);
                if let Some(dx) = out.input {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = out.kernel {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, out.bias) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Resize { x, src } => {
                let n = out_shape.len();
                let dst = (out_shape[n - 2], out_shape[n - 1]);
                let planes = g.len() / (dst.0 * dst.1);
                self.accumulate(grads, *x, bilinear_planes_backward(g, planes, *src, dst));
            }
            Op::PadReplicate { x, pad } => {
                let [n, c, h, w] = self.value(*x).dims4().expect("4-d");
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                let mut gx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for yy in 0..ph {
                        let sy = yy.saturating_sub(*pad).min(h - 1);
                        for xx in 0..pw {
                            let sx = xx.saturating_sub(*pad).min(w - 1);
                            let d = &mut gx[p * h * w + sy * w + sx];
                            *d = *d + g[p * ph * pw + yy * pw + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { xs, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[*axis] * inner;
                let mut offset = 0;
                for &v in xs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.wants(v) {
                        let mut gv = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            gv.extend_from_slice(&g[o * row + offset..o * row + offset + chunk]);
                        }
                        self.accumulate(grads, v, gv);
                    }
                    offset += chunk;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_mean() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[-2.0, 3.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 3.0]);
        let v = g.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let m = g.mean_all(v).unwrap();
        assert_eq!(g.value(m).item(), 2.5);
    }

    #[test]
    fn sigmoid_values_and_derivative() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[1], &[0.0]));
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).item(), 0.5);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 0.25);

        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::scalar(100.0));
        let s = g.sigmoid(x);
        let v = g.value(s).item();
        assert!(v < 1.0 && v > 0.99);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().item().is_finite());
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[4], &[3.0; 4]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.25; 4]);

        let x = g.constant(t(&[2], &[1000.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300 && v.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_over_inner_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([2, 3, 2], |i| (i as f64 * 0.7).cos()));
        let s = g.softmax(x, 1).unwrap();
        let v = g.value(s).data();
        for o in 0..2 {
            for i in 0..2 {
                let total: f64 = (0..3).map(|k| v[o * 6 + k * 2 + i]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn broadcast_mul_shape() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::full([1, 3, 1, 1], 2.0));
        let b = g.constant(Tensor::full([1, 3, 4, 5], 1.5));
        let c = g.mul(a, b).unwrap();
        assert_eq!(g.shape(c), &[1, 3, 4, 5]);
        assert!(g.value(c).data().iter().all(|&v| v == 3.0));
        let bad = g.constant(Tensor::full([2, 2, 1, 1], 1.0));
        assert!(matches!(g.mul(bad, b), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[0.5, 0.0]));
        assert!(g.log(x).is_err());
        let c = g.clamp(x, 1e-7, 1.0 - 1e-7);
        assert!(g.log(c).is_ok());
    }

    #[test]
    fn conv_all_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full([1, 1, 5, 5], 1.0));
        let w = g.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let b = g.constant(Tensor::zeros([1]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_identity_kernel_is_exact() {
        let mut g = Graph::<f64>::new();
        let input = Tensor::from_fn([1, 3, 4, 4], |i| (i as f64 * 1.37).sin() * 1e3);
        let x = g.constant(input.clone());
        let w = g.constant(Tensor::from_fn([3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 }));
        let b = g.constant(Tensor::zeros([3]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y), &input);
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros([1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn max_and_concat() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[1, 2, 1, 2], &[1.0, 5.0, 3.0, 2.0]));
        let m = g.max(x, &[1]).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 5.0]);
        let c = g.concat(&[x, m], 1).unwrap();
        assert_eq!(g.shape(c), &[1, 3, 1, 2]);
        assert_eq!(g.value(c).data(), &[1.0, 5.0, 3.0, 2.0, 3.0, 5.0]);
        let s = g.sum_all(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0, 2.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn topological_order() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[3], &[1.0, 2.0, 3.0]));
        let a = g.relu(x);
        let b = g.mul(a, x).unwrap();
        let _ = g.sum_all(b).unwrap();
        for (i, inputs) in g.edges() {
            assert!(inputs.iter().all(|&j| j < i));
        }
    }

    #[test]
    fn div_or_zero_guards() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(t(&[2], &[1.0, 2.0]));
        let b = g.variable(t(&[2], &[0.0, 4.0]));
        let d = g.div_or_zero(a, b).unwrap();
        assert_eq!(g.value(d).data(), &[0.0, 0.5]);
        let s = g.sum_all(d).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 0.25]);
        assert_eq!(grads.get(b).unwrap().data(), &[0.0, -2.0 / 16.0]);
    }
}
