use std::collections::HashMap;

use super::conv::{col2im_add, im2col, ConvGeom};
use super::float::{gemm, MatMut, MatRef};
use super::{Float, Tensor};
use crate::nn::ParamStore;

const NORM_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Reshape(Var),
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ChannelBias { x: Var, b: Var },
    Repeat { x: Var, times: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    Upsample2x(Var),
    AvgPool2x(Var),
    Concat1(Vec<Var>),
    Sum(Var),
    Mean(Var),
    L2Normalize { x: Var, norms: Vec<T> },
    RowDot(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run tape. Every op evaluates eagerly and records enough to
/// run reverse-mode differentiation from a scalar.
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    trainable: Vec<String>,
    params: HashMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`]; only leaves keep theirs.
pub struct Grads<T> {
    inner: Vec<Option<Vec<T>>>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.inner.get(v.0).and_then(|g| g.as_deref())
    }
}

fn mat_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (1, shape[0], shape[1]),
        3 => (shape[0], shape[1], shape[2]),
        _ => panic!("matmul operand must be rank 2 or 3, got {shape:?}"),
    }
}

fn slot<T: Float>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    /// A graph with no trainable parameters (inference, or frozen use).
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), trainable: Vec::new(), params: HashMap::new() }
    }

    /// Parameters whose names start with one of `prefixes` require gradients.
    pub fn with_trainable(prefixes: &[&str]) -> Self {
        Graph {
            nodes: Vec::new(),
            trainable: prefixes.iter().map(|p| p.to_string()).collect(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that requires a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Bind a named parameter; repeated binds of one name share a leaf.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let t = store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
            .clone();
        let trainable = self.trainable.iter().any(|p| name.starts_with(p.as_str()));
        let v = if trainable { self.variable(t) } else { self.input(t) };
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(t, op, &[a, b])
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(a).map(f);
        self.push(t, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        self.unary(a, |x| if x > T::zero() { x } else { x * s }, Op::LeakyRelu(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self
            .value(a)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(t, Op::Reshape(a), &[a])
    }

    /// `op(a) · op(b)` for rank-2 or batched rank-3 operands; a batch of one
    /// broadcasts against the other operand.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (ba, ra, ca) = mat_dims(&sa);
        let (bb, rb, cb) = mat_dims(&sb);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(k, k2, "matmul inner dims {sa:?} x {sb:?} (ta={ta}, tb={tb})");
        assert!(ba == bb || ba == 1 || bb == 1, "matmul batch {ba} vs {bb}");
        let batch = ba.max(bb);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let ai = if ba == 1 { 0 } else { i };
                let bi = if bb == 1 { 0 } else { i };
                gemm(
                    T::one(),
                    MatRef::row_major(&da[ai * ra * ca..(ai + 1) * ra * ca], ra, ca, ta),
                    MatRef::row_major(&db[bi * rb * cb..(bi + 1) * rb * cb], rb, cb, tb),
                    T::zero(),
                    MatMut::row_major(&mut out[i * m * n..(i + 1) * m * n], m, n, false),
                );
            }
        }
        let shape = if sa.len() == 2 && sb.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        self.push(Tensor::from_parts(shape, out), Op::Matmul { a, b, ta, tb }, &[a, b])
    }

    /// 2-D convolution without bias. `x`: `[B, C, H, W]`, `w`: `[O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(sx.len(), 4, "conv2d input must be NCHW");
        assert_eq!(sw.len(), 4, "conv2d weight must be OCkk");
        assert_eq!(sx[1], sw[1], "conv2d channel mismatch {sx:?} vs {sw:?}");
        assert_eq!(sw[2], sw[3], "square kernels only");
        let geom = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel: sw[2],
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw();
        let (batch, out_ch) = (sx[0], sw[0]);
        let (rows, hw, in_len) = (geom.col_rows(), ho * wo, sx[1] * sx[2] * sx[3]);
        let mut out = vec![T::zero(); batch * out_ch * hw];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * hw] };
        {
            let (dx, dw) = (self.value(x).data(), self.value(w).data());
            for b in 0..batch {
                let xb = &dx[b * in_len..(b + 1) * in_len];
                let cm: &[T] = if geom.is_pointwise() {
                    xb
                } else {
                    im2col(xb, &geom, &mut cols);
                    &cols
                };
                gemm(
                    T::one(),
                    MatRef::row_major(dw, out_ch, rows, false),
                    MatRef::row_major(cm, rows, hw, false),
                    T::zero(),
                    MatMut::row_major(&mut out[b * out_ch * hw..(b + 1) * out_ch * hw], out_ch, hw, false),
                );
            }
        }
        let t = Tensor::from_parts(vec![batch, out_ch, ho, wo], out);
        self.push(t, Op::Conv2d { x, w, geom }, &[x, w])
    }

    /// Adds `b[c]` to every element of channel `c` of `x: [B, C, ...]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Var {
        let sx = self.shape(x).to_vec();
        let c = sx[1];
        assert_eq!(self.value(b).numel(), c, "bias length");
        let inner: usize = sx[2..].iter().product();
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let bc = bias[i % c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        self.push(Tensor::from_parts(sx, data), Op::ChannelBias { x, b }, &[x, b])
    }

    /// Tile `x` `times` times along a new leading axis.
    pub fn repeat(&mut self, x: Var, times: usize) -> Var {
        let v = self.value(x);
        let mut shape = vec![times];
        shape.extend_from_slice(v.shape());
        let mut data = Vec::with_capacity(times * v.numel());
        for _ in 0..times {
            data.extend_from_slice(v.data());
        }
        self.push(Tensor::from_parts(shape, data), Op::Repeat { x, times }, &[x])
    }

    /// Group normalization over `[B, C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let sx = self.shape(x).to_vec();
        let (batch, c) = (sx[0], sx[1]);
        assert_eq!(c % groups, 0, "channels {c} not divisible by groups {groups}");
        let inner: usize = sx[2..].iter().product();
        let glen = c / groups * inner;
        let eps = T::lit(NORM_EPS);
        let (xd, gd, bd) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xd.len()];
        let mut mean = Vec::with_capacity(batch * groups);
        let mut rstd = Vec::with_capacity(batch * groups);
        let n = T::lit(glen as f64);
        for bg in 0..batch * groups {
            let seg = &xd[bg * glen..(bg + 1) * glen];
            let mu = seg.iter().copied().sum::<T>() / n;
            let var = seg.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            let first_ch = (bg % groups) * (c / groups);
            let dst = &mut out[bg * glen..(bg + 1) * glen];
            for (k, (src, o)) in seg.chunks(inner).zip(dst.chunks_mut(inner)).enumerate() {
                let ch = first_ch + k;
                let (a, b) = (r * gd[ch], bd[ch] - mu * r * gd[ch]);
                for (o, &v) in o.iter_mut().zip(src) {
                    *o = v * a + b;
                }
            }
            mean.push(mu);
            rstd.push(r);
        }
        let t = Tensor::from_parts(sx, out);
        self.push(t, Op::GroupNorm { x, gamma, beta, groups, mean, rstd }, &[x, gamma, beta])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let d = *v.shape().last().unwrap();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                s += *e;
            }
            row.iter_mut().for_each(|e| *e = *e / s);
        }
        let shape = v.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Softmax(x), &[x])
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (h, w) = (s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len() * 4];
        for (p, plane) in src.chunks(h * w).enumerate() {
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::from_parts(vec![s[0], s[1], 2 * h, 2 * w], out);
        self.push(t, Op::Upsample2x(x), &[x])
    }

    /// 2x2 average pooling of `[B, C, H, W]` (H, W even).
    pub fn avg_pool2x(&mut self, x: Var) -> Var {
        let t = avg_pool2x(self.value(x));
        self.push(t, Op::AvgPool2x(x), &[x])
    }

    /// Concatenate along axis 1. Leading and trailing axes must agree.
    pub fn concat1(&mut self, parts: &[Var]) -> Var {
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        let batch = shapes[0][0];
        let inner: usize = shapes[0][2..].iter().product();
        for s in &shapes {
            assert_eq!(s[0], batch, "concat1 batch mismatch");
            assert_eq!(s[2..], shapes[0][2..], "concat1 trailing mismatch");
        }
        let total: usize = shapes.iter().map(|s| s[1]).sum();
        let mut out = Vec::with_capacity(batch * total * inner);
        for b in 0..batch {
            for (p, s) in parts.iter().zip(&shapes) {
                let len = s[1] * inner;
                out.extend_from_slice(&self.value(*p).data()[b * len..(b + 1) * len]);
            }
        }
        let mut shape = shapes[0].clone();
        shape[1] = total;
        self.push(Tensor::from_parts(shape, out), Op::Concat1(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Unit-normalize each row of `[R, D]`.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let d = *v.shape().last().unwrap();
        let eps = T::lit(L2_EPS);
        let mut data = v.data().to_vec();
        let mut norms = Vec::with_capacity(data.len() / d);
        for row in data.chunks_mut(d) {
            let n = row.iter().map(|&e| e * e).sum::<T>().sqrt().max(eps);
            row.iter_mut().for_each(|e| *e = *e / n);
            norms.push(n);
        }
        let shape = v.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::L2Normalize { x, norms }, &[x])
    }

    /// Row-wise dot product of two `[R, D]` tensors, giving `[R]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "row_dot shape mismatch");
        let d = *va.shape().last().unwrap();
        let data: Vec<T> = va
            .data()
            .chunks(d)
            .zip(vb.data().chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum())
            .collect();
        let r = data.len();
        self.push(Tensor::from_parts(vec![r], data), Op::RowDot(a, b), &[a, b])
    }

    /// Mean softmax cross-entropy of `[R, K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let v = self.value(logits);
        let k = v.shape()[1];
        assert_eq!(v.shape()[0], labels.len(), "one label per row");
        let mut probs = v.data().to_vec();
        let mut loss = T::zero();
        for (row, &y) in probs.chunks_mut(k).zip(labels) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                s += *e;
            }
            row.iter_mut().for_each(|e| *e = *e / s);
            loss -= row[y].max(T::min_positive_value()).ln();
        }
        loss = loss / T::lit(labels.len() as f64);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push(Tensor::scalar(loss), op, &[logits])
    }

    /// Reverse-mode sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(id, &g, &mut grads);
        }
        Grads { inner: grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        let s = slot(grads, v, g.len());
                        s.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    let s = slot(grads, *a, g.len());
                    s.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
                if self.needs(*b) {
                    let s = slot(grads, *b, g.len());
                    s.iter_mut().zip(g).for_each(|(d, &x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let other = self.value(*b).data();
                    let s = slot(grads, *a, g.len());
                    for ((d, &x), &o) in s.iter_mut().zip(g).zip(other) {
                        *d += x * o;
                    }
                }
                if self.needs(*b) {
                    let other = self.value(*a).data();
                    let s = slot(grads, *b, g.len());
                    for ((d, &x), &o) in s.iter_mut().zip(g).zip(other) {
                        *d += x * o;
                    }
                }
            }
            Op::Scale(a, k) => {
                let s = slot(grads, *a, g.len());
                s.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *k);
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let s = slot(grads, *a, g.len());
                s.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
            Op::Abs(a) => {
                let inp = self.value(*a).data();
                let s = slot(grads, *a, g.len());
                for ((d, &x), &i) in s.iter_mut().zip(g).zip(inp) {
                    if i > T::zero() {
                        *d += x;
                    } else if i < T::zero() {
                        *d -= x;
                    }
                }
            }
            Op::Relu(a) => {
                let inp = self.value(*a).data();
                let s = slot(grads, *a, g.len());
                for ((d, &x), &i) in s.iter_mut().zip(g).zip(inp) {
                    if i > T::zero() {
                        *d += x;
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let inp = self.value(*a).data();
                let s = slot(grads, *a, g.len());
                for ((d, &x), &i) in s.iter_mut().zip(g).zip(inp) {
                    *d += if i > T::zero() { x } else { x * *slope };
                }
            }
            Op::Tanh(a) => {
                let s = slot(grads, *a, g.len());
                for ((d, &x), &y) in s.iter_mut().zip(g).zip(out) {
                    *d += x * (T::one() - y * y);
                }
            }
            Op::Matmul { a, b, ta, tb } => self.backprop_matmul(*a, *b, *ta, *tb, g, grads),
            Op::Conv2d { x, w, geom } => self.backprop_conv(*x, *w, geom, g, grads),
            Op::ChannelBias { x, b } => {
                if self.needs(*x) {
                    let s = slot(grads, *x, g.len());
                    s.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if self.needs(*b) {
                    let shape = node.value.shape();
                    let c = shape[1];
                    let inner: usize = shape[2..].iter().product();
                    let s = slot(grads, *b, c);
                    for (i, chunk) in g.chunks(inner).enumerate() {
                        s[i % c] += chunk.iter().copied().sum::<T>();
                    }
                }
            }
            Op::Repeat { x, times } => {
                let len = g.len() / times;
                let s = slot(grads, *x, len);
                for chunk in g.chunks(len) {
                    s.iter_mut().zip(chunk).for_each(|(d, &v)| *d += v);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                self.backprop_group_norm(*x, *gamma, *beta, *groups, mean, rstd, g, grads)
            }
            Op::Softmax(a) => {
                let d = *node.value.shape().last().unwrap();
                let s = slot(grads, *a, g.len());
                for ((ds, gr), y) in s.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                    let dot: T = gr.iter().zip(y).map(|(&p, &q)| p * q).sum();
                    for ((o, &gi), &yi) in ds.iter_mut().zip(gr).zip(y) {
                        *o += yi * (gi - dot);
                    }
                }
            }
            Op::Upsample2x(a) => {
                let s_in = self.shape(*a);
                let (h, w) = (s_in[2], s_in[3]);
                let n = self.value(*a).numel();
                let s = slot(grads, *a, n);
                for (p, plane) in s.chunks_mut(h * w).enumerate() {
                    let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            plane[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
            }
            Op::AvgPool2x(a) => {
                let s_in = self.shape(*a);
                let (h, w) = (s_in[2], s_in[3]);
                let (ho, wo) = (h / 2, w / 2);
                let n = self.value(*a).numel();
                let q = T::lit(0.25);
                let s = slot(grads, *a, n);
                for (p, plane) in s.chunks_mut(h * w).enumerate() {
                    let src = &g[p * ho * wo..(p + 1) * ho * wo];
                    for y in 0..ho * 2 {
                        for xx in 0..wo * 2 {
                            plane[y * w + xx] += src[(y / 2) * wo + xx / 2] * q;
                        }
                    }
                }
            }
            Op::Concat1(parts) => {
                let shape = node.value.shape();
                let batch = shape[0];
                let inner: usize = shape[2..].iter().product();
                let row = shape[1] * inner;
                let mut off = 0;
                for p in parts {
                    let len = self.shape(*p)[1] * inner;
                    if self.needs(*p) {
                        let s = slot(grads, *p, batch * len);
                        for b in 0..batch {
                            let src = &g[b * row + off..b * row + off + len];
                            s[b * len..(b + 1) * len]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &v)| *d += v);
                        }
                    }
                    off += len;
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                let s = slot(grads, *a, n);
                s.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let gv = g[0] / T::lit(n as f64);
                let s = slot(grads, *a, n);
                s.iter_mut().for_each(|d| *d += gv);
            }
            Op::L2Normalize { x, norms } => {
                let d = *node.value.shape().last().unwrap();
                let s = slot(grads, *x, g.len());
                for (((ds, gr), y), &n) in
                    s.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)).zip(norms)
                {
                    let dot: T = gr.iter().zip(y).map(|(&p, &q)| p * q).sum();
                    for ((o, &gi), &yi) in ds.iter_mut().zip(gr).zip(y) {
                        *o += (gi - yi * dot) / n;
                    }
                }
            }
            Op::RowDot(a, b) => {
                let d = *self.shape(*a).last().unwrap();
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.needs(v) {
                        let od = self.value(other).data();
                        let s = slot(grads, v, od.len());
                        for ((ds, os), &gr) in s.chunks_mut(d).zip(od.chunks(d)).zip(g) {
                            ds.iter_mut().zip(os).for_each(|(o, &x)| *o += gr * x);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / T::lit(labels.len() as f64);
                let s = slot(grads, *logits, probs.len());
                for ((ds, p), &y) in s.chunks_mut(k).zip(probs.chunks(k)).zip(labels) {
                    for (j, (o, &pj)) in ds.iter_mut().zip(p).enumerate() {
                        let t = if j == y { T::one() } else { T::zero() };
                        *o += (pj - t) * scale;
                    }
                }
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, ta: bool, tb: bool, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (ba, ra, ca) = mat_dims(self.shape(a));
        let (bb, rb, cb) = mat_dims(self.shape(b));
        let (m, _k) = if ta { (ca, ra) } else { (ra, ca) };
        let n = if tb { rb } else { cb };
        let batch = ba.max(bb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        if self.needs(a) {
            let s = slot(grads, a, ba * ra * ca);
            for i in 0..batch {
                let ai = if ba == 1 { 0 } else { i };
                let bi = if bb == 1 { 0 } else { i };
                gemm(
                    T::one(),
                    MatRef::row_major(&g[i * m * n..(i + 1) * m * n], m, n, false),
                    MatRef::row_major(&db[bi * rb * cb..(bi + 1) * rb * cb], rb, cb, tb).t(),
                    T::one(),
                    MatMut::row_major(&mut s[ai * ra * ca..(ai + 1) * ra * ca], ra, ca, ta),
                );
            }
        }
        if self.needs(b) {
            let s = slot(grads, b, bb * rb * cb);
            for i in 0..batch {
                let ai = if ba == 1 { 0 } else { i };
                let bi = if bb == 1 { 0 } else { i };
                gemm(
                    T::one(),
                    MatRef::row_major(&da[ai * ra * ca..(ai + 1) * ra * ca], ra, ca, ta).t(),
                    MatRef::row_major(&g[i * m * n..(i + 1) * m * n], m, n, false),
                    T::one(),
                    MatMut::row_major(&mut s[bi * rb * cb..(bi + 1) * rb * cb], rb, cb, tb),
                );
            }
        }
    }

    fn backprop_conv(&self, x: Var, w: Var, geom: &ConvGeom, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let sx = self.shape(x);
        let out_ch = self.shape(w)[0];
        let batch = sx[0];
        let in_len = sx[1] * sx[2] * sx[3];
        let (ho, wo) = geom.out_hw();
        let (rows, hw) = (geom.col_rows(), ho * wo);
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let pointwise = geom.is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); rows * hw] };
        if self.needs(w) {
            let s = slot(grads, w, out_ch * rows);
            for b in 0..batch {
                let xb = &xd[b * in_len..(b + 1) * in_len];
                let cm: &[T] = if pointwise {
                    xb
                } else {
                    im2col(xb, geom, &mut cols);
                    &cols
                };
                gemm(
                    T::one(),
                    MatRef::row_major(&g[b * out_ch * hw..(b + 1) * out_ch * hw], out_ch, hw, false),
                    MatRef::row_major(cm, rows, hw, true),
                    T::one(),
                    MatMut::row_major(s, out_ch, rows, false),
                );
            }
        }
        if self.needs(x) {
            let s = slot(grads, x, batch * in_len);
            for b in 0..batch {
                let gb = &g[b * out_ch * hw..(b + 1) * out_ch * hw];
                let sb = &mut s[b * in_len..(b + 1) * in_len];
                if pointwise {
                    gemm(
                        T::one(),
                        MatRef::row_major(wd, out_ch, rows, true),
                        MatRef::row_major(gb, out_ch, hw, false),
                        T::one(),
                        MatMut::row_major(sb, rows, hw, false),
                    );
                } else {
                    gemm(
                        T::one(),
                        MatRef::row_major(wd, out_ch, rows, true),
                        MatRef::row_major(gb, out_ch, hw, false),
                        T::zero(),
                        MatMut::row_major(&mut cols, rows, hw, false),
                    );
                    col2im_add(&cols, geom, sb);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_group_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: &[T],
        rstd: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let sx = self.shape(x);
        let c = sx[1];
        let inner: usize = sx[2..].iter().product();
        let cpg = c / groups;
        let glen = cpg * inner;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let nb = mean.len();
        if self.needs(gamma) || self.needs(beta) {
            let mut dg = vec![T::zero(); c];
            let mut db = vec![T::zero(); c];
            for bg in 0..nb {
                let first = (bg % groups) * cpg;
                let (mu, r) = (mean[bg], rstd[bg]);
                for k in 0..cpg {
                    let off = bg * glen + k * inner;
                    let (xs, gs) = (&xd[off..off + inner], &g[off..off + inner]);
                    let (mut sg, mut sgx) = (T::zero(), T::zero());
                    for (&xv, &gv) in xs.iter().zip(gs) {
                        sg += gv;
                        sgx += gv * xv;
                    }
                    dg[first + k] += (sgx - mu * sg) * r;
                    db[first + k] += sg;
                }
            }
            if self.needs(gamma) {
                slot(grads, gamma, c).iter_mut().zip(&dg).for_each(|(d, &v)| *d += v);
            }
            if self.needs(beta) {
                slot(grads, beta, c).iter_mut().zip(&db).for_each(|(d, &v)| *d += v);
            }
        }
        if self.needs(x) {
            let s = slot(grads, x, xd.len());
            let n = T::lit(glen as f64);
            for bg in 0..nb {
                let first = (bg % groups) * cpg;
                let (mu, r) = (mean[bg], rstd[bg]);
                // m1 = mean(dxhat), m2 = mean(dxhat * xhat)
                let (mut m1, mut m2) = (T::zero(), T::zero());
                for k in 0..cpg {
                    let off = bg * glen + k * inner;
                    let (mut sg, mut sgx) = (T::zero(), T::zero());
                    for (&xv, &gv) in xd[off..off + inner].iter().zip(&g[off..off + inner]) {
                        sg += gv;
                        sgx += gv * xv;
                    }
                    m1 += sg * gd[first + k];
                    m2 += (sgx - mu * sg) * r * gd[first + k];
                }
                m1 = m1 / n;
                m2 = m2 / n;
                for k in 0..cpg {
                    let off = bg * glen + k * inner;
                    let gk = gd[first + k];
                    let dst = &mut s[off..off + inner];
                    for ((d, &xv), &gv) in dst.iter_mut().zip(&xd[off..off + inner]).zip(&g[off..off + inner]) {
                        *d += r * (gv * gk - m1 - (xv - mu) * r * m2);
                    }
                }
            }
        }
    }

    /// Gradients of every trainable parameter bound on this graph, by name.
    pub fn param_grads(&self, grads: &Grads<T>) -> Vec<(String, Vec<T>)> {
        let mut out: Vec<(String, Vec<T>)> = self
            .params
            .iter()
            .filter(|(_, v)| self.needs(**v))
            .map(|(name, v)| {
                let g = grads
                    .get(*v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); self.value(*v).numel()]);
                (name.clone(), g)
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

/// 2x2 average pooling outside the tape.
pub fn avg_pool2x<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2x needs even spatial dims, got {s:?}");
    let (ho, wo) = (h / 2, w / 2);
    let q = T::lit(0.25);
    let mut out = Vec::with_capacity(t.numel() / 4);
    for plane in t.data().chunks(h * w) {
        for y in 0..ho {
            for x in 0..wo {
                let i = 2 * y * w + 2 * x;
                out.push((plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * q);
            }
        }
    }
    let mut shape = s.to_vec();
    let r = shape.len();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Tensor::from_parts(shape, out)
}
