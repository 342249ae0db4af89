//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse. Shape errors are programming errors and panic.

use crate::conv::{col2im_add, im2col, ConvGeom};
use crate::params::{Gradients, ParamId, ParamKey, ParamStore};
use crate::real::{gemm, MatRef, Real};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamKey),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Silu(Var),
    Sigmoid(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<(f64, f64)> },
    Upsample2x(Var),
    GlobalAvgPool(Var),
    Concat { parts: Vec<Var>, axis: usize },
    AddChannel(Var, Var),
    WeightedSumAxis { a: Var, axis: usize, weights: Vec<f64> },
    Mse(Var, Var),
    Reshape(Var),
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Transpose12(Var),
    SoftmaxLast(Var),
    ReplaceRows { x: Var, token: Var, mask: Vec<bool> },
    Narrow { a: Var, axis: usize, start: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    tracked: bool,
}

/// A single forward pass. Build, read values, optionally call `backward`, drop.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
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

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, tracked: false });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node { value: store.get(id).clone(), op: Op::Param(store.key(id)), tracked: true });
        Var(self.nodes.len() - 1)
    }

    /// Parameter used as a constant (no gradient flows into it).
    pub fn frozen(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(self.shape(a), data).unwrap();
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `a * scale + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::lit(scale), T::lit(shift));
        let t = self.value(a).map(|x| x * s + c);
        self.push(t, Op::Affine(a, scale), &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        self.push(t, Op::Silu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(t, Op::Sigmoid(a), &[a])
    }

    /// `x[.., in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "linear weight must be 2-D");
        let (out_f, in_f) = (ws[0], ws[1]);
        let xs = self.shape(x).to_vec();
        assert_eq!(*xs.last().unwrap(), in_f, "linear input width {xs:?} vs weight {ws:?}");
        let rows = self.value(x).numel() / in_f;
        let mut out = vec![T::zero(); rows * out_f];
        if let Some(b) = b {
            assert_eq!(self.shape(b), [out_f]);
            let bias = self.data(b);
            for r in 0..rows {
                out[r * out_f..(r + 1) * out_f].copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            T::one(),
            MatRef::row_major(self.data(x), rows, in_f),
            MatRef::row_major(self.data(w), out_f, in_f).t(),
            beta,
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_f;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::new(&shape, out).unwrap(), Op::Linear { x, w, b }, &inputs)
    }

    /// 2-D convolution, `x [B, Cin, H, W]`, `w [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [B,C,H,W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Cout,Cin,k,k]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch {xs:?} vs {ws:?}");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let geom = ConvGeom { c: xs[1], h: xs[2], w: xs[3], k: ws[2], stride, pad };
        let (ho, wo) = geom.out_hw();
        let (batch, cout) = (xs[0], ws[0]);
        let rows = geom.col_rows();
        let mut cols = vec![T::zero(); rows * ho * wo];
        let mut out = vec![T::zero(); batch * cout * ho * wo];
        let in_plane = geom.c * geom.h * geom.w;
        for bi in 0..batch {
            im2col(&self.data(x)[bi * in_plane..(bi + 1) * in_plane], geom, &mut cols);
            let dst = &mut out[bi * cout * ho * wo..(bi + 1) * cout * ho * wo];
            gemm(
                T::one(),
                MatRef::row_major(self.data(w), cout, rows),
                MatRef::row_major(&cols, rows, ho * wo),
                T::zero(),
                dst,
            );
            if let Some(b) = b {
                for (co, &bv) in self.data(b).iter().enumerate() {
                    for v in &mut dst[co * ho * wo..(co + 1) * ho * wo] {
                        *v += bv;
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let t = Tensor::new(&[batch, cout, ho, wo], out).unwrap();
        self.push(t, Op::Conv2d { x, w, b, stride, pad }, &inputs)
    }

    /// Group normalisation over `[B, C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (b, c) = (xs[0], xs[1]);
        assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
        let spatial = self.value(x).numel() / (b * c);
        let cpg = c / groups;
        let n = (cpg * spatial) as f64;
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut out = vec![T::zero(); xd.len()];
        let mut stats = Vec::with_capacity(b * groups);
        for bi in 0..b {
            for g in 0..groups {
                let start = (bi * c + g * cpg) * spatial;
                let chunk = &xd[start..start + cpg * spatial];
                let mean = chunk.iter().map(|v| v.as_f64()).sum::<f64>() / n;
                let var = chunk.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
                let rstd = 1.0 / (var + 1e-5).sqrt();
                stats.push((mean, rstd));
                for ci in 0..cpg {
                    let ch = g * cpg + ci;
                    let (ga, be) = (gd[ch].as_f64(), bd[ch].as_f64());
                    for s in 0..spatial {
                        let i = start + ci * spatial + s;
                        out[i] = T::lit((xd[i].as_f64() - mean) * rstd * ga + be);
                    }
                }
            }
        }
        let t = Tensor::new(&xs, out).unwrap();
        self.push(t, Op::GroupNorm { x, gamma, beta, groups, stats }, &[x, gamma, beta])
    }

    /// Nearest-neighbour 2x upsampling of the last two axes.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = self.value(a).numel() / (h * w);
        let src = self.data(a);
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + x] = src[p * h * w + (y / 2) * w + x / 2];
                }
            }
        }
        let mut shape = s.clone();
        let l = shape.len();
        shape[l - 2] *= 2;
        shape[l - 1] *= 2;
        self.push(Tensor::new(&shape, out).unwrap(), Op::Upsample2x(a), &[a])
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let (b, c) = (s[0], s[1]);
        let spatial = self.value(a).numel() / (b * c);
        let out = self
            .data(a)
            .chunks(spatial)
            .map(|ch| T::lit(ch.iter().map(|v| v.as_f64()).sum::<f64>() / spatial as f64))
            .collect();
        self.push(Tensor::new(&[b, c], out).unwrap(), Op::GlobalAvgPool(a), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&x, &y)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || x == y, "concat shape mismatch {s:?} vs {first:?}");
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let m = self.shape(p)[axis];
                out.extend_from_slice(&self.data(p)[o * m * inner..(o + 1) * m * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(Tensor::new(&shape, out).unwrap(), Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// `x [B, C, ...] + v [B, C]` broadcast over the trailing axes.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(self.shape(v), &xs[..2], "add_channel expects [B, C] vector");
        let planes = xs[0] * xs[1];
        let spatial = self.value(x).numel() / planes;
        let mut out = self.data(x).to_vec();
        for (p, &vv) in self.data(v).iter().enumerate() {
            for o in &mut out[p * spatial..(p + 1) * spatial] {
                *o += vv;
            }
        }
        self.push(Tensor::new(&xs, out).unwrap(), Op::AddChannel(x, v), &[x, v])
    }

    /// Weighted sum over `axis` (the axis is removed).
    pub fn weighted_sum_axis(&mut self, a: Var, axis: usize, weights: &[f64]) -> Var {
        let s = self.shape(a).to_vec();
        let (outer, mid, inner) = split_axis(&s, axis);
        assert_eq!(weights.len(), mid, "one weight per entry along axis");
        let src = self.data(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for (m, &wm) in weights.iter().enumerate() {
                let wm = T::lit(wm);
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    out[o * inner + i] += wm * src[base + i];
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(&shape, out).unwrap();
        self.push(t, Op::WeightedSumAxis { a, axis, weights: weights.to_vec() }, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let m = self.shape(a)[axis];
        self.weighted_sum_axis(a, axis, &vec![1.0 / m as f64; m])
    }

    /// Mean squared difference, returned as a one-element tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).numel(), self.value(b).numel(), "mse size mismatch");
        let n = self.value(a).numel() as f64;
        let s: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
            .sum();
        self.push(Tensor::scalar(T::lit(s / n)), Op::Mse(a, b), &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape).expect("reshape");
        self.push(t, Op::Reshape(a), &[a])
    }

    /// Batched matmul of `[B, M, K] x [B, K, N]`, operands optionally transposed.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm expects [B,_,_] pairs");
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "bmm inner mismatch {sa:?} {sb:?}");
        let batch = sa[0];
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let am = mat3(self.data(a), &sa, bi, ta);
            let bm = mat3(self.data(b), &sb, bi, tb);
            gemm(T::one(), am, bm, T::zero(), &mut out[bi * m * n..(bi + 1) * m * n]);
        }
        let t = Tensor::new(&[batch, m, n], out).unwrap();
        self.push(t, Op::Bmm { a, b, ta, tb }, &[a, b])
    }

    /// `[B, M, N] -> [B, N, M]`.
    pub fn transpose12(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let out = transpose_batched(self.data(a), s[0], s[1], s[2]);
        self.push(Tensor::new(&[s[0], s[2], s[1]], out).unwrap(), Op::Transpose12(a), &[a])
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let n = *s.last().unwrap();
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        self.push(Tensor::new(&s, out).unwrap(), Op::SoftmaxLast(a), &[a])
    }

    /// Rows of `x [B, C]` where `mask` is set are replaced by `token [C]`.
    pub fn replace_rows(&mut self, x: Var, token: Var, mask: &[bool]) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        assert_eq!(mask.len(), s[0]);
        assert_eq!(self.shape(token), [s[1]]);
        let c = s[1];
        let mut out = self.data(x).to_vec();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out[r * c..(r + 1) * c].copy_from_slice(self.data(token));
            }
        }
        let t = Tensor::new(&s, out).unwrap();
        self.push(t, Op::ReplaceRows { x, token, mask: mask.to_vec() }, &[x, token])
    }

    /// Entries `start..start + len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert!(start + len <= s[axis], "narrow {start}+{len} exceeds {s:?} on axis {axis}");
        let (outer, mid, inner) = split_axis(&s, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(Tensor::new(&shape, out).unwrap(), Op::Narrow { a, axis, start }, &[a])
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            self.backprop_node(i, gout, &mut grads, &mut out);
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.tracked(v) {
            return;
        }
        debug_assert_eq!(g.numel(), self.value(v).numel());
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        let t = Tensor::new(self.shape(v), data).unwrap();
        self.acc(grads, v, t);
    }

    fn backprop_node(&self, i: usize, gout: Tensor<T>, grads: &mut [Option<Tensor<T>>], out: &mut Gradients<T>) {
        let node = &self.nodes[i];
        let g = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(key) => out.accumulate(*key, gout),
            Op::Add(a, b) => {
                self.acc(grads, *b, gout.clone());
                self.acc(grads, *a, gout);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *b, gout.map(|v| -v));
                self.acc(grads, *a, gout);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.tracked(*a) {
                    self.acc_data(grads, *a, g.iter().zip(bd).map(|(&x, &y)| x * y).collect());
                }
                if self.tracked(*b) {
                    self.acc_data(grads, *b, g.iter().zip(ad).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Affine(a, s) => {
                let s = T::lit(*s);
                self.acc(grads, *a, gout.map(|v| v * s));
            }
            Op::Silu(a) => {
                let d = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&gv, &x)| {
                        let s = T::one() / (T::one() + (-x).exp());
                        gv * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                self.acc_data(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect();
                self.acc_data(grads, *a, d);
            }
            Op::Linear { x, w, b } => self.back_linear(*x, *w, *b, g, grads),
            Op::Conv2d { x, w, b, stride, pad } => self.back_conv(*x, *w, *b, *stride, *pad, g, grads),
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                self.back_group_norm(*x, *gamma, *beta, *groups, stats, g, grads)
            }
            Op::Upsample2x(a) => {
                let s = self.shape(*a);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes = self.value(*a).numel() / (h * w);
                let mut d = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            d[p * h * w + (y / 2) * w + x / 2] += g[p * 4 * h * w + y * 2 * w + x];
                        }
                    }
                }
                self.acc_data(grads, *a, d);
            }
            Op::GlobalAvgPool(a) => {
                let n = self.value(*a).numel();
                let spatial = n / g.len();
                let inv = T::lit(1.0 / spatial as f64);
                let d = (0..n).map(|j| g[j / spatial] * inv).collect();
                self.acc_data(grads, *a, d);
            }
            Op::Concat { parts, axis } => {
                let total = node.value.shape()[*axis];
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let m = self.shape(p)[*axis];
                    if self.tracked(p) {
                        let mut d = Vec::with_capacity(outer * m * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g[start..start + m * inner]);
                        }
                        self.acc_data(grads, p, d);
                    }
                    offset += m;
                }
            }
            Op::AddChannel(x, v) => {
                if self.tracked(*v) {
                    let planes = self.value(*v).numel();
                    let spatial = g.len() / planes;
                    let d = g.chunks(spatial).map(|c| c.iter().copied().sum()).collect();
                    self.acc_data(grads, *v, d);
                }
                self.acc(grads, *x, gout);
            }
            Op::WeightedSumAxis { a, axis, weights } => {
                let (outer, mid, inner) = split_axis(self.shape(*a), *axis);
                let mut d = vec![T::zero(); outer * mid * inner];
                for o in 0..outer {
                    for (m, &wm) in weights.iter().enumerate() {
                        let wm = T::lit(wm);
                        for k in 0..inner {
                            d[(o * mid + m) * inner + k] = g[o * inner + k] * wm;
                        }
                    }
                }
                self.acc_data(grads, *a, d);
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).numel() as f64;
                let scale = T::lit(2.0 / n) * g[0];
                let diff: Vec<T> =
                    self.data(*a).iter().zip(self.data(*b)).map(|(&x, &y)| (x - y) * scale).collect();
                if self.tracked(*b) {
                    self.acc_data(grads, *b, diff.iter().map(|&v| -v).collect());
                }
                self.acc_data(grads, *a, diff);
            }
            Op::Reshape(a) => {
                let t = gout.reshape(self.shape(*a)).unwrap();
                self.acc(grads, *a, t);
            }
            Op::Bmm { a, b, ta, tb } => self.back_bmm(*a, *b, *ta, *tb, node.value.shape(), g, grads),
            Op::Transpose12(a) => {
                let s = node.value.shape();
                self.acc_data(grads, *a, transpose_batched(g, s[0], s[1], s[2]));
            }
            Op::SoftmaxLast(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut d = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for k in 0..n {
                        dr[k] = yr[k] * (gr[k] - dot);
                    }
                }
                self.acc_data(grads, *a, d);
            }
            Op::ReplaceRows { x, token, mask } => {
                let c = self.shape(*token)[0];
                let mut dx = g.to_vec();
                let mut dt = vec![T::zero(); c];
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        for k in 0..c {
                            dt[k] += dx[r * c + k];
                            dx[r * c + k] = T::zero();
                        }
                    }
                }
                self.acc_data(grads, *token, dt);
                self.acc_data(grads, *x, dx);
            }
            Op::Narrow { a, axis, start } => {
                let (outer, mid, inner) = split_axis(self.shape(*a), *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![T::zero(); outer * mid * inner];
                for o in 0..outer {
                    let base = (o * mid + start) * inner;
                    d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc_data(grads, *a, d);
            }
        }
    }

    fn back_linear(&self, x: Var, w: Var, b: Option<Var>, g: &[T], grads: &mut [Option<Tensor<T>>]) {
        let ws = self.shape(w);
        let (out_f, in_f) = (ws[0], ws[1]);
        let rows = g.len() / out_f;
        let gm = MatRef::row_major(g, rows, out_f);
        if self.tracked(x) {
            let mut dx = vec![T::zero(); rows * in_f];
            gemm(T::one(), gm, MatRef::row_major(self.data(w), out_f, in_f), T::zero(), &mut dx);
            self.acc_data(grads, x, dx);
        }
        if self.tracked(w) {
            let mut dw = vec![T::zero(); out_f * in_f];
            gemm(T::one(), gm.t(), MatRef::row_major(self.data(x), rows, in_f), T::zero(), &mut dw);
            self.acc_data(grads, w, dw);
        }
        if let Some(b) = b {
            if self.tracked(b) {
                let mut db = vec![T::zero(); out_f];
                for row in g.chunks(out_f) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.acc_data(grads, b, db);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn back_conv(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let geom = ConvGeom { c: xs[1], h: xs[2], w: xs[3], k: ws[2], stride, pad };
        let (ho, wo) = geom.out_hw();
        let (batch, cout, rows) = (xs[0], ws[0], geom.col_rows());
        let plane_out = cout * ho * wo;
        let in_plane = geom.c * geom.h * geom.w;
        let wm = MatRef::row_major(self.data(w), cout, rows);
        let mut cols = vec![T::zero(); rows * ho * wo];
        let mut dcols = vec![T::zero(); rows * ho * wo];
        let mut dw = vec![T::zero(); cout * rows];
        let mut dx = if self.tracked(x) { vec![T::zero(); batch * in_plane] } else { Vec::new() };
        for bi in 0..batch {
            let gb = MatRef::row_major(&g[bi * plane_out..(bi + 1) * plane_out], cout, ho * wo);
            if self.tracked(w) {
                im2col(&self.data(x)[bi * in_plane..(bi + 1) * in_plane], geom, &mut cols);
                gemm(T::one(), gb, MatRef::row_major(&cols, rows, ho * wo).t(), T::one(), &mut dw);
            }
            if self.tracked(x) {
                gemm(T::one(), wm.t(), gb, T::zero(), &mut dcols);
                col2im_add(&dcols, geom, &mut dx[bi * in_plane..(bi + 1) * in_plane]);
            }
        }
        if self.tracked(w) {
            self.acc_data(grads, w, dw);
        }
        if self.tracked(x) {
            self.acc_data(grads, x, dx);
        }
        if let Some(b) = b {
            if self.tracked(b) {
                let mut db = vec![T::zero(); cout];
                for bi in 0..batch {
                    for (co, d) in db.iter_mut().enumerate() {
                        let s = bi * plane_out + co * ho * wo;
                        *d += g[s..s + ho * wo].iter().copied().sum();
                    }
                }
                self.acc_data(grads, b, db);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn back_group_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: &[(f64, f64)],
        g: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xs = self.shape(x);
        let (b, c) = (xs[0], xs[1]);
        let spatial = self.value(x).numel() / (b * c);
        let cpg = c / groups;
        let n = (cpg * spatial) as f64;
        let xd = self.data(x);
        let gd = self.data(gamma);
        let mut dx = vec![T::zero(); xd.len()];
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for bi in 0..b {
            for gi in 0..groups {
                let (mean, rstd) = stats[bi * groups + gi];
                let start = (bi * c + gi * cpg) * spatial;
                let mut sum1 = 0.0;
                let mut sum2 = 0.0;
                for ci in 0..cpg {
                    let ch = gi * cpg + ci;
                    let ga = gd[ch].as_f64();
                    for s in 0..spatial {
                        let idx = start + ci * spatial + s;
                        let xhat = (xd[idx].as_f64() - mean) * rstd;
                        let gv = g[idx].as_f64();
                        dgamma[ch] += gv * xhat;
                        dbeta[ch] += gv;
                        let dxhat = gv * ga;
                        sum1 += dxhat;
                        sum2 += dxhat * xhat;
                    }
                }
                for ci in 0..cpg {
                    let ga = gd[gi * cpg + ci].as_f64();
                    for s in 0..spatial {
                        let idx = start + ci * spatial + s;
                        let xhat = (xd[idx].as_f64() - mean) * rstd;
                        let dxhat = g[idx].as_f64() * ga;
                        dx[idx] = T::lit(rstd * (dxhat - sum1 / n - xhat * sum2 / n));
                    }
                }
            }
        }
        if self.tracked(x) {
            self.acc_data(grads, x, dx);
        }
        if self.tracked(gamma) {
            self.acc_data(grads, gamma, dgamma.into_iter().map(T::lit).collect());
        }
        if self.tracked(beta) {
            self.acc_data(grads, beta, dbeta.into_iter().map(T::lit).collect());
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn back_bmm(
        &self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        out_shape: &[usize],
        g: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, n) = (out_shape[0], out_shape[1], out_shape[2]);
        let (a_sz, b_sz) = (sa[1] * sa[2], sb[1] * sb[2]);
        if self.tracked(a) {
            let mut da = vec![T::zero(); batch * a_sz];
            for bi in 0..batch {
                let gm = MatRef::row_major(&g[bi * m * n..(bi + 1) * m * n], m, n);
                let bm = mat3(self.data(b), &sb, bi, tb);
                let dst = &mut da[bi * a_sz..(bi + 1) * a_sz];
                if ta {
                    gemm(T::one(), bm, gm.t(), T::zero(), dst);
                } else {
                    gemm(T::one(), gm, bm.t(), T::zero(), dst);
                }
            }
            self.acc_data(grads, a, da);
        }
        if self.tracked(b) {
            let mut db = vec![T::zero(); batch * b_sz];
            for bi in 0..batch {
                let gm = MatRef::row_major(&g[bi * m * n..(bi + 1) * m * n], m, n);
                let am = mat3(self.data(a), &sa, bi, ta);
                let dst = &mut db[bi * b_sz..(bi + 1) * b_sz];
                if tb {
                    gemm(T::one(), gm.t(), am, T::zero(), dst);
                } else {
                    gemm(T::one(), am.t(), gm, T::zero(), dst);
                }
            }
            self.acc_data(grads, b, db);
        }
    }
}

fn mat3<'a, T: Real>(data: &'a [T], shape: &[usize], bi: usize, transpose: bool) -> MatRef<'a, T> {
    let sz = shape[1] * shape[2];
    let m = MatRef::row_major(&data[bi * sz..(bi + 1) * sz], shape[1], shape[2]);
    if transpose {
        m.t()
    } else {
        m
    }
}

fn transpose_batched<T: Real>(src: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        let base = b * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[base + c * rows + r] = src[base + r * cols + c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn elementwise_and_reduction_values() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 2], &[0.5, 0.5, -1.0, 2.0]));
        let s = g.sub(a, b);
        assert_eq!(g.value(s).data(), &[0.5, 1.5, 4.0, 2.0]);
        let m = g.mul(a, b);
        assert_eq!(g.value(m).data(), &[0.5, 1.0, -3.0, 8.0]);
        let f = g.affine(a, 2.0, -1.0);
        assert_eq!(g.value(f).data(), &[1.0, 3.0, 5.0, 7.0]);
        let mean = g.mean_axis(a, 0);
        assert_eq!(g.value(mean).data(), &[2.0, 3.0]);
        let ws = g.weighted_sum_axis(a, 1, &[0.25, 0.75]);
        assert_eq!(g.value(ws).data(), &[1.75, 3.75]);
        let l = g.mse(a, b);
        assert_eq!(g.value(l).item(), (0.25 + 2.25 + 16.0 + 4.0) / 4.0);
        let sg = g.sigmoid(a);
        assert!((g.value(sg).data()[0] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn linear_matches_hand_product() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let b = g.constant(t(&[3], &[0.0, 0.5, -1.0]));
        let y = g.linear(x, w, Some(b));
        assert_eq!(g.value(y).data(), &[1.0, 2.5, 2.0]);
    }

    #[test]
    fn conv_identity_kernel_and_pooling() {
        let mut g = Graph::<f64>::new();
        let img: Vec<f64> = (0..16).map(f64::from).collect();
        let x = g.constant(t(&[1, 1, 4, 4], &img));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(t(&[1, 1, 3, 3], &k));
        let y = g.conv2d(x, w, None, 1, 1);
        assert_eq!(g.value(y).data(), img.as_slice());
        let d = g.conv2d(x, w, None, 2, 1);
        assert_eq!(g.value(d).data(), &[0.0, 2.0, 8.0, 10.0]);
        let p = g.global_avg_pool(x);
        assert_eq!(g.value(p).data(), &[7.5]);
        let u = g.upsample2x(d);
        assert_eq!(g.shape(u), &[1, 1, 4, 4]);
        assert_eq!(g.value(u).data()[..4], [0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn group_norm_standardises_each_group() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2, 1, 2], &[1.0, 3.0, 10.0, 30.0]));
        let gamma = g.constant(t(&[2], &[1.0, 1.0]));
        let beta = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.group_norm(x, gamma, beta, 2);
        for v in g.value(y).data() {
            assert!((v.abs() - 1.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shapes_compose() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[1, 2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 1000.0]));
        let s = g.softmax_last(a);
        let v = g.value(s).data().to_vec();
        assert!((v[0] + v[1] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[5] - 1.0).abs() < 1e-12);
        let tr = g.transpose12(a);
        assert_eq!(g.shape(tr), &[1, 3, 2]);
        assert_eq!(g.value(tr).data(), &[1.0, -1.0, 2.0, 0.0, 3.0, 1000.0]);
        let n = g.narrow(a, 2, 1, 2);
        assert_eq!(g.value(n).data(), &[2.0, 3.0, 0.0, 1000.0]);
        let c = g.concat(&[a, a], 1);
        assert_eq!(g.shape(c), &[1, 4, 3]);
        let prod = g.bmm(a, a, false, true);
        assert_eq!(g.value(prod).data()[0], 14.0);
    }

    #[test]
    fn replace_rows_and_add_channel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let tok = g.constant(t(&[2], &[9.0, 8.0]));
        let r = g.replace_rows(x, tok, &[false, true, false]);
        assert_eq!(g.value(r).data(), &[1.0, 2.0, 9.0, 8.0, 5.0, 6.0]);
        let img = g.constant(Tensor::zeros(&[1, 2, 1, 2]));
        let v = g.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = g.add_channel(img, v);
        assert_eq!(g.value(y).data(), &[1.0, 1.0, -1.0, -1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", t(&[2], &[1.0, 2.0]));
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let c = g.constant(t(&[2], &[3.0, 3.0]));
        let l = g.mse(w, c);
        let grads = g.backward(l);
        assert_eq!(grads.get(&store, id).unwrap().data(), &[-2.0, -1.0]);
    }
}
