//! Reverse-mode autodiff tape.
//!
//! Every operation appends a node holding its output value and enough
//! information to push gradients back to its inputs. Nodes are only ever
//! appended, so creation order is a topological order and `backward` walks
//! the tape once in reverse.

use super::kernels::{axis_extents, gemm, inverse_axes, permute, row_major_strides};
use super::{check_shape, Scalar, Tensor};
use crate::error::{bail, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Matmul(Var, Var),
    BatchedMatmul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Narrow {
        x: Var,
        start: usize,
    },
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    BroadcastTo(Var),
    Select {
        x: Var,
        axis: usize,
        index: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// A single-precision-mode computation graph.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// How `b` maps onto `a` under trailing-axis broadcasting.
enum Broadcast {
    Same,
    /// `b` is a suffix of `a`'s shape: `b[i % len]`.
    Suffix(usize),
    /// General trailing alignment with size-1 axes: explicit index map.
    Map(Vec<usize>),
}

fn broadcast_plan(out: &[usize], b: &[usize]) -> Result<Broadcast> {
    if out == b {
        return Ok(Broadcast::Same);
    }
    if b.len() > out.len() {
        bail!(Shape, "cannot broadcast {b:?} onto {out:?}");
    }
    let offset = out.len() - b.len();
    for (i, &d) in b.iter().enumerate() {
        if d != out[offset + i] && d != 1 {
            bail!(Shape, "cannot broadcast {b:?} onto {out:?}");
        }
    }
    if out[offset..] == *b {
        return Ok(Broadcast::Suffix(b.iter().product()));
    }
    let out_len: usize = out.iter().product();
    let out_strides = row_major_strides(out);
    let b_strides = row_major_strides(b);
    let map = (0..out_len)
        .map(|flat| {
            b.iter()
                .enumerate()
                .map(|(i, &d)| {
                    let axis = offset + i;
                    let coord = (flat / out_strides[axis]) % out[axis];
                    if d == 1 {
                        0
                    } else {
                        coord * b_strides[i]
                    }
                })
                .sum()
        })
        .collect();
    Ok(Broadcast::Map(map))
}

impl Broadcast {
    fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Suffix(len) => i % len,
            Broadcast::Map(m) => m[i],
        }
    }

    /// Sums `g` (shaped like the output) down to `b`'s size.
    fn reduce<T: Scalar>(&self, g: &[T], b_len: usize) -> Vec<T> {
        match self {
            Broadcast::Same => g.to_vec(),
            _ => {
                let mut out = vec![T::zero(); b_len];
                for (i, &x) in g.iter().enumerate() {
                    out[self.index(i)] += x;
                }
                out
            }
        }
    }
}

fn std_normal_cdf<T: Scalar>(x: T) -> T {
    T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn std_normal_pdf<T: Scalar>(x: T) -> T {
    T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt()) * (-(x * x) * T::of(0.5)).exp()
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, x)| *a += x),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Its `requires_grad` flag decides whether it
    /// receives a gradient.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        let tracked = tensor.requires_grad;
        tensor.grad = None;
        self.push(tensor, Op::Leaf, tracked)
    }

    /// Adds an input that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.grad.take()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn emit(&mut self, shape: &[usize], data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let tracked = inputs.iter().any(|&v| self.tracked(v));
        let value = Tensor::from_vec(shape, data)?;
        Ok(self.push(value, op, tracked))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let plan = broadcast_plan(&shape, self.shape(b))?;
        let (ad, bd) = (self.data(a), self.data(b));
        let out = ad
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[plan.index(i)]))
            .collect();
        self.emit(&shape, out, op, &[a, b])
    }

    /// `a + b`, with `b` broadcast along trailing axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let shape = self.shape(a).to_vec();
        let out = self.data(a).iter().map(|&x| x * c).collect();
        self.emit(&shape, out, Op::Scale(a, c), &[a])
    }

    /// `a[..., m, k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            bail!(Shape, "matmul {sa:?} · {sb:?}");
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            false,
            self.data(b),
            false,
            &mut out,
            false,
        );
        self.emit(&shape, out, Op::Matmul(a, b), &[a, b])
    }

    /// Batched product over matching leading axes:
    /// `a[..., m, k] · b[..., k, n]`, or `a · bᵀ` with `b[..., n, k]`.
    pub fn batched_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let r = sa.len();
        if r < 3 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            bail!(Shape, "batched matmul {sa:?} · {sb:?}");
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if transpose_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            bail!(Shape, "batched matmul inner mismatch {sa:?} · {sb:?}");
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut shape = sa.to_vec();
        shape[r - 1] = n;
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                false,
                &bd[i * k * n..],
                transpose_b,
                &mut out[i * m * n..],
                false,
            );
        }
        self.emit(
            &shape,
            out,
            Op::BatchedMatmul { a, b, transpose_b },
            &[a, b],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let len = check_shape(shape)?;
        if len != self.value(x).len() {
            bail!(Shape, "cannot reshape {:?} to {shape:?}", self.shape(x));
        }
        let data = self.data(x).to_vec();
        self.emit(shape, data, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            bail!(Shape, "invalid permutation {axes:?} for {shape:?}");
        }
        let (data, out_shape) = permute(self.data(x), shape, axes);
        self.emit(
            &out_shape,
            data,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        )
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn narrow_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        let last = *shape.last().unwrap();
        if len == 0 || start + len > last {
            bail!(Shape, "narrow {start}+{len} of last axis {last}");
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = len;
        let data: Vec<T> = self
            .data(x)
            .chunks_exact(last)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        self.emit(&out_shape, data, Op::Narrow { x, start }, &[x])
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !ok {
            bail!(Shape, "concat {sa:?} and {sb:?} on axis {axis}");
        }
        let (outer, la, inner) = axis_extents(sa, axis);
        let lb = sb[axis];
        let mut shape = sa.to_vec();
        shape[axis] = la + lb;
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for o in 0..outer {
            out.extend_from_slice(&ad[o * la * inner..(o + 1) * la * inner]);
            out.extend_from_slice(&bd[o * lb * inner..(o + 1) * lb * inner]);
        }
        self.emit(&shape, out, Op::Concat { a, b, axis }, &[a, b])
    }

    /// Expands `x` to `shape` under trailing-axis broadcasting.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        let plan = broadcast_plan(shape, self.shape(x))?;
        let len: usize = shape.iter().product();
        let xd = self.data(x);
        let out = (0..len).map(|i| xd[plan.index(i)]).collect();
        self.emit(shape, out, Op::BroadcastTo(x), &[x])
    }

    /// Picks position `index` along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(x);
        if axis >= shape.len() || index >= shape[axis] || shape.len() < 2 {
            bail!(Shape, "select {index} on axis {axis} of {shape:?}");
        }
        let (outer, len, inner) = axis_extents(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * len + index) * inner;
            out.extend_from_slice(&xd[base..base + inner]);
        }
        self.emit(&out_shape, out, Op::Select { x, axis, index }, &[x])
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            bail!(Shape, "softmax axis {axis} for {shape:?}");
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(xd[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (xd[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        self.emit(&shape, out, Op::Softmax { x, axis }, &[x])
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            bail!(
                Shape,
                "layer_norm affine {:?}/{:?} for width {d}",
                self.shape(gamma),
                self.shape(beta)
            );
        }
        if eps.is_nan() || eps <= 0.0 {
            bail!(Input, "layer_norm eps must be positive, got {eps}");
        }
        let eps = T::of(eps);
        let inv_d = T::of(1.0 / d as f64);
        let (xd, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = xd.len() / d;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) * inv_d;
            let var = row
                .iter()
                .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        self.emit(
            &shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = self
            .data(x)
            .iter()
            .map(|&v| v * std_normal_cdf(v))
            .collect();
        self.emit(&shape, out, Op::Gelu(x), &[x])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 {
            bail!(
                Shape,
                "cross_entropy expects [batch, classes], got {shape:?}"
            );
        }
        let (batch, classes) = (shape[0], shape[1]);
        if labels.len() != batch {
            bail!(Input, "{} labels for batch of {batch}", labels.len());
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            bail!(Input, "label {bad} out of range for {classes} classes");
        }
        let ld = self.data(logits);
        let mut probs = vec![T::zero(); ld.len()];
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &ld[r * classes..(r + 1) * classes];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let sum = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
            let lse = max + sum.ln();
            loss += lse - row[label];
            for j in 0..classes {
                probs[r * classes + j] = (row[j] - lse).exp();
            }
        }
        let loss = loss / T::of(batch as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.emit(&[1], vec![loss], op, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().fold(T::zero(), |s, &v| s + v);
        self.emit(&[1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s = d.iter().fold(T::zero(), |s, &v| s + v) / T::of(d.len() as f64);
        self.emit(&[1], vec![s], Op::Mean(x), &[x])
    }

    /// Populates gradients of every `requires_grad` leaf reachable from
    /// `loss`. Calling it again recomputes from scratch.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            bail!(
                Usage,
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            );
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.grad = Some(g);
                continue;
            }
            for (input, contribution) in self.local_grads(i, &g) {
                add_into(&mut grads[input.0], contribution);
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each tracked input.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut res = Vec::new();
        let want = |v: Var| self.tracked(v);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                if want(*a) {
                    res.push((*a, g.to_vec()));
                }
                if want(*b) {
                    let plan = broadcast_plan(node.value.shape(), self.shape(*b))
                        .expect("checked in forward");
                    let mut gb = plan.reduce(g, self.value(*b).len());
                    if negate {
                        gb.iter_mut().for_each(|x| *x = -*x);
                    }
                    res.push((*b, gb));
                }
            }
            Op::Mul(a, b) => {
                let plan =
                    broadcast_plan(node.value.shape(), self.shape(*b)).expect("checked in forward");
                let (ad, bd) = (self.data(*a), self.data(*b));
                if want(*a) {
                    let ga = g
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x * bd[plan.index(i)])
                        .collect();
                    res.push((*a, ga));
                }
                if want(*b) {
                    let prod: Vec<T> = g.iter().zip(ad).map(|(&x, &y)| x * y).collect();
                    res.push((*b, plan.reduce(&prod, bd.len())));
                }
            }
            Op::Scale(a, c) => {
                res.push((*a, g.iter().map(|&x| x * *c).collect()));
            }
            Op::Matmul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).len() / k;
                if want(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, g, false, self.data(*b), true, &mut ga, false);
                    res.push((*a, ga));
                }
                if want(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, self.data(*a), true, g, false, &mut gb, false);
                    res.push((*b, gb));
                }
            }
            Op::BatchedMatmul { a, b, transpose_b } => {
                let sa = self.shape(*a);
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = node.value.shape()[r - 1];
                let batch = self.value(*a).len() / (m * k);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if want(*a) {
                    // ga = g · op(b)ᵀ
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            false,
                            &bd[i * k * n..],
                            !transpose_b,
                            &mut ga[i * m * k..],
                            false,
                        );
                    }
                    res.push((*a, ga));
                }
                if want(*b) {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        if *transpose_b {
                            // b stored [n, k]: gb = gᵀ · a
                            gemm(
                                n,
                                m,
                                k,
                                &g[i * m * n..],
                                true,
                                &ad[i * m * k..],
                                false,
                                &mut gb[i * k * n..],
                                false,
                            );
                        } else {
                            gemm(
                                k,
                                m,
                                n,
                                &ad[i * m * k..],
                                true,
                                &g[i * m * n..],
                                false,
                                &mut gb[i * k * n..],
                                false,
                            );
                        }
                    }
                    res.push((*b, gb));
                }
            }
            Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::Permute { x, axes } => {
                let (gx, _) = permute(g, node.value.shape(), &inverse_axes(axes));
                res.push((*x, gx));
            }
            Op::Narrow { x, start } => {
                let last = *self.shape(*x).last().unwrap();
                let len = *node.value.shape().last().unwrap();
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (row, grow) in gx.chunks_exact_mut(last).zip(g.chunks_exact(len)) {
                    row[*start..start + len].copy_from_slice(grow);
                }
                res.push((*x, gx));
            }
            Op::Concat { a, b, axis } => {
                let (outer, la, inner) = axis_extents(self.shape(*a), *axis);
                let lb = self.shape(*b)[*axis];
                let mut ga = Vec::with_capacity(outer * la * inner);
                let mut gb = Vec::with_capacity(outer * lb * inner);
                for o in 0..outer {
                    let base = o * (la + lb) * inner;
                    ga.extend_from_slice(&g[base..base + la * inner]);
                    gb.extend_from_slice(&g[base + la * inner..base + (la + lb) * inner]);
                }
                if want(*a) {
                    res.push((*a, ga));
                }
                if want(*b) {
                    res.push((*b, gb));
                }
            }
            Op::BroadcastTo(x) => {
                let plan =
                    broadcast_plan(node.value.shape(), self.shape(*x)).expect("checked in forward");
                res.push((*x, plan.reduce(g, self.value(*x).len())));
            }
            Op::Select { x, axis, index } => {
                let (outer, len, inner) = axis_extents(self.shape(*x), *axis);
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for o in 0..outer {
                    let base = (o * len + index) * inner;
                    gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
                res.push((*x, gx));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                let mut gx = vec![T::zero(); out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot = (0..len).fold(T::zero(), |s, j| s + g[at(j)] * out[at(j)]);
                        for j in 0..len {
                            gx[at(j)] = out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).len();
                let gd = self.data(*gamma);
                if want(*x) {
                    let inv_d = T::of(1.0 / d as f64);
                    let mut gx = vec![T::zero(); xhat.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut mean_gh = T::zero();
                        let mut mean_ghh = T::zero();
                        for j in 0..d {
                            let gh = gr[j] * gd[j];
                            mean_gh += gh;
                            mean_ghh += gh * hr[j];
                        }
                        mean_gh *= inv_d;
                        mean_ghh *= inv_d;
                        for j in 0..d {
                            gx[r * d + j] = rs * (gr[j] * gd[j] - mean_gh - hr[j] * mean_ghh);
                        }
                    }
                    res.push((*x, gx));
                }
                if want(*gamma) {
                    let mut gg = vec![T::zero(); d];
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    res.push((*gamma, gg));
                }
                if want(*beta) {
                    let mut gbeta = vec![T::zero(); d];
                    for gr in g.chunks_exact(d) {
                        for j in 0..d {
                            gbeta[j] += gr[j];
                        }
                    }
                    res.push((*beta, gbeta));
                }
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                let gx = g
                    .iter()
                    .zip(xd)
                    .map(|(&gi, &v)| gi * (std_normal_cdf(v) + v * std_normal_pdf(v)))
                    .collect();
                res.push((*x, gx));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = self.shape(*logits)[1];
                let scale = g[0] / T::of(labels.len() as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * classes + l] -= scale;
                }
                res.push((*logits, gl));
            }
            Op::Sum(x) => res.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                res.push((*x, vec![g[0] / T::of(n as f64); n]));
            }
        }
        res.retain(|(v, _)| want(*v));
        res
    }
}
