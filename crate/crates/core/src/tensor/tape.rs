//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the backward pass. Nodes are appended in evaluation order, so walking the
//! tape backwards visits each node after all of its consumers.

use super::kernels::{self, ConvGeom};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax { x: Var, axis: usize },
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNorm(Box<NormCache<T>>),
    LayerNorm(Box<NormCache<T>>),
    Dropout { x: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    BceLogits { logits: Var, targets: Vec<T> },
}

struct NormCache<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    /// One entry per channel (batch norm) or per row (layer norm).
    inv_std: Vec<T>,
    /// Batch norm only: whether the statistics came from the batch itself.
    batch_stats: bool,
    channels: usize,
    inner: usize,
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
    grad: Option<Tensor<T>>,
}

/// Per-channel statistics of one batch-norm call in training mode.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, for running-statistics updates.
    pub var: Vec<T>,
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy a stored parameter onto the tape. Trainable parameters become
    /// differentiable leaves.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Add the gradients of every parameter leaf into the store.
    pub fn write_grads(&self, store: &mut ParamStore<T>) {
        for node in &self.nodes {
            if let (Some(id), Some(g)) = (node.param, &node.grad) {
                store.accumulate_grad(id, g.data());
            }
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor {
            shape: ta.shape().to_vec(),
            data,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    /// `x[..., d] + row[d]`, broadcasting `row` over all leading axes.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.value(row).numel() != d {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let mut out = self.value(x).clone();
        let r = self.value(row).data();
        for chunk in out.data.chunks_mut(d) {
            chunk.iter_mut().zip(r).for_each(|(v, &b)| *v += b);
        }
        Ok(self.push(out, Op::AddRow(x, row), &[x, row]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros([m, n]);
        kernels::gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out.data, false);
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::invalid(format!("transpose needs rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let data = kernels::transpose(r, c, self.value(a).data());
        Ok(self.push(Tensor { shape: vec![c, r], data }, Op::Transpose(a), &[a]))
    }

    /// Softmax along `axis`, stabilized by subtracting each slice's maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..len {
                    let e = (src[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(k)] = out[idx(k)] / total;
                }
            }
        }
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax { x, axis }, &[x]))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::of(v.f64() * kernels::phi(v.f64())));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / T::of(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                op: "narrow",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "narrow [{start}, {}) out of bounds for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::AxisOutOfRange {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Stride-1 2-D convolution. `x: [B×C×H×W]`, `w: [F×C×kh×kw]`, `b: [F]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (batch, filters) = (xs[0], ws[0]);
        if self.value(b).numel() != filters {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: ws,
                rhs: self.shape(b).to_vec(),
            });
        }
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kh: ws[2],
            kw: ws[3],
            pad,
        };
        if geom.kh > geom.height + 2 * pad || geom.kw > geom.width + 2 * pad {
            return Err(Error::invalid(format!(
                "conv2d kernel {}x{} larger than padded input {xs:?}",
                geom.kh, geom.kw
            )));
        }
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let img = geom.channels * geom.height * geom.width;
        let mut cols = vec![T::zero(); batch * rows * cols_n];
        let mut out = vec![T::zero(); batch * filters * cols_n];
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        for n in 0..batch {
            let c = &mut cols[n * rows * cols_n..(n + 1) * rows * cols_n];
            kernels::im2col(&geom, &xd[n * img..(n + 1) * img], c);
            let o = &mut out[n * filters * cols_n..(n + 1) * filters * cols_n];
            kernels::gemm(filters, rows, cols_n, wd, c, o, false);
            for (f, chunk) in o.chunks_mut(cols_n).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bd[f]);
            }
        }
        let shape = vec![batch, filters, geom.out_h(), geom.out_w()];
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Conv2d { x, w, b, geom, cols },
            &[x, w, b],
        ))
    }

    /// Non-overlapping `k×k` max pooling on `[B×C×H×W]`; trailing rows and
    /// columns that do not fill a window are dropped. Ties go to the first
    /// maximal element in row-major window order.
    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(Error::invalid(format!("maxpool2d({k}) on {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = base + (oy * k + dy) * w + ox * k + dx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let shape = vec![s[0], s[1], oh, ow];
        Ok(self.push(Tensor { shape, data: out }, Op::MaxPool { x, argmax }, &[x]))
    }

    fn bn_geometry(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::invalid(format!("batch norm needs [B×C×...], got {s:?}")));
        }
        let (batch, channels) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        for p in [gamma, beta] {
            if self.value(p).numel() != channels {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    lhs: s.to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        Ok((batch, channels, inner))
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        batch_stats: bool,
        (batch, channels, inner): (usize, usize, usize),
    ) -> Var {
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for n in 0..batch {
            for c in 0..channels {
                let off = (n * channels + c) * inner;
                for i in off..off + inner {
                    let h = (src[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + b[c];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor { shape, data: out },
            Op::BatchNorm(Box::new(NormCache {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
                channels,
                inner,
            })),
            &[x, gamma, beta],
        )
    }

    /// Batch normalization with statistics of the current batch (ε = 1e-5).
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats<T>)> {
        let geo @ (batch, channels, inner) = self.bn_geometry(x, gamma, beta)?;
        if batch < 2 {
            return Err(Error::invalid("batch norm in training mode needs a batch of at least 2"));
        }
        let count = (batch * inner) as f64;
        let src = self.value(x).data();
        let mut mean = vec![T::zero(); channels];
        let mut var = vec![T::zero(); channels];
        for c in 0..channels {
            let mut s = 0.0;
            for n in 0..batch {
                let off = (n * channels + c) * inner;
                s += src[off..off + inner].iter().map(|v| v.f64()).sum::<f64>();
            }
            let m = s / count;
            let mut ss = 0.0;
            for n in 0..batch {
                let off = (n * channels + c) * inner;
                ss += src[off..off + inner].iter().map(|v| (v.f64() - m).powi(2)).sum::<f64>();
            }
            mean[c] = T::of(m);
            var[c] = T::of(ss / count);
        }
        let eps = T::of(BN_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let unbiased = var.iter().map(|&v| v * T::of(count / (count - 1.0))).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true, geo);
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T]) -> Result<Var> {
        let geo = self.bn_geometry(x, gamma, beta)?;
        if mean.len() != geo.1 || var.len() != geo.1 {
            return Err(Error::invalid("running statistics do not match channel count"));
        }
        let eps = T::of(BN_EPS);
        let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        Ok(self.bn_apply(x, gamma, beta, mean, inv_std, false, geo))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        for p in [gamma, beta] {
            if self.value(p).numel() != d {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: s.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let m = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.f64() - m).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                let h = T::of((row[j].f64() - m) * is);
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
            inv_std.push(T::of(is));
        }
        Ok(self.push(
            Tensor { shape: s, data: out },
            Op::LayerNorm(Box::new(NormCache {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
                channels: d,
                inner: rows,
            })),
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout: zero each element with probability `p` and scale the
    /// survivors by `1/(1-p)`. Identity when not training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut super::Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.bernoulli(p) { T::zero() } else { keep })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    /// Mean softmax cross-entropy of `logits: [B×C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); src.len()];
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
            total += lse - row[label].f64();
            for c in 0..classes {
                probs[r * classes + c] = T::of((row[c].f64() - lse).exp());
            }
        }
        let loss = Tensor::scalar(T::of(total / batch as f64));
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean sigmoid binary cross-entropy of one logit per sample against
    /// 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let n = self.value(logits).numel();
        if n != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t > 1) {
            return Err(Error::invalid(format!("binary label {bad} not in {{0, 1}}")));
        }
        let src = self.value(logits).data();
        let mut total = 0.0;
        for (z, &y) in src.iter().zip(targets) {
            let z = z.f64();
            total += z.max(0.0) - z * y as f64 + (-z.abs()).exp().ln_1p();
        }
        let loss = Tensor::scalar(T::of(total / n as f64));
        let targets = targets.iter().map(|&t| T::of(t as f64)).collect();
        Ok(self.push(loss, Op::BceLogits { logits, targets }, &[logits]))
    }

    /// Back-propagate from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(t) => t.data.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                    None => {
                        let shape = node.value.shape().to_vec();
                        node.grad = Some(Tensor { shape, data: g });
                    }
                }
                continue;
            }
            self.propagate(i, g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: Vec<T>, adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        let numel = |v: Var| nodes[v.0].value.numel();

        // Accumulates `contrib` into the adjoint of `v`.
        fn acc<T: Scalar>(adj: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
            match &mut adj[v.0] {
                Some(a) => a.iter_mut().zip(contrib).for_each(|(x, y)| *x += y),
                slot @ None => *slot = Some(contrib),
            }
        }

        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves are handled in backward"),
            &Op::Add(a, b) => {
                if rg(a) {
                    acc(adj, a, g.clone());
                }
                if rg(b) {
                    acc(adj, b, g);
                }
            }
            &Op::Sub(a, b) => {
                if rg(a) {
                    acc(adj, a, g.clone());
                }
                if rg(b) {
                    acc(adj, b, g.into_iter().map(|v| -v).collect());
                }
            }
            &Op::Mul(a, b) => {
                if rg(a) {
                    acc(adj, a, g.iter().zip(val(b)).map(|(&x, &y)| x * y).collect());
                }
                if rg(b) {
                    acc(adj, b, g.iter().zip(val(a)).map(|(&x, &y)| x * y).collect());
                }
            }
            &Op::Scale(a, f) => acc(adj, a, g.into_iter().map(|v| v * f).collect()),
            &Op::AddRow(x, row) => {
                if rg(row) {
                    let d = numel(row);
                    let mut gr = vec![T::zero(); d];
                    for chunk in g.chunks(d) {
                        gr.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
                    }
                    acc(adj, row, gr);
                }
                if rg(x) {
                    acc(adj, x, g);
                }
            }
            &Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if rg(a) {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::gemm_nt(m, n, k, &g, val(b), &mut ga, false);
                    acc(adj, a, ga);
                }
                if rg(b) {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::gemm_tn(k, m, n, val(a), &g, &mut gb, false);
                    acc(adj, b, gb);
                }
            }
            &Op::Transpose(a) => {
                let s = nodes[i].value.shape();
                acc(adj, a, kernels::transpose(s[0], s[1], &g));
            }
            &Op::Softmax { x, axis } => {
                let y = nodes[i].value.data();
                let (outer, len, inner) = kernels::split_axis(nodes[i].value.shape(), axis);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for c in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + c;
                        let dot: T = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                acc(adj, x, gx);
            }
            &Op::Gelu(x) => {
                let gx = g
                    .iter()
                    .zip(val(x))
                    .map(|(&gv, &xv)| {
                        let x = xv.f64();
                        gv * T::of(kernels::phi(x) + x * kernels::phi_density(x))
                    })
                    .collect();
                acc(adj, x, gx);
            }
            &Op::Sum(x) => acc(adj, x, vec![g[0]; numel(x)]),
            &Op::Mean(x) => {
                let n = numel(x);
                acc(adj, x, vec![g[0] / T::of(n as f64); n]);
            }
            &Op::Reshape(x) => acc(adj, x, g),
            &Op::Narrow { x, axis, start } => {
                let xs = nodes[x.0].value.shape();
                let (outer, full, inner) = kernels::split_axis(xs, axis);
                let len = nodes[i].value.shape()[axis];
                let mut gx = vec![T::zero(); numel(x)];
                for o in 0..outer {
                    let dst = &mut gx[(o * full + start) * inner..(o * full + start + len) * inner];
                    dst.copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(adj, x, gx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = kernels::split_axis(nodes[i].value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.shape()[*axis];
                    if rg(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[from..from + len * inner]);
                        }
                        acc(adj, p, gp);
                    }
                    offset += len;
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (x, w, b, geom) = (*x, *w, *b, *geom);
                let ws = nodes[w.0].value.shape();
                let (batch, filters) = (nodes[x.0].value.shape()[0], ws[0]);
                let (rows, cn) = (geom.col_rows(), geom.col_cols());
                let img = geom.channels * geom.height * geom.width;
                if rg(b) {
                    let mut gb = vec![T::zero(); filters];
                    for n in 0..batch {
                        for f in 0..filters {
                            let off = (n * filters + f) * cn;
                            gb[f] += g[off..off + cn].iter().copied().sum::<T>();
                        }
                    }
                    acc(adj, b, gb);
                }
                if rg(w) {
                    let mut gw = vec![T::zero(); filters * rows];
                    for n in 0..batch {
                        let go = &g[n * filters * cn..(n + 1) * filters * cn];
                        let c = &cols[n * rows * cn..(n + 1) * rows * cn];
                        kernels::gemm_nt(filters, cn, rows, go, c, &mut gw, true);
                    }
                    acc(adj, w, gw);
                }
                if rg(x) {
                    let wd = val(w);
                    let mut gx = vec![T::zero(); batch * img];
                    let mut gcols = vec![T::zero(); rows * cn];
                    for n in 0..batch {
                        let go = &g[n * filters * cn..(n + 1) * filters * cn];
                        kernels::gemm_tn(rows, filters, cn, wd, go, &mut gcols, false);
                        kernels::col2im(&geom, &gcols, &mut gx[n * img..(n + 1) * img]);
                    }
                    acc(adj, x, gx);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![T::zero(); numel(*x)];
                for (&src, &gv) in argmax.iter().zip(&g) {
                    gx[src] += gv;
                }
                acc(adj, *x, gx);
            }
            Op::BatchNorm(c) => {
                let gamma = val(c.gamma);
                let batch = numel(c.x) / (c.channels * c.inner);
                let count = (batch * c.inner) as f64;
                let mut sum_dy = vec![0.0f64; c.channels];
                let mut sum_dy_xhat = vec![0.0f64; c.channels];
                for n in 0..batch {
                    for ch in 0..c.channels {
                        let off = (n * c.channels + ch) * c.inner;
                        for j in off..off + c.inner {
                            sum_dy[ch] += g[j].f64();
                            sum_dy_xhat[ch] += (g[j] * c.xhat[j]).f64();
                        }
                    }
                }
                if rg(c.gamma) {
                    acc(adj, c.gamma, sum_dy_xhat.iter().map(|&v| T::of(v)).collect());
                }
                if rg(c.beta) {
                    acc(adj, c.beta, sum_dy.iter().map(|&v| T::of(v)).collect());
                }
                if rg(c.x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for n in 0..batch {
                        for ch in 0..c.channels {
                            let off = (n * c.channels + ch) * c.inner;
                            let scale = gamma[ch].f64() * c.inv_std[ch].f64();
                            for j in off..off + c.inner {
                                gx[j] = if c.batch_stats {
                                    T::of(
                                        scale
                                            * (g[j].f64()
                                                - sum_dy[ch] / count
                                                - c.xhat[j].f64() * sum_dy_xhat[ch] / count),
                                    )
                                } else {
                                    T::of(scale * g[j].f64())
                                };
                            }
                        }
                    }
                    acc(adj, c.x, gx);
                }
            }
            Op::LayerNorm(c) => {
                let d = c.channels;
                let gamma = val(c.gamma);
                if rg(c.gamma) || rg(c.beta) {
                    let mut gg = vec![T::zero(); d];
                    let mut gb = vec![T::zero(); d];
                    for (j, (&gv, &h)) in g.iter().zip(&c.xhat).enumerate() {
                        gg[j % d] += gv * h;
                        gb[j % d] += gv;
                    }
                    if rg(c.gamma) {
                        acc(adj, c.gamma, gg);
                    }
                    if rg(c.beta) {
                        acc(adj, c.beta, gb);
                    }
                }
                if rg(c.x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for r in 0..c.inner {
                        let range = r * d..(r + 1) * d;
                        let dxhat: Vec<f64> = g[range.clone()]
                            .iter()
                            .zip(gamma)
                            .map(|(&a, &b)| (a * b).f64())
                            .collect();
                        let xh = &c.xhat[range];
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b.f64()).sum::<f64>() / d as f64;
                        let is = c.inv_std[r].f64();
                        for j in 0..d {
                            gx[r * d + j] = T::of(is * (dxhat[j] - m1 - xh[j].f64() * m2));
                        }
                    }
                    acc(adj, c.x, gx);
                }
            }
            Op::Dropout { x, mask } => {
                acc(adj, *x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect());
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = probs.len() / labels.len();
                let scale = g[0] / T::of(labels.len() as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * classes + l] -= scale;
                }
                acc(adj, *logits, gl);
            }
            Op::BceLogits { logits, targets } => {
                let scale = g[0].f64() / targets.len() as f64;
                let gl = val(*logits)
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| T::of(scale * (sigmoid(z.f64()) - y.f64())))
                    .collect();
                acc(adj, *logits, gl);
            }
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
