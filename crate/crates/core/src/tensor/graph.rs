//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied during a forward pass. Nodes are
//! appended in evaluation order, so the reverse of insertion order is a valid
//! topological order for backpropagation. A graph is single-threaded and is
//! meant to be thrown away after one forward/backward pass.

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::param::{Gradients, ParamId, ParamStore};
use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// One masked weight slab entering a group norm: elements whose index along
/// `axis` has `keep[idx] == false` belong to the group.
#[derive(Clone, Debug)]
struct GroupPart {
    var: Var,
    axis: usize,
    keep: Arc<Vec<bool>>,
}

enum Op<S> {
    Leaf,
    Param { store: u64, id: ParamId },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    MatMul(Var, Var),
    Relu(Var),
    Relu6(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    Square(Var),
    Clamp(Var, S, S),
    Sum(Var),
    Mean(Var),
    Minimum(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        train: bool,
    },
    ChannelMask(Var, Arc<Vec<S>>),
    GlobalAvgPool(Var),
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    GroupNorm {
        parts: Vec<GroupPart>,
        norm: S,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Statistics computed by a training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<S>,
    /// Number of elements per channel.
    pub count: usize,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> S {
        self.nodes[v.0].value.item()
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable parameter; its gradient is routed back to `store`.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let value = store.value(id).clone();
        self.push(
            value,
            Op::Param {
                store: store.uid(),
                id,
            },
            true,
        )
    }

    /// Parameter value used as a constant (frozen network).
    pub fn frozen(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    /// Copy of `v` cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Var {
        let v = self.value(a).zip_map(self.value(b), f);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, op, ng)
    }

    fn unary(&mut self, a: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let v = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(v, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        Ok(self.binary(a, b, Op::Minimum(a, b), |x, y| if y < x { y } else { x }))
    }

    /// `[B,N] + [N]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || self.shape(b) != [xs[1]] {
            return Err(Error::shape(
                "add_row_bias",
                format!("{:?} + {:?}", xs, self.shape(b)),
            ));
        }
        let n = xs[1];
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e += bias[i % n];
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(v, Op::AddRowBias(x, b), ng))
    }

    /// `[N,C,H,W] + [C]` broadcast over channels.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(b) != [xs[1]] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("{:?} + {:?}", xs, self.shape(b)),
            ));
        }
        let hw = xs[2] * xs[3];
        let c = xs[1];
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e += bias[(i / hw) % c];
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(v, Op::AddChannelBias(x, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = S::lit(s);
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = S::lit(s);
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    /// `1 − a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_scalar(n, 1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let v = Tensor::new(&[m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(S::zero()))
    }

    pub fn relu6(&mut self, a: Var) -> Var {
        let six = S::lit(6.0);
        self.unary(a, Op::Relu6(a), |x| x.max(S::zero()).min(six))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Elementwise clamp; the gradient is zero where the input was clipped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (S::lit(lo), S::lit(hi));
        self.unary(a, Op::Clamp(a, l, h), |x| x.max(l).min(h))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / S::lit(t.numel() as f64);
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("part shape {s:?}, expected [{rows}, _]"),
                ));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(&[rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::shape(
                "slice_cols",
                format!("{s:?}[.., {start}..{}]", start + len),
            ));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(s[0] * len);
        for r in 0..s[0] {
            out.extend_from_slice(&src[r * s[1] + start..r * s[1] + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&[s[0], len], out)?, Op::SliceCols(a, start), ng))
    }

    /// Stack 2-D tensors with equal widths along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let width = self.shape(parts[0])[1];
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != width {
                return Err(Error::shape(
                    "concat_rows",
                    format!("part shape {s:?}, expected [_, {width}]"),
                ));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(&[rows, width], out)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    /// Select rows of a 2-D tensor (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || idx.is_empty() {
            return Err(Error::shape("gather_rows", format!("{s:?}")));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for {s:?}"),
            ));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * s[1]);
        for &i in idx {
            out.extend_from_slice(&src[i * s[1]..(i + 1) * s[1]]);
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(&[idx.len(), s[1]], out)?,
            Op::GatherRows(a, idx.to_vec()),
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    /// 2-D cross-correlation. `x: [N,C_in,H,W]`, `w: [C_out, C_in/groups, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("conv2d", format!("input rank {} != 4", xs.len())));
        }
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", format!("weight shape {ws:?}")));
        }
        if groups == 0 || !xs[1].is_multiple_of(groups) || !ws[0].is_multiple_of(groups) {
            return Err(Error::shape(
                "conv2d",
                format!("groups={groups} does not divide C_in={} / C_out={}", xs[1], ws[0]),
            ));
        }
        if ws[1] * groups != xs[1] {
            return Err(Error::shape(
                "conv2d",
                format!("C_in: input has {} channels, weight expects {}", xs[1], ws[1] * groups),
            ));
        }
        let k = ws[2];
        if stride == 0 || k == 0 {
            return Err(Error::shape("conv2d", "stride and kernel must be >= 1"));
        }
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("H/W: {}x{} with pad {pad} smaller than kernel {k}", xs[2], xs[3]),
            ));
        }
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            k,
            stride,
            pad,
            groups,
        };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let v = Tensor::new(&[geom.batch, geom.c_out, geom.out_h(), geom.out_w()], out)?;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(v, Op::Conv2d { x, w, geom }, ng))
    }

    /// Training-mode batch norm over `[N,C,H,W]`; returns the output and the
    /// batch statistics so the caller can update running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<S>)> {
        let (n, c, hw) = self.bn_dims(x, gamma, beta)?;
        let count = n * hw;
        let xd = self.value(x).data();
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for ch in 0..c {
            let mut s = S::zero();
            for i in 0..n {
                let off = (i * c + ch) * hw;
                s += xd[off..off + hw].iter().copied().sum::<S>();
            }
            let m = s / S::lit(count as f64);
            let mut v = S::zero();
            for i in 0..n {
                let off = (i * c + ch) * hw;
                v += xd[off..off + hw].iter().map(|&e| (e - m) * (e - m)).sum::<S>();
            }
            mean[ch] = m;
            var[ch] = v / S::lit(count as f64);
        }
        let out = self.bn_apply(x, gamma, beta, &mean, &var, eps, true);
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[S],
        var: &[S],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = self.bn_dims(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm_eval", "running stats length"));
        }
        Ok(self.bn_apply(x, gamma, beta, mean, var, eps, false))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::shape("batch_norm", format!("input {xs:?}")));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("C: {c} channels but affine {:?}", self.shape(gamma)),
            ));
        }
        Ok((xs[0], c, xs[2] * xs[3]))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[S],
        var: &[S],
        eps: f64,
        train: bool,
    ) -> Var {
        let shape = self.shape(x).to_vec();
        let (c, hw) = (shape[1], shape[2] * shape[3]);
        let inv_std: Vec<S> = var
            .iter()
            .map(|&v| S::one() / (v + S::lit(eps)).sqrt())
            .collect();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let xd = self.value(x).data();
        let mut xhat = vec![S::zero(); xd.len()];
        let mut out = vec![S::zero(); xd.len()];
        for (i, (&e, (h, o))) in xd.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / hw) % c;
            *h = (e - mean[ch]) * inv_std[ch];
            *o = *h * g[ch] + b[ch];
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let v = Tensor::new(&shape, out).expect("bn shape");
        self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            ng,
        )
    }

    /// Multiply channel `c` of `[N,C,H,W]` by the constant `mask[c]`.
    pub fn channel_mask(&mut self, x: Var, mask: &[S]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != mask.len() {
            return Err(Error::shape(
                "channel_mask",
                format!("mask of {} for input {xs:?}", mask.len()),
            ));
        }
        let hw = xs[2] * xs[3];
        let c = xs[1];
        let mut v = self.value(x).clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e *= mask[(i / hw) % c];
        }
        let ng = self.ng(x);
        Ok(self.push(v, Op::ChannelMask(x, Arc::new(mask.to_vec())), ng))
    }

    /// `[N,C,H,W] → [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("{xs:?}")));
        }
        let hw = xs[2] * xs[3];
        let inv = S::lit(1.0 / hw as f64);
        let out: Vec<S> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<S>() * inv)
            .collect();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(&[xs[0], xs[1]], out)?,
            Op::GlobalAvgPool(x),
            ng,
        ))
    }

    /// Mean softmax cross-entropy of `[B,K]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {s:?} vs {} labels", labels.len()),
            ));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} >= {k} classes"),
            ));
        }
        let data = self.value(logits).data();
        let mut probs = vec![S::zero(); data.len()];
        let mut loss = S::zero();
        for (r, &y) in labels.iter().enumerate() {
            let row = &data[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z: S = row.iter().map(|&v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j] - mx).exp() / z;
            }
            loss += z.ln() + mx - row[y];
        }
        loss = loss / S::lit(labels.len() as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// `sqrt(Σ w²)` over the union of removed slices of several weights.
    ///
    /// Each part is `(weight, axis, keep)`: element `w[.., i, ..]` (index `i`
    /// along `axis`) is in the group iff `keep[i]` is false. The gradient is
    /// `w / norm` on grouped elements and exactly zero elsewhere (and zero
    /// everywhere when the norm vanishes).
    pub fn masked_group_norm(&mut self, parts: &[(Var, usize, &[bool])]) -> Result<Var> {
        let mut sq = S::zero();
        let mut stored = Vec::with_capacity(parts.len());
        for &(v, axis, keep) in parts {
            let shape = self.shape(v).to_vec();
            if axis >= shape.len() || shape[axis] != keep.len() {
                return Err(Error::shape(
                    "masked_group_norm",
                    format!("mask of {} on axis {axis} of {shape:?}", keep.len()),
                ));
            }
            let inner: usize = shape[axis + 1..].iter().product();
            let d = shape[axis];
            for (i, &w) in self.value(v).data().iter().enumerate() {
                if !keep[(i / inner) % d] {
                    sq += w * w;
                }
            }
            stored.push(GroupPart {
                var: v,
                axis,
                keep: Arc::new(keep.to_vec()),
            });
        }
        let norm = sq.sqrt();
        let ng = parts.iter().any(|p| self.ng(p.0));
        Ok(self.push(
            Tensor::scalar(norm),
            Op::GroupNorm {
                parts: stored,
                norm,
            },
            ng,
        ))
    }

    /// Backpropagate from a scalar loss and collect parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(ls));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, gy, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node<S>,
        gy: Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        out: &mut Gradients<S>,
    ) -> Result<()> {
        let mut acc = |v: Var, g: Tensor<S>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param { store, id } => out.entries.push((*store, *id, gy)),
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy);
            }
            Op::Sub(a, b) => {
                acc(*b, gy.map(|x| -x));
                acc(*a, gy);
            }
            Op::Mul(a, b) => {
                acc(*a, gy.zip_map(self.value(*b), |g, y| g * y));
                acc(*b, gy.zip_map(self.value(*a), |g, x| g * x));
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut ga = gy.clone();
                let mut gb = gy;
                for i in 0..ga.numel() {
                    if vb.data()[i] < va.data()[i] {
                        ga.data_mut()[i] = S::zero();
                    } else {
                        gb.data_mut()[i] = S::zero();
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::AddRowBias(x, b) => {
                let n = self.shape(*b)[0];
                let mut gb = vec![S::zero(); n];
                for (i, &g) in gy.data().iter().enumerate() {
                    gb[i % n] += g;
                }
                acc(*b, Tensor::new(&[n], gb)?);
                acc(*x, gy);
            }
            Op::AddChannelBias(x, b) => {
                let s = self.shape(*x);
                let (c, hw) = (s[1], s[2] * s[3]);
                let mut gb = vec![S::zero(); c];
                for (i, &g) in gy.data().iter().enumerate() {
                    gb[(i / hw) % c] += g;
                }
                acc(*b, Tensor::new(&[c], gb)?);
                acc(*x, gy);
            }
            Op::Scale(a, s) => {
                let s = *s;
                acc(*a, gy.map(|g| g * s));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                acc(*a, gy.reshape(&shape)?);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![S::zero(); m * k];
                    kernels::gemm(m, n, k, gy.data(), false, self.value(*b).data(), true, &mut ga, false);
                    acc(*a, Tensor::new(&[m, k], ga)?);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![S::zero(); k * n];
                    kernels::gemm(k, m, n, self.value(*a).data(), true, gy.data(), false, &mut gb, false);
                    acc(*b, Tensor::new(&[k, n], gb)?);
                }
            }
            Op::Relu(a) => {
                let g = gy.zip_map(self.value(*a), |g, x| if x > S::zero() { g } else { S::zero() });
                acc(*a, g);
            }
            Op::Relu6(a) => {
                let six = S::lit(6.0);
                let g = gy.zip_map(self.value(*a), |g, x| {
                    if x > S::zero() && x < six {
                        g
                    } else {
                        S::zero()
                    }
                });
                acc(*a, g);
            }
            Op::Tanh(a) => acc(*a, gy.zip_map(&node.value, |g, y| g * (S::one() - y * y))),
            Op::Sigmoid(a) => acc(*a, gy.zip_map(&node.value, |g, y| g * y * (S::one() - y))),
            Op::Exp(a) => acc(*a, gy.zip_map(&node.value, |g, y| g * y)),
            Op::Softplus(a) => acc(*a, gy.zip_map(self.value(*a), |g, x| g * sigmoid(x))),
            Op::Square(a) => acc(*a, gy.zip_map(self.value(*a), |g, x| g * (x + x))),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(
                    *a,
                    gy.zip_map(self.value(*a), |g, x| {
                        if x > lo && x < hi {
                            g
                        } else {
                            S::zero()
                        }
                    }),
                );
            }
            Op::Sum(a) => {
                let g = gy.item();
                acc(*a, Tensor::full(self.shape(*a), g));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let g = gy.item() / S::lit(n as f64);
                acc(*a, Tensor::full(self.shape(*a), g));
            }
            Op::ConcatCols(parts) => {
                let rows = gy.dim(0);
                let total = gy.dim(1);
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&gy.data()[r * total + off..r * total + off + w]);
                    }
                    acc(p, Tensor::new(&[rows, w], gp)?);
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let s = self.shape(*a).to_vec();
                let len = gy.dim(1);
                let mut ga = vec![S::zero(); s[0] * s[1]];
                for r in 0..s[0] {
                    ga[r * s[1] + start..r * s[1] + start + len]
                        .copy_from_slice(&gy.data()[r * len..(r + 1) * len]);
                }
                acc(*a, Tensor::new(&s, ga)?);
            }
            Op::ConcatRows(parts) => {
                let width = gy.dim(1);
                let mut off = 0;
                for &p in parts {
                    let r = self.shape(p)[0];
                    let gp = gy.data()[off * width..(off + r) * width].to_vec();
                    acc(p, Tensor::new(&[r, width], gp)?);
                    off += r;
                }
            }
            Op::GatherRows(a, idx) => {
                let s = self.shape(*a).to_vec();
                let w = s[1];
                let mut ga = vec![S::zero(); s[0] * w];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..w {
                        ga[i * w + j] += gy.data()[r * w + j];
                    }
                }
                acc(*a, Tensor::new(&s, ga)?);
            }
            Op::Conv2d { x, w, geom } => {
                if self.nodes[x.0].needs_grad {
                    let dx = kernels::conv2d_backward_input(gy.data(), self.value(*w).data(), geom);
                    acc(*x, Tensor::new(self.shape(*x), dx)?);
                }
                if self.nodes[w.0].needs_grad {
                    let dw = kernels::conv2d_backward_weight(self.value(*x).data(), gy.data(), geom);
                    acc(*w, Tensor::new(self.shape(*w), dw)?);
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
                let s = self.shape(*x).to_vec();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let g = self.value(*gamma).data();
                let dy = gy.data();
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for (i, &d) in dy.iter().enumerate() {
                    let ch = (i / hw) % c;
                    dgamma[ch] += d * xhat[i];
                    dbeta[ch] += d;
                }
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![S::zero(); dy.len()];
                    if *train {
                        let m = S::lit((n * hw) as f64);
                        for (i, out) in dx.iter_mut().enumerate() {
                            let ch = (i / hw) % c;
                            // dx = γ·inv_std/m · (m·dy − Σdy − x̂·Σ(dy·x̂))
                            *out = g[ch] * inv_std[ch] / m
                                * (m * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                        }
                    } else {
                        for (i, out) in dx.iter_mut().enumerate() {
                            let ch = (i / hw) % c;
                            *out = dy[i] * g[ch] * inv_std[ch];
                        }
                    }
                    acc(*x, Tensor::new(&s, dx)?);
                }
                acc(*gamma, Tensor::new(&[c], dgamma)?);
                acc(*beta, Tensor::new(&[c], dbeta)?);
            }
            Op::ChannelMask(x, mask) => {
                let s = self.shape(*x);
                let (c, hw) = (s[1], s[2] * s[3]);
                let mut g = gy;
                for (i, e) in g.data_mut().iter_mut().enumerate() {
                    *e *= mask[(i / hw) % c];
                }
                acc(*x, g);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x).to_vec();
                let hw = s[2] * s[3];
                let inv = S::lit(1.0 / hw as f64);
                let mut g = Vec::with_capacity(s.iter().product());
                for &d in gy.data() {
                    g.extend(std::iter::repeat_n(d * inv, hw));
                }
                acc(*x, Tensor::new(&s, g)?);
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = gy.item() / S::lit(labels.len() as f64);
                let mut g = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    g[r * k + y] -= S::one();
                }
                g.iter_mut().for_each(|v| *v *= scale);
                acc(*logits, Tensor::new(self.shape(*logits), g)?);
            }
            Op::GroupNorm { parts, norm } => {
                let scale = if *norm > S::zero() {
                    gy.item() / *norm
                } else {
                    S::zero()
                };
                for p in parts {
                    let v = self.value(p.var);
                    let shape = v.shape();
                    let inner: usize = shape[p.axis + 1..].iter().product();
                    let d = shape[p.axis];
                    let mut g = Tensor::zeros(shape);
                    for (i, (o, &w)) in g.data_mut().iter_mut().zip(v.data()).enumerate() {
                        if !p.keep[(i / inner) % d] {
                            *o = w * scale;
                        }
                    }
                    acc(p.var, g);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_unit_grad() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let l = g.sum(wv);
        let grads = g.backward(l).unwrap();
        grads.accumulate_into(&mut store);
        assert_eq!(store.get(w).grad.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_grad_and_accumulation() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap());
        for expected in [[2.0, -4.0], [4.0, -8.0]] {
            let mut g = Graph::new();
            let wv = g.param(&store, w);
            let sq = g.mul(wv, wv).unwrap();
            let l = g.sum(sq);
            g.backward(l).unwrap().accumulate_into(&mut store);
            assert_eq!(store.get(w).grad.data(), &expected);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn conv_shape_errors_name_the_dimension() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
        let err = g.conv2d(x, w, 1, 1, 1).unwrap_err().to_string();
        assert!(err.contains("C_in"), "{err}");
        let x2 = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let err = g.conv2d(x2, w, 1, 0, 1).unwrap_err().to_string();
        assert!(err.contains("H/W"), "{err}");
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = g.constant(Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap());
        let y = g.conv2d(x, w, 1, 0, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));

        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = g.conv2d(x, w, 1, 0, 1).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
    }

    #[test]
    fn group_norm_of_three_four_is_five() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(Tensor::from_f64(&[2, 2], &[3.0, 4.0, 1.0, 1.0]).unwrap());
        let n = g.masked_group_norm(&[(w, 0, &[false, true])]).unwrap();
        assert_eq!(g.scalar_value(n), 5.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(1000.0f64) - 1000.0).abs() < 1e-9);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-12);
    }
}
