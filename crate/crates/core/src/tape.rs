//! Dynamic reverse-mode autodiff.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each op appends a node
//! holding its output value; [`Tape::backward`] walks the nodes in reverse
//! and only visits those that transitively depend on a gradient-requiring
//! leaf, so frozen sub-graphs cost nothing on the way back.

use std::collections::HashMap;
use std::rc::Rc;

use crate::boxes::{giou_with_grad, BBox};
use crate::error::{Error, Result};
use crate::kernels::{self, DeformDims, LevelLayout, Stencil};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Exp,
    Sin,
    Cos,
    Abs,
    Logit,
}

/// Boolean mask over the last axis; either one row broadcast to every row or
/// one entry per element.
#[derive(Debug, Clone)]
pub struct Mask {
    allow: Rc<[bool]>,
}

impl Mask {
    pub fn new(allow: Vec<bool>) -> Self {
        Self {
            allow: allow.into(),
        }
    }

    pub fn allows(&self, row: usize, col: usize, cols: usize) -> bool {
        if self.allow.len() == cols {
            self.allow[col]
        } else {
            self.allow[row * cols + col]
        }
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Affine(Var, f64),
    Unary(UnaryKind, Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Reshape(Var),
    SliceLast { x: Var, start: usize },
    ConcatLast(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    GroupMeanRows { x: Var, groups: Vec<Vec<usize>> },
    Sum(Var),
    Softmax { x: Var },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Im2Col {
        x: Var,
        h: usize,
        w: usize,
        c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Bilinear { map: Var, points: Var },
    Deform {
        value: Var,
        locs: Var,
        weights: Var,
        layout: Rc<LevelLayout>,
        dims: DeformDims,
    },
    Focal {
        logits: Var,
        targets: Rc<[f64]>,
        alpha: f64,
        gamma: f64,
    },
    Giou { pred: Var, targets: Rc<[f64]> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
    leaves: Vec<(Var, u64, ParamId)>,
    grad_enabled: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Number of nodes that ended up holding a gradient buffer.
    pub fn allocated(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

const LOGIT_EPS: f64 = 1e-5;

fn check_finite(op: &'static str, t: &Tensor) {
    debug_assert!(t.is_finite(), "non-finite output from {op} {:?}", t.shape());
}

impl Tape {
    pub fn new() -> Self {
        Self {
            grad_enabled: true,
            ..Default::default()
        }
    }

    /// A tape that records values only; nothing on it requires a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Default::default()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_with(t, Op::Leaf, false)
    }

    /// Free-standing leaf, used for gradient checks against raw inputs.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.push_with(t, Op::Leaf, rg)
    }

    /// Brings a parameter onto the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.0);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let p = store.get(id);
        let v = self.push_with(
            Tensor::from_parts(p.tensor.shape().to_vec(), p.tensor.data().to_vec()),
            Op::Leaf,
            self.grad_enabled && !p.frozen,
        );
        self.params.insert(key, v);
        self.leaves.push((v, store.uid(), id));
        v
    }

    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (Var, u64, ParamId)> + '_ {
        self.leaves.iter().copied()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the value into a new constant node.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let nb = self.value(b).numel();
        let suffix = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if !(suffix || nb == 1) {
            return Err(Error::shape("broadcast", sa, sb));
        }
        let av = self.data(a);
        let bv = self.data(b);
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        let out = Tensor::from_parts(sa.to_vec(), data);
        check_finite("binary", &out);
        Ok(self.push(out, Op::Binary(kind, a, b), &[a, b]))
    }

    /// `a + b`, where `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// `x * scale`.
    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v * scale).collect());
        self.push(out, Op::Affine(x, scale), &[x])
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let t = self.value(x);
        let f = |v: f64| match kind {
            UnaryKind::Relu => v.max(0.0),
            UnaryKind::Gelu => gelu(v).0,
            UnaryKind::Sigmoid => kernels::sigmoid(v),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Sin => v.sin(),
            UnaryKind::Cos => v.cos(),
            UnaryKind::Abs => v.abs(),
            UnaryKind::Logit => {
                let c = v.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
                (c / (1.0 - c)).ln()
            }
        };
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        check_finite("unary", &out);
        self.push(out, Op::Unary(kind, x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sin, x)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Cos, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Abs, x)
    }

    /// Inverse sigmoid, input clamped to `[1e-5, 1 - 1e-5]`.
    pub fn logit(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Logit, x)
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[.., m, k] · b[k, n]` or batched `b[.., k, n]`. With `trans_b`, `b`
    /// is laid out as `[.., n, k]`.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let bbatch: usize = sb[..sb.len() - 2].iter().product();
        let batch_ok = sb.len() == 2 || sa[..sa.len() - 2] == sb[..sb.len() - 2];
        if k != kb || !batch_ok {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let av = self.data(a);
        let bv = self.data(b);
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let aa = &av[bi * m * k..(bi + 1) * m * k];
            let bj = if bbatch == 1 { 0 } else { bi };
            let bb = &bv[bj * k * n..(bj + 1) * k * n];
            let oo = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                kernels::gemm_nt(aa, bb, oo, m, k, n);
            } else {
                kernels::gemm_nn(aa, bb, oo, m, k, n);
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let out = Tensor::from_parts(shape, out);
        check_finite("matmul", &out);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[2]));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let out = Tensor::from_parts(vec![c, r], out);
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    // ---- slicing / joining ----------------------------------------------

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if start + len > d || len == 0 {
            return Err(Error::shape("slice_last", t.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::SliceLast { x, start }, &[x]))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat_last", &first, s));
            }
            total += s[s.len() - 1];
        }
        let rows = self.value(xs[0]).rows();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::ConcatLast(xs.to_vec()), xs))
    }

    /// Rows `[start, start + len)` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        if start + len > n || len == 0 {
            return Err(Error::shape("slice_rows", t.shape(), &[start, len]));
        }
        let stride = t.numel() / n;
        let data = t.data()[start * stride..(start + len) * stride].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    /// Concatenation along the first axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let mut n = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s[1..] != first[1..] {
                return Err(Error::shape("concat_rows", &first, s));
            }
            n += s[0];
            data.extend_from_slice(self.data(x));
        }
        let mut shape = first;
        shape[0] = n;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::ConcatRows(xs.to_vec()), xs))
    }

    /// Selects rows along the first axis (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::shape("gather_rows", t.shape(), idx));
        }
        let stride = t.numel() / n;
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            data.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean of each row group of a `[n, d]` tensor, giving `[groups, d]`.
    pub fn group_mean_rows(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || groups.is_empty() {
            return Err(Error::shape("group_mean_rows", t.shape(), &[groups.len()]));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; groups.len() * d];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() || members.iter().any(|&i| i >= n) {
                return Err(Error::contract("group_mean_rows: empty or out-of-range group"));
            }
            let out = &mut data[g * d..(g + 1) * d];
            for &i in members {
                for (o, v) in out.iter_mut().zip(t.row(i)) {
                    *o += v;
                }
            }
            let inv = 1.0 / members.len() as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let out = Tensor::from_parts(vec![groups.len(), d], data);
        Ok(self.push(
            out,
            Op::GroupMeanRows {
                x,
                groups: groups.to_vec(),
            },
            &[x],
        ))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let n = self.shape(x)[0];
        self.group_mean_rows(x, &[(0..n).collect()])
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    // ---- normalization ---------------------------------------------------

    /// Softmax over the last axis. With a mask, disallowed positions are
    /// exactly zero and the max is taken over allowed positions only.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        let rows = t.rows();
        if let Some(m) = mask {
            if m.allow.len() != n && m.allow.len() != n * rows {
                return Err(Error::shape("masked_softmax", t.shape(), &[m.allow.len()]));
            }
        }
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = t.row(r);
            let allowed = |c: usize| mask.map_or(true, |m| m.allows(r, c, n));
            let mut max = f64::NEG_INFINITY;
            for (c, &v) in row.iter().enumerate() {
                if allowed(c) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::contract(format!(
                    "masked_softmax: row {r} has no allowed position"
                )));
            }
            let orow = &mut out[r * n..(r + 1) * n];
            let mut sum = 0.0;
            for c in 0..n {
                if allowed(c) {
                    let e = (row[c] - max).exp();
                    orow[c] = e;
                    sum += e;
                }
            }
            for c in 0..n {
                if allowed(c) {
                    orow[c] /= sum;
                }
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        check_finite("masked_softmax", &out);
        Ok(self.push(out, Op::Softmax { x }, &[x]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape("layer_norm", t.shape(), self.shape(gamma)));
        }
        if !(eps > 0.0) {
            return Err(Error::contract("layer_norm: eps must be positive"));
        }
        let g = self.data(gamma);
        let b = self.data(beta);
        let rows = t.rows();
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let xh = (row[c] - mean) * rs;
                xhat[r * d + c] = xh;
                out[r * d + c] = xh * g[c] + b[c];
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        check_finite("layer_norm", &out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    // ---- spatial ---------------------------------------------------------

    /// HWC image `[h*w, c]` to patch rows `[oh*ow, k*k*c]`.
    #[allow(clippy::too_many_arguments)]
    pub fn im2col(
        &mut self,
        x: Var,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] != h * w || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape("im2col", t.shape(), &[h, w, k]));
        }
        let c = t.shape()[1];
        let cols = kernels::im2col(t.data(), h, w, c, k, stride, pad);
        let oh = kernels::conv_out(h, k, stride, pad);
        let ow = kernels::conv_out(w, k, stride, pad);
        let out = Tensor::from_parts(vec![oh * ow, k * k * c], cols);
        Ok(self.push(
            out,
            Op::Im2Col {
                x,
                h,
                w,
                c,
                k,
                stride,
                pad,
            },
            &[x],
        ))
    }

    /// Samples `map[c, h, w]` at normalized points `[p, 2]` (x, y), giving
    /// `[p, c]`. Align-corners-false; out-of-bounds corners read as zero.
    pub fn bilinear_sample(&mut self, map: Var, points: Var) -> Result<Var> {
        let m = self.value(map);
        let p = self.value(points);
        if m.rank() != 3 || p.rank() != 2 || p.shape()[1] != 2 {
            return Err(Error::shape("bilinear_sample", m.shape(), p.shape()));
        }
        let (c, h, w) = (m.shape()[0], m.shape()[1], m.shape()[2]);
        let np = p.shape()[0];
        let md = m.data();
        let mut out = vec![0.0; np * c];
        for i in 0..np {
            let st = Stencil::new(p.data()[2 * i], p.data()[2 * i + 1], h, w);
            for k in 0..4 {
                if let Some(idx) = st.idx[k] {
                    for ch in 0..c {
                        out[i * c + ch] += st.weight[k] * md[ch * h * w + idx];
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![np, c], out);
        Ok(self.push(out, Op::Bilinear { map, points }, &[map, points]))
    }

    /// Multi-scale deformable attention core.
    ///
    /// `value`: `[T, C]` rows of all levels in `layout` order; `locs`:
    /// `[Q, H, L, P, 2]`; `weights`: `[Q, H, L, P]`. Output `[Q, C]`.
    pub fn ms_deform_attn(
        &mut self,
        value: Var,
        layout: Rc<LevelLayout>,
        locs: Var,
        weights: Var,
        heads: usize,
        points: usize,
    ) -> Result<Var> {
        let v = self.value(value);
        let l = self.value(locs);
        let wt = self.value(weights);
        let levels = layout.levels();
        if v.rank() != 2 || v.shape()[0] != layout.total() || v.shape()[1] % heads != 0 {
            return Err(Error::shape("ms_deform_attn", v.shape(), &[layout.total()]));
        }
        let q = l.numel() / (heads * levels * points * 2);
        if l.numel() != q * heads * levels * points * 2 || wt.numel() != q * heads * levels * points
        {
            return Err(Error::shape("ms_deform_attn", l.shape(), wt.shape()));
        }
        let dims = DeformDims {
            queries: q,
            heads,
            levels,
            points,
            channels: v.shape()[1],
        };
        let mut out = vec![0.0; q * dims.channels];
        kernels::ms_deform_attn_forward(v.data(), &layout, l.data(), wt.data(), dims, &mut out);
        let out = Tensor::from_parts(vec![q, dims.channels], out);
        check_finite("ms_deform_attn", &out);
        Ok(self.push(
            out,
            Op::Deform {
                value,
                locs,
                weights,
                layout,
                dims,
            },
            &[value, locs, weights],
        ))
    }

    // ---- losses ------------------------------------------------------------

    /// Summed sigmoid focal loss against per-element targets in `[0, 1]`.
    pub fn focal_loss(&mut self, logits: Var, targets: Vec<f64>, alpha: f64, gamma: f64) -> Result<Var> {
        let x = self.value(logits);
        if x.numel() != targets.len() {
            return Err(Error::shape("focal_loss", x.shape(), &[targets.len()]));
        }
        let total: f64 = x
            .data()
            .iter()
            .zip(&targets)
            .map(|(&v, &t)| kernels::focal_term(v, t, alpha, gamma).0)
            .sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::Focal {
                logits,
                targets: targets.into(),
                alpha,
                gamma,
            },
            &[logits],
        ))
    }

    /// Per-row `1 - giou(pred_i, target_i)` for `[m, 4]` boxes, giving `[m]`.
    pub fn giou_loss(&mut self, pred: Var, targets: &[BBox]) -> Result<Var> {
        let p = self.value(pred);
        if p.rank() != 2 || p.shape()[1] != 4 || p.shape()[0] != targets.len() {
            return Err(Error::shape("giou_loss", p.shape(), &[targets.len(), 4]));
        }
        let out: Vec<f64> = targets
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let r = p.row(i);
                1.0 - giou_with_grad(BBox::new(r[0], r[1], r[2], r[3]), *t).0
            })
            .collect();
        let flat: Vec<f64> = targets.iter().flat_map(|t| t.to_array()).collect();
        Ok(self.push(
            Tensor::from_vec(out),
            Op::Giou {
                pred,
                targets: flat.into(),
            },
            &[pred],
        ))
    }

    /// Mean softmax cross-entropy of `[b, c]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if x.rank() != 2 || x.shape()[0] != targets.len() {
            return Err(Error::shape("cross_entropy", x.shape(), &[targets.len()]));
        }
        let c = x.shape()[1];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::contract("cross_entropy: target out of range"));
            }
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        Ok(self.push(
            Tensor::scalar(total / targets.len() as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let n = nodes[v.0].value.numel();
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                f(buf);
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                let av = val(a).data();
                let bv = val(b).data();
                let nb = bv.len();
                acc(a, &mut |ga| {
                    for (k, gk) in g.iter().enumerate() {
                        ga[k] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => *gk,
                            BinaryKind::Mul => gk * bv[k % nb],
                            BinaryKind::Div => gk / bv[k % nb],
                        };
                    }
                });
                acc(b, &mut |gb| {
                    for (k, gk) in g.iter().enumerate() {
                        gb[k % nb] += match kind {
                            BinaryKind::Add => *gk,
                            BinaryKind::Sub => -gk,
                            BinaryKind::Mul => gk * av[k],
                            BinaryKind::Div => -gk * av[k] / (bv[k % nb] * bv[k % nb]),
                        };
                    }
                });
            }
            Op::Affine(x, s) => acc(*x, &mut |gx| {
                for (o, gk) in gx.iter_mut().zip(g) {
                    *o += gk * s;
                }
            }),
            Op::Unary(kind, x) => {
                let xv = val(*x).data();
                let yv = out.data();
                acc(*x, &mut |gx| {
                    for k in 0..g.len() {
                        let d = match kind {
                            UnaryKind::Relu => {
                                if xv[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Gelu => gelu(xv[k]).1,
                            UnaryKind::Sigmoid => yv[k] * (1.0 - yv[k]),
                            UnaryKind::Tanh => 1.0 - yv[k] * yv[k],
                            UnaryKind::Exp => yv[k],
                            UnaryKind::Sin => xv[k].cos(),
                            UnaryKind::Cos => -xv[k].sin(),
                            UnaryKind::Abs => xv[k].signum(),
                            UnaryKind::Logit => {
                                let v = xv[k];
                                if v > LOGIT_EPS && v < 1.0 - LOGIT_EPS {
                                    1.0 / (v * (1.0 - v))
                                } else {
                                    0.0
                                }
                            }
                        };
                        gx[k] += g[k] * d;
                    }
                });
            }
            Op::MatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let sa = val(a).shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = out.last_dim();
                let batch = val(a).numel() / (m * k);
                let bbatch = val(b).numel() / (k * n);
                let av = val(a).data();
                let bv = val(b).data();
                acc(a, &mut |ga| {
                    for bi in 0..batch {
                        let bj = if bbatch == 1 { 0 } else { bi };
                        let gg = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &bv[bj * k * n..(bj + 1) * k * n];
                        let oa = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if trans_b {
                            // dA = dC · B, B: [n, k]
                            kernels::gemm_nn(gg, bb, oa, m, n, k);
                        } else {
                            // dA = dC · Bᵀ, B: [k, n]
                            kernels::gemm_nt(gg, bb, oa, m, n, k);
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for bi in 0..batch {
                        let bj = if bbatch == 1 { 0 } else { bi };
                        let gg = &g[bi * m * n..(bi + 1) * m * n];
                        let aa = &av[bi * m * k..(bi + 1) * m * k];
                        let ob = &mut gb[bj * k * n..(bj + 1) * k * n];
                        if trans_b {
                            // dB = dCᵀ · A: [n, k]
                            kernels::gemm_tn(gg, aa, ob, m, n, k);
                        } else {
                            // dB = Aᵀ · dC: [k, n]
                            kernels::gemm_tn(aa, gg, ob, m, k, n);
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| {
                for (o, gk) in gx.iter_mut().zip(g) {
                    *o += gk;
                }
            }),
            Op::SliceLast { x, start } => {
                let d = val(*x).last_dim();
                let len = out.last_dim();
                acc(*x, &mut |gx| {
                    for r in 0..out.rows() {
                        for c in 0..len {
                            gx[r * d + start + c] += g[r * len + c];
                        }
                    }
                });
            }
            Op::ConcatLast(xs) => {
                let total = out.last_dim();
                let rows = out.rows();
                let mut offset = 0;
                for &x in xs {
                    let d = val(x).last_dim();
                    acc(x, &mut |gx| {
                        for r in 0..rows {
                            for c in 0..d {
                                gx[r * d + c] += g[r * total + offset + c];
                            }
                        }
                    });
                    offset += d;
                }
            }
            Op::SliceRows { x, start } => {
                let stride = out.numel() / out.shape()[0];
                acc(*x, &mut |gx| {
                    for (o, gk) in gx[start * stride..].iter_mut().zip(g) {
                        *o += gk;
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = val(x).numel();
                    acc(x, &mut |gx| {
                        for (o, gk) in gx.iter_mut().zip(&g[offset..offset + n]) {
                            *o += gk;
                        }
                    });
                    offset += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let stride = out.numel() / idx.len();
                acc(*x, &mut |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..stride {
                            gx[src * stride + c] += g[r * stride + c];
                        }
                    }
                });
            }
            Op::GroupMeanRows { x, groups } => {
                let d = out.last_dim();
                acc(*x, &mut |gx| {
                    for (gi, members) in groups.iter().enumerate() {
                        let inv = 1.0 / members.len() as f64;
                        for &m in members {
                            for c in 0..d {
                                gx[m * d + c] += g[gi * d + c] * inv;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| {
                gx.iter_mut().for_each(|o| *o += g[0]);
            }),
            Op::Softmax { x } => {
                let n = out.last_dim();
                let y = out.data();
                acc(*x, &mut |gx| {
                    for r in 0..out.rows() {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            gx[r * n + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = out.last_dim();
                let rows = out.rows();
                let gam = val(*gamma).data();
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for c in 0..d {
                            let dxh = gr[c] * gam[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[c];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for c in 0..d {
                            let dxh = gr[c] * gam[c];
                            gx[r * d + c] += rstd[r] * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for r in 0..rows {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::Im2Col {
                x,
                h,
                w,
                c,
                k,
                stride,
                pad,
            } => acc(*x, &mut |gx| {
                kernels::col2im_add(g, gx, *h, *w, *c, *k, *stride, *pad);
            }),
            Op::Bilinear { map, points } => {
                let m = val(*map);
                let p = val(*points).data();
                let (c, h, w) = (m.shape()[0], m.shape()[1], m.shape()[2]);
                let md = m.data();
                let np = p.len() / 2;
                acc(*map, &mut |gm| {
                    for i in 0..np {
                        let st = Stencil::new(p[2 * i], p[2 * i + 1], h, w);
                        for k in 0..4 {
                            if let Some(idx) = st.idx[k] {
                                for ch in 0..c {
                                    gm[ch * h * w + idx] += st.weight[k] * g[i * c + ch];
                                }
                            }
                        }
                    }
                });
                acc(*points, &mut |gp| {
                    for i in 0..np {
                        let st = Stencil::new(p[2 * i], p[2 * i + 1], h, w);
                        let (mut gx, mut gy) = (0.0, 0.0);
                        for k in 0..4 {
                            if let Some(idx) = st.idx[k] {
                                for ch in 0..c {
                                    let v = md[ch * h * w + idx] * g[i * c + ch];
                                    gx += st.dwdx[k] * v;
                                    gy += st.dwdy[k] * v;
                                }
                            }
                        }
                        gp[2 * i] += gx * w as f64;
                        gp[2 * i + 1] += gy * h as f64;
                    }
                });
            }
            Op::Deform {
                value,
                locs,
                weights,
                layout,
                dims,
            } => {
                let rg = |v: &Var| nodes[v.0].requires_grad;
                let mut dv = rg(value).then(|| vec![0.0; val(*value).numel()]);
                let mut dl = rg(locs).then(|| vec![0.0; val(*locs).numel()]);
                let mut dw = rg(weights).then(|| vec![0.0; val(*weights).numel()]);
                kernels::ms_deform_attn_backward(
                    val(*value).data(),
                    layout,
                    val(*locs).data(),
                    val(*weights).data(),
                    *dims,
                    g,
                    dv.as_deref_mut(),
                    dl.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                for (v, d) in [(*value, dv), (*locs, dl), (*weights, dw)] {
                    if let Some(d) = d {
                        acc(v, &mut |gx| {
                            for (o, x) in gx.iter_mut().zip(&d) {
                                *o += x;
                            }
                        });
                    }
                }
            }
            Op::Focal {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let xv = val(*logits).data();
                acc(*logits, &mut |gx| {
                    for k in 0..xv.len() {
                        gx[k] += g[0] * kernels::focal_term(xv[k], targets[k], *alpha, *gamma).1;
                    }
                });
            }
            Op::Giou { pred, targets } => {
                let p = val(*pred);
                acc(*pred, &mut |gp| {
                    for r in 0..p.shape()[0] {
                        let row = p.row(r);
                        let t = &targets[4 * r..4 * r + 4];
                        let (_, d) = giou_with_grad(
                            BBox::new(row[0], row[1], row[2], row[3]),
                            BBox::new(t[0], t[1], t[2], t[3]),
                        );
                        for c in 0..4 {
                            gp[4 * r + c] -= g[r] * d[c];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let x = val(*logits);
                let c = x.shape()[1];
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |gx| {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = x.row(r);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for k in 0..c {
                            let p = (row[k] - max).exp() / z;
                            gx[r * c + k] += scale * (p - if k == t { 1.0 } else { 0.0 });
                        }
                    }
                });
            }
        }
    }
}

/// Tanh-approximated GELU and its derivative.
fn gelu(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const C: f64 = 0.044_715;
    let inner = K * (x + C * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * C * x * x);
    (y, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn identity_and_projector_products() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.data(out), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let out = tape.matmul(p, b).unwrap();
        assert_eq!(tape.data(out), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn masked_softmax_uniform_over_allowed() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let mask = Mask::new(vec![true, true, false]);
        let y = tape.masked_softmax(x, Some(&mask)).unwrap();
        assert_eq!(tape.data(y), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn masked_softmax_singleton() {
        for &v in &[-700.0, 0.0, 3.5, 1e300] {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::scalar(v));
            let y = tape.masked_softmax(x, Some(&Mask::new(vec![true]))).unwrap();
            assert_eq!(tape.data(y), &[1.0]);
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        let mask = Mask::new(vec![true, true, false, false]);
        assert!(matches!(
            tape.masked_softmax(x, Some(&mask)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn layer_norm_constant_and_unit_vectors() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let x = tape.constant(Tensor::full(&[4], 2.5));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));

        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::from_vec(vec![1.0, -1.0]));
        let y = tape.layer_norm(x, g, b, 1e-300).unwrap();
        assert_eq!(tape.data(y), &[1.0, -1.0]);
    }

    #[test]
    fn bilinear_single_pixel_and_center() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::new(&[1, 1, 1], vec![7.25]).unwrap());
        let p = tape.constant(Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap());
        let y = tape.bilinear_sample(m, p).unwrap();
        assert_eq!(tape.data(y), &[7.25]);

        let m = tape.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.bilinear_sample(m, p).unwrap();
        assert_eq!(tape.data(y), &[2.5]);
    }

    #[test]
    fn constants_never_allocate_gradients() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[3], 2.0));
        let x = tape.leaf(Tensor::full(&[3], 1.0), true);
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3, 2]), true);
        let b = tape.leaf(Tensor::zeros(&[2]), true);
        let y = tape.add(x, b).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap(), &[3.0, 3.0]);
    }
}
