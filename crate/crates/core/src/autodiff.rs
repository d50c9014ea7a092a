//! Reverse-mode differentiation over an append-only tape.
//!
//! Every operation appends a node holding its output value. Inputs always
//! precede outputs, so the tape order is a topological order and
//! [`Tape::backward`] is a single reverse sweep that visits each node once.

use std::collections::BTreeMap;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{numel, split_axis, strides, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Sigmoid,
    /// `ln σ(x)`, evaluated without forming `σ(x)`.
    LogSigmoid,
    Exp,
    Log,
    Relu,
    LeakyRelu(f64),
    Elu(f64),
    Powf(f64),
    Clamp(f64, f64),
    Scale(f64),
    Shift(f64),
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::LogSigmoid => "log_sigmoid",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Relu => "relu",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Elu(_) => "elu",
            Unary::Powf(_) => "powf",
            Unary::Clamp(..) => "clamp",
            Unary::Scale(_) => "scale",
            Unary::Shift(_) => "shift",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::LogSigmoid => log_sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            // not `max`, which would turn NaN into 0
            Unary::Relu => {
                if x < 0.0 {
                    0.0
                } else {
                    x
                }
            }
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Unary::Elu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x.exp_m1()
                }
            }
            Unary::Powf(p) => {
                if p == 0.0 {
                    1.0
                } else {
                    x.powf(p)
                }
            }
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
            Unary::Scale(c) => c * x,
            Unary::Shift(c) => x + c,
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::LogSigmoid => sigmoid(-x),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Unary::Elu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    y + a
                }
            }
            Unary::Powf(p) => {
                // x = 0 arises from clamped probabilities; treat the
                // (possibly unbounded) one-sided slope there as flat.
                if p == 1.0 {
                    1.0
                } else if p == 0.0 || x == 0.0 {
                    0.0
                } else {
                    p * x.powf(p - 1.0)
                }
            }
            Unary::Clamp(lo, hi) => {
                if x >= lo && x <= hi {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Scale(c) => c,
            Unary::Shift(_) => 1.0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Sum(Var),
    SumAxis(Var, usize),
    MaxAxis {
        x: Var,
        arg: Vec<usize>,
    },
    MatMul(Var, Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        eps: f64,
        norms: Vec<f64>,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        arg: Vec<usize>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    IndexSelect {
        x: Var,
        axis: usize,
        index: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Binary(Binary::Div, ..) => "div",
            Op::Unary(u, _) => u.name(),
            Op::Sum(_) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::MatMul(..) => "matmul",
            Op::Softmax { .. } => "softmax",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Pool {
                kind: PoolKind::Avg,
                ..
            } => "avg_pool",
            Op::Pool {
                kind: PoolKind::Max,
                ..
            } => "max_pool",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::IndexSelect { .. } => "index_select",
            Op::Concat { .. } => "concat",
            Op::Conv2d { .. } => "conv2d",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One recorded operation, for op-count audits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpRecord {
    pub name: &'static str,
    pub output_shape: Vec<usize>,
}

/// Differentiation tape. Single-owner; build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Tape::backward`] root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    /// Every non-leaf operation in execution order.
    pub fn op_log(&self) -> Vec<OpRecord> {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| OpRecord {
                name: n.op.name(),
                output_shape: n.value.shape().to_vec(),
            })
            .collect()
    }

    pub fn op_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for rec in self.op_log() {
            *counts.entry(rec.name).or_insert(0) += 1;
        }
        counts
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(va.shape(), vb.shape())?;
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let mut out = vec![0.0; numel(&out_shape)];
        let (da, db) = (va.data(), vb.data());
        if va.shape() == vb.shape() {
            for ((o, &x), &y) in out.iter_mut().zip(da).zip(db) {
                *o = f(x, y);
            }
        } else {
            broadcast_for_each(&out_shape, va.shape(), vb.shape(), |i, ia, ib| {
                out[i] = f(da[ia], db[ib]);
            });
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Binary(kind, a, b), rg))
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let v = self.value(x);
        match kind {
            Unary::Log => {
                if let Some(pos) = v.data().iter().position(|&t| !(t > 0.0)) {
                    return Err(Error::Domain(format!(
                        "log of non-positive value {} at flat index {pos}",
                        v.data()[pos]
                    )));
                }
            }
            Unary::Powf(p) if p.fract() != 0.0 => {
                if let Some(pos) = v.data().iter().position(|&t| t < 0.0) {
                    return Err(Error::Domain(format!(
                        "fractional power {p} of negative value at flat index {pos}"
                    )));
                }
            }
            _ => {}
        }
        let out = v.map(|t| kind.apply(t));
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Unary(kind, x), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::LogSigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        self.unary(Unary::LeakyRelu(alpha), x)
    }

    pub fn elu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        self.unary(Unary::Elu(alpha), x)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary(Unary::Powf(p), x)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(Unary::Clamp(lo, hi), x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Scale(c), x)
    }

    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Shift(c), x)
    }

    // ----- reductions -----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis(v.shape(), axis)?;
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = v.data();
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let shape = removed_axis(v.shape(), axis);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis(x, axis), rg))
    }

    /// Maximum over `axis`, removing it. Ties go to the first occurrence.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis(v.shape(), axis)?;
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let d = v.data();
        let mut out = vec![0.0; outer * inner];
        let mut arg = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = d[o * n * inner + i];
                for k in 1..n {
                    let val = d[(o * n + k) * inner + i];
                    if val > best_v {
                        best = k;
                        best_v = val;
                    }
                }
                out[o * inner + i] = best_v;
                arg[o * inner + i] = (o * n + best) * inner + i;
            }
        }
        let shape = removed_axis(v.shape(), axis);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxAxis { x, arg }, rg))
    }

    /// Global average or max pooling over the two trailing (spatial) axes:
    /// `[.., S, h, w] -> [.., S]`. Max routes its gradient to the first
    /// maximum in row-major order.
    pub fn pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape();
        if shape.len() < 3 {
            return Err(dim_err!("pool needs rank >= 3, got shape {shape:?}"));
        }
        let area = shape[shape.len() - 2] * shape[shape.len() - 1];
        if area == 0 {
            return Err(dim_err!("pool over empty spatial extent {shape:?}"));
        }
        let groups = v.numel() / area;
        let d = v.data();
        let mut out = vec![0.0; groups];
        let mut arg = Vec::new();
        match kind {
            PoolKind::Avg => {
                for (g, o) in out.iter_mut().enumerate() {
                    *o = d[g * area..(g + 1) * area].iter().sum::<f64>() / area as f64;
                }
            }
            PoolKind::Max => {
                arg.reserve(groups);
                for (g, o) in out.iter_mut().enumerate() {
                    let slice = &d[g * area..(g + 1) * area];
                    let mut best = 0;
                    for (k, &val) in slice.iter().enumerate().skip(1) {
                        if val > slice[best] {
                            best = k;
                        }
                    }
                    *o = slice[best];
                    arg.push(g * area + best);
                }
            }
        }
        let out_shape = shape[..shape.len() - 2].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Pool { x, kind, arg }, rg))
    }

    // ----- normalizations -----

    /// Softmax along `axis`, stabilized by subtracting the maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, None)
    }

    /// Softmax along `axis` restricted to entries where `mask` is true.
    /// Masked-out entries come out as exactly zero. Every slice along `axis`
    /// must keep at least one entry.
    pub fn masked_softmax(&mut self, x: Var, axis: usize, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(dim_err!(
                "mask has {} entries for tensor of shape {:?}",
                mask.len(),
                self.shape(x)
            ));
        }
        self.softmax_impl(x, axis, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let v = self.value(x);
        check_axis(v.shape(), axis)?;
        if !v.is_finite() {
            return Err(Error::Domain("softmax of non-finite input".into()));
        }
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let d = v.data();
        let keep = |idx: usize| mask.is_none_or(|m| m[idx]);
        let mut out = vec![0.0; v.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for k in 0..n {
                    if keep(at(k)) {
                        max = max.max(d[at(k)]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::Structure(format!(
                        "softmax slice {o}/{i} along axis {axis} is fully masked"
                    )));
                }
                let mut total = 0.0;
                for k in 0..n {
                    if keep(at(k)) {
                        let e = (d[at(k)] - max).exp();
                        out[at(k)] = e;
                        total += e;
                    }
                }
                for k in 0..n {
                    out[at(k)] /= total;
                }
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Scales slices along `axis` to unit L2 norm. The denominator is
    /// `max(norm, eps)`, so an all-zero slice maps to zero instead of failing.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let v = self.value(x);
        check_axis(v.shape(), axis)?;
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let d = v.data();
        let mut out = vec![0.0; v.numel()];
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let norm = (0..n).map(|k| d[at(k)] * d[at(k)]).sum::<f64>().sqrt();
                let denom = norm.max(eps);
                norms[o * inner + i] = norm;
                for k in 0..n {
                    out[at(k)] = d[at(k)] / denom;
                }
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::L2Normalize {
                x,
                axis,
                eps,
                norms,
            },
            rg,
        ))
    }

    // ----- linear algebra -----

    /// Matrix product over the two trailing axes; leading (batch) axes
    /// broadcast like elementwise ops.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(dim_err!("matmul needs rank >= 2, got {sa:?} x {sb:?}"));
        }
        let plan = MatmulPlan::new(sa, sb)?;
        let mut out = vec![0.0; plan.out_numel()];
        let (da, db) = (va.data(), vb.data());
        plan.for_each_batch(|oa, ob, oc| {
            gemm_nn(
                &da[oa..oa + plan.m * plan.k],
                &db[ob..ob + plan.k * plan.n],
                &mut out[oc..oc + plan.m * plan.n],
                plan.m,
                plan.k,
                plan.n,
            );
        });
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(plan.out_shape(), out)?, Op::MatMul(a, b), rg))
    }

    /// 2-D convolution of `x: [B, Cin, H, W]` with `w: [Cout, Cin, kh, kw]`
    /// and symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let geo = ConvGeometry::new(vx.shape(), vw.shape(), stride, pad)?;
        let mut out = vec![0.0; geo.batch * geo.cout * geo.out_area()];
        let mut cols = vec![0.0; geo.col_rows() * geo.out_area()];
        for b in 0..geo.batch {
            geo.im2col(
                &vx.data()[b * geo.in_numel()..(b + 1) * geo.in_numel()],
                &mut cols,
            );
            let oc = b * geo.cout * geo.out_area();
            gemm_nn(
                vw.data(),
                &cols,
                &mut out[oc..oc + geo.cout * geo.out_area()],
                geo.cout,
                geo.col_rows(),
                geo.out_area(),
            );
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor::new(vec![geo.batch, geo.cout, geo.out_h, geo.out_w], out)?,
            Op::Conv2d { x, w, stride, pad },
            rg,
        ))
    }

    // ----- layout -----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(dim_err!("invalid permutation {perm:?} for shape {shape:?}"));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src_strides = strides(shape);
        let mapped: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let mut out = vec![0.0; v.numel()];
        let d = v.data();
        for_each_strided(&out_shape, &mapped, |i, src| out[i] = d[src]);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute(x, perm.to_vec()),
            rg,
        ))
    }

    /// Swaps the two trailing axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(dim_err!("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Gathers slices along `axis` at the given positions (repeats allowed).
    pub fn index_select(&mut self, x: Var, axis: usize, index: &[usize]) -> Result<Var> {
        let v = self.value(x);
        check_axis(v.shape(), axis)?;
        let (outer, n, inner) = split_axis(v.shape(), axis);
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(dim_err!("index {bad} out of range for axis of extent {n}"));
        }
        let d = v.data();
        let mut out = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &k in index {
                let base = (o * n + k) * inner;
                out.extend_from_slice(&d[base..base + inner]);
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = index.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::IndexSelect {
                x,
                axis,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| dim_err!("concat of nothing"))?;
        let base_shape = self.shape(*first).to_vec();
        check_axis(&base_shape, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base_shape.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != base_shape[i])
            {
                return Err(dim_err!(
                    "concat shape {s:?} incompatible with {base_shape:?}"
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    // ----- backward -----

    /// Accumulates d(root)/d(node) for every node that requires a gradient.
    /// `root` must hold a single element.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(dim_err!(
                "backward from non-scalar of shape {:?}",
                self.shape(root)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(idx);
            let Some(g) = upper[0].as_ref() else { continue };
            self.propagate(idx, g, lower);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], lower: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (da, db) = (va.data(), vb.data());
                let same = va.shape() == vb.shape();
                if let Some(ga) = self.slot(lower, *a) {
                    let f = |gi: f64, _x: f64, y: f64| match kind {
                        Binary::Add | Binary::Sub => gi,
                        Binary::Mul => gi * y,
                        Binary::Div => gi / y,
                    };
                    if same {
                        for i in 0..g.len() {
                            ga[i] += f(g[i], da[i], db[i]);
                        }
                    } else {
                        broadcast_for_each(out.shape(), va.shape(), vb.shape(), |i, ia, ib| {
                            ga[ia] += f(g[i], da[ia], db[ib]);
                        });
                    }
                }
                if let Some(gb) = self.slot(lower, *b) {
                    let f = |gi: f64, x: f64, y: f64| match kind {
                        Binary::Add => gi,
                        Binary::Sub => -gi,
                        Binary::Mul => gi * x,
                        Binary::Div => -gi * x / (y * y),
                    };
                    if same {
                        for i in 0..g.len() {
                            gb[i] += f(g[i], da[i], db[i]);
                        }
                    } else {
                        broadcast_for_each(out.shape(), va.shape(), vb.shape(), |i, ia, ib| {
                            gb[ib] += f(g[i], da[ia], db[ib]);
                        });
                    }
                }
            }
            Op::Unary(kind, x) => {
                if let Some(gx) = self.slot(lower, *x) {
                    let xd = self.value(*x).data();
                    for i in 0..g.len() {
                        gx[i] += g[i] * kind.deriv(xd[i], out.data()[i]);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(lower, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::SumAxis(x, axis) => {
                if let Some(gx) = self.slot(lower, *x) {
                    let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                gx[(o * n + k) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::MaxAxis { x, arg }
            | Op::Pool {
                x,
                kind: PoolKind::Max,
                arg,
            } => {
                if let Some(gx) = self.slot(lower, *x) {
                    for (gi, &src) in g.iter().zip(arg) {
                        gx[src] += gi;
                    }
                }
            }
            Op::Pool {
                x,
                kind: PoolKind::Avg,
                ..
            } => {
                if let Some(gx) = self.slot(lower, *x) {
                    let area = gx.len() / g.len();
                    let inv = 1.0 / area as f64;
                    for (gidx, gi) in g.iter().enumerate() {
                        gx[gidx * area..(gidx + 1) * area]
                            .iter_mut()
                            .for_each(|v| *v += gi * inv);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let plan = MatmulPlan::new(va.shape(), vb.shape()).expect("validated in forward");
                let (mm, kk, nn) = (plan.m, plan.k, plan.n);
                if let Some(ga) = self.slot(lower, *a) {
                    plan.for_each_batch(|oa, ob, oc| {
                        gemm_nt(
                            &g[oc..oc + mm * nn],
                            &vb.data()[ob..ob + kk * nn],
                            &mut ga[oa..oa + mm * kk],
                            mm,
                            nn,
                            kk,
                        );
                    });
                }
                if let Some(gb) = self.slot(lower, *b) {
                    plan.for_each_batch(|oa, ob, oc| {
                        gemm_tn(
                            &va.data()[oa..oa + mm * kk],
                            &g[oc..oc + mm * nn],
                            &mut gb[ob..ob + kk * nn],
                            mm,
                            kk,
                            nn,
                        );
                    });
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(gx) = self.slot(lower, *x) {
                    let (outer, n, inner) = split_axis(out.shape(), *axis);
                    let y = out.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| y[at(k)] * g[at(k)]).sum();
                            for k in 0..n {
                                gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::L2Normalize {
                x,
                axis,
                eps,
                norms,
            } => {
                if let Some(gx) = self.slot(lower, *x) {
                    let (outer, n, inner) = split_axis(out.shape(), *axis);
                    let y = out.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let norm = norms[o * inner + i];
                            if norm > *eps {
                                let dot: f64 = (0..n).map(|k| y[at(k)] * g[at(k)]).sum();
                                for k in 0..n {
                                    gx[at(k)] += (g[at(k)] - y[at(k)] * dot) / norm;
                                }
                            } else {
                                for k in 0..n {
                                    gx[at(k)] += g[at(k)] / eps;
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(lower, *x) {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            Op::Permute(x, perm) => {
                if let Some(gx) = self.slot(lower, *x) {
                    let src_strides = strides(self.shape(*x));
                    let mapped: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
                    for_each_strided(out.shape(), &mapped, |i, src| gx[src] += g[i]);
                }
            }
            Op::IndexSelect { x, axis, index } => {
                if let Some(gx) = self.slot(lower, *x) {
                    let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                    let m = index.len();
                    for o in 0..outer {
                        for (j, &k) in index.iter().enumerate() {
                            let src = (o * m + j) * inner;
                            let dst = (o * n + k) * inner;
                            for i in 0..inner {
                                gx[dst + i] += g[src + i];
                            }
                        }
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    if let Some(gx) = self.slot(lower, v) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for (j, gv) in gx[o * n * inner..(o + 1) * n * inner]
                                .iter_mut()
                                .enumerate()
                            {
                                *gv += g[src + j];
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let geo =
                    ConvGeometry::new(vx.shape(), vw.shape(), *stride, *pad).expect("validated");
                let area = geo.out_area();
                let rows = geo.col_rows();
                let mut cols = vec![0.0; rows * area];
                let wants_x = self.nodes[x.0].requires_grad;
                let wants_w = self.nodes[w.0].requires_grad;
                let mut dcols = vec![0.0; rows * area];
                let mut gw_local = vec![0.0; if wants_w { vw.numel() } else { 0 }];
                let mut gx_local = vec![0.0; if wants_x { vx.numel() } else { 0 }];
                for b in 0..geo.batch {
                    let gout = &g[b * geo.cout * area..(b + 1) * geo.cout * area];
                    if wants_w {
                        geo.im2col(
                            &vx.data()[b * geo.in_numel()..(b + 1) * geo.in_numel()],
                            &mut cols,
                        );
                        gemm_nt(gout, &cols, &mut gw_local, geo.cout, area, rows);
                    }
                    if wants_x {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        gemm_tn(vw.data(), gout, &mut dcols, geo.cout, rows, area);
                        geo.col2im(
                            &dcols,
                            &mut gx_local[b * geo.in_numel()..(b + 1) * geo.in_numel()],
                        );
                    }
                }
                if let Some(gw) = self.slot(lower, *w) {
                    for (a, b) in gw.iter_mut().zip(&gw_local) {
                        *a += b;
                    }
                }
                if let Some(gx) = self.slot(lower, *x) {
                    for (a, b) in gx.iter_mut().zip(&gx_local) {
                        *a += b;
                    }
                }
            }
        }
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` when `v`
    /// does not need a gradient.
    fn slot<'g>(&self, lower: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(lower[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(dim_err!("axis {axis} out of range for shape {shape:?}"));
    }
    Ok(())
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r {
            a[i + a.len() - r]
        } else {
            1
        };
        let db = if i + b.len() >= r {
            b[i + b.len() - r]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(dim_err!("shapes {a:?} and {b:?} do not broadcast")),
        };
    }
    Ok(out)
}

/// Strides of `src` viewed through the broadcast `out` shape (0 on
/// broadcast axes).
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(src);
    let lead = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < lead || src[i - lead] == 1 {
                0
            } else {
                s[i - lead]
            }
        })
        .collect()
}

fn broadcast_for_each(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let total = numel(out);
    if total == 0 {
        return;
    }
    let r = out.len();
    let mut idx = vec![0; r];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..total {
        f(i, ia, ib);
        for d in (0..r).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Visits every index of `shape` in row-major order along with the source
/// offset given by `src_strides`.
fn for_each_strided(shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(shape);
    let r = shape.len();
    let mut idx = vec![0; r];
    let mut src = 0usize;
    for i in 0..total {
        f(i, src);
        for d in (0..r).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            src -= src_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

struct MatmulPlan {
    batch: Vec<usize>,
    stride_a: Vec<usize>,
    stride_b: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(dim_err!("matmul inner extents differ: {sa:?} x {sb:?}"));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb)?;
        let stride_a = broadcast_strides(ba, &batch)
            .iter()
            .map(|s| s * m * k)
            .collect();
        let stride_b = broadcast_strides(bb, &batch)
            .iter()
            .map(|s| s * k * n)
            .collect();
        Ok(MatmulPlan {
            batch,
            stride_a,
            stride_b,
            m,
            k,
            n,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        let mut s = self.batch.clone();
        s.extend([self.m, self.n]);
        s
    }

    fn out_numel(&self) -> usize {
        numel(&self.batch) * self.m * self.n
    }

    /// Calls `f(offset_a, offset_b, offset_out)` per batch entry.
    fn for_each_batch(&self, mut f: impl FnMut(usize, usize, usize)) {
        let total = numel(&self.batch);
        let r = self.batch.len();
        let mut idx = vec![0; r];
        let (mut oa, mut ob) = (0, 0);
        for t in 0..total {
            f(oa, ob, t * self.m * self.n);
            for d in (0..r).rev() {
                idx[d] += 1;
                oa += self.stride_a[d];
                ob += self.stride_b[d];
                if idx[d] < self.batch[d] {
                    break;
                }
                oa -= self.stride_a[d] * self.batch[d];
                ob -= self.stride_b[d] * self.batch[d];
                idx[d] = 0;
            }
        }
    }
}

/// c[m×n] += a[m×k] · b[k×n]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m×k] += a[m×n] · b[k×n]ᵀ
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// c[k×n] += a[m×k]ᵀ · b[m×n]
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

struct ConvGeometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if xs.len() != 4 || ws.len() != 4 {
            return Err(dim_err!(
                "conv2d expects [B,C,H,W] and [O,C,kh,kw], got {xs:?}, {ws:?}"
            ));
        }
        if xs[1] != ws[1] {
            return Err(dim_err!(
                "conv2d channel mismatch: input {xs:?}, filter {ws:?}"
            ));
        }
        if stride == 0 {
            return Err(dim_err!("conv2d stride must be positive"));
        }
        let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(dim_err!(
                "conv2d kernel {kh}x{kw} larger than padded input {h}x{w}"
            ));
        }
        Ok(ConvGeometry {
            batch: xs[0],
            cin: xs[1],
            h,
            w,
            cout: ws[0],
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn in_numel(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Visits (col_index, input_index) for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let area = self.out_area();
        for c in 0..self.cin {
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let row = (c * self.kh + dy) * self.kw + dx;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + dy) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + dx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(
                                row * area + oy * self.out_w + ox,
                                (c * self.h + iy as usize) * self.w + ix as usize,
                            );
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        cols.iter_mut().for_each(|v| *v = 0.0);
        self.for_each_tap(|ci, xi| cols[ci] = x[xi]);
    }

    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        self.for_each_tap(|ci, xi| x[xi] += cols[ci]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn activations_propagate_nan() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![f64::NAN, -1.0, 2.0]));
        let r = t.relu(x).unwrap();
        let l = t.leaky_relu(x, 0.2).unwrap();
        assert!(t.value(r).data()[0].is_nan() && t.value(l).data()[0].is_nan());
        assert_eq!(t.value(r).data()[1..], [0.0, 2.0]);
    }

    #[test]
    fn matmul_hand_cases() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::eye(2));
        let p = t.matmul(i2, i2).unwrap();
        assert_eq!(t.value(p), &Tensor::eye(2));

        let a = t.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).shape(), &[2, 1]);
        assert_eq!(t.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(t.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn elementwise_definitions() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(z).unwrap();
        assert_eq!(t.value(s).item(), 0.5);

        let m1 = t.constant(Tensor::scalar(-1.0));
        let l = t.leaky_relu(m1, 0.2).unwrap();
        assert!(close(t.value(l).item(), -0.2, 1e-15));

        let x = t.param(Tensor::scalar(3.0));
        let sq = t.powf(x, 2.0).unwrap();
        t.backward(sq).unwrap();
        assert!(close(t.grad(x).unwrap().item(), 6.0, 1e-9));
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(t.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn l2_normalize_cases() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let n = t.l2_normalize(v, 0, 1e-12).unwrap();
        assert!(close(t.value(n).data()[0], 0.6, 1e-15));
        assert!(close(t.value(n).data()[1], 0.8, 1e-15));

        let u = t.constant(Tensor::vector(vec![0.0, 1.0, 0.0]));
        let nu = t.l2_normalize(u, 0, 1e-12).unwrap();
        assert_eq!(t.value(nu).data(), &[0.0, 1.0, 0.0]);

        let zero = t.constant(Tensor::zeros(vec![4]));
        let nz = t.l2_normalize(zero, 0, 1e-12).unwrap();
        assert!(t.value(nz).data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = t.constant(Tensor::randn(vec![5], 1.0, &mut rng));
        let nr = t.l2_normalize(r, 0, 1e-12).unwrap();
        let norm: f64 = t.value(nr).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(close(norm, 1.0, 1e-12));
    }

    #[test]
    fn pool_cases() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::full(vec![2, 3, 3], 1.5));
        for kind in [PoolKind::Avg, PoolKind::Max] {
            let p = t.pool(c, kind).unwrap();
            assert_eq!(t.value(p).data(), &[1.5, 1.5]);
        }
        let f = t.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let avg = t.pool(f, PoolKind::Avg).unwrap();
        let max = t.pool(f, PoolKind::Max).unwrap();
        assert_eq!(t.value(avg).item(), 2.5);
        assert_eq!(t.value(max).item(), 4.0);

        let flat = t.constant(Tensor::zeros(vec![4, 4]));
        assert!(matches!(
            t.pool(flat, PoolKind::Avg),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn max_pool_gradient_goes_to_first_tie() {
        let mut t = Tape::new();
        let f = t.param(Tensor::new(vec![1, 2, 2], vec![5.0, 1.0, 5.0, 5.0]).unwrap());
        let p = t.pool(f, PoolKind::Max).unwrap();
        let s = t.sum(p).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(f).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_cases() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);

        let big = t.constant(Tensor::vector(vec![1000.0, 0.0]));
        let sb = t.softmax(big, 0).unwrap();
        assert_eq!(t.value(sb).data()[0], 1.0);
        assert!(t.value(sb).data()[1] < 1e-300);
        assert!(t.value(sb).is_finite());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = t.constant(Tensor::randn(vec![6], 3.0, &mut rng));
        let sr = t.softmax(r, 0).unwrap();
        let total: f64 = t.value(sr).data().iter().sum();
        assert!(close(total, 1.0, 1e-12));
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[0.5, 0.5, 9.0]]).unwrap());
        let mask = [true, false, true, false, true, false];
        let s = t.masked_softmax(x, 1, &mask).unwrap();
        let d = t.value(s).data().to_vec();
        assert_eq!(d[1], 0.0);
        assert_eq!(d[3], 0.0);
        assert_eq!(d[4], 1.0);
        assert!(close(d[0] + d[2], 1.0, 1e-15));

        let all_off = [false; 6];
        assert!(matches!(
            t.masked_softmax(x, 1, &all_off),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn permute_and_index_select() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
        let xt = t.transpose(x).unwrap();
        assert_eq!(t.value(xt).shape(), &[3, 2]);
        assert_eq!(t.value(xt).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let sel = t.index_select(x, 1, &[2, 0, 0]).unwrap();
        assert_eq!(t.value(sel).data(), &[2.0, 0.0, 0.0, 5.0, 3.0, 3.0]);
    }

    #[test]
    fn broadcasting_add_and_backward_reduces() {
        let mut t = Tape::new();
        let a = t.param(Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap());
        let b = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        let s = t.sum(c).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);

        let col = t.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let row = t.constant(Tensor::new(vec![1, 3], vec![10.0, 20.0, 30.0]).unwrap());
        let outer = t.add(col, row).unwrap();
        assert_eq!(t.value(outer).data(), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);

        let bad = t.constant(Tensor::zeros(vec![4]));
        assert!(t.add(a, bad).is_err());
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(vec![2, 3, 5, 4], 1.0, &mut rng);
        let w = Tensor::randn(vec![4, 3, 3, 3], 1.0, &mut rng);
        let mut t = Tape::new();
        let (vx, vw) = (t.constant(x.clone()), t.constant(w.clone()));
        let y = t.conv2d(vx, vw, 2, 1).unwrap();
        let out = t.value(y);
        assert_eq!(out.shape(), &[2, 4, 3, 2]);
        for b in 0..2 {
            for o in 0..4 {
                for oy in 0..3 {
                    for ox in 0..2 {
                        let mut acc = 0.0;
                        for c in 0..3 {
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let iy = (oy * 2 + dy) as isize - 1;
                                    let ix = (ox * 2 + dx) as isize - 1;
                                    if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                        acc += x.get(&[b, c, iy as usize, ix as usize])
                                            * w.get(&[o, c, dy, dx]);
                                    }
                                }
                            }
                        }
                        assert!(close(out.get(&[b, o, oy, ox]), acc, 1e-12));
                    }
                }
            }
        }
    }

    #[test]
    fn op_log_records_non_leaf_ops() {
        let mut t = Tape::new();
        let a = t.param(Tensor::scalar(1.0));
        let b = t.exp(a).unwrap();
        let _ = t.add(a, b).unwrap();
        let names: Vec<_> = t.op_log().into_iter().map(|r| r.name).collect();
        assert_eq!(names, vec!["exp", "add"]);
        assert_eq!(t.op_counts()["add"], 1);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let a = t.param(Tensor::zeros(vec![2]));
        assert!(t.backward(a).is_err());
    }
}
