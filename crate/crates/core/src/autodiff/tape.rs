//! Eager reverse-mode tape over a closed set of dense primitives.
//!
//! Every op computes its value immediately and appends a record to the tape.
//! [`Tape::replay`] recomputes all records in order from the current leaf
//! values, which is what finite-difference checking relies on.

use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Layer-norm variance floor; small enough that normalized rows have unit
/// variance to ~1e-10.
pub const LN_EPS: f64 = 1e-10;

/// Index used by [`Tape::gather`] to emit a zero.
pub const GATHER_ZERO: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Debug)]
pub enum Op {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Act(Var, Activation),
    Softmax(Var),
    MaskedSoftmax(Var, Var),
    LayerNorm(Var, f64),
    L2NormalizeRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize, len: usize },
    SliceCols { a: Var, start: usize, len: usize },
    Gather { a: Var, index: Rc<[usize]>, rows: usize, cols: usize },
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Rc<[usize]> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Act(_, Activation::Relu) => "relu",
            Op::Act(_, Activation::Silu) => "silu",
            Op::Act(_, Activation::Tanh) => "tanh",
            Op::Act(_, Activation::Sigmoid) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::L2NormalizeRows(_) => "l2_normalize_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Gather { .. } => "gather",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by tape variable.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every parameter of `store`; parameters not on the tape get zeros.
    /// A parameter placed on the tape several times accumulates all uses.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros_like(t)).collect();
        for &(pid, var) in &self.params {
            if let Some(g) = self.get(var) {
                for (o, v) in out[pid.0].data_mut().iter_mut().zip(g.data()) {
                    *o += v;
                }
            }
        }
        out
    }
}

fn check2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, format!("expected 2-D operand, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn act_fwd(x: f64, a: Activation) -> f64 {
    match a {
        Activation::Relu => x.max(0.0),
        Activation::Silu => x / (1.0 + (-x).exp()),
        Activation::Tanh => x.tanh(),
        Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
    }
}

fn act_bwd(x: f64, y: f64, a: Activation) -> f64 {
    match a {
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Silu => {
            let s = 1.0 / (1.0 + (-x).exp());
            s * (1.0 + x * (1.0 - s))
        }
        Activation::Tanh => 1.0 - y * y,
        Activation::Sigmoid => y * (1.0 - y),
    }
}

fn softmax_rows(x: &Tensor, mask: Option<&Tensor>) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x.data()[i * c..(i + 1) * c];
        let keep = |j: usize| mask.is_none_or(|m| m.data()[i * c + j] != 0.0);
        let mut mx = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if keep(j) && v > mx {
                mx = v;
            }
        }
        if mx == f64::NEG_INFINITY {
            continue;
        }
        let o = &mut out[i * c..(i + 1) * c];
        let mut s = 0.0;
        for j in 0..c {
            if keep(j) {
                o[j] = (row[j] - mx).exp();
                s += o[j];
            }
        }
        o.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::matrix(r, c, out).expect("shape")
}

fn layer_norm_rows(x: &Tensor, eps: f64) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x.data()[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            out[i * c + j] = (row[j] - mean) * inv;
        }
    }
    Tensor::matrix(r, c, out).expect("shape")
}

const L2_FLOOR: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    /// Leaves that are not parameters, in creation order.
    pub fn inputs(&self) -> Vec<Var> {
        self.leaves(|op| matches!(op, Op::Input))
    }

    pub fn param_vars(&self) -> Vec<Var> {
        self.leaves(|op| matches!(op, Op::Param(_)))
    }

    fn leaves(&self, f: impl Fn(&Op) -> bool) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| f(&n.op))
            .map(|(i, _)| Var(i))
            .collect()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericOverflow {
                op: op.name(),
                context: format!(" (tape node {})", self.nodes.len()),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        check2("input", &t)?;
        self.push(Op::Input, t)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let t = store.get(id).clone();
        check2("param", &t)?;
        self.push(Op::Param(id), t)
    }

    /// Replace a leaf's value; call [`Tape::replay`] afterwards.
    pub fn set_leaf(&mut self, v: Var, t: Tensor) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Input | Op::Param(_)) {
            return Err(Error::shape("set_leaf", format!("node {} is not a leaf", v.0)));
        }
        if node.value.shape() != t.shape() {
            return Err(Error::shape(
                "set_leaf",
                format!("recorded {:?}, supplied {:?}", node.value.shape(), t.shape()),
            ));
        }
        node.value = t;
        Ok(())
    }

    pub(crate) fn leaf_data_mut(&mut self, v: Var) -> &mut [f64] {
        self.nodes[v.0].value.data_mut()
    }

    /// Recompute every non-leaf node from the current leaf values.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Input | Op::Param(_)) {
                continue;
            }
            let value = self.compute(&op)?;
            if !value.is_finite() {
                return Err(Error::NumericOverflow {
                    op: op.name(),
                    context: format!(" (tape node {i}, replay)"),
                });
            }
            self.nodes[i].value = value;
        }
        Ok(())
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = self.compute(&op)?;
        self.push(op, value)
    }

    fn compute(&self, op: &Op) -> Result<Tensor> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let name = op.name();
        match op {
            Op::Input | Op::Param(_) => unreachable!("leaves are not recomputed"),
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = check2(name, val(a))?;
                let (br, bc) = check2(name, val(b))?;
                let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                let (k2, n) = if *tb { (bc, br) } else { (br, bc) };
                if k != k2 {
                    return Err(Error::shape(
                        name,
                        format!("inner dims {k} vs {k2} ({:?} x {:?})", val(a).shape(), val(b).shape()),
                    ));
                }
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, val(a).data(), *ta, val(b).data(), *tb, 0.0, &mut out);
                Tensor::matrix(m, n, out)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (x, y) = (val(a), val(b));
                if !x.same_shape(y) {
                    return Err(Error::shape(name, format!("{:?} vs {:?}", x.shape(), y.shape())));
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |p, q| p + q,
                    Op::Sub(..) => |p, q| p - q,
                    _ => |p, q| p * q,
                };
                let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
                Tensor::new(x.shape().to_vec(), data)
            }
            Op::AddRow(a, r) | Op::MulRow(a, r) => {
                let (n, m) = check2(name, val(a))?;
                let row = val(r);
                if row.shape() != [1, m] {
                    return Err(Error::shape(name, format!("row {:?} for {n}x{m}", row.shape())));
                }
                let add = matches!(op, Op::AddRow(..));
                let mut out = val(a).data().to_vec();
                for chunk in out.chunks_mut(m.max(1)) {
                    for (o, b) in chunk.iter_mut().zip(row.data()) {
                        if add {
                            *o += b;
                        } else {
                            *o *= b;
                        }
                    }
                }
                Tensor::matrix(n, m, out)
            }
            Op::MulCol(a, c) => {
                let (n, m) = check2(name, val(a))?;
                let col = val(c);
                if col.shape() != [n, 1] {
                    return Err(Error::shape(name, format!("col {:?} for {n}x{m}", col.shape())));
                }
                let mut out = val(a).data().to_vec();
                for (i, chunk) in out.chunks_mut(m.max(1)).enumerate() {
                    let s = col.data()[i];
                    chunk.iter_mut().for_each(|o| *o *= s);
                }
                Tensor::matrix(n, m, out)
            }
            Op::Scale(a, s) => {
                let x = val(a);
                Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * s).collect())
            }
            Op::ScaleBy(a, s) => {
                let sv = val(s);
                if sv.len() != 1 {
                    return Err(Error::shape(name, format!("scale must be 1x1, got {:?}", sv.shape())));
                }
                let s = sv.item();
                let x = val(a);
                Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * s).collect())
            }
            Op::Act(a, kind) => {
                let x = val(a);
                Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| act_fwd(*v, *kind)).collect())
            }
            Op::Softmax(a) => {
                check2(name, val(a))?;
                Ok(softmax_rows(val(a), None))
            }
            Op::MaskedSoftmax(a, m) => {
                check2(name, val(a))?;
                if !val(a).same_shape(val(m)) {
                    return Err(Error::shape(name, format!("mask {:?} vs logits {:?}", val(m).shape(), val(a).shape())));
                }
                Ok(softmax_rows(val(a), Some(val(m))))
            }
            Op::LayerNorm(a, eps) => {
                check2(name, val(a))?;
                Ok(layer_norm_rows(val(a), *eps))
            }
            Op::L2NormalizeRows(a) => {
                let (n, m) = check2(name, val(a))?;
                let mut out = val(a).data().to_vec();
                for chunk in out.chunks_mut(m.max(1)) {
                    let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_FLOOR);
                    chunk.iter_mut().for_each(|v| *v /= norm);
                }
                Tensor::matrix(n, m, out)
            }
            Op::ConcatCols(parts) => {
                if parts.is_empty() {
                    return Err(Error::shape(name, "no operands"));
                }
                let n = check2(name, val(&parts[0]))?.0;
                let mut widths = Vec::with_capacity(parts.len());
                for p in parts {
                    let (r, c) = check2(name, val(p))?;
                    if r != n {
                        return Err(Error::shape(name, format!("row count {r} vs {n}")));
                    }
                    widths.push(c);
                }
                let total: usize = widths.iter().sum();
                let mut out = Vec::with_capacity(n * total);
                for i in 0..n {
                    for (p, &w) in parts.iter().zip(&widths) {
                        out.extend_from_slice(&val(p).data()[i * w..(i + 1) * w]);
                    }
                }
                Tensor::matrix(n, total, out)
            }
            Op::ConcatRows(parts) => {
                if parts.is_empty() {
                    return Err(Error::shape(name, "no operands"));
                }
                let m = check2(name, val(&parts[0]))?.1;
                let mut rows = 0;
                let mut out = Vec::new();
                for p in parts {
                    let (r, c) = check2(name, val(p))?;
                    if c != m {
                        return Err(Error::shape(name, format!("col count {c} vs {m}")));
                    }
                    rows += r;
                    out.extend_from_slice(val(p).data());
                }
                Tensor::matrix(rows, m, out)
            }
            Op::SliceRows { a, start, len } => {
                let (n, m) = check2(name, val(a))?;
                if start + len > n {
                    return Err(Error::shape(name, format!("rows {start}..{} of {n}", start + len)));
                }
                Tensor::matrix(*len, m, val(a).data()[start * m..(start + len) * m].to_vec())
            }
            Op::SliceCols { a, start, len } => {
                let (n, m) = check2(name, val(a))?;
                if start + len > m {
                    return Err(Error::shape(name, format!("cols {start}..{} of {m}", start + len)));
                }
                let mut out = Vec::with_capacity(n * len);
                for i in 0..n {
                    out.extend_from_slice(&val(a).data()[i * m + start..i * m + start + len]);
                }
                Tensor::matrix(n, *len, out)
            }
            Op::Gather { a, index, rows, cols } => {
                let src = val(a).data();
                if index.len() != rows * cols {
                    return Err(Error::shape(name, format!("{} indices for {rows}x{cols}", index.len())));
                }
                let mut out = Vec::with_capacity(index.len());
                for &ix in index.iter() {
                    if ix == GATHER_ZERO {
                        out.push(0.0);
                    } else if ix < src.len() {
                        out.push(src[ix]);
                    } else {
                        return Err(Error::shape(name, format!("index {ix} out of {}", src.len())));
                    }
                }
                Tensor::matrix(*rows, *cols, out)
            }
            Op::Sum(a) => Ok(Tensor::scalar(val(a).data().iter().sum())),
            Op::Mean(a) => {
                let x = val(a);
                if x.is_empty() {
                    return Err(Error::shape(name, "mean of empty tensor"));
                }
                Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64))
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let (n, k) = check2(name, val(logits))?;
                if labels.len() != n || n == 0 {
                    return Err(Error::shape(name, format!("{} labels for {n} rows", labels.len())));
                }
                let x = val(logits).data();
                let mut total = 0.0;
                for i in 0..n {
                    let row = &x[i * k..(i + 1) * k];
                    let l = labels[i];
                    if l >= k {
                        return Err(Error::shape(name, format!("label {l} >= {k} classes")));
                    }
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                    total += lse - row[l];
                }
                Ok(Tensor::scalar(total / n as f64))
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul { a, b, ta: false, tb: false })
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul { a, b, ta: false, tb: true })
    }

    /// `a^T * b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul { a, b, ta: true, tb: false })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.record(Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.record(Op::MulRow(a, row))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.record(Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.record(Op::Scale(a, s))
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        self.record(Op::ScaleBy(a, s))
    }

    pub fn act(&mut self, a: Var, kind: Activation) -> Result<Var> {
        self.record(Op::Act(a, kind))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.act(a, Activation::Relu)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.act(a, Activation::Silu)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.act(a, Activation::Tanh)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Softmax(a))
    }

    /// Row softmax restricted to entries where `mask` is nonzero; others get
    /// exactly zero weight and a row with no admissible entry is all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: Var) -> Result<Var> {
        self.record(Op::MaskedSoftmax(a, mask))
    }

    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        self.record(Op::LayerNorm(a, LN_EPS))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.record(Op::L2NormalizeRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.record(Op::SliceRows { a, start, len })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.record(Op::SliceCols { a, start, len })
    }

    /// Element gather over the flattened operand; [`GATHER_ZERO`] yields 0.
    pub fn gather(&mut self, a: Var, index: Rc<[usize]>, rows: usize, cols: usize) -> Result<Var> {
        self.record(Op::Gather { a, index, rows, cols })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Mean(a))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Rc<[usize]>) -> Result<Var> {
        self.record(Op::SoftmaxCrossEntropy { logits, labels })
    }

    /// `mean((a - b)^2)`
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// `x W + b` for a row-major batch `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0]).expect("scalar"));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(&node.op, &node.value, &g, &mut grads);
            if !g.is_finite() {
                return Err(Error::NumericOverflow {
                    op: node.op.name(),
                    context: format!(" (gradient at tape node {i})"),
                });
            }
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(n)
            .filter_map(|(i, node)| match node.op {
                Op::Param(pid) => Some((pid, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Grads { grads, params })
    }

    fn backprop_node(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: &Var| &self.nodes[v.0].value;
        fn acc<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut [f64] {
            grads[v.0]
                .get_or_insert_with(|| Tensor::zeros_like(like))
                .data_mut()
        }
        match op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(a), val(b));
                let (m, k) = if *ta { (av.cols(), av.rows()) } else { (av.rows(), av.cols()) };
                let n = if *tb { bv.rows() } else { bv.cols() };
                {
                    let da = acc(grads, *a, av);
                    if *ta {
                        gemm(k, n, m, bv.data(), *tb, g.data(), true, 1.0, da);
                    } else {
                        gemm(m, n, k, g.data(), false, bv.data(), !*tb, 1.0, da);
                    }
                }
                let db = acc(grads, *b, bv);
                if *tb {
                    gemm(n, m, k, g.data(), true, av.data(), *ta, 1.0, db);
                } else {
                    gemm(k, m, n, av.data(), !*ta, g.data(), false, 1.0, db);
                }
            }
            Op::Add(a, b) => {
                for (d, v) in acc(grads, *a, out).iter_mut().zip(g.data()) {
                    *d += v;
                }
                for (d, v) in acc(grads, *b, out).iter_mut().zip(g.data()) {
                    *d += v;
                }
            }
            Op::Sub(a, b) => {
                for (d, v) in acc(grads, *a, out).iter_mut().zip(g.data()) {
                    *d += v;
                }
                for (d, v) in acc(grads, *b, out).iter_mut().zip(g.data()) {
                    *d -= v;
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(a), val(b));
                for ((d, gv), yv) in acc(grads, *a, x).iter_mut().zip(g.data()).zip(y.data()) {
                    *d += gv * yv;
                }
                for ((d, gv), xv) in acc(grads, *b, y).iter_mut().zip(g.data()).zip(x.data()) {
                    *d += gv * xv;
                }
            }
            Op::AddRow(a, r) => {
                let m = out.cols();
                for (d, v) in acc(grads, *a, out).iter_mut().zip(g.data()) {
                    *d += v;
                }
                let dr = acc(grads, *r, val(r));
                for chunk in g.data().chunks(m.max(1)) {
                    for (d, v) in dr.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
            }
            Op::MulRow(a, r) => {
                let m = out.cols();
                let (x, row) = (val(a), val(r));
                {
                    let da = acc(grads, *a, x);
                    for (i, (d, gv)) in da.iter_mut().zip(g.data()).enumerate() {
                        *d += gv * row.data()[i % m];
                    }
                }
                let dr = acc(grads, *r, row);
                for (i, (gv, xv)) in g.data().iter().zip(x.data()).enumerate() {
                    dr[i % m] += gv * xv;
                }
            }
            Op::MulCol(a, c) => {
                let m = out.cols();
                let (x, col) = (val(a), val(c));
                {
                    let da = acc(grads, *a, x);
                    for (i, (d, gv)) in da.iter_mut().zip(g.data()).enumerate() {
                        *d += gv * col.data()[i / m];
                    }
                }
                let dc = acc(grads, *c, col);
                for (i, (gv, xv)) in g.data().iter().zip(x.data()).enumerate() {
                    dc[i / m] += gv * xv;
                }
            }
            Op::Scale(a, s) => {
                for (d, v) in acc(grads, *a, out).iter_mut().zip(g.data()) {
                    *d += v * s;
                }
            }
            Op::ScaleBy(a, s) => {
                let (x, sv) = (val(a), val(s).item());
                for (d, v) in acc(grads, *a, x).iter_mut().zip(g.data()) {
                    *d += v * sv;
                }
                let dot: f64 = g.data().iter().zip(x.data()).map(|(p, q)| p * q).sum();
                acc(grads, *s, val(s))[0] += dot;
            }
            Op::Act(a, kind) => {
                let x = val(a);
                let da = acc(grads, *a, x);
                for i in 0..da.len() {
                    da[i] += g.data()[i] * act_bwd(x.data()[i], out.data()[i], *kind);
                }
            }
            Op::Softmax(a) | Op::MaskedSoftmax(a, _) => {
                let c = out.cols();
                let da = acc(grads, *a, out);
                for (i, (yr, gr)) in out.data().chunks(c).zip(g.data().chunks(c)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, gg)| y * gg).sum();
                    for j in 0..c {
                        da[i * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm(a, eps) => {
                let x = val(a);
                let c = x.cols();
                let da = acc(grads, *a, x);
                for i in 0..x.rows() {
                    let row = &x.data()[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let y = &out.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let gm = gr.iter().sum::<f64>() / c as f64;
                    let gy = gr.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                    for j in 0..c {
                        da[i * c + j] += inv * (gr[j] - gm - y[j] * gy);
                    }
                }
            }
            Op::L2NormalizeRows(a) => {
                let x = val(a);
                let c = x.cols();
                let da = acc(grads, *a, x);
                for i in 0..x.rows() {
                    let row = &x.data()[i * c..(i + 1) * c];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let y = &out.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    if norm <= L2_FLOOR {
                        for j in 0..c {
                            da[i * c + j] += gr[j] / L2_FLOOR;
                        }
                        continue;
                    }
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        da[i * c + j] += (gr[j] - y[j] * dot) / norm;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let pv = val(p);
                    let w = pv.cols();
                    let dp = acc(grads, *p, pv);
                    for i in 0..out.rows() {
                        for j in 0..w {
                            dp[i * w + j] += g.data()[i * total + offset + j];
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = val(p);
                    let len = pv.len();
                    for (d, v) in acc(grads, *p, pv).iter_mut().zip(&g.data()[offset..offset + len]) {
                        *d += v;
                    }
                    offset += len;
                }
            }
            Op::SliceRows { a, start, .. } => {
                let x = val(a);
                let m = x.cols();
                let da = acc(grads, *a, x);
                for (d, v) in da[start * m..].iter_mut().zip(g.data()) {
                    *d += v;
                }
            }
            Op::SliceCols { a, start, len } => {
                let x = val(a);
                let m = x.cols();
                let da = acc(grads, *a, x);
                for i in 0..x.rows() {
                    for j in 0..*len {
                        da[i * m + start + j] += g.data()[i * len + j];
                    }
                }
            }
            Op::Gather { a, index, .. } => {
                let da = acc(grads, *a, val(a));
                for (&ix, v) in index.iter().zip(g.data()) {
                    if ix != GATHER_ZERO {
                        da[ix] += v;
                    }
                }
            }
            Op::Sum(a) => {
                let gv = g.item();
                acc(grads, *a, val(a)).iter_mut().for_each(|d| *d += gv);
            }
            Op::Mean(a) => {
                let x = val(a);
                let gv = g.item() / x.len() as f64;
                acc(grads, *a, x).iter_mut().for_each(|d| *d += gv);
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let x = val(logits);
                let (n, k) = (x.rows(), x.cols());
                let scale = g.item() / n as f64;
                let p = softmax_rows(x, None);
                let da = acc(grads, *logits, x);
                for i in 0..n {
                    for j in 0..k {
                        let target = if labels[i] == j { 1.0 } else { 0.0 };
                        da[i * k + j] += scale * (p.data()[i * k + j] - target);
                    }
                }
            }
        }
    }
}

/// Evaluate the tape with new input values and backpropagate from `loss`.
pub fn eval_and_backprop(tape: &mut Tape, inputs: &[(Var, Tensor)], loss: Var) -> Result<(f64, Grads)> {
    for (v, t) in inputs {
        tape.set_leaf(*v, t.clone())?;
    }
    tape.replay()?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), grads))
}
