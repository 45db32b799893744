//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its parents, so node order is already a topological order. [`Tape::backward`]
//! walks the nodes once in reverse.

use serde::{Deserialize, Serialize};

use super::kernels::{gemm, gemm_nt, gemm_tn, sigmoid};
use super::tensor::{dot, Tensor};
use crate::error::{CpcError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for fault injection and gradcheck reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Tanh,
    Sigmoid,
    Transpose,
    AddRowBias,
    AddChannelBias,
    Conv1d,
    GruStep,
    Row,
    StackRows,
    ConcatRows,
    Logsumexp,
    Pick,
    Sum,
    Mean,
    SumSquares,
    GatherRows,
    GroupedDot,
    SoftmaxXent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Parameter handles of one GRU cell.
///
/// Gate rows are stacked in the order reset, update, candidate.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

#[derive(Debug)]
struct GruSaved {
    reset: Vec<f64>,
    update: Vec<f64>,
    cand: Vec<f64>,
    hidden_cand: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Conv1d {
        input: Var,
        kernel: Var,
        stride: usize,
    },
    GruStep {
        h: Var,
        x: Var,
        params: GruVars,
        saved: Box<GruSaved>,
    },
    Row(Var, usize),
    StackRows(Vec<Var>),
    ConcatRows(Vec<Var>),
    Logsumexp(Var),
    Pick(Var, usize),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    GatherRows(Var, Vec<usize>),
    GroupedDot {
        cands: Var,
        preds: Var,
        group: usize,
    },
    SoftmaxXent {
        scores: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
        reduction: Reduction,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Transpose(_) => OpKind::Transpose,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::AddChannelBias(..) => OpKind::AddChannelBias,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::GruStep { .. } => OpKind::GruStep,
            Op::Row(..) => OpKind::Row,
            Op::StackRows(_) => OpKind::StackRows,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::Logsumexp(_) => OpKind::Logsumexp,
            Op::Pick(..) => OpKind::Pick,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::SumSquares(_) => OpKind::SumSquares,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::GroupedDot { .. } => OpKind::GroupedDot,
            Op::SoftmaxXent { .. } => OpKind::SoftmaxXent,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` does not
    /// reach the loss.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match self.grads.get(var.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn reached(&self, var: Var) -> bool {
        matches!(self.grads.get(var.0), Some(Some(_)))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
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

    /// Corrupts the backward rule of `kind` by a factor of 1.05. Used only to
    /// check that the gradient checker catches broken rules.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Registers a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn vals(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.values()
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|&p| self.rg(p));
        self.push(value, op, rg)
    }

    fn dims2(&self, op: &'static str, var: Var) -> Result<(usize, usize)> {
        match self.shape(var) {
            [r, c] => Ok((*r, *c)),
            other => Err(CpcError::invalid(format!(
                "{op}: expected a matrix, got shape {other:?}"
            ))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(CpcError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = gemm(self.vals(a), self.vals(b), m, k, n);
        Ok(self.push_op(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CpcError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let shape = self.shape(a).to_vec();
        let v = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(shape, v).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip(a, b, |x, y| x + y);
        Ok(self.push_op(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip(a, b, |x, y| x - y);
        Ok(self.push_op(t, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip(a, b, |x, y| x * y);
        Ok(self.push_op(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v * c);
        self.push_op(t, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(0.0));
        self.push_op(t, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push_op(t, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push_op(t, Op::Sigmoid(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.dims2("transpose", a)?;
        let t = self.value(a).transpose()?;
        Ok(self.push_op(t, Op::Transpose(a), &[a]))
    }

    /// `x[m×n] + bias[n]`, bias added to every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_row_bias", x)?;
        if self.shape(bias) != [n] {
            return Err(CpcError::shape("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.vals(bias).to_vec();
        let mut out = self.vals(x).to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(o, bi)| *o += bi);
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(t, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// `x[channels×time] + bias[channels]`, one bias per channel.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (c, t) = self.dims2("add_channel_bias", x)?;
        if self.shape(bias) != [c] {
            return Err(CpcError::shape(
                "add_channel_bias",
                self.shape(x),
                self.shape(bias),
            ));
        }
        let b = self.vals(bias).to_vec();
        let mut out = self.vals(x).to_vec();
        for (row, bi) in out.chunks_mut(t).zip(&b) {
            row.iter_mut().for_each(|o| *o += bi);
        }
        let v = Tensor::new(vec![c, t], out)?;
        Ok(self.push_op(v, Op::AddChannelBias(x, bias), &[x, bias]))
    }

    /// Valid (unpadded) strided 1-D convolution.
    ///
    /// `input` is `[in×time]`, `kernel` is `[out×in×width]`; the result is
    /// `[out × (floor((time − width)/stride) + 1)]`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(CpcError::invalid("conv1d: stride must be at least 1"));
        }
        let (cin, time) = self.dims2("conv1d", input)?;
        let (cout, kin, width) = match self.shape(kernel) {
            [o, i, w] => (*o, *i, *w),
            other => {
                return Err(CpcError::invalid(format!(
                    "conv1d: kernel must be out×in×width, got {other:?}"
                )))
            }
        };
        if kin != cin {
            return Err(CpcError::shape("conv1d", self.shape(input), self.shape(kernel)));
        }
        let tout = conv_out_len(time, width, stride).ok_or(CpcError::InputTooShort {
            op: "conv1d",
            len: time,
            min: width,
        })?;
        let x = self.vals(input);
        let k = self.vals(kernel);
        let mut out = vec![0.0; cout * tout];
        for o in 0..cout {
            let orow = &mut out[o * tout..(o + 1) * tout];
            for i in 0..cin {
                let xrow = &x[i * time..(i + 1) * time];
                let krow = &k[(o * cin + i) * width..(o * cin + i + 1) * width];
                for (t, acc) in orow.iter_mut().enumerate() {
                    let start = t * stride;
                    *acc += dot(krow, &xrow[start..start + width]);
                }
            }
        }
        let t = Tensor::new(vec![cout, tout], out)?;
        Ok(self.push_op(
            t,
            Op::Conv1d {
                input,
                kernel,
                stride,
            },
            &[input, kernel],
        ))
    }

    /// One GRU cell update.
    ///
    /// `r = σ(W_ir x + b_ir + W_hr h + b_hr)`, `u = σ(W_iu x + b_iu + W_hu h + b_hu)`,
    /// `n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))`, `h' = (1 − u) ⊙ n + u ⊙ h`.
    pub fn gru_step(&mut self, h: Var, x: Var, p: GruVars) -> Result<Var> {
        let d = match self.shape(h) {
            [d] => *d,
            other => return Err(CpcError::invalid(format!("gru_step: h must be a vector, got {other:?}"))),
        };
        let e = match self.shape(x) {
            [e] => *e,
            other => return Err(CpcError::invalid(format!("gru_step: x must be a vector, got {other:?}"))),
        };
        if self.shape(p.w_ih) != [3 * d, e] {
            return Err(CpcError::shape("gru_step", self.shape(p.w_ih), &[3 * d, e]));
        }
        if self.shape(p.w_hh) != [3 * d, d] {
            return Err(CpcError::shape("gru_step", self.shape(p.w_hh), &[3 * d, d]));
        }
        if self.shape(p.b_ih) != [3 * d] || self.shape(p.b_hh) != [3 * d] {
            return Err(CpcError::shape("gru_step", self.shape(p.b_ih), &[3 * d]));
        }
        let gi = affine(self.vals(p.w_ih), self.vals(x), self.vals(p.b_ih));
        let gh = affine(self.vals(p.w_hh), self.vals(h), self.vals(p.b_hh));
        let hv = self.vals(h);
        let mut reset = vec![0.0; d];
        let mut update = vec![0.0; d];
        let mut cand = vec![0.0; d];
        let mut out = vec![0.0; d];
        for j in 0..d {
            reset[j] = sigmoid(gi[j] + gh[j]);
            update[j] = sigmoid(gi[d + j] + gh[d + j]);
            cand[j] = (gi[2 * d + j] + reset[j] * gh[2 * d + j]).tanh();
            out[j] = (1.0 - update[j]) * cand[j] + update[j] * hv[j];
        }
        let saved = Box::new(GruSaved {
            reset,
            update,
            cand,
            hidden_cand: gh[2 * d..].to_vec(),
        });
        let parents = [h, x, p.w_ih, p.w_hh, p.b_ih, p.b_hh];
        Ok(self.push_op(
            Tensor::vector(out),
            Op::GruStep {
                h,
                x,
                params: p,
                saved,
            },
            &parents,
        ))
    }

    /// Row `i` of a matrix, as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let (r, _) = self.dims2("row", x)?;
        if i >= r {
            return Err(CpcError::IndexOutOfRange {
                op: "row",
                index: i,
                len: r,
            });
        }
        let t = Tensor::vector(self.value(x).row(i).to_vec());
        Ok(self.push_op(t, Op::Row(x, i), &[x]))
    }

    /// Stacks equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows.first().ok_or(CpcError::Empty("stack_rows"))?;
        let n = match self.shape(first) {
            [n] => *n,
            other => return Err(CpcError::invalid(format!("stack_rows: expected vectors, got {other:?}"))),
        };
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if self.shape(r) != [n] {
                return Err(CpcError::shape("stack_rows", &[n], self.shape(r)));
            }
            out.extend_from_slice(self.vals(r));
        }
        let t = Tensor::new(vec![rows.len(), n], out)?;
        Ok(self.push_op(t, Op::StackRows(rows.to_vec()), rows))
    }

    /// Concatenates matrices with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(CpcError::Empty("concat_rows"))?;
        let (_, c) = self.dims2("concat_rows", first)?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c2) = self.dims2("concat_rows", p)?;
            if c2 != c {
                return Err(CpcError::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.vals(p));
        }
        let t = Tensor::new(vec![rows, c], out)?;
        Ok(self.push_op(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// `log Σ exp(v_i)` over all elements, computed with a max shift.
    pub fn logsumexp(&mut self, v: Var) -> Result<Var> {
        let lse = logsumexp(self.vals(v)).ok_or(CpcError::Empty("logsumexp"))?;
        Ok(self.push_op(Tensor::scalar(lse), Op::Logsumexp(v), &[v]))
    }

    /// Element `i` of the flattened tensor, as a scalar.
    pub fn pick(&mut self, v: Var, i: usize) -> Result<Var> {
        let len = self.value(v).len();
        if i >= len {
            return Err(CpcError::IndexOutOfRange {
                op: "pick",
                index: i,
                len,
            });
        }
        let val = self.vals(v)[i];
        Ok(self.push_op(Tensor::scalar(val), Op::Pick(v, i), &[v]))
    }

    pub fn sum(&mut self, v: Var) -> Var {
        let s = self.value(v).sum();
        self.push_op(Tensor::scalar(s), Op::Sum(v), &[v])
    }

    pub fn mean(&mut self, v: Var) -> Var {
        let t = self.value(v);
        let s = t.sum() / t.len() as f64;
        self.push_op(Tensor::scalar(s), Op::Mean(v), &[v])
    }

    /// `Σ v_i²`.
    pub fn sum_squares(&mut self, v: Var) -> Var {
        let s = self.vals(v).iter().map(|x| x * x).sum();
        self.push_op(Tensor::scalar(s), Op::SumSquares(v), &[v])
    }

    /// Selects rows of `x` by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.dims2("gather_rows", x)?;
        if idx.is_empty() {
            return Err(CpcError::Empty("gather_rows"));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            if i >= r {
                return Err(CpcError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            out.extend_from_slice(src.row(i));
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        Ok(self.push_op(t, Op::GatherRows(x, idx), &[x]))
    }

    /// Scores `group` candidate rows against each prediction row.
    ///
    /// `cands` is `[P·group × d]`, `preds` is `[P × d]`; output `[P × group]`
    /// with `out[p, g] = ⟨cands[p·group + g], preds[p]⟩`.
    pub fn grouped_dot(&mut self, cands: Var, preds: Var, group: usize) -> Result<Var> {
        let (pc, d) = self.dims2("grouped_dot", cands)?;
        let (p, d2) = self.dims2("grouped_dot", preds)?;
        if d != d2 || group == 0 || pc != p * group {
            return Err(CpcError::shape("grouped_dot", self.shape(cands), self.shape(preds)));
        }
        let cv = self.value(cands);
        let pv = self.value(preds);
        let mut out = vec![0.0; p * group];
        for i in 0..p {
            let pr = pv.row(i);
            for g in 0..group {
                out[i * group + g] = dot(cv.row(i * group + g), pr);
            }
        }
        let t = Tensor::new(vec![p, group], out)?;
        Ok(self.push_op(t, Op::GroupedDot { cands, preds, group }, &[cands, preds]))
    }

    /// Row-wise softmax cross-entropy: per row `logsumexp(row) − row[target]`,
    /// reduced by mean or sum over rows.
    pub fn softmax_xent(
        &mut self,
        scores: Var,
        targets: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let (p, g) = match self.shape(scores) {
            [n] => (1, *n),
            [p, g] => (*p, *g),
            other => return Err(CpcError::invalid(format!("softmax_xent: bad shape {other:?}"))),
        };
        if targets.len() != p {
            return Err(CpcError::shape("softmax_xent", &[p, g], &[targets.len()]));
        }
        let sv = self.vals(scores);
        let mut probs = vec![0.0; p * g];
        let mut total = 0.0;
        for (i, &tgt) in targets.iter().enumerate() {
            if tgt >= g {
                return Err(CpcError::IndexOutOfRange {
                    op: "softmax_xent",
                    index: tgt,
                    len: g,
                });
            }
            let row = &sv[i * g..(i + 1) * g];
            let lse = logsumexp(row).expect("non-empty row");
            for (pr, &s) in probs[i * g..(i + 1) * g].iter_mut().zip(row) {
                *pr = (s - lse).exp();
            }
            total += lse - row[tgt];
        }
        if reduction == Reduction::Mean {
            total /= p as f64;
        }
        Ok(self.push_op(
            Tensor::scalar(total),
            Op::SoftmaxXent {
                scores,
                targets: targets.to_vec(),
                probs,
                reduction,
            },
            &[scores],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(CpcError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                let scale = if self.fault == Some(node.op.kind()) { 1.05 } else { 1.0 };
                self.propagate(node, &g, scale, &mut grads);
            }
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, delta: Vec<f64>, scale: f64) {
        if !self.rg(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, d)| *a += scale * d),
            slot @ None => {
                *slot = Some(if scale == 1.0 {
                    delta
                } else {
                    delta.into_iter().map(|d| d * scale).collect()
                })
            }
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], s: f64, grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.values();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                if self.rg(*a) {
                    self.accumulate(grads, *a, gemm_nt(g, self.vals(*b), m, n, k), s);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, gemm_tn(self.vals(*a), g, m, k, n), s);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec(), s);
                self.accumulate(grads, *b, g.to_vec(), s);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec(), s);
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect(), s);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.vals(*a), self.vals(*b));
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect(), s);
                self.accumulate(grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect(), s);
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.iter().map(|v| v * c).collect(), s);
            }
            Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(self.vals(*a))
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d, s);
            }
            Op::Tanh(a) => {
                let d = g.iter().zip(out).map(|(gi, y)| gi * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, d, s);
            }
            Op::Sigmoid(a) => {
                let d = g.iter().zip(out).map(|(gi, y)| gi * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, d, s);
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                self.accumulate(grads, *a, d, s);
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, *x, g.to_vec(), s);
                if self.rg(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    self.accumulate(grads, *b, db, s);
                }
            }
            Op::AddChannelBias(x, b) => {
                self.accumulate(grads, *x, g.to_vec(), s);
                if self.rg(*b) {
                    let t = self.value(*x).dims2().unwrap().1;
                    let db = g.chunks(t).map(|row| row.iter().sum()).collect();
                    self.accumulate(grads, *b, db, s);
                }
            }
            Op::Conv1d {
                input,
                kernel,
                stride,
            } => self.conv1d_backward(*input, *kernel, *stride, g, s, grads),
            Op::GruStep { h, x, params, saved } => {
                self.gru_backward(*h, *x, *params, saved, g, s, grads)
            }
            Op::Row(x, i) => {
                if self.rg(*x) {
                    let (r, c) = self.value(*x).dims2().unwrap();
                    let mut d = vec![0.0; r * c];
                    d[i * c..(i + 1) * c].copy_from_slice(g);
                    self.accumulate(grads, *x, d, s);
                }
            }
            Op::StackRows(rows) => {
                let n = g.len() / rows.len();
                for (k, r) in rows.iter().enumerate() {
                    self.accumulate(grads, *r, g[k * n..(k + 1) * n].to_vec(), s);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.accumulate(grads, *p, g[off..off + len].to_vec(), s);
                    off += len;
                }
            }
            Op::Logsumexp(v) => {
                let lse = out[0];
                let d = self.vals(*v).iter().map(|x| g[0] * (x - lse).exp()).collect();
                self.accumulate(grads, *v, d, s);
            }
            Op::Pick(v, i) => {
                let mut d = vec![0.0; self.value(*v).len()];
                d[*i] = g[0];
                self.accumulate(grads, *v, d, s);
            }
            Op::Sum(v) => {
                self.accumulate(grads, *v, vec![g[0]; self.value(*v).len()], s);
            }
            Op::Mean(v) => {
                let n = self.value(*v).len();
                self.accumulate(grads, *v, vec![g[0] / n as f64; n], s);
            }
            Op::SumSquares(v) => {
                let d = self.vals(*v).iter().map(|x| 2.0 * x * g[0]).collect();
                self.accumulate(grads, *v, d, s);
            }
            Op::GatherRows(x, idx) => {
                if self.rg(*x) {
                    let (r, c) = self.value(*x).dims2().unwrap();
                    let mut d = vec![0.0; r * c];
                    for (k, &i) in idx.iter().enumerate() {
                        d[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g[k * c..(k + 1) * c])
                            .for_each(|(a, v)| *a += v);
                    }
                    self.accumulate(grads, *x, d, s);
                }
            }
            Op::GroupedDot { cands, preds, group } => {
                let cv = self.value(*cands);
                let pv = self.value(*preds);
                let (p, d) = pv.dims2().unwrap();
                if self.rg(*cands) {
                    let mut dc = vec![0.0; p * group * d];
                    for i in 0..p {
                        let pr = pv.row(i);
                        for gi in 0..*group {
                            let w = g[i * group + gi];
                            let row = &mut dc[(i * group + gi) * d..(i * group + gi + 1) * d];
                            row.iter_mut().zip(pr).for_each(|(a, v)| *a += w * v);
                        }
                    }
                    self.accumulate(grads, *cands, dc, s);
                }
                if self.rg(*preds) {
                    let mut dp = vec![0.0; p * d];
                    for i in 0..p {
                        let row = &mut dp[i * d..(i + 1) * d];
                        for gi in 0..*group {
                            let w = g[i * group + gi];
                            row.iter_mut()
                                .zip(cv.row(i * group + gi))
                                .for_each(|(a, v)| *a += w * v);
                        }
                    }
                    self.accumulate(grads, *preds, dp, s);
                }
            }
            Op::SoftmaxXent {
                scores,
                targets,
                probs,
                reduction,
            } => {
                let width = probs.len() / targets.len();
                let w = match reduction {
                    Reduction::Mean => g[0] / targets.len() as f64,
                    Reduction::Sum => g[0],
                };
                let mut d: Vec<f64> = probs.iter().map(|p| p * w).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * width + t] -= w;
                }
                self.accumulate(grads, *scores, d, s);
            }
        }
    }

    fn conv1d_backward(
        &self,
        input: Var,
        kernel: Var,
        stride: usize,
        g: &[f64],
        s: f64,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (cin, time) = self.value(input).dims2().unwrap();
        let ks = self.shape(kernel);
        let (cout, width) = (ks[0], ks[2]);
        let tout = g.len() / cout;
        let x = self.vals(input);
        let k = self.vals(kernel);
        if self.rg(kernel) {
            let mut dk = vec![0.0; k.len()];
            for o in 0..cout {
                let grow = &g[o * tout..(o + 1) * tout];
                for i in 0..cin {
                    let xrow = &x[i * time..(i + 1) * time];
                    let dkrow = &mut dk[(o * cin + i) * width..(o * cin + i + 1) * width];
                    for (t, &gv) in grow.iter().enumerate() {
                        let start = t * stride;
                        dkrow
                            .iter_mut()
                            .zip(&xrow[start..start + width])
                            .for_each(|(a, xv)| *a += gv * xv);
                    }
                }
            }
            self.accumulate(grads, kernel, dk, s);
        }
        if self.rg(input) {
            let mut dx = vec![0.0; x.len()];
            for o in 0..cout {
                let grow = &g[o * tout..(o + 1) * tout];
                for i in 0..cin {
                    let krow = &k[(o * cin + i) * width..(o * cin + i + 1) * width];
                    let dxrow = &mut dx[i * time..(i + 1) * time];
                    for (t, &gv) in grow.iter().enumerate() {
                        let start = t * stride;
                        dxrow[start..start + width]
                            .iter_mut()
                            .zip(krow)
                            .for_each(|(a, kv)| *a += gv * kv);
                    }
                }
            }
            self.accumulate(grads, input, dx, s);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn gru_backward(
        &self,
        h: Var,
        x: Var,
        p: GruVars,
        saved: &GruSaved,
        g: &[f64],
        s: f64,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = g.len();
        let e = self.value(x).len();
        let hv = self.vals(h);
        let xv = self.vals(x);
        let mut dgi = vec![0.0; 3 * d];
        let mut dgh = vec![0.0; 3 * d];
        let mut dh_direct = vec![0.0; d];
        for j in 0..d {
            let (r, u, n) = (saved.reset[j], saved.update[j], saved.cand[j]);
            let du = g[j] * (hv[j] - n);
            let dn = g[j] * (1.0 - u);
            dh_direct[j] = g[j] * u;
            let dn_pre = dn * (1.0 - n * n);
            let dr_pre = dn_pre * saved.hidden_cand[j] * r * (1.0 - r);
            let du_pre = du * u * (1.0 - u);
            dgi[j] = dr_pre;
            dgi[d + j] = du_pre;
            dgi[2 * d + j] = dn_pre;
            dgh[j] = dr_pre;
            dgh[d + j] = du_pre;
            dgh[2 * d + j] = dn_pre * r;
        }
        if self.rg(p.w_ih) {
            self.accumulate(grads, p.w_ih, outer(&dgi, xv), s);
        }
        if self.rg(p.w_hh) {
            self.accumulate(grads, p.w_hh, outer(&dgh, hv), s);
        }
        self.accumulate(grads, p.b_ih, dgi.clone(), s);
        self.accumulate(grads, p.b_hh, dgh.clone(), s);
        if self.rg(x) {
            self.accumulate(grads, x, gemm_tn(self.vals(p.w_ih), &dgi, 3 * d, e, 1), s);
        }
        if self.rg(h) {
            let mut dh = gemm_tn(self.vals(p.w_hh), &dgh, 3 * d, d, 1);
            dh.iter_mut().zip(&dh_direct).for_each(|(a, b)| *a += b);
            self.accumulate(grads, h, dh, s);
        }
    }
}

/// Output length of a valid strided convolution, `None` when `time < width`.
pub fn conv_out_len(time: usize, width: usize, stride: usize) -> Option<usize> {
    if time < width || stride == 0 {
        None
    } else {
        Some((time - width) / stride + 1)
    }
}

/// `log Σ exp(v_i)` with a max shift; `None` for empty input.
pub fn logsumexp(v: &[f64]) -> Option<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if v.is_empty() {
        return None;
    }
    if m == f64::NEG_INFINITY {
        return Some(m);
    }
    Some(m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln())
}

fn affine(w: &[f64], x: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len();
    w.chunks(n).zip(b).map(|(row, bi)| dot(row, x) + bi).collect()
}

fn outer(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &ai in a {
        out.extend(b.iter().map(|bj| ai * bj));
    }
    out
}
