//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive in the order it is applied, so parents
//! always precede children and a single reverse sweep visits each node once.
//! Parameters can be borrowed into a tape, which lets many tapes share one
//! read-only set of weights.

use std::borrow::Cow;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias {
        a: Var,
        bias: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SplitHeads {
        a: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        a: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    Sum(Var),
    Pick {
        a: Var,
        picks: Vec<(usize, f64)>,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddBias { a, bias } => vec![*a, *bias],
            Op::Scale { a, .. }
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Log(a)
            | Op::SplitHeads { a, .. }
            | Op::MergeHeads { a, .. }
            | Op::Sum(a)
            | Op::Pick { a, .. } => vec![*a],
            Op::Gather { table, .. } => vec![*table],
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf; no copy of the data is made.
    pub fn borrowed(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// 2-D product `a · b`, or `a · bᵀ` when `trans_b` is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (kb, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != kb {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            av.data(),
            false,
            bv.data(),
            trans_b,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false)
    }

    /// Batched product of `[batch, m, k]` with `[batch, k, n]` (or
    /// `[batch, n, k]` transposed).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 3 || bv.shape().len() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(shape_err("batch_matmul", av, bv));
        }
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (kb, n) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if k != kb {
            return Err(shape_err("batch_matmul", av, bv));
        }
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            small_gemm(
                m,
                k,
                n,
                &av.data()[t * m * k..(t + 1) * m * k],
                false,
                &bv.data()[t * k * n..(t + 1) * k * n],
                trans_b,
                &mut out[t * m * n..(t + 1) * m * n],
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(
            value,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Adds a vector of length `cols` to every row of `a` (viewed as `[rows, cols]`
    /// with `cols = bias.numel()`).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let cols = bv.numel();
        if cols == 0 || av.numel() % cols != 0 {
            return Err(shape_err("add_bias", av, bv));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias { a, bias }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale { a, factor })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(a))
    }

    /// Row-wise softmax over the last axis. An optional additive mask of shape
    /// `[mask_rows, cols]` is applied to row `r` using mask row `r % mask_rows`;
    /// its entries are `0` or `f64::NEG_INFINITY`. The mask is a constant.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Tensor>) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = av.as_matrix_dims();
        if let Some(mask) = mask {
            let (mrows, mcols) = mask.as_matrix_dims();
            if mcols != cols || mrows == 0 {
                return Err(shape_err("softmax_rows", av, mask));
            }
        }
        let mut data = av.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            if let Some(mask) = mask {
                let mrows = mask.as_matrix_dims().0;
                for (x, m) in row.iter_mut().zip(mask.row(r % mrows)) {
                    *x += m;
                }
            }
            softmax_in_place(row).map_err(|_| Error::FullyMaskedRow { row: r })?;
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax(a)))
    }

    /// Row-wise `x - logsumexp(x)` over the last axis.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (_, cols) = av.as_matrix_dims();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::LogSoftmax(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x.ln()).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Log(a))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, cols) = tv.as_matrix_dims();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::TokenOutOfRange { id, vocab: rows });
            }
            data.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Splits the columns of `[batch*seq, heads*dh]` into equal segments and
    /// regroups them as `[batch*heads, seq, dh]`.
    pub fn split_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = av.as_matrix_dims();
        if rows != batch * seq || heads == 0 || cols % heads != 0 {
            return Err(Error::Shape {
                op: "split_heads",
                lhs: av.shape().to_vec(),
                rhs: vec![batch, seq, heads],
            });
        }
        let dh = cols / heads;
        let mut data = vec![0.0; av.numel()];
        permute_heads(av.data(), &mut data, batch, seq, heads, dh, false);
        let value = Tensor::new(vec![batch * heads, seq, dh], data)?;
        Ok(self.push(
            value,
            Op::SplitHeads {
                a,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Inverse of [`Tape::split_heads`]: concatenates head segments back into
    /// `[batch*seq, heads*dh]`.
    pub fn merge_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 3 || av.shape()[0] != batch * heads || av.shape()[1] != seq {
            return Err(Error::Shape {
                op: "merge_heads",
                lhs: av.shape().to_vec(),
                rhs: vec![batch, seq, heads],
            });
        }
        let dh = av.shape()[2];
        let mut data = vec![0.0; av.numel()];
        permute_heads(av.data(), &mut data, batch, seq, heads, dh, true);
        let value = Tensor::new(vec![batch * seq, heads * dh], data)?;
        Ok(self.push(
            value,
            Op::MergeHeads {
                a,
                batch,
                seq,
                heads,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Weighted sum of selected flat entries: `Σ w · a[idx]`.
    pub fn pick(&mut self, a: Var, picks: Vec<(usize, f64)>) -> Result<Var> {
        let av = self.value(a);
        let mut s = 0.0;
        for &(idx, w) in &picks {
            let x = *av.data().get(idx).ok_or_else(|| Error::Shape {
                op: "pick",
                lhs: av.shape().to_vec(),
                rhs: vec![idx],
            })?;
            s += w * x;
        }
        Ok(self.push(Tensor::scalar(s), Op::Pick { a, picks }))
    }

    /// Reverse sweep from a scalar node. Gradients are kept for every node that
    /// depends on a leaf marked `requires_grad`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Validation(format!(
                "backward needs a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = g.shape()[1];
                if wants(*a) {
                    // dA = G · op(B)^T
                    let ga = grad_slot(grads, *a, av.shape());
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        bv.data(),
                        !trans_b,
                        ga.data_mut(),
                        true,
                    );
                }
                if wants(*b) {
                    let gb = grad_slot(grads, *b, bv.shape());
                    if *trans_b {
                        // B is n×k: dB = G^T · A
                        gemm(
                            n,
                            m,
                            k,
                            g.data(),
                            true,
                            av.data(),
                            false,
                            gb.data_mut(),
                            true,
                        );
                    } else {
                        // dB = A^T · G
                        gemm(
                            k,
                            m,
                            n,
                            av.data(),
                            true,
                            g.data(),
                            false,
                            gb.data_mut(),
                            true,
                        );
                    }
                }
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    let ga = grad_slot(grads, *a, av.shape());
                    for t in 0..*batch {
                        let gs = &g.data()[t * m * n..(t + 1) * m * n];
                        let bs = &bv.data()[t * k * n..(t + 1) * k * n];
                        let out = &mut ga.data_mut()[t * m * k..(t + 1) * m * k];
                        small_gemm_acc(m, n, k, gs, false, bs, !trans_b, out);
                    }
                }
                if wants(*b) {
                    let gb = grad_slot(grads, *b, bv.shape());
                    for t in 0..*batch {
                        let gs = &g.data()[t * m * n..(t + 1) * m * n];
                        let as_ = &av.data()[t * m * k..(t + 1) * m * k];
                        let out = &mut gb.data_mut()[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            small_gemm_acc(n, m, k, gs, true, as_, false, out);
                        } else {
                            small_gemm_acc(k, m, n, as_, true, gs, false, out);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        let shape = self.value(v).shape().to_vec();
                        grad_slot(grads, v, &shape).add_assign(g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    let ga = grad_slot(grads, *a, av.shape());
                    for ((o, gi), y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gi * y;
                    }
                }
                if wants(*b) {
                    let gb = grad_slot(grads, *b, bv.shape());
                    for ((o, gi), x) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gi * x;
                    }
                }
            }
            Op::AddBias { a, bias } => {
                if wants(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    grad_slot(grads, *a, &shape).add_assign(g);
                }
                if wants(*bias) {
                    let shape = self.value(*bias).shape().to_vec();
                    let cols = self.value(*bias).numel();
                    let gb = grad_slot(grads, *bias, &shape);
                    for row in g.data().chunks(cols) {
                        for (o, x) in gb.data_mut().iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Scale { a, factor } => {
                if wants(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    let ga = grad_slot(grads, *a, &shape);
                    for (o, x) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += factor * x;
                    }
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let av = self.value(*a);
                    let ga = grad_slot(grads, *a, av.shape());
                    for ((o, gi), x) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        if *x > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let y = &node.value;
                    let (_, cols) = y.as_matrix_dims();
                    let shape = y.shape().to_vec();
                    let ga = grad_slot(grads, *a, &shape);
                    for ((orow, grow), yrow) in ga
                        .data_mut()
                        .chunks_mut(cols)
                        .zip(g.data().chunks(cols))
                        .zip(y.data().chunks(cols))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(gi, yi)| gi * yi).sum();
                        for ((o, gi), yi) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if wants(*a) {
                    let y = &node.value;
                    let (_, cols) = y.as_matrix_dims();
                    let shape = y.shape().to_vec();
                    let ga = grad_slot(grads, *a, &shape);
                    for ((orow, grow), yrow) in ga
                        .data_mut()
                        .chunks_mut(cols)
                        .zip(g.data().chunks(cols))
                        .zip(y.data().chunks(cols))
                    {
                        let total: f64 = grow.iter().sum();
                        if total == 0.0 && grow.iter().all(|&x| x == 0.0) {
                            continue;
                        }
                        for ((o, gi), yi) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += gi - yi.exp() * total;
                        }
                    }
                }
            }
            Op::Log(a) => {
                if wants(*a) {
                    let av = self.value(*a);
                    let ga = grad_slot(grads, *a, av.shape());
                    for ((o, gi), x) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        if *gi != 0.0 {
                            *o += gi / x;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let tv = self.value(*table);
                    let cols = tv.as_matrix_dims().1;
                    let gt = grad_slot(grads, *table, tv.shape());
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &g.data()[i * cols..(i + 1) * cols];
                        let dst = &mut gt.data_mut()[id * cols..(id + 1) * cols];
                        for (o, x) in dst.iter_mut().zip(src) {
                            *o += x;
                        }
                    }
                }
            }
            Op::SplitHeads {
                a,
                batch,
                seq,
                heads,
            } => {
                if wants(*a) {
                    let av = self.value(*a);
                    let dh = av.as_matrix_dims().1 / heads;
                    let mut tmp = vec![0.0; g.numel()];
                    permute_heads(g.data(), &mut tmp, *batch, *seq, *heads, dh, true);
                    let ga = grad_slot(grads, *a, av.shape());
                    for (o, x) in ga.data_mut().iter_mut().zip(&tmp) {
                        *o += x;
                    }
                }
            }
            Op::MergeHeads {
                a,
                batch,
                seq,
                heads,
            } => {
                if wants(*a) {
                    let av = self.value(*a);
                    let dh = av.shape()[2];
                    let mut tmp = vec![0.0; g.numel()];
                    permute_heads(g.data(), &mut tmp, *batch, *seq, *heads, dh, false);
                    let ga = grad_slot(grads, *a, av.shape());
                    for (o, x) in ga.data_mut().iter_mut().zip(&tmp) {
                        *o += x;
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    let s = g.data()[0];
                    for o in grad_slot(grads, *a, &shape).data_mut() {
                        *o += s;
                    }
                }
            }
            Op::Pick { a, picks } => {
                if wants(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    let s = g.data()[0];
                    let ga = grad_slot(grads, *a, &shape);
                    for &(idx, w) in picks {
                        ga.data_mut()[idx] += w * s;
                    }
                }
            }
        }
    }
}

fn grad_slot<'g>(grads: &'g mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'g mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

/// Stable in-place softmax. Fails when every entry is `-inf`.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> std::result::Result<(), ()> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(());
    }
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
    Ok(())
}

/// `[batch*seq, heads*dh]` ↔ `[batch*heads, seq, dh]`.
fn permute_heads(
    src: &[f64],
    dst: &mut [f64],
    batch: usize,
    seq: usize,
    heads: usize,
    dh: usize,
    inverse: bool,
) {
    let d = heads * dh;
    for b in 0..batch {
        for s in 0..seq {
            for h in 0..heads {
                let flat = (b * seq + s) * d + h * dh;
                let split = ((b * heads + h) * seq + s) * dh;
                let (from, to) = if inverse {
                    (split, flat)
                } else {
                    (flat, split)
                };
                dst[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn small_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
) {
    c.fill(0.0);
    small_gemm_acc(m, k, n, a, trans_a, b, trans_b, c);
}

/// `c += op(a) · op(b)`; loops for the tiny per-head products, BLAS-style
/// kernel otherwise.
#[allow(clippy::too_many_arguments)]
fn small_gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
) {
    if m * k * n > 32 * 32 * 32 {
        gemm(m, k, n, a, trans_a, b, trans_b, c, true);
        return;
    }
    let a_at = |i: usize, p: usize| if trans_a { a[p * m + i] } else { a[i * k + p] };
    if trans_b {
        // b is n×k
        for i in 0..m {
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut s = 0.0;
                for (p, bv) in brow.iter().enumerate() {
                    s += a_at(i, p) * bv;
                }
                c[i * n + j] += s;
            }
        }
    } else {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let x = a_at(i, p);
                if x == 0.0 {
                    continue;
                }
                for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *cv += x * bv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Central finite differences of `f` around `x`.
    fn numeric_grad(x: &Tensor, eps: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            out.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        out
    }

    fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / (x.abs().max(y.abs()).max(1e-8)))
            .fold(0.0, f64::max)
    }

    /// Every differentiable primitive in one scalar-valued chain.
    fn composite(
        tape: &mut Tape,
        x: Var,
        w: Var,
        b: Var,
        table: Var,
        mask: &Tensor,
        picks: &[(usize, f64)],
    ) -> Var {
        let h = tape.matmul(x, w).unwrap();
        let h = tape.add_bias(h, b).unwrap();
        let r = tape.relu(h);
        let e = tape.gather_rows(table, &[2, 0, 2, 1]).unwrap();
        let ew = tape.matmul_t(e, h, true).unwrap();
        let hr = tape.add(h, r).unwrap();
        let hs = tape.mul(hr, ew).unwrap();
        let hs = tape.scale(hs, 0.7);
        let sm = tape.softmax_rows(hs, Some(mask)).unwrap();
        // two "heads" of width 2 over a batch of 2 sequences of length 2
        let q = tape.split_heads(sm, 2, 2, 2).unwrap();
        let k = tape.split_heads(hs, 2, 2, 2).unwrap();
        let sc = tape.batch_matmul(q, k, true).unwrap();
        let ctx = tape.batch_matmul(sc, k, false).unwrap();
        let merged = tape.merge_heads(ctx, 2, 2, 2).unwrap();
        let ls = tape.log_softmax_rows(merged);
        let lg = tape.log(sm);
        let tail = tape.sum(lg);
        let head = tape.pick(ls, picks.to_vec()).unwrap();
        let tail = tape.scale(tail, 0.01);
        let total = tape.add(head, tail).unwrap();
        tape.sum(total)
    }

    #[test]
    fn random_compositions_match_finite_differences() {
        let mut worst = 0.0_f64;
        for trial in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let x = rand_tensor(&mut rng, &[4, 3]);
            let w = rand_tensor(&mut rng, &[3, 4]);
            let b = rand_tensor(&mut rng, &[4]);
            let table = rand_tensor(&mut rng, &[3, 4]);
            let mut mask = Tensor::zeros(&[2, 4]);
            mask.data_mut()[rng.random_range(0..4)] = f64::NEG_INFINITY;
            let picks: Vec<(usize, f64)> = (0..5)
                .map(|_| (rng.random_range(0..16), rng.random_range(-1.0..1.0)))
                .collect();
            let eval = |xs: [&Tensor; 4]| {
                let mut t = Tape::new();
                let v: Vec<Var> = xs.iter().map(|z| t.leaf((*z).clone(), false)).collect();
                let out = composite(&mut t, v[0], v[1], v[2], v[3], &mask, &picks);
                t.value(out).data()[0]
            };
            let mut tape = Tape::new();
            let vars: Vec<Var> = [&x, &w, &b, &table]
                .iter()
                .map(|z| tape.leaf((*z).clone(), true))
                .collect();
            let out = composite(&mut tape, vars[0], vars[1], vars[2], vars[3], &mask, &picks);
            let grads = tape.backward(out).unwrap();
            let inputs = [&x, &w, &b, &table];
            for (slot, var) in vars.iter().enumerate() {
                let num = numeric_grad(inputs[slot], 1e-6, |z| {
                    let mut xs = inputs;
                    xs[slot] = z;
                    eval(xs)
                });
                let ana = grads
                    .get(*var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(inputs[slot].shape()));
                worst = worst.max(max_rel_err(&ana, &num));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst:e}");
    }

    #[test]
    fn softmax_rows_sum_to_one_for_extreme_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let data: Vec<f64> = (0..24).map(|_| rng.random_range(-1e3..1e3)).collect();
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::new(vec![4, 6], data).unwrap(), false);
            let s = tape.softmax_rows(a, None).unwrap();
            for r in 0..4 {
                let total: f64 = tape.value(s).row(r).iter().sum();
                assert!((total - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let mut tape = Tape::new();
        let va = tape.leaf(a.clone(), true);
        let vb = tape.leaf(b.clone(), true);
        let c = tape.matmul(va, vb).unwrap();
        let s = tape.sum(c);
        let grads = tape.backward(s).unwrap();
        let num_a = numeric_grad(&a, 1e-6, |x| x.matmul(&b).unwrap().sum());
        let num_b = numeric_grad(&b, 1e-6, |x| a.matmul(x).unwrap().sum());
        assert!(max_rel_err(grads.get(va).unwrap(), &num_a) < 1e-6);
        assert!(max_rel_err(grads.get(vb).unwrap(), &num_b) < 1e-6);
    }

    #[test]
    fn softmax_rows_uniform_and_masked() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[1, 4]), false);
        let s = tape.softmax_rows(a, None).unwrap();
        assert_eq!(tape.value(s).data(), &[0.25; 4]);

        let b = tape.leaf(Tensor::new(vec![1, 2], vec![5.0, 5.0]).unwrap(), false);
        let mask = Tensor::new(vec![1, 2], vec![0.0, f64::NEG_INFINITY]).unwrap();
        let s = tape.softmax_rows(b, Some(&mask)).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0]);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 2]), false);
        let mask = Tensor::new(
            vec![2, 2],
            vec![0.0, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY],
        )
        .unwrap();
        assert!(matches!(
            tape.softmax_rows(a, Some(&mask)),
            Err(Error::FullyMaskedRow { row: 1 })
        ));
    }

    #[test]
    fn relu_values_and_idempotence() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(), false);
        let r = tape.relu(a);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let rr = tape.relu(r);
        assert_eq!(tape.value(rr).data(), tape.value(r).data());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f(x) = x*x + x, f'(x) = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.5, 0.5, 2.0]).unwrap(), true);
        let xx = tape.mul(x, x).unwrap();
        let f = tape.add(xx, x).unwrap();
        let s = tape.sum(f);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[-2.0, 2.0, 5.0]);
    }

    #[test]
    fn split_merge_heads_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2 * 3, 8]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), false);
        let s = tape.split_heads(v, 2, 3, 4).unwrap();
        assert_eq!(tape.value(s).shape(), &[8, 3, 2]);
        // head 1 of batch 0, position 2 is columns 2..4 of row 2
        assert_eq!(
            &tape.value(s).data()[(3 + 2) * 2..(3 + 2) * 2 + 2],
            &x.row(2)[2..4]
        );
        let m = tape.merge_heads(s, 2, 3, 4).unwrap();
        assert_eq!(tape.value(m), &x);
    }

    #[test]
    fn gather_gradient_lands_on_gathered_rows() {
        let table = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut tape = Tape::new();
        let t = tape.leaf(table, true);
        let g = tape.gather_rows(t, &[2, 2, 0]).unwrap();
        let s = tape.sum(g);
        let grads = tape.backward(s).unwrap();
        assert_eq!(
            grads.get(t).unwrap().data(),
            &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]
        );
        assert!(tape.gather_rows(t, &[3]).is_err());
    }
}
