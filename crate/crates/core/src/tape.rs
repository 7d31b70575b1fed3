//! Reverse-mode differentiation over a fixed primitive set.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Values are
//! referenced through copyable [`Var`] handles; [`Tape::backward`] walks the
//! nodes in reverse insertion order exactly once and returns a [`Gradients`]
//! table. Tapes are single-use: a second `backward` without [`Tape::reset`]
//! is a contract error.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, spmm, SparseAdj, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Primitive kinds with their attributes.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Mul,
    Scale(f64),
    Relu,
    Sigmoid,
    LeakyRelu(f64),
    Concat(Axis),
    RowSelect(Arc<Vec<usize>>),
    MeanRows,
    SumRows,
    SumAll,
    LogSoftmax,
    CrossEntropy(Arc<Vec<usize>>),
    /// Row-wise L2 normalisation `x / ||x||`.
    L2Norm,
    /// Inputs: `x`, optionally per-edge weights. Without a weight input the adjacency's own weights are used.
    Spmm(Arc<SparseAdj>),
    SegmentSoftmax(Arc<Vec<usize>>),
    SegmentMean {
        segments: Arc<Vec<usize>>,
        count: usize,
    },
    Reshape(Vec<usize>),
}

impl Op {
    /// Attribute-free primitives by name.
    pub fn from_name(name: &str) -> Result<Op> {
        Ok(match name {
            "matmul" => Op::MatMul,
            "transpose" => Op::Transpose,
            "add" => Op::Add,
            "mul" => Op::Mul,
            "relu" => Op::Relu,
            "sigmoid" => Op::Sigmoid,
            "mean_rows" => Op::MeanRows,
            "sum_rows" => Op::SumRows,
            "sum_all" => Op::SumAll,
            "log_softmax" => Op::LogSoftmax,
            "l2_norm" => Op::L2Norm,
            other => return Err(Error::UnsupportedOp(other.to_string())),
        })
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Concat(_) => "concat",
            Op::RowSelect(_) => "row_select",
            Op::MeanRows => "mean_rows",
            Op::SumRows => "sum_rows",
            Op::SumAll => "sum_all",
            Op::LogSoftmax => "log_softmax",
            Op::CrossEntropy(_) => "cross_entropy",
            Op::L2Norm => "l2_norm",
            Op::Spmm(_) => "spmm",
            Op::SegmentSoftmax(_) => "segment_softmax",
            Op::SegmentMean { .. } => "segment_mean",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

/// Gradient table produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` was unreachable from the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

/// Broadcast role of one operand in a binary elementwise op.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Bcast {
    Full,
    Scalar,
    Row,
}

impl Bcast {
    #[inline]
    fn index(self, i: usize, cols: usize) -> usize {
        match self {
            Bcast::Full => i,
            Bcast::Scalar => 0,
            Bcast::Row => i % cols,
        }
    }
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Vec<usize>, Bcast, Bcast)> {
    if a.shape() == b.shape() {
        return Ok((a.shape().to_vec(), Bcast::Full, Bcast::Full));
    }
    let role = |big: &Tensor, small: &Tensor| -> Option<Bcast> {
        if small.numel() == 1 {
            Some(Bcast::Scalar)
        } else if small.rows() == 1 && small.numel() == big.cols() {
            Some(Bcast::Row)
        } else {
            None
        }
    };
    if a.numel() >= b.numel() {
        if let Some(r) = role(a, b) {
            return Ok((a.shape().to_vec(), Bcast::Full, r));
        }
    } else if let Some(r) = role(b, a) {
        return Ok((b.shape().to_vec(), r, Bcast::Full));
    }
    Err(Error::dim(
        op,
        format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
    ))
}

fn reduce_to(g: &Tensor, role: Bcast, shape: &[usize]) -> Tensor {
    match role {
        Bcast::Full => g.clone(),
        Bcast::Scalar => {
            let mut t = Tensor::zeros(shape);
            t.data_mut()[0] = g.sum();
            t
        }
        Bcast::Row => {
            let cols = g.cols();
            let mut t = Tensor::zeros(shape);
            let out = t.data_mut();
            for (i, &v) in g.data().iter().enumerate() {
                out[i % cols] += v;
            }
            t
        }
    }
}

fn num_segments(segments: &[usize]) -> usize {
    segments.iter().map(|&s| s + 1).max().unwrap_or(0)
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

    /// Clears all nodes so the tape can record a fresh forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.spent = false;
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, Vec::new(), t, true)
    }

    /// Leaf that never receives a gradient (frozen weights, inputs, masks).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, Vec::new(), t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Evaluates one primitive and records it.
    pub fn eval(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let value = self.forward(&op, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(op, inputs.to_vec(), value, requires_grad))
    }

    fn arity(op: &Op, inputs: &[Var], n: usize) -> Result<()> {
        if inputs.len() != n {
            return Err(Error::dim(
                op.name(),
                format!("expected {n} inputs, got {}", inputs.len()),
            ));
        }
        Ok(())
    }

    fn forward(&self, op: &Op, inputs: &[Var]) -> Result<Tensor> {
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        match op {
            Op::Leaf => Err(Error::UnsupportedOp("leaf via eval".into())),
            Op::MatMul => {
                Self::arity(op, inputs, 2)?;
                let (a, b) = (val(0), val(1));
                if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                    return Err(Error::dim(
                        "matmul",
                        format!("{:?} x {:?}", a.shape(), b.shape()),
                    ));
                }
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
            }
            Op::Transpose => {
                Self::arity(op, inputs, 1)?;
                Ok(val(0).transpose())
            }
            Op::Add | Op::Mul => {
                Self::arity(op, inputs, 2)?;
                let (a, b) = (val(0), val(1));
                let (shape, ra, rb) = broadcast(op.name(), a, b)?;
                let n: usize = shape.iter().product();
                let cols = if ra == Bcast::Full {
                    a.cols()
                } else {
                    b.cols()
                };
                let (ad, bd) = (a.data(), b.data());
                let data = (0..n)
                    .map(|i| {
                        let x = ad[ra.index(i, cols)];
                        let y = bd[rb.index(i, cols)];
                        if matches!(op, Op::Add) {
                            x + y
                        } else {
                            x * y
                        }
                    })
                    .collect();
                Tensor::new(shape, data)
            }
            Op::Scale(c) => {
                Self::arity(op, inputs, 1)?;
                Ok(val(0).map(|v| v * c))
            }
            Op::Relu => {
                Self::arity(op, inputs, 1)?;
                Ok(val(0).map(|v| if v > 0.0 { v } else { 0.0 }))
            }
            Op::Sigmoid => {
                Self::arity(op, inputs, 1)?;
                Ok(val(0).map(sigmoid))
            }
            Op::LeakyRelu(s) => {
                Self::arity(op, inputs, 1)?;
                Ok(val(0).map(|v| if v > 0.0 { v } else { s * v }))
            }
            Op::Concat(axis) => {
                if inputs.is_empty() {
                    return Err(Error::dim("concat", "no inputs"));
                }
                let parts: Vec<&Tensor> = (0..inputs.len()).map(val).collect();
                match axis {
                    Axis::Rows => {
                        let c = parts[0].cols();
                        if parts.iter().any(|p| p.cols() != c) {
                            return Err(Error::dim("concat", "column counts differ"));
                        }
                        let rows = parts.iter().map(|p| p.rows()).sum();
                        let data = parts
                            .iter()
                            .flat_map(|p| p.data().iter().copied())
                            .collect();
                        Tensor::new(vec![rows, c], data)
                    }
                    Axis::Cols => {
                        let r = parts[0].rows();
                        if parts.iter().any(|p| p.rows() != r) {
                            return Err(Error::dim("concat", "row counts differ"));
                        }
                        let c: usize = parts.iter().map(|p| p.cols()).sum();
                        let mut data = Vec::with_capacity(r * c);
                        for i in 0..r {
                            for p in &parts {
                                data.extend_from_slice(p.row(i));
                            }
                        }
                        Tensor::new(vec![r, c], data)
                    }
                }
            }
            Op::RowSelect(idx) => {
                Self::arity(op, inputs, 1)?;
                let x = val(0);
                if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
                    return Err(Error::Index(format!(
                        "row_select index {bad} out of range for {} rows",
                        x.rows()
                    )));
                }
                Ok(x.select_rows(idx))
            }
            Op::MeanRows | Op::SumRows => {
                Self::arity(op, inputs, 1)?;
                let x = val(0);
                let (r, c) = (x.rows(), x.cols());
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, v) in out.iter_mut().zip(x.row(i)) {
                        *o += v;
                    }
                }
                if matches!(op, Op::MeanRows) {
                    if r == 0 {
                        return Err(Error::dim("mean_rows", "no rows"));
                    }
                    out.iter_mut().for_each(|o| *o /= r as f64);
                }
                Tensor::new(vec![1, c], out)
            }
            Op::SumAll => {
                Self::arity(op, inputs, 1)?;
                Ok(Tensor::scalar(val(0).sum()))
            }
            Op::LogSoftmax => {
                Self::arity(op, inputs, 1)?;
                let x = val(0);
                let c = x.cols();
                let mut out = x.clone();
                for row in out.data_mut().chunks_mut(c.max(1)) {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    row.iter_mut().for_each(|v| *v -= lse);
                }
                Ok(out)
            }
            Op::CrossEntropy(targets) => {
                Self::arity(op, inputs, 1)?;
                let lp = val(0);
                if targets.len() != lp.rows() || lp.rows() == 0 {
                    return Err(Error::dim(
                        "cross_entropy",
                        format!("{} targets for {} rows", targets.len(), lp.rows()),
                    ));
                }
                let c = lp.cols();
                let mut total = 0.0;
                for (i, &t) in targets.iter().enumerate() {
                    if t >= c {
                        return Err(Error::Index(format!("target {t} >= {c} classes")));
                    }
                    total -= lp.get(i, t);
                }
                Ok(Tensor::scalar(total / targets.len() as f64))
            }
            Op::L2Norm => {
                Self::arity(op, inputs, 1)?;
                let x = val(0);
                let c = x.cols();
                let mut out = x.clone();
                for (i, row) in out.data_mut().chunks_mut(c.max(1)).enumerate() {
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n == 0.0 || !n.is_finite() {
                        return Err(Error::Numerical(format!(
                            "l2_norm: row {i} has zero or non-finite norm"
                        )));
                    }
                    row.iter_mut().for_each(|v| *v /= n);
                }
                Ok(out)
            }
            Op::Spmm(adj) => {
                let x = val(0);
                match inputs.len() {
                    1 => spmm(adj, adj.weights(), x),
                    2 => {
                        let w = val(1);
                        if w.numel() != adj.num_edges() {
                            return Err(Error::dim(
                                "spmm",
                                format!("{} weights for {} edges", w.numel(), adj.num_edges()),
                            ));
                        }
                        spmm(adj, w.data(), x)
                    }
                    n => Err(Error::dim(
                        "spmm",
                        format!("expected 1 or 2 inputs, got {n}"),
                    )),
                }
            }
            Op::SegmentSoftmax(seg) => {
                Self::arity(op, inputs, 1)?;
                let x = val(0);
                if seg.len() != x.numel() {
                    return Err(Error::dim(
                        "segment_softmax",
                        format!("{} segment ids for {} logits", seg.len(), x.numel()),
                    ));
                }
                let ns = num_segments(seg);
                let mut mx = vec![f64::NEG_INFINITY; ns];
                for (&s, &v) in seg.iter().zip(x.data()) {
                    mx[s] = mx[s].max(v);
                }
                let mut sums = vec![0.0; ns];
                let mut out = x.clone();
                for (o, &s) in out.data_mut().iter_mut().zip(seg.iter()) {
                    *o = (*o - mx[s]).exp();
                    sums[s] += *o;
                }
                for (o, &s) in out.data_mut().iter_mut().zip(seg.iter()) {
                    *o /= sums[s];
                }
                Ok(out)
            }
            Op::SegmentMean { segments, count } => {
                Self::arity(op, inputs, 1)?;
                let x = val(0);
                if segments.len() != x.rows() {
                    return Err(Error::dim(
                        "segment_mean",
                        format!("{} segment ids for {} rows", segments.len(), x.rows()),
                    ));
                }
                let c = x.cols();
                let mut out = vec![0.0; count * c];
                let mut n = vec![0usize; *count];
                for (i, &s) in segments.iter().enumerate() {
                    if s >= *count {
                        return Err(Error::Index(format!("segment {s} >= {count}")));
                    }
                    n[s] += 1;
                    for (o, v) in out[s * c..(s + 1) * c].iter_mut().zip(x.row(i)) {
                        *o += v;
                    }
                }
                for (s, &k) in n.iter().enumerate() {
                    if k > 0 {
                        out[s * c..(s + 1) * c]
                            .iter_mut()
                            .for_each(|o| *o /= k as f64);
                    }
                }
                Tensor::new(vec![*count, c], out)
            }
            Op::Reshape(shape) => {
                Self::arity(op, inputs, 1)?;
                val(0).clone().reshape(shape.clone())
            }
        }
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.spent {
            return Err(Error::Contract(
                "tape already consumed by backward; call reset() first".into(),
            ));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.spent = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !matches!(node.op, Op::Leaf) {
                let contribs = self.vjp(node, &g)?;
                for (inp, c) in node.inputs.iter().zip(contribs) {
                    if !self.nodes[inp.0].requires_grad {
                        continue;
                    }
                    if let Some(c) = c {
                        match &mut grads[inp.0] {
                            Some(acc) => {
                                for (a, v) in acc.data_mut().iter_mut().zip(c.data()) {
                                    *a += v;
                                }
                            }
                            slot @ None => *slot = Some(c),
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }
        // Only leaves keep gradients.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    /// Vector-Jacobian products for each input of `node`.
    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let inp = |i: usize| &self.nodes[node.inputs[i].0].value;
        let needs = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        let y = &node.value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul => {
                let (a, b) = (inp(0), inp(1));
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let ga = needs(0).then(|| {
                    Tensor::new(vec![m, k], matmul_nt_raw(g.data(), b.data(), m, n, k)).unwrap()
                });
                let gb = needs(1).then(|| {
                    Tensor::new(vec![k, n], matmul_tn_raw(a.data(), g.data(), m, k, n)).unwrap()
                });
                vec![ga, gb]
            }
            Op::Transpose => vec![Some(g.transpose())],
            Op::Add => {
                let (a, b) = (inp(0), inp(1));
                let (_, ra, rb) = broadcast("add", a, b)?;
                vec![
                    needs(0).then(|| reduce_to(g, ra, a.shape())),
                    needs(1).then(|| reduce_to(g, rb, b.shape())),
                ]
            }
            Op::Mul => {
                let (a, b) = (inp(0), inp(1));
                let (_, ra, rb) = broadcast("mul", a, b)?;
                let cols = g.cols();
                let ga = needs(0).then(|| {
                    let prod = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .enumerate()
                            .map(|(i, gv)| gv * b.data()[rb.index(i, cols)])
                            .collect(),
                    )
                    .unwrap();
                    reduce_to(&prod, ra, a.shape())
                });
                let gb = needs(1).then(|| {
                    let prod = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .enumerate()
                            .map(|(i, gv)| gv * a.data()[ra.index(i, cols)])
                            .collect(),
                    )
                    .unwrap();
                    reduce_to(&prod, rb, b.shape())
                });
                vec![ga, gb]
            }
            Op::Scale(c) => vec![Some(g.map(|v| v * c))],
            Op::Relu => {
                let x = inp(0);
                vec![Some(zip_map(
                    g,
                    x,
                    |gv, xv| if xv > 0.0 { gv } else { 0.0 },
                ))]
            }
            Op::Sigmoid => vec![Some(zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv)))],
            Op::LeakyRelu(s) => {
                let x = inp(0);
                vec![Some(zip_map(
                    g,
                    x,
                    |gv, xv| if xv > 0.0 { gv } else { s * gv },
                ))]
            }
            Op::Concat(axis) => {
                let mut out = Vec::with_capacity(node.inputs.len());
                match axis {
                    Axis::Rows => {
                        let c = g.cols();
                        let mut r0 = 0;
                        for i in 0..node.inputs.len() {
                            let p = inp(i);
                            let r = p.rows();
                            out.push(needs(i).then(|| {
                                Tensor::new(
                                    p.shape().to_vec(),
                                    g.data()[r0 * c..(r0 + r) * c].to_vec(),
                                )
                                .unwrap()
                            }));
                            r0 += r;
                        }
                    }
                    Axis::Cols => {
                        let rows = g.rows();
                        let mut c0 = 0;
                        for i in 0..node.inputs.len() {
                            let p = inp(i);
                            let c = p.cols();
                            out.push(needs(i).then(|| {
                                let mut d = Vec::with_capacity(rows * c);
                                for r in 0..rows {
                                    d.extend_from_slice(&g.row(r)[c0..c0 + c]);
                                }
                                Tensor::new(p.shape().to_vec(), d).unwrap()
                            }));
                            c0 += c;
                        }
                    }
                }
                out
            }
            Op::RowSelect(idx) => {
                let x = inp(0);
                let c = x.cols();
                let mut gx = Tensor::zeros(x.shape());
                let d = gx.data_mut();
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in d[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                vec![Some(gx)]
            }
            Op::MeanRows | Op::SumRows => {
                let x = inp(0);
                let r = x.rows();
                let scale = if matches!(node.op, Op::MeanRows) {
                    1.0 / r as f64
                } else {
                    1.0
                };
                let mut gx = Tensor::zeros(x.shape());
                let c = x.cols();
                for row in gx.data_mut().chunks_mut(c.max(1)) {
                    for (o, v) in row.iter_mut().zip(g.data()) {
                        *o = v * scale;
                    }
                }
                vec![Some(gx)]
            }
            Op::SumAll => {
                let x = inp(0);
                vec![Some(Tensor::full(x.shape(), g.data()[0]))]
            }
            Op::LogSoftmax => {
                let c = y.cols();
                let mut gx = g.clone();
                for (row, (grow, yrow)) in gx
                    .data_mut()
                    .chunks_mut(c.max(1))
                    .zip(g.data().chunks(c.max(1)).zip(y.data().chunks(c.max(1))))
                {
                    let gs: f64 = grow.iter().sum();
                    for (o, (gv, yv)) in row.iter_mut().zip(grow.iter().zip(yrow)) {
                        *o = gv - yv.exp() * gs;
                    }
                }
                vec![Some(gx)]
            }
            Op::CrossEntropy(targets) => {
                let lp = inp(0);
                let n = targets.len() as f64;
                let c = lp.cols();
                let mut gx = Tensor::zeros(lp.shape());
                let scale = -g.data()[0] / n;
                for (i, &t) in targets.iter().enumerate() {
                    gx.data_mut()[i * c + t] = scale;
                }
                vec![Some(gx)]
            }
            Op::L2Norm => {
                let x = inp(0);
                let c = x.cols();
                let mut gx = Tensor::zeros(x.shape());
                for (i, row) in gx.data_mut().chunks_mut(c.max(1)).enumerate() {
                    let xr = x.row(i);
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in row.iter_mut().zip(gr).zip(yr) {
                        *o = (gv - yv * dot) / n;
                    }
                }
                vec![Some(gx)]
            }
            Op::Spmm(adj) => {
                let x = inp(0);
                let d = x.cols();
                let weights: &[f64] = if node.inputs.len() == 2 {
                    inp(1).data()
                } else {
                    adj.weights()
                };
                let gx = needs(0).then(|| {
                    let mut gx = Tensor::zeros(x.shape());
                    let out = gx.data_mut();
                    for (&(s, t), &w) in adj.edges().iter().zip(weights) {
                        for (o, v) in out[s * d..(s + 1) * d].iter_mut().zip(g.row(t)) {
                            *o += w * v;
                        }
                    }
                    gx
                });
                let mut res = vec![gx];
                if node.inputs.len() == 2 {
                    let gw = needs(1).then(|| {
                        let data = adj
                            .edges()
                            .iter()
                            .map(|&(s, t)| g.row(t).iter().zip(x.row(s)).map(|(a, b)| a * b).sum())
                            .collect();
                        Tensor::new(inp(1).shape().to_vec(), data).unwrap()
                    });
                    res.push(gw);
                }
                res
            }
            Op::SegmentSoftmax(seg) => {
                let ns = num_segments(seg);
                let mut dots = vec![0.0; ns];
                for ((&s, gv), yv) in seg.iter().zip(g.data()).zip(y.data()) {
                    dots[s] += gv * yv;
                }
                let data = seg
                    .iter()
                    .zip(g.data().iter().zip(y.data()))
                    .map(|(&s, (gv, yv))| yv * (gv - dots[s]))
                    .collect();
                vec![Some(Tensor::new(y.shape().to_vec(), data)?)]
            }
            Op::SegmentMean { segments, count } => {
                let x = inp(0);
                let c = x.cols();
                let mut n = vec![0usize; *count];
                for &s in segments.iter() {
                    n[s] += 1;
                }
                let mut gx = Tensor::zeros(x.shape());
                for (row, &s) in gx.data_mut().chunks_mut(c.max(1)).zip(segments.iter()) {
                    let k = n[s] as f64;
                    for (o, v) in row.iter_mut().zip(g.row(s)) {
                        *o = v / k;
                    }
                }
                vec![Some(gx)]
            }
            Op::Reshape(_) => {
                let x = inp(0);
                vec![Some(g.clone().reshape(x.shape().to_vec())?)]
            }
        })
    }

    // Convenience wrappers.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.eval(Op::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.eval(Op::Transpose, &[a])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.eval(Op::Add, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.eval(Op::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.eval(Op::Scale(c), &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.eval(Op::Relu, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.eval(Op::Sigmoid, &[a])
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.eval(Op::LeakyRelu(slope), &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        self.eval(Op::Concat(axis), parts)
    }
    pub fn row_select(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        self.eval(Op::RowSelect(idx), &[a])
    }
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.eval(Op::MeanRows, &[a])
    }
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.eval(Op::SumRows, &[a])
    }
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.eval(Op::SumAll, &[a])
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.eval(Op::LogSoftmax, &[a])
    }
    pub fn cross_entropy(&mut self, logp: Var, targets: Arc<Vec<usize>>) -> Result<Var> {
        self.eval(Op::CrossEntropy(targets), &[logp])
    }
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        self.eval(Op::L2Norm, &[a])
    }
    pub fn spmm(&mut self, adj: Arc<SparseAdj>, x: Var) -> Result<Var> {
        self.eval(Op::Spmm(adj), &[x])
    }
    pub fn spmm_weighted(&mut self, adj: Arc<SparseAdj>, x: Var, weights: Var) -> Result<Var> {
        self.eval(Op::Spmm(adj), &[x, weights])
    }
    pub fn segment_softmax(&mut self, logits: Var, segments: Arc<Vec<usize>>) -> Result<Var> {
        self.eval(Op::SegmentSoftmax(segments), &[logits])
    }
    pub fn segment_mean(&mut self, x: Var, segments: Arc<Vec<usize>>, count: usize) -> Result<Var> {
        self.eval(Op::SegmentMean { segments, count }, &[x])
    }
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.eval(Op::Reshape(shape), &[x])
    }

    /// `x W + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let h = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(h, b),
            None => Ok(h),
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

/// Numerically stable logistic function.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Stand-alone segment softmax over plain values (no tape).
pub fn segment_softmax(logits: &[f64], segments: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(logits.to_vec()));
    let y = tape.segment_softmax(x, Arc::new(segments.to_vec()))?;
    Ok(tape.value(y).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let i = t.constant(Tensor::eye(2));
        let y = t.matmul(a, i).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn relu_and_sigmoid_definitions() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let z = t.constant(Tensor::vector(vec![0.0]));
        let s = t.sigmoid(z).unwrap();
        assert_eq!(t.value(s).data(), &[0.5]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn unknown_kind() {
        assert!(matches!(
            Op::from_name("conv3d"),
            Err(Error::UnsupportedOp(_))
        ));
        assert!(Op::from_name("relu").is_ok());
    }

    #[test]
    fn segment_softmax_examples() {
        approx(
            &segment_softmax(&[0.0, 0.0], &[0, 0]).unwrap(),
            &[0.5, 0.5],
            1e-15,
        );
        let d = segment_softmax(&[1000.0, 0.0], &[0, 0]).unwrap();
        approx(&d, &[1.0, 0.0], 1e-9);
        let s = segment_softmax(&[0.0, 0.0, 0.0, 0.0], &[0, 1, 1, 1]).unwrap();
        approx(&s, &[1.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 1e-15);
        assert!(segment_softmax(&[], &[]).unwrap().is_empty());
    }

    #[test]
    fn grad_of_square() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[6.0]);
    }

    #[test]
    fn relu_subgradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-1.0, 2.0]));
        let r = t.relu(x).unwrap();
        let s = t.sum_all(r).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 1.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0]));
        let r = t.relu(x).unwrap();
        let s = t.sum_all(r).unwrap();
        assert_eq!(t.backward(s).unwrap().get(x).data(), &[0.0]);
    }

    #[test]
    fn softmax_minus_onehot() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::vector(vec![0.0, 0.0]));
        let lp = t.log_softmax(z).unwrap();
        let l = t.cross_entropy(lp, Arc::new(vec![0])).unwrap();
        let g = t.backward(l).unwrap();
        approx(g.get(z).data(), &[-0.5, 0.5], 1e-15);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn tape_is_single_use() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0));
        let y = t.scale(x, 2.0).unwrap();
        t.backward(y).unwrap();
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
        t.reset();
        let x = t.leaf(Tensor::scalar(1.0));
        let y = t.scale(x, 2.0).unwrap();
        assert_eq!(t.backward(y).unwrap().get(x).data(), &[2.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0));
        let unused = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = t.scale(x, 2.0).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn l2_norm_zero_row_errors() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[1, 3]));
        assert!(t.l2_norm(x).is_err());
    }
}
