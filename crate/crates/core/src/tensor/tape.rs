//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its forward value. [`Tape::backward`]
//! walks the tape in reverse and accumulates adjoints into the nodes that
//! depend on trainable leaves.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::ops::{self, PROB_FLOOR};
use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Reduction applied per graph when pooling node rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    AddConst(Var),
    NeighborSum {
        x: Var,
        edges: Arc<[(usize, usize)]>,
    },
    SegmentPool {
        x: Var,
        offsets: Vec<usize>,
        mode: Pool,
        argmax: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    /// Scalar loss whose gradient with respect to `input` was computed in the
    /// forward pass.
    Loss {
        input: Var,
        local_grad: Tensor,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Gradient of the differentiated output with respect to `v`; zeros when
    /// `v` does not influence it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `x + bias` with `bias` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.shape().len() != 2 || bv.shape() != [xv.cols()] {
            return Err(Error::Structural(format!(
                "bias {:?} does not broadcast over {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        let m = bv.len();
        for row in out.data_mut().chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    /// Dense layer: `x · w + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::Structural(format!(
                "cannot add {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, factor), ng)
    }

    /// `x * s` where `s` holds a single value.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Structural(format!(
                "scalar operand has shape {:?}",
                self.value(s).shape()
            )));
        }
        let factor = self.value(s).data()[0];
        let out = self.value(x).map(|v| v * factor);
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(out, Op::MulScalar(x, s), ng))
    }

    /// Adds a constant to every element.
    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let ng = self.needs(x);
        self.push(out, Op::AddConst(x), ng)
    }

    /// Row `dst` of the output is the sum of rows `src` of `x` over all
    /// directed edges `(src, dst)`.
    pub fn neighbor_sum(&mut self, x: Var, edges: Arc<[(usize, usize)]>) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(&[n, d]);
        for &(s, t) in edges.iter() {
            if s >= n || t >= n {
                return Err(Error::Structural(format!(
                    "edge ({s}, {t}) out of range for {n} nodes"
                )));
            }
            let (src, dst) = (xv.row(s).to_vec(), &mut out.data_mut()[t * d..(t + 1) * d]);
            for (o, v) in dst.iter_mut().zip(src) {
                *o += v;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::NeighborSum { x, edges }, ng))
    }

    /// Pools consecutive row blocks of `x`. Segment `g` covers rows
    /// `offsets[g]..offsets[g + 1]`; output is `[segments × cols]`.
    pub fn segment_pool(&mut self, x: Var, offsets: Vec<usize>, mode: Pool) -> Result<Var> {
        let xv = self.value(x);
        let (out, argmax) = pool_segments(xv, &offsets, mode)?;
        let ng = self.needs(x);
        Ok(self.push(
            out,
            Op::SegmentPool {
                x,
                offsets,
                mode,
                argmax,
            },
            ng,
        ))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Structural("concat operands differ in rows".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if len == 0 || start + len > v.cols() {
            return Err(Error::Structural(format!(
                "column slice {start}..{} of a {}-column matrix",
                start + len,
                v.cols()
            )));
        }
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![rows, len], data)?,
            Op::SliceCols { x, start },
            ng,
        ))
    }

    fn loss_node(&mut self, input: Var, value: f64, local_grad: Tensor) -> Var {
        let ng = self.needs(input);
        self.push(Tensor::scalar(value), Op::Loss { input, local_grad }, ng)
    }

    /// Mean cross-entropy of `logits` against class `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, grad) = ops::cross_entropy(self.value(logits), labels)?;
        Ok(self.loss_node(logits, loss, grad))
    }

    /// Mean squared error of column `column` of `pred` against `targets`.
    pub fn mse(&mut self, pred: Var, targets: &[f64], column: usize) -> Result<Var> {
        let (loss, grad) = ops::mse(self.value(pred), targets, column)?;
        Ok(self.loss_node(pred, loss, grad))
    }

    /// Batch mean of `KL(softmax(student / T) ‖ softmax(teacher / T))`, with
    /// the teacher logits held constant.
    pub fn distill_kl(&mut self, student: Var, teacher: &Tensor, temperature: f64) -> Result<Var> {
        let sv = self.value(student);
        if !sv.same_shape(teacher) || sv.shape().len() != 2 {
            return Err(Error::Structural(format!(
                "student logits {:?} and teacher logits {:?} differ",
                sv.shape(),
                teacher.shape()
            )));
        }
        let p = ops::softmax_with_temperature(sv, temperature)?;
        let q = ops::softmax_with_temperature(teacher, temperature)?;
        let (rows, cols) = (sv.rows(), sv.cols());
        let mut grad = Tensor::zeros(sv.shape());
        let mut total = 0.0;
        for r in 0..rows {
            let (pr, qr) = (p.row(r), q.row(r));
            total += ops::kl_terms(pr, qr);
            let logs: Vec<f64> = pr
                .iter()
                .zip(qr)
                .map(|(&pi, &qi)| pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln())
                .collect();
            let mean_log: f64 = pr.iter().zip(&logs).map(|(pi, g)| pi * g).sum();
            let scale = 1.0 / (temperature * rows as f64);
            for j in 0..cols {
                grad.data_mut()[r * cols + j] = scale * pr[j] * (logs[j] - mean_log);
            }
        }
        Ok(self.loss_node(student, total / rows as f64, grad))
    }

    /// `Σ coeff_i · term_i` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, c) in terms {
            let val = self.value(v);
            if val.len() != 1 {
                return Err(Error::Structural(format!(
                    "weighted_sum expects scalars, got {:?}",
                    val.shape()
                )));
            }
            total += c * val.data()[0];
        }
        let ng = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), ng))
    }

    /// Distance from the nearest non-differentiable point among recorded ReLU
    /// inputs and max-pool comparisons. Infinite when there are none.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::SegmentPool {
                    x,
                    offsets,
                    mode: Pool::Max,
                    ..
                } => {
                    let xv = self.value(*x);
                    for w in offsets.windows(2) {
                        for c in 0..xv.cols() {
                            let mut col: Vec<f64> = (w[0]..w[1]).map(|r| xv.at(r, c)).collect();
                            col.sort_by(|a, b| b.total_cmp(a));
                            if col.len() > 1 {
                                margin = margin.min(col[0] - col[1]);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse pass seeded with ones at `output`.
    pub fn backward(&self, output: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::filled(self.value(output).shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads {
            grads,
            shapes: self.nodes[..=output.0]
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    acc(*a, matmul_nt(g, bv));
                }
                if self.needs(*b) {
                    acc(*b, matmul_tn(av, g));
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, g.clone());
                if self.needs(*b) {
                    let m = g.cols();
                    let mut gb = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*b, Tensor::new(vec![m], gb).expect("bias gradient shape"));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut d = g.clone();
                for (o, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                    if v <= 0.0 {
                        *o = 0.0;
                    }
                }
                acc(*x, d);
            }
            Op::Scale(x, f) => acc(*x, g.map(|v| v * f)),
            Op::MulScalar(x, s) => {
                let factor = self.value(*s).data()[0];
                if self.needs(*x) {
                    acc(*x, g.map(|v| v * factor));
                }
                if self.needs(*s) {
                    let dot: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(a, b)| a * b)
                        .sum();
                    acc(*s, Tensor::filled(self.value(*s).shape(), dot));
                }
            }
            Op::AddConst(x) => acc(*x, g.clone()),
            Op::NeighborSum { x, edges } => {
                let d = g.cols();
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for &(s, t) in edges.iter() {
                    for c in 0..d {
                        gx.data_mut()[s * d + c] += g.data()[t * d + c];
                    }
                }
                acc(*x, gx);
            }
            Op::SegmentPool {
                x,
                offsets,
                mode,
                argmax,
            } => {
                let d = g.cols();
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for seg in 0..offsets.len() - 1 {
                    let (lo, hi) = (offsets[seg], offsets[seg + 1]);
                    let gs = g.row(seg);
                    match mode {
                        Pool::Sum | Pool::Mean => {
                            let f = if *mode == Pool::Mean {
                                1.0 / (hi - lo) as f64
                            } else {
                                1.0
                            };
                            for r in lo..hi {
                                for (c, g) in gs.iter().enumerate() {
                                    gx.data_mut()[r * d + c] += f * g;
                                }
                            }
                        }
                        Pool::Max => {
                            for c in 0..d {
                                let r = argmax[seg * d + c];
                                gx.data_mut()[r * d + c] += gs[c];
                            }
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = (self.value(*x).rows(), self.value(*x).cols());
                let mut gx = vec![0.0; rows * cols];
                let len = g.cols();
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + len].copy_from_slice(g.row(r));
                }
                acc(*x, Tensor::new(vec![rows, cols], gx).expect("slice gradient shape"));
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g.row(r)[col..col + w]);
                    }
                    acc(p, Tensor::new(vec![rows, w], gp).expect("concat gradient shape"));
                    col += w;
                }
            }
            Op::Loss { input, local_grad } => {
                let upstream = g.data()[0];
                acc(*input, local_grad.map(|v| v * upstream));
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    acc(v, Tensor::scalar(c * g.data()[0]));
                }
            }
        }
    }
}

/// `g · bᵀ`
fn matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let (n, m) = (g.rows(), g.cols());
    let k = b.rows();
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let gi = g.row(i);
        for p in 0..k {
            out[i * k + p] = gi.iter().zip(b.row(p)).map(|(x, y)| x * y).sum();
        }
    }
    debug_assert_eq!(b.cols(), m);
    Tensor::new(vec![n, k], out).expect("matmul_nt shape")
}

/// `aᵀ · g`
fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (n, k) = (a.rows(), a.cols());
    let m = g.cols();
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let gi = g.row(i);
        for (p, &x) in a.row(i).iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, v) in out[p * m..(p + 1) * m].iter_mut().zip(gi) {
                *o += x * v;
            }
        }
    }
    Tensor::new(vec![k, m], out).expect("matmul_tn shape")
}

/// Per-segment pooling of matrix rows. Returns the pooled matrix and, for max
/// pooling, the winning row index per (segment, column); ties go to the
/// earliest row.
pub(crate) fn pool_segments(
    x: &Tensor,
    offsets: &[usize],
    mode: Pool,
) -> Result<(Tensor, Vec<usize>)> {
    if x.shape().len() != 2 {
        return Err(Error::Structural(format!(
            "pooling expects a matrix, got {:?}",
            x.shape()
        )));
    }
    let d = x.cols();
    if offsets.len() < 2 || offsets[offsets.len() - 1] != x.rows() || offsets[0] != 0 {
        return Err(Error::Structural(format!(
            "segment offsets {offsets:?} do not cover {} rows",
            x.rows()
        )));
    }
    let segments = offsets.len() - 1;
    let mut out = vec![0.0; segments * d];
    let mut argmax = Vec::new();
    for seg in 0..segments {
        let (lo, hi) = (offsets[seg], offsets[seg + 1]);
        if hi <= lo {
            return Err(Error::Data(format!("segment {seg} has no rows")));
        }
        let dst = &mut out[seg * d..(seg + 1) * d];
        match mode {
            Pool::Sum | Pool::Mean => {
                for r in lo..hi {
                    for (o, v) in dst.iter_mut().zip(x.row(r)) {
                        *o += v;
                    }
                }
                if mode == Pool::Mean {
                    let n = (hi - lo) as f64;
                    dst.iter_mut().for_each(|o| *o /= n);
                }
            }
            Pool::Max => {
                for (c, out) in dst.iter_mut().enumerate() {
                    let mut best = lo;
                    for r in lo + 1..hi {
                        if x.at(r, c) > x.at(best, c) {
                            best = r;
                        }
                    }
                    *out = x.at(best, c);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((Tensor::new(vec![segments, d], out)?, argmax))
}
