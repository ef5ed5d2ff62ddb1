//! A small define-by-run reverse-mode tape over [`Matrix`] values.
//!
//! Every op evaluates eagerly when it is recorded, so a `Graph` doubles as the
//! forward evaluator. Nodes that do not depend on any leaf marked
//! `requires_grad` are never visited by [`Graph::backward`].

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, softmax_in_place, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    GradScale(Var, f64),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, shift: Var, xhat: Matrix, rstd: Vec<f64> },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Gather { src: Var, index: Rc<[usize]> },
    CrossEntropy { logits: Var, targets: Vec<usize>, width: usize, probs: Matrix },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMulT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// Broadcast-adds the `1 × cols` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row(self.value(bias))?;
        let ng = self.ng(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let ng = self.ng(&[x]);
        self.push(value, Op::Scale(x, s), ng)
    }

    /// `a·x + c` element-wise.
    pub fn affine(&mut self, x: Var, a: f64, c: f64) -> Var {
        let value = self.value(x).map(|v| a * v + c);
        let ng = self.ng(&[x]);
        self.push(value, Op::Scale(x, a), ng)
    }

    /// Identity in the forward pass; multiplies the incoming gradient by `s`.
    /// Exists for fault injection in gradient checks.
    pub fn grad_scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).clone();
        let ng = self.ng(&[x]);
        self.push(value, Op::GradScale(x, s), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).relu();
        let ng = self.ng(&[x]);
        self.push(value, Op::Relu(x), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        let ng = self.ng(&[x]);
        self.push(value, Op::Gelu(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).softmax_rows();
        let ng = self.ng(&[x]);
        self.push(value, Op::SoftmaxRows(x), ng)
    }

    /// Per-row normalization followed by `gain ⊙ x̂ + shift` (both `1 × cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let gv = self.value(gain);
        let sv = self.value(shift);
        if gv.shape() != (1, cols) || sv.shape() != (1, cols) {
            return Err(Error::shape(format!("layer_norm affine params for width {cols}")));
        }
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * gv.get(0, c) + sv.get(0, c));
            }
        }
        let ng = self.ng(&[x, gain, shift]);
        Ok(self.push(out, Op::LayerNorm { x, gain, shift, xhat, rstd }, ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, end)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::SliceRows(x, start), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_cols(start, end)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::SliceCols(x, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let value = {
            let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
            Matrix::concat_rows(&mats)?
        };
        let ng = self.ng(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let value = {
            let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
            Matrix::concat_cols(&mats)?
        };
        let ng = self.ng(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let ng = self.ng(&[x]);
        self.push(value, Op::Transpose(x), ng)
    }

    /// `out.flat[i] = src.flat[index[i]]` reshaped to `rows × cols`.
    ///
    /// Covers every reshape and permutation the model needs (patch
    /// extraction in particular); the backward pass scatter-adds.
    pub fn gather(&mut self, src: Var, index: Rc<[usize]>, rows: usize, cols: usize) -> Result<Var> {
        if index.len() != rows * cols {
            return Err(Error::shape(format!("gather of {} indices into {rows}x{cols}", index.len())));
        }
        let sv = self.value(src).as_slice();
        if let Some(&bad) = index.iter().find(|&&i| i >= sv.len()) {
            return Err(Error::shape(format!("gather index {bad} out of {}", sv.len())));
        }
        let data = index.iter().map(|&i| sv[i]).collect();
        let value = Matrix::from_vec(rows, cols, data)?;
        let ng = self.ng(&[src]);
        Ok(self.push(value, Op::Gather { src, index }, ng))
    }

    /// Mean cross-entropy over every `(row, group)` of `logits`, where each
    /// row is split into contiguous groups of `width` classes and `targets`
    /// lists the true class per group in row-major order. Returns `1 × 1`.
    pub fn cross_entropy(&mut self, logits: Var, width: usize, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if width == 0 || lv.cols() % width != 0 {
            return Err(Error::shape(format!("{} logits not divisible into groups of {width}", lv.cols())));
        }
        let groups = lv.rows() * lv.cols() / width;
        if targets.len() != groups {
            return Err(Error::shape(format!("{} targets for {groups} groups", targets.len())));
        }
        if targets.iter().any(|&t| t >= width) {
            return Err(Error::shape("cross-entropy target outside class range"));
        }
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (g, chunk) in probs.as_mut_slice().chunks_mut(width).enumerate() {
            softmax_in_place(chunk);
            loss -= chunk[targets[g]].ln();
        }
        loss /= groups as f64;
        let ng = self.ng(&[logits]);
        let value = Matrix::filled(1, 1, loss);
        Ok(self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec(), width, probs }, ng))
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).shape() != (1, 1) {
            return Err(Error::shape("backward requires a scalar output"));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.propagate(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, gy: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let ga = gy.matmul_t(self.value(*b))?;
                    self.accum(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = self.value(*a).t_matmul(gy)?;
                    self.accum(grads, *b, gb);
                }
            }
            Op::MatMulT(a, b) => {
                // y = a·bᵀ  →  da = gy·b,  db = gyᵀ·a
                if self.wants(*a) {
                    let bv = self.value(*b);
                    let mut ga = Matrix::zeros(gy.rows(), bv.cols());
                    matmul_into(gy.as_slice(), bv.as_slice(), ga.as_mut_slice(), gy.rows(), gy.cols(), bv.cols());
                    self.accum(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = gy.t_matmul(self.value(*a))?;
                    self.accum(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, gy.clone());
                self.accum(grads, *b, gy.clone());
            }
            Op::AddRow(x, bias) => {
                self.accum(grads, *x, gy.clone());
                if self.wants(*bias) {
                    let mut gb = Matrix::zeros(1, gy.cols());
                    for r in 0..gy.rows() {
                        for (o, v) in gb.as_mut_slice().iter_mut().zip(gy.row(r)) {
                            *o += v;
                        }
                    }
                    self.accum(grads, *bias, gb);
                }
            }
            Op::Scale(x, s) | Op::GradScale(x, s) => self.accum(grads, *x, gy.scale(*s)),
            Op::Relu(x) => {
                let y = &node.value;
                let mut g = gy.clone();
                for (gv, &yv) in g.as_mut_slice().iter_mut().zip(y.as_slice()) {
                    if yv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                self.accum(grads, *x, g);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut g = gy.clone();
                for (gv, &v) in g.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *gv *= d;
                }
                self.accum(grads, *x, g);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut g = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = gy.row(r);
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yv, gv)) in g.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - inner);
                    }
                }
                self.accum(grads, *x, g);
            }
            Op::LayerNorm { x, gain, shift, xhat, rstd } => {
                let (rows, cols) = xhat.shape();
                let gv = self.value(*gain);
                if self.wants(*gain) || self.wants(*shift) {
                    let mut dg = Matrix::zeros(1, cols);
                    let mut ds = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let d = gy.get(r, c);
                            dg.as_mut_slice()[c] += d * xhat.get(r, c);
                            ds.as_mut_slice()[c] += d;
                        }
                    }
                    self.accum(grads, *gain, dg);
                    self.accum(grads, *shift, ds);
                }
                if self.wants(*x) {
                    let n = cols as f64;
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let d = gy.get(r, c) * gv.get(0, c);
                            mean_d += d;
                            mean_dx += d * xhat.get(r, c);
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for c in 0..cols {
                            let d = gy.get(r, c) * gv.get(0, c);
                            dx.set(r, c, rstd[r] * (d - mean_d - xhat.get(r, c) * mean_dx));
                        }
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Op::SliceRows(x, start) => {
                if self.wants(*x) {
                    let src = self.value(*x);
                    let mut g = Matrix::zeros(src.rows(), src.cols());
                    let w = src.cols();
                    g.as_mut_slice()[start * w..(start + gy.rows()) * w].copy_from_slice(gy.as_slice());
                    self.accum(grads, *x, g);
                }
            }
            Op::SliceCols(x, start) => {
                if self.wants(*x) {
                    let src = self.value(*x);
                    let mut g = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..gy.rows() {
                        g.row_mut(r)[*start..start + gy.cols()].copy_from_slice(gy.row(r));
                    }
                    self.accum(grads, *x, g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.wants(*p) {
                        self.accum(grads, *p, gy.slice_rows(off, off + rows)?);
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    if self.wants(*p) {
                        self.accum(grads, *p, gy.slice_cols(off, off + cols)?);
                    }
                    off += cols;
                }
            }
            Op::Transpose(x) => self.accum(grads, *x, gy.transpose()),
            Op::Gather { src, index } => {
                if self.wants(*src) {
                    let sv = self.value(*src);
                    let mut g = Matrix::zeros(sv.rows(), sv.cols());
                    let gs = g.as_mut_slice();
                    for (&i, &d) in index.iter().zip(gy.as_slice()) {
                        gs[i] += d;
                    }
                    self.accum(grads, *src, g);
                }
            }
            Op::CrossEntropy { logits, targets, width, probs } => {
                let scale = gy.get(0, 0) / targets.len() as f64;
                let mut g = probs.clone();
                for (gi, chunk) in g.as_mut_slice().chunks_mut(*width).enumerate() {
                    chunk[targets[gi]] -= 1.0;
                    for v in chunk.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accum(grads, *logits, g);
            }
        }
        Ok(())
    }
}
