//! Dense 2-D tensors and a reverse-mode autodiff tape.
//!
//! The tape is define-by-run: every forward pass records its operations in
//! topological order, `backward` sweeps them once in reverse, and the next
//! pass starts from a fresh tape. All arithmetic is `f64`; there is no
//! broadcasting except adding a bias row over the rows of a matrix.

use crate::error::{Error, Result};

/// Value used in place of −∞ when masking attention scores. At double
/// precision `exp(MASK_VALUE − row_max)` underflows to exactly zero for any
/// realistic score scale, while avoiding the NaN that a literal −∞ produces
/// in the softmax adjoint.
pub const MASK_VALUE: f64 = -1e9;

/// Dense row-major matrix. Row vectors are `1×n`, scalars `1×1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "tensor data length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(1, 1, vec![v])
    }

    pub fn row(values: &[f64]) -> Self {
        Tensor::new(1, values.len(), values.to_vec())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor::new(r, c, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBiasRow { x: Var, bias: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Scale { x: Var, c: f64 },
    SoftmaxRows { x: Var },
    MaskFill { x: Var, keep: Vec<bool> },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Transpose { x: Var },
    SumAll { x: Var },
    MeanAll { x: Var },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Reverse-mode tape. Operations are recorded in execution order, so inputs
/// always precede their consumers and one reverse sweep accumulates every
/// adjoint additively.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value });
        Var(id)
    }

    /// Register a constant leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Register a trainable leaf; `backward` guarantees it an accumulated
    /// gradient of identical shape.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows, t.cols)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.dims(a);
        let (kb, n) = self.dims(b);
        if ka != kb {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, ka],
                rhs: vec![kb, n],
            });
        }
        let out = matmul_raw(self.value(a), self.value(b));
        Ok(self.push(Op::MatMul { a, b }, out))
    }

    fn binary_same_shape(&mut self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::Dimension {
                op,
                lhs: vec![ra, ca],
                rhs: vec![rb, cb],
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add { a, b }, out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub { a, b }, out))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul { a, b }, out))
    }

    /// `x + bias` with `bias` a `1×n` row broadcast over the rows of `x`.
    /// This is the only broadcasting the tape supports.
    pub fn add_bias_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let (br, bc) = self.dims(bias);
        if br != 1 || bc != c {
            return Err(Error::Dimension {
                op: "add_bias_row",
                lhs: vec![r, c],
                rhs: vec![br, bc],
            });
        }
        let xv = self.value(x);
        let bv = self.value(bias);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(xv.at(i, j) + bv.data[j]);
            }
        }
        let out = Tensor::new(r, c, data);
        Ok(self.push(Op::AddBiasRow { x, bias }, out))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = map(self.value(x), sigmoid_scalar);
        self.push(Op::Sigmoid { x }, out)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = map(self.value(x), f64::tanh);
        self.push(Op::Tanh { x }, out)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = map(self.value(x), |v| c * v);
        self.push(Op::Scale { x, c }, out)
    }

    /// Row-wise softmax with per-row max subtraction. Entries at
    /// [`MASK_VALUE`] underflow to exactly zero weight; a row where every
    /// entry sits at the masking constant is rejected.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows, xv.cols);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv.data[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max <= MASK_VALUE / 2.0 {
                return Err(Error::DegenerateRow { row: i });
            }
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        let out = Tensor::new(r, c, data);
        Ok(self.push(Op::SoftmaxRows { x }, out))
    }

    /// Keep entries where `keep` is true, set the rest to [`MASK_VALUE`].
    /// `keep` is row-major with the same shape as `x`. A row with no kept
    /// entry would make the following softmax degenerate and is rejected
    /// here.
    pub fn mask_fill(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if keep.len() != r * c {
            return Err(Error::Dimension {
                op: "mask_fill",
                lhs: vec![r, c],
                rhs: vec![keep.len()],
            });
        }
        for i in 0..r {
            if !keep[i * c..(i + 1) * c].iter().any(|&k| k) {
                return Err(Error::DegenerateRow { row: i });
            }
        }
        let xv = self.value(x);
        let data = xv
            .data
            .iter()
            .zip(keep.iter())
            .map(|(&v, &k)| if k { v } else { MASK_VALUE })
            .collect();
        let out = Tensor::new(r, c, data);
        Ok(self.push(
            Op::MaskFill {
                x,
                keep: keep.to_vec(),
            },
            out,
        ))
    }

    /// Concatenate along the last axis (columns). All parts must share a row
    /// count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols"));
        }
        let (r, _) = self.dims(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: vec![r, self.dims(parts[0]).1],
                    rhs: vec![pr, pc],
                });
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let pv = self.value(p);
                data.extend_from_slice(&pv.data[i * pv.cols..(i + 1) * pv.cols]);
            }
        }
        let out = Tensor::new(r, total, data);
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            out,
        ))
    }

    /// Stack matrices vertically. All parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_rows"));
        }
        let (_, c) = self.dims(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pc != c {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: vec![self.dims(parts[0]).0, c],
                    rhs: vec![pr, pc],
                });
            }
            total += pr;
        }
        let mut data = Vec::with_capacity(total * c);
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let out = Tensor::new(total, c, data);
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            out,
        ))
    }

    /// Columns `start..end`, half-open.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start >= end || end > c {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: vec![r, c],
                rhs: vec![start, end],
            });
        }
        let xv = self.value(x);
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&xv.data[i * c + start..i * c + end]);
        }
        let out = Tensor::new(r, w, data);
        Ok(self.push(Op::SliceCols { x, start }, out))
    }

    /// Rows `start..end`, half-open.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start >= end || end > r {
            return Err(Error::Dimension {
                op: "slice_rows",
                lhs: vec![r, c],
                rhs: vec![start, end],
            });
        }
        let xv = self.value(x);
        let data = xv.data[start * c..end * c].to_vec();
        let out = Tensor::new(end - start, c, data);
        Ok(self.push(Op::SliceRows { x, start }, out))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows, xv.cols);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xv.data[i * c + j];
            }
        }
        let out = Tensor::new(c, r, data);
        self.push(Op::Transpose { x }, out)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data.iter().sum();
        self.push(Op::SumAll { x }, Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: f64 = xv.data.iter().sum();
        let n = xv.numel() as f64;
        self.push(Op::MeanAll { x }, Tensor::scalar(s / n))
    }

    /// Reverse sweep from a scalar loss. Adjoints accumulate additively for
    /// shared inputs. The tape is consumed: a second call without rebuilding
    /// the forward pass is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                lhs: lv.shape(),
                rhs: vec![1, 1],
            });
        }
        self.consumed = true;

        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.numel()])
            .collect();
        grads[loss.0][0] = 1.0;

        for id in (0..=loss.0).rev() {
            // detach this node's adjoint to appease the borrow checker while
            // accumulating into its inputs' buffers; reattached below
            let g = std::mem::take(&mut grads[id]);
            let (rows, cols) = (self.nodes[id].value.rows, self.nodes[id].value.cols);
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let m = av.rows;
                    let k = av.cols;
                    let n = bv.cols;
                    // dA[i,p] += sum_j G[i,j] * B[p,j]
                    {
                        let da = &mut grads[a.0];
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * bv.data[p * n + j];
                                }
                                da[i * k + p] += s;
                            }
                        }
                    }
                    // dB[p,j] += sum_i A[i,p] * G[i,j]
                    {
                        let db = &mut grads[b.0];
                        for i in 0..m {
                            for p in 0..k {
                                let aip = av.data[i * k + p];
                                for j in 0..n {
                                    db[p * n + j] += aip * g[i * n + j];
                                }
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads[a.0], &g, 1.0);
                    accumulate(&mut grads[b.0], &g, 1.0);
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads[a.0], &g, 1.0);
                    accumulate(&mut grads[b.0], &g, -1.0);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let av = &self.nodes[a.0].value.data;
                    let bv = &self.nodes[b.0].value.data;
                    for (slot, (gi, bi)) in grads[a.0].iter_mut().zip(g.iter().zip(bv.iter())) {
                        *slot += gi * bi;
                    }
                    for (slot, (gi, ai)) in grads[b.0].iter_mut().zip(g.iter().zip(av.iter())) {
                        *slot += gi * ai;
                    }
                }
                Op::AddBiasRow { x, bias } => {
                    let (x, bias) = (*x, *bias);
                    accumulate(&mut grads[x.0], &g, 1.0);
                    let db = &mut grads[bias.0];
                    for i in 0..rows {
                        for j in 0..cols {
                            db[j] += g[i * cols + j];
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    let out = &self.nodes[id].value.data;
                    for (slot, (gi, s)) in grads[x.0].iter_mut().zip(g.iter().zip(out.iter())) {
                        *slot += gi * s * (1.0 - s);
                    }
                }
                Op::Tanh { x } => {
                    let x = *x;
                    let out = &self.nodes[id].value.data;
                    for (slot, (gi, t)) in grads[x.0].iter_mut().zip(g.iter().zip(out.iter())) {
                        *slot += gi * (1.0 - t * t);
                    }
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    accumulate(&mut grads[x.0], &g, c);
                }
                Op::SoftmaxRows { x } => {
                    let x = *x;
                    let out = &self.nodes[id].value.data;
                    let dx = &mut grads[x.0];
                    for i in 0..rows {
                        let base = i * cols;
                        let mut dot = 0.0;
                        for j in 0..cols {
                            dot += g[base + j] * out[base + j];
                        }
                        for j in 0..cols {
                            dx[base + j] += out[base + j] * (g[base + j] - dot);
                        }
                    }
                }
                Op::MaskFill { x, keep } => {
                    let x = *x;
                    for (slot, (gi, k)) in grads[x.0].iter_mut().zip(g.iter().zip(keep.iter())) {
                        if *k {
                            *slot += gi;
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.nodes[p.0].value.cols;
                        let dp = &mut grads[p.0];
                        for i in 0..rows {
                            for j in 0..pc {
                                dp[i * pc + j] += g[i * cols + offset + j];
                            }
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let pr = self.nodes[p.0].value.rows;
                        let dp = &mut grads[p.0];
                        for (slot, gi) in dp
                            .iter_mut()
                            .zip(g[offset * cols..(offset + pr) * cols].iter())
                        {
                            *slot += gi;
                        }
                        offset += pr;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (x, start) = (*x, *start);
                    let xc = self.nodes[x.0].value.cols;
                    let dx = &mut grads[x.0];
                    for i in 0..rows {
                        for j in 0..cols {
                            dx[i * xc + start + j] += g[i * cols + j];
                        }
                    }
                }
                Op::SliceRows { x, start } => {
                    let (x, start) = (*x, *start);
                    let dx = &mut grads[x.0];
                    for (slot, gi) in dx[start * cols..(start + rows) * cols]
                        .iter_mut()
                        .zip(g.iter())
                    {
                        *slot += gi;
                    }
                }
                Op::Transpose { x } => {
                    let x = *x;
                    let dx = &mut grads[x.0];
                    // output is cols(x) × rows(x); route g[j,i] into dx[i,j]
                    for i in 0..rows {
                        for j in 0..cols {
                            dx[j * rows + i] += g[i * cols + j];
                        }
                    }
                }
                Op::SumAll { x } => {
                    let x = *x;
                    accumulate_scalar(&mut grads[x.0], g[0]);
                }
                Op::MeanAll { x } => {
                    let x = *x;
                    let n = self.nodes[x.0].value.numel() as f64;
                    accumulate_scalar(&mut grads[x.0], g[0] / n);
                }
            }
            grads[id] = g;
        }

        let shapes: Vec<(usize, usize)> = self
            .nodes
            .iter()
            .map(|n| (n.value.rows, n.value.cols))
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Adjoints for every node of a swept tape, addressed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        Tensor::new(r, c, self.grads[v.0].clone())
    }

    pub fn wrt_data(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }
}

fn accumulate(target: &mut [f64], src: &[f64], factor: f64) {
    for (t, s) in target.iter_mut().zip(src.iter()) {
        *t += factor * s;
    }
}

fn accumulate_scalar(target: &mut [f64], v: f64) {
    for t in target.iter_mut() {
        *t += v;
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.rows, x.cols, x.data.iter().map(|&v| f(v)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.rows, a.cols, data)
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows, a.cols);
    let n = b.cols;
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            let crow = &mut data[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    Tensor::new(m, n, data)
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(Tensor::identity(2));
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let c = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_dot_product() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(1, 2, vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::new(2, 1, vec![3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3));
        let b = tape.leaf(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "message was: {msg}");
    }

    #[test]
    fn sigmoid_and_tanh_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[0.0]));
        let s = tape.sigmoid(x);
        let t = tape.tanh(x);
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert_eq!(tape.value(t).data()[0], 0.0);
    }

    #[test]
    fn sigmoid_deep_negative_stays_finite() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(&[-50.0]));
        let s = tape.sigmoid(x);
        let loss = tape.sum_all(s);
        let v = tape.value(s).data()[0];
        assert!(v > 0.0 && v <= 1e-20, "sigma(-50) = {v}");
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt_data(x)[0];
        assert!(g.is_finite() && g > 0.0);
    }

    #[test]
    fn softmax_uniform_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[0.0, 0.0, 0.0]));
        let s = tape.softmax_rows(x).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_single_survivor() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[2.5, MASK_VALUE, MASK_VALUE]));
        let s = tape.softmax_rows(x).unwrap();
        let d = tape.value(s).data();
        assert_eq!(d[0], 1.0);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn softmax_frozen_row() {
        // exp(1..3)/sum: computed directly from exp/Σexp
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, 2.0, 3.0]));
        let s = tape.softmax_rows(x).unwrap();
        let d = tape.value(s).data();
        let expect = [0.09003, 0.24473, 0.66524];
        for (v, e) in d.iter().zip(expect.iter()) {
            assert!((v - e).abs() < 1e-5, "{v} vs {e}");
        }
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_fully_masked_row_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[MASK_VALUE, MASK_VALUE]));
        let err = tape.softmax_rows(x).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 0 }));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]));
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt_data(x), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_quadratic_gives_two_x() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(&[1.5, -0.5, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt_data(x), &[3.0, -1.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_stale() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(&[1.0]));
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        let err = tape.backward(loss).unwrap_err();
        assert!(matches!(err, Error::StaleTape));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(&[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn concat_and_slice() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::row(&[1.0, 2.0]));
        let b = tape.leaf(Tensor::row(&[3.0]));
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);

        let m = tape.leaf(Tensor::row(&[1.0, 2.0, 3.0]));
        let s = tape.slice_cols(m, 1, 3).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0, 3.0]);
    }

    #[test]
    fn concat_then_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.leaf(Tensor::from_rows(&[vec![5.0], vec![6.0]]));
        let c = tape.concat_cols(&[a, b]).unwrap();
        let back_a = tape.slice_cols(c, 0, 2).unwrap();
        let back_b = tape.slice_cols(c, 2, 3).unwrap();
        assert_eq!(tape.value(back_a), tape.value(a));
        assert_eq!(tape.value(back_b), tape.value(b));
    }

    #[test]
    fn concat_mismatched_rows_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 2));
        let b = tape.leaf(Tensor::zeros(3, 2));
        assert!(tape.concat_cols(&[a, b]).is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![4.0, 5.0, 6.0],
        ]));
        let t = tape.transpose(a);
        let tt = tape.transpose(t);
        assert_eq!(tape.value(tt), tape.value(a));
        assert_eq!(tape.value(t).shape(), vec![3, 2]);
    }

    #[test]
    fn bias_row_broadcast() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(3, 2));
        let b = tape.param(Tensor::row(&[1.0, -1.0]));
        let y = tape.add_bias_row(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        // bias adjoint is the column sum of the upstream gradient
        assert_eq!(grads.wrt_data(b), &[3.0, 3.0]);
    }

    #[test]
    fn bias_row_shape_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(3, 2));
        let b = tape.leaf(Tensor::row(&[1.0, 2.0, 3.0]));
        assert!(tape.add_bias_row(x, b).is_err());
    }

    #[test]
    fn matmul_grad_is_row_sum_of_b() {
        // d(sum(AB))/dA[i,k] = sum_j B[k,j]
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::new(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
        let b = Tensor::new(4, 2, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut tape = Tape::new();
        let av = tape.param(a);
        let bv = tape.leaf(b.clone());
        let c = tape.matmul(av, bv).unwrap();
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss).unwrap();
        let ga = grads.wrt(av);
        for i in 0..3 {
            for k in 0..4 {
                let row_sum: f64 = (0..2).map(|j| b.at(k, j)).sum();
                assert!((ga.at(i, k) - row_sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn determinism_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.param(Tensor::row(&[0.3, -0.7, 0.11]));
            let w = tape.param(Tensor::new(3, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]));
            let h = tape.matmul(x, w).unwrap();
            let a = tape.tanh(h);
            let loss = tape.mean_all(a);
            let grads = tape.backward(loss).unwrap();
            (tape.value(loss).data().to_vec(), grads.wrt_data(w).to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }
}
