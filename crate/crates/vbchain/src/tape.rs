//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! The whole trainable pipeline is small enough that a flat tape with an
//! explicit op enum covers it: every forward helper pushes one node, and
//! `backward` walks the tape once accumulating gradients. Parents always
//! precede children, so a single reverse sweep is a valid topological order.

use crate::matrix::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    SubRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    DivRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Square(NodeId),
    SqrtEps(NodeId),
    Ln(NodeId),
    Clip(NodeId, f64, f64),
    SoftmaxRows(NodeId),
    MaskedSoftmaxRow(NodeId, Vec<bool>),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    MeanRows(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    SliceCols(NodeId, usize),
    Transpose(NodeId),
    Reshape(NodeId),
    Dropout(NodeId, Vec<f64>),
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Matrix>,
    ops: Vec<Op>,
    grads: Vec<Option<Matrix>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.values[id.0]
    }

    /// Gradient of the last `backward` output with respect to `id`.
    /// Zero matrix if the node does not influence the output.
    pub fn grad(&self, id: NodeId) -> Matrix {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Matrix::zeros(self.values[id.0].rows(), self.values[id.0].cols()),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        NodeId(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.values[a.0].matmul(&self.values[b.0]);
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = zip(&self.values[a.0], &self.values[b.0], |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = zip(&self.values[a.0], &self.values[b.0], |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = zip(&self.values[a.0], &self.values[b.0], |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = zip(&self.values[a.0], &self.values[b.0], |x, y| x / y);
        self.push(value, Op::Div(a, b))
    }

    /// Broadcast-add a `(1, n)` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let value = row_broadcast(&self.values[a.0], &self.values[row.0], |x, r| x + r);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn sub_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let value = row_broadcast(&self.values[a.0], &self.values[row.0], |x, r| x - r);
        self.push(value, Op::SubRow(a, row))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let value = row_broadcast(&self.values[a.0], &self.values[row.0], |x, r| x * r);
        self.push(value, Op::MulRow(a, row))
    }

    pub fn div_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let value = row_broadcast(&self.values[a.0], &self.values[row.0], |x, r| x / r);
        self.push(value, Op::DivRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.values[a.0].scaled(c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.values[a.0].map(|x| x + c);
        self.push(value, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a.0].map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a.0].map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a.0].map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a.0].map(|x| x * x);
        self.push(value, Op::Square(a))
    }

    pub fn sqrt_eps(&mut self, a: NodeId, eps: f64) -> NodeId {
        let value = self.values[a.0].map(|x| (x + eps).sqrt());
        self.push(value, Op::SqrtEps(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a.0].map(f64::ln);
        self.push(value, Op::Ln(a))
    }

    pub fn clip(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.values[a.0].map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clip(a, lo, hi))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.values[a.0];
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let row = x.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..x.cols() {
                let e = (row[j] - m).exp();
                out.set(i, j, e);
                z += e;
            }
            for j in 0..x.cols() {
                out.set(i, j, out.get(i, j) / z);
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Softmax over the unmasked entries of a `(1, n)` row; masked entries
    /// receive exactly zero weight.
    pub fn masked_softmax_row(&mut self, a: NodeId, mask: &[bool]) -> NodeId {
        let x = &self.values[a.0];
        assert_eq!(x.rows(), 1, "masked_softmax_row expects a row vector");
        assert_eq!(x.cols(), mask.len(), "mask length");
        assert!(mask.iter().any(|&m| m), "at least one unmasked entry required");
        let row = x.row(0);
        let m = row
            .iter()
            .zip(mask)
            .filter(|(_, &keep)| keep)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut out = Matrix::zeros(1, x.cols());
        let mut z = 0.0;
        for j in 0..x.cols() {
            if mask[j] {
                let e = (row[j] - m).exp();
                out.set(0, j, e);
                z += e;
            }
        }
        for j in 0..x.cols() {
            out.set(0, j, out.get(0, j) / z);
        }
        self.push(out, Op::MaskedSoftmaxRow(a, mask.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.values[parts[0].0].cols();
        let rows: usize = parts.iter().map(|p| self.values[p.0].rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            let v = &self.values[p.0];
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
        }
        let value = Matrix::from_vec(rows, cols, data).expect("concat shape");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.values[parts[0].0].rows();
        let cols: usize = parts.iter().map(|p| self.values[p.0].cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let v = &self.values[p.0];
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                for j in 0..v.cols() {
                    out.set(i, offset + j, v.get(i, j));
                }
            }
            offset += v.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Column means: `(m, n) -> (1, n)`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.values[a.0];
        let m = x.rows() as f64;
        let mut out = Matrix::zeros(1, x.cols());
        for j in 0..x.cols() {
            let mut s = 0.0;
            for i in 0..x.rows() {
                s += x.get(i, j);
            }
            out.set(0, j, s / m);
        }
        self.push(out, Op::MeanRows(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let x = &self.values[a.0];
        let value = Matrix::from_vec(1, 1, vec![x.data().iter().sum::<f64>() / x.len() as f64])
            .expect("scalar");
        self.push(value, Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let x = &self.values[a.0];
        let value = Matrix::from_vec(1, 1, vec![x.data().iter().sum::<f64>()]).expect("scalar");
        self.push(value, Op::SumAll(a))
    }

    /// Contiguous column range `[start, start + len)`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = &self.values[a.0];
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(x.rows(), len);
        for i in 0..x.rows() {
            for j in 0..len {
                out.set(i, j, x.get(i, start + j));
            }
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a.0].transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let value = self.values[a.0].reshaped(rows, cols);
        self.push(value, Op::Reshape(a))
    }

    /// Elementwise multiply by a fixed mask whose kept entries carry the
    /// inverted-keep-probability scale.
    pub fn dropout(&mut self, a: NodeId, mask: Vec<f64>) -> NodeId {
        let x = &self.values[a.0];
        assert_eq!(mask.len(), x.len(), "dropout mask length");
        let mut value = x.clone();
        for (v, m) in value.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(value, Op::Dropout(a, mask))
    }

    /// Affine map `x W + b` where `b` is a `(1, out)` row.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Accumulates gradients of the scalar node `output` with respect to
    /// every node on the tape.
    pub fn backward(&mut self, output: NodeId) {
        let out_val = &self.values[output.0];
        assert_eq!((out_val.rows(), out_val.cols()), (1, 1), "backward needs a scalar output");
        self.grads = (0..self.values.len()).map(|_| None).collect();
        self.grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            match &self.ops[i] {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.values[b.0].transpose());
                    let db = self.values[a.0].transpose().matmul(&g);
                    accum(&mut self.grads, a.0, da);
                    accum(&mut self.grads, b.0, db);
                }
                Op::Add(a, b) => {
                    accum(&mut self.grads, a.0, g.clone());
                    accum(&mut self.grads, b.0, g.clone());
                }
                Op::Sub(a, b) => {
                    accum(&mut self.grads, a.0, g.clone());
                    accum(&mut self.grads, b.0, g.scaled(-1.0));
                }
                Op::Mul(a, b) => {
                    let da = zip(&g, &self.values[b.0], |gv, bv| gv * bv);
                    let db = zip(&g, &self.values[a.0], |gv, av| gv * av);
                    accum(&mut self.grads, a.0, da);
                    accum(&mut self.grads, b.0, db);
                }
                Op::Div(a, b) => {
                    let bv = &self.values[b.0];
                    let da = zip(&g, bv, |gv, b| gv / b);
                    let av = &self.values[a.0];
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    for idx in 0..bv.len() {
                        db.data_mut()[idx] =
                            -g.data()[idx] * av.data()[idx] / (bv.data()[idx] * bv.data()[idx]);
                    }
                    accum(&mut self.grads, a.0, da);
                    accum(&mut self.grads, b.0, db);
                }
                Op::AddRow(a, r) => {
                    accum(&mut self.grads, a.0, g.clone());
                    accum(&mut self.grads, r.0, column_sums(&g));
                }
                Op::SubRow(a, r) => {
                    accum(&mut self.grads, a.0, g.clone());
                    accum(&mut self.grads, r.0, column_sums(&g).scaled(-1.0));
                }
                Op::MulRow(a, r) => {
                    let row = &self.values[r.0];
                    let da = row_broadcast(&g, row, |gv, rv| gv * rv);
                    let av = &self.values[a.0];
                    let prod = zip(&g, av, |gv, avv| gv * avv);
                    accum(&mut self.grads, a.0, da);
                    accum(&mut self.grads, r.0, column_sums(&prod));
                }
                Op::DivRow(a, r) => {
                    let row = &self.values[r.0];
                    let da = row_broadcast(&g, row, |gv, rv| gv / rv);
                    let av = &self.values[a.0];
                    let mut prod = Matrix::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            let rv = row.get(0, j);
                            prod.set(i, j, -g.get(i, j) * av.get(i, j) / (rv * rv));
                        }
                    }
                    accum(&mut self.grads, a.0, da);
                    accum(&mut self.grads, r.0, column_sums(&prod));
                }
                Op::Scale(a, c) => accum(&mut self.grads, a.0, g.scaled(*c)),
                Op::AddScalar(a) => accum(&mut self.grads, a.0, g.clone()),
                Op::Sigmoid(a) => {
                    let y = &self.values[i];
                    let da = zip(&g, y, |gv, yv| gv * yv * (1.0 - yv));
                    accum(&mut self.grads, a.0, da);
                }
                Op::Tanh(a) => {
                    let y = &self.values[i];
                    let da = zip(&g, y, |gv, yv| gv * (1.0 - yv * yv));
                    accum(&mut self.grads, a.0, da);
                }
                Op::Relu(a) => {
                    let x = &self.values[a.0];
                    let da = zip(&g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    accum(&mut self.grads, a.0, da);
                }
                Op::Square(a) => {
                    let x = &self.values[a.0];
                    let da = zip(&g, x, |gv, xv| 2.0 * xv * gv);
                    accum(&mut self.grads, a.0, da);
                }
                Op::SqrtEps(a) => {
                    let y = &self.values[i];
                    let da = zip(&g, y, |gv, yv| gv / (2.0 * yv));
                    accum(&mut self.grads, a.0, da);
                }
                Op::Ln(a) => {
                    let x = &self.values[a.0];
                    let da = zip(&g, x, |gv, xv| gv / xv);
                    accum(&mut self.grads, a.0, da);
                }
                Op::Clip(a, lo, hi) => {
                    let x = &self.values[a.0];
                    let (lo, hi) = (*lo, *hi);
                    let da = zip(&g, x, |gv, xv| if xv > lo && xv < hi { gv } else { 0.0 });
                    accum(&mut self.grads, a.0, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.values[i];
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for row in 0..y.rows() {
                        let mut dot = 0.0;
                        for j in 0..y.cols() {
                            dot += g.get(row, j) * y.get(row, j);
                        }
                        for j in 0..y.cols() {
                            da.set(row, j, y.get(row, j) * (g.get(row, j) - dot));
                        }
                    }
                    accum(&mut self.grads, a.0, da);
                }
                Op::MaskedSoftmaxRow(a, _mask) => {
                    let y = &self.values[i];
                    let mut dot = 0.0;
                    for j in 0..y.cols() {
                        dot += g.get(0, j) * y.get(0, j);
                    }
                    let mut da = Matrix::zeros(1, y.cols());
                    for j in 0..y.cols() {
                        da.set(0, j, y.get(0, j) * (g.get(0, j) - dot));
                    }
                    accum(&mut self.grads, a.0, da);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts.clone() {
                        let rows = self.values[p.0].rows();
                        let cols = self.values[p.0].cols();
                        let mut dp = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                dp.set(r, c, g.get(offset + r, c));
                            }
                        }
                        offset += rows;
                        accum(&mut self.grads, p.0, dp);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts.clone() {
                        let rows = self.values[p.0].rows();
                        let cols = self.values[p.0].cols();
                        let mut dp = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                dp.set(r, c, g.get(r, offset + c));
                            }
                        }
                        offset += cols;
                        accum(&mut self.grads, p.0, dp);
                    }
                }
                Op::MeanRows(a) => {
                    let x = &self.values[a.0];
                    let m = x.rows() as f64;
                    let mut da = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        for c in 0..x.cols() {
                            da.set(r, c, g.get(0, c) / m);
                        }
                    }
                    accum(&mut self.grads, a.0, da);
                }
                Op::MeanAll(a) => {
                    let x = &self.values[a.0];
                    let da = Matrix::filled(x.rows(), x.cols(), g.get(0, 0) / x.len() as f64);
                    accum(&mut self.grads, a.0, da);
                }
                Op::SumAll(a) => {
                    let x = &self.values[a.0];
                    let da = Matrix::filled(x.rows(), x.cols(), g.get(0, 0));
                    accum(&mut self.grads, a.0, da);
                }
                Op::SliceCols(a, start) => {
                    let x = &self.values[a.0];
                    let mut da = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            da.set(r, start + c, g.get(r, c));
                        }
                    }
                    accum(&mut self.grads, a.0, da);
                }
                Op::Transpose(a) => accum(&mut self.grads, a.0, g.transpose()),
                Op::Reshape(a) => {
                    let x = &self.values[a.0];
                    let da = g.reshaped(x.rows(), x.cols());
                    accum(&mut self.grads, a.0, da);
                }
                Op::Dropout(a, mask) => {
                    let mut da = g.clone();
                    for (v, m) in da.data_mut().iter_mut().zip(mask) {
                        *v *= m;
                    }
                    accum(&mut self.grads, a.0, da);
                }
            }
            self.grads[i] = Some(g);
        }
    }
}

/// Dropout mask source for graph builders; `Disabled` outside train mode.
pub enum DropoutSource<'a> {
    Disabled,
    Enabled { rate: f64, rng: &'a mut rand_chacha::ChaCha8Rng },
}

impl DropoutSource<'_> {
    pub fn apply(&mut self, tape: &mut Tape, node: NodeId) -> NodeId {
        match self {
            DropoutSource::Disabled => node,
            DropoutSource::Enabled { rate, rng } => {
                if *rate == 0.0 {
                    return node;
                }
                use rand::Rng;
                let len = tape.value(node).len();
                let keep = 1.0 - *rate;
                let mask: Vec<f64> = (0..len)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                tape.dropout(node, mask)
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()), "elementwise shape");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("zip shape")
}

fn row_broadcast(a: &Matrix, row: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(row.rows(), 1, "broadcast operand must be a row vector");
    assert_eq!(row.cols(), a.cols(), "broadcast width");
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            out.set(i, j, f(a.get(i, j), row.get(0, j)));
        }
    }
    out
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            out.set(0, j, out.get(0, j) + g.get(i, j));
        }
    }
    out
}

fn accum(grads: &mut [Option<Matrix>], idx: usize, delta: Matrix) {
    match &mut grads[idx] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite-difference check: perturbs every entry of every leaf
    /// and compares against the tape gradient.
    fn check_gradients(
        seed: u64,
        shapes: &[(usize, usize)],
        build: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves: Vec<Matrix> = shapes
            .iter()
            .map(|&(r, c)| Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.5..1.5)))
            .collect();

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = leaves.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &ids);
        tape.backward(out);
        let analytic: Vec<Matrix> = ids.iter().map(|&id| tape.grad(id)).collect();

        let eval = |leaves: &[Matrix]| -> f64 {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = leaves.iter().map(|m| t.leaf(m.clone())).collect();
            let out = build(&mut t, &ids);
            t.value(out).get(0, 0)
        };

        let h = 1e-5;
        for (li, shape) in shapes.iter().enumerate() {
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let mut plus = leaves.clone();
                    let v = plus[li].get(i, j);
                    plus[li].set(i, j, v + h);
                    let mut minus = leaves.clone();
                    minus[li].set(i, j, v - h);
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let an = analytic[li].get(i, j);
                    let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
                    assert!(
                        err < 1e-6,
                        "leaf {li} entry ({i},{j}): analytic {an}, fd {fd}, err {err}"
                    );
                }
            }
        }
    }

    #[test]
    fn matmul_affine_sigmoid_grads() {
        check_gradients(1, &[(3, 4), (4, 2), (1, 2)], |t, ids| {
            let y = t.affine(ids[0], ids[1], ids[2]);
            let s = t.sigmoid(y);
            t.mean_all(s)
        });
    }

    #[test]
    fn softmax_tanh_concat_grads() {
        check_gradients(2, &[(2, 3), (2, 3)], |t, ids| {
            let sm = t.softmax_rows(ids[0]);
            let th = t.tanh(ids[1]);
            let cat = t.concat_cols(&[sm, th]);
            let sq = t.square(cat);
            t.mean_all(sq)
        });
    }

    #[test]
    fn batchnorm_style_grads() {
        check_gradients(3, &[(5, 3), (1, 3), (1, 3)], |t, ids| {
            let mu = t.mean_rows(ids[0]);
            let centered = t.sub_row(ids[0], mu);
            let sq = t.square(centered);
            let var = t.mean_rows(sq);
            let std = t.sqrt_eps(var, 1e-5);
            let xhat = t.div_row(centered, std);
            let scaled = t.mul_row(xhat, ids[1]);
            let shifted = t.add_row(scaled, ids[2]);
            let out = t.square(shifted);
            t.mean_all(out)
        });
    }

    #[test]
    fn masked_softmax_and_transpose_grads() {
        check_gradients(4, &[(1, 5), (5, 2)], |t, ids| {
            let alpha = t.masked_softmax_row(ids[0], &[true, true, false, true, false]);
            let pooled = t.matmul(alpha, ids[1]);
            let tr = t.transpose(pooled);
            let sq = t.square(tr);
            t.sum_all(sq)
        });
    }

    #[test]
    fn div_ln_clip_grads() {
        // keep inputs away from clip boundaries and zero denominators
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Matrix::from_fn(3, 3, |_, _| rng.gen_range(0.4..0.8));
        let b = Matrix::from_fn(3, 3, |_, _| rng.gen_range(1.2..2.0));
        let build = |t: &mut Tape, ids: &[NodeId]| {
            let d = t.div(ids[0], ids[1]);
            let c = t.clip(d, 1e-7, 1.0);
            let l = t.ln(c);
            t.mean_all(l)
        };
        let mut tape = Tape::new();
        let ids = vec![tape.leaf(a.clone()), tape.leaf(b.clone())];
        let out = build(&mut tape, &ids);
        tape.backward(out);
        let h = 1e-6;
        for li in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let mut plus = [a.clone(), b.clone()];
                    let v = plus[li].get(i, j);
                    plus[li].set(i, j, v + h);
                    let mut minus = [a.clone(), b.clone()];
                    minus[li].set(i, j, v - h);
                    let eval = |mats: &[Matrix]| {
                        let mut t = Tape::new();
                        let ids: Vec<NodeId> = mats.iter().map(|m| t.leaf(m.clone())).collect();
                        let out = build(&mut t, &ids);
                        t.value(out).get(0, 0)
                    };
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let an = tape.grad(ids[li]).get(i, j);
                    assert!((an - fd).abs() < 1e-5, "({li},{i},{j}): {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn masked_entries_get_zero_weight() {
        let mut tape = Tape::new();
        let scores = tape.leaf(Matrix::row_vector(vec![5.0, 1.0, -3.0, 2.0]));
        let alpha = tape.masked_softmax_row(scores, &[true, false, true, true]);
        let v = tape.value(alpha);
        assert_eq!(v.get(0, 1), 0.0);
        let sum: f64 = v.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_scales_and_masks() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.dropout(x, vec![2.0, 0.0, 2.0, 0.0]);
        assert_eq!(tape.value(y).data(), &[2.0, 0.0, 6.0, 0.0]);
        let s = tape.sum_all(y);
        tape.backward(s);
        assert_eq!(tape.grad(x).data(), &[2.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn gradient_is_zero_for_disconnected_nodes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(vec![1.0, 2.0]));
        let unused = tape.leaf(Matrix::row_vector(vec![3.0]));
        let s = tape.sum_all(x);
        tape.backward(s);
        assert_eq!(tape.grad(unused).data(), &[0.0]);
    }
}
