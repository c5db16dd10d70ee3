//! Wengert-list tape: every op appends a node holding its value; `backward`
//! walks the list once in reverse.

use crate::error::{Result, TensorError};
use crate::kernels::{
    col2im_acc, gemm, gemm_acc, gemm_nt_acc, gemm_tn_acc, im2col, sigmoid, softmax_in_place,
};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Transpose(Var),
    Sum(Var),
    RowNorms(Var),
    NormalizeRows(Var),
    RowDot(Var, Var),
    ScaleRows(Var, Var),
    SegmentSoftmax(Var, Vec<usize>),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
    },
    Gru(Box<GruSaved>),
    CrossEntropy(Var, Vec<f64>),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<f64>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct GruSaved {
    x: Var,
    h: Var,
    wx: Var,
    wh: Var,
    bx: Var,
    bh: Var,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    gh_n: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter that was pulled onto the tape.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(move |(p, v)| self.get(*v).map(|g| (*p, g)))
    }
}

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    params: Vec<(ParamId, Var)>,
    consumed: bool,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
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

    /// Input that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Pulls a parameter onto the tape once; later calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() < store.len() {
            self.param_vars.resize(store.len(), None);
        }
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.param_vars[id.index()] = Some(v);
        self.params.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2();
        let (k2, n) = tb.dims2();
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = Tensor::matrix(m, n, gemm(ta.data(), tb.data(), m, k, n));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims2() != tb.dims2() {
            return Err(mismatch(op, ta, tb));
        }
        let (r, c) = ta.dims2();
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(r, c, data), mk(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Adds a `1×c` row to every row of an `r×c` matrix (bias add).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let (r, c) = tx.dims2();
        if tr.dims2() != (1, c) {
            return Err(mismatch("add_row", tx, tr));
        }
        let b = tr.data();
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (v, &bv) in chunk.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(Tensor::matrix(r, c, data), Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let (r, c) = t.dims2();
        let data = t.data().iter().map(|v| v * s).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(r, c, data), Op::Scale(x, s), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let (r, c) = t.dims2();
        let data = t.data().iter().map(|&v| f(v)).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(r, c, data), op, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Softmax along the last axis (each row independently).
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = t.dims2();
        let mut data = t.data().to_vec();
        data.chunks_mut(c).for_each(softmax_in_place);
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(r, c, data), Op::Softmax(x), rg)
    }

    /// Softmax along `axis` of a matrix (0 = down columns, 1 = along rows).
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => Ok(self.softmax(x)),
            0 => {
                let t = self.transpose(x);
                let s = self.softmax(t);
                Ok(self.transpose(s))
            }
            _ => Err(TensorError::InvalidShape {
                op: "softmax",
                shape: self.value(x).shape().to_vec(),
                reason: format!("axis {axis} out of range"),
            }),
        }
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = t.dims2();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(r, c, data), Op::LogSoftmax(x), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::EmptyAxis { op: "concat_cols" });
        };
        let r = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != r {
                return Err(mismatch("concat_cols", self.value(first), t));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(r, total, data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::EmptyAxis { op: "concat_rows" });
        };
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(mismatch("concat_rows", self.value(first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(rows, c, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Picks elements by flat index into an `rows×cols` result.
    pub fn gather(&mut self, x: Var, flat: Vec<usize>, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(x);
        if rows * cols != flat.len() || flat.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "gather",
                shape: vec![rows, cols],
                reason: format!("{} indices", flat.len()),
            });
        }
        let src = t.data();
        let mut data = Vec::with_capacity(flat.len());
        for &i in &flat {
            match src.get(i) {
                Some(&v) => data.push(v),
                None => {
                    return Err(TensorError::IndexOutOfRange {
                        op: "gather",
                        index: i,
                        extent: src.len(),
                    })
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(rows, cols, data), Op::Gather(x, flat), rg))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::IndexOutOfRange {
                op: "select_rows",
                index: bad,
                extent: r,
            });
        }
        let flat = rows.iter().flat_map(|&i| i * c..(i + 1) * c).collect();
        self.gather(x, flat, rows.len(), c)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if start >= end || end > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                extent: c,
            });
        }
        let flat = (0..r).flat_map(|i| i * c + start..i * c + end).collect();
        self.gather(x, flat, r, end - start)
    }

    /// Sums row `i` of `x` into row `targets[i]` of a zero `out_rows×c` matrix.
    pub fn scatter_rows(&mut self, x: Var, targets: Vec<usize>, out_rows: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        if targets.len() != r {
            return Err(TensorError::InvalidShape {
                op: "scatter_rows",
                shape: t.shape().to_vec(),
                reason: format!("{} targets", targets.len()),
            });
        }
        let mut data = vec![0.0; out_rows * c];
        for (i, &dst) in targets.iter().enumerate() {
            if dst >= out_rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "scatter_rows",
                    index: dst,
                    extent: out_rows,
                });
            }
            for (o, &v) in data[dst * c..(dst + 1) * c].iter_mut().zip(t.row_slice(i)) {
                *o += v;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(out_rows, c, data),
            Op::ScatterRows(x, targets),
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = t.dims2();
        let src = t.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(c, r, data), Op::Transpose(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Euclidean norm of each row, as an `r×1` column.
    pub fn row_norms(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = t.dims2();
        let data = t
            .data()
            .chunks(c)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(r, 1, data), Op::RowNorms(x), rg)
    }

    /// Scales each row to unit Euclidean length; an all-zero row stays zero
    /// and passes no gradient.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = t.dims2();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(r, c, data), Op::NormalizeRows(x), rg)
    }

    /// Per-row inner product of two equally shaped matrices, as an `r×1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims2() != tb.dims2() {
            return Err(mismatch("row_dot", ta, tb));
        }
        let (r, c) = ta.dims2();
        let data = ta
            .data()
            .chunks(c)
            .zip(tb.data().chunks(c))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(r, 1, data), Op::RowDot(a, b), rg))
    }

    /// Multiplies row `i` of `x` by the scalar `w[i]`, with `w` an `r×1` column.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (r, c) = tx.dims2();
        if tw.dims2() != (r, 1) {
            return Err(mismatch("scale_rows", tx, tw));
        }
        let mut data = tx.data().to_vec();
        for (row, &s) in data.chunks_mut(c).zip(tw.data()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::matrix(r, c, data), Op::ScaleRows(x, w), rg))
    }

    /// Softmax of an `n×1` column taken separately over consecutive segments
    /// whose lengths are `lens`.
    pub fn segment_softmax(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, c) = t.dims2();
        if c != 1 || lens.iter().sum::<usize>() != n {
            return Err(TensorError::InvalidShape {
                op: "segment_softmax",
                shape: t.shape().to_vec(),
                reason: format!("does not split into segments {lens:?}"),
            });
        }
        if lens.contains(&0) {
            return Err(TensorError::EmptyAxis {
                op: "segment_softmax",
            });
        }
        let mut data = t.data().to_vec();
        let mut start = 0;
        for &len in lens {
            softmax_in_place(&mut data[start..start + len]);
            start += len;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(n, 1, data),
            Op::SegmentSoftmax(x, lens.to_vec()),
            rg,
        ))
    }

    /// Sum over rows of `‖a_t − b_t‖₂`. The subgradient at a zero residual is 0.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let n = self.row_norms(d);
        Ok(self.sum(n))
    }

    /// Same-padded 1D convolution over the row (time) axis.
    ///
    /// `x` is `len×cin`, `w` is `(kernel·cin)×cout` with tap-major rows, `b`
    /// is `1×cout`. `kernel` must be odd.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (len, cin) = tx.dims2();
        let (wr, cout) = tw.dims2();
        if kernel.is_multiple_of(2) || wr != kernel * cin {
            return Err(mismatch("conv1d", tx, tw));
        }
        if tb.dims2() != (1, cout) {
            return Err(mismatch("conv1d", tw, tb));
        }
        let cols = im2col(tx.data(), len, cin, kernel);
        let mut out = gemm(&cols, tw.data(), len, kernel * cin, cout);
        for row in out.chunks_mut(cout) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Tensor::matrix(len, cout, out),
            Op::Conv1d { x, w, b, kernel },
            rg,
        ))
    }

    /// Gated recurrent unit step over a batch of rows.
    ///
    /// Gate column blocks are ordered reset, update, candidate:
    /// `r = σ(x·Wxr + bxr + h·Whr + bhr)`, `z` likewise,
    /// `n = tanh(x·Wxn + bxn + r ⊙ (h·Whn + bhn))`, `h' = (1 − z) ⊙ n + z ⊙ h`.
    pub fn gru_cell(&mut self, x: Var, h: Var, wx: Var, wh: Var, bx: Var, bh: Var) -> Result<Var> {
        let (rows, inp) = self.value(x).dims2();
        let (hr, d) = self.value(h).dims2();
        if hr != rows {
            return Err(mismatch("gru_cell", self.value(x), self.value(h)));
        }
        if self.value(wx).dims2() != (inp, 3 * d) {
            return Err(mismatch("gru_cell", self.value(x), self.value(wx)));
        }
        if self.value(wh).dims2() != (d, 3 * d) {
            return Err(mismatch("gru_cell", self.value(h), self.value(wh)));
        }
        if self.value(bx).dims2() != (1, 3 * d) || self.value(bh).dims2() != (1, 3 * d) {
            return Err(mismatch("gru_cell", self.value(bx), self.value(bh)));
        }
        let g = 3 * d;
        let mut gx = vec![0.0; rows * g];
        let mut gh = vec![0.0; rows * g];
        for i in 0..rows {
            gx[i * g..(i + 1) * g].copy_from_slice(self.value(bx).data());
            gh[i * g..(i + 1) * g].copy_from_slice(self.value(bh).data());
        }
        gemm_acc(
            &mut gx,
            self.value(x).data(),
            self.value(wx).data(),
            rows,
            inp,
            g,
        );
        gemm_acc(
            &mut gh,
            self.value(h).data(),
            self.value(wh).data(),
            rows,
            d,
            g,
        );
        let hv = self.value(h).data();
        let mut r = vec![0.0; rows * d];
        let mut z = vec![0.0; rows * d];
        let mut n = vec![0.0; rows * d];
        let mut gh_n = vec![0.0; rows * d];
        let mut out = vec![0.0; rows * d];
        for i in 0..rows {
            for j in 0..d {
                let o = i * g;
                let e = i * d + j;
                r[e] = sigmoid(gx[o + j] + gh[o + j]);
                z[e] = sigmoid(gx[o + d + j] + gh[o + d + j]);
                gh_n[e] = gh[o + 2 * d + j];
                n[e] = (gx[o + 2 * d + j] + r[e] * gh_n[e]).tanh();
                out[e] = (1.0 - z[e]) * n[e] + z[e] * hv[e];
            }
        }
        let rg = self.rg(&[x, h, wx, wh, bx, bh]);
        let saved = GruSaved {
            x,
            h,
            wx,
            wh,
            bx,
            bh,
            r,
            z,
            n,
            gh_n,
        };
        Ok(self.push(Tensor::matrix(rows, d, out), Op::Gru(Box::new(saved)), rg))
    }

    /// `−Σ labels ⊙ ln(probs)`, a scalar.
    pub fn cross_entropy(&mut self, probs: Var, labels: &Tensor) -> Result<Var> {
        let tp = self.value(probs);
        if tp.dims2() != labels.dims2() {
            return Err(mismatch("cross_entropy", tp, labels));
        }
        let mut s = 0.0;
        for (&p, &y) in tp.data().iter().zip(labels.data()) {
            if y != 0.0 {
                s -= y * p.ln();
            }
        }
        let rg = self.rg(&[probs]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::CrossEntropy(probs, labels.data().to_vec()),
            rg,
        ))
    }

    /// Cross-entropy of row-wise `softmax(logits)` against soft labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        if t.dims2() != labels.dims2() {
            return Err(mismatch("softmax_cross_entropy", t, labels));
        }
        let (_, c) = t.dims2();
        let mut probs = t.data().to_vec();
        let mut s = 0.0;
        for (row, lab) in probs.chunks_mut(c).zip(labels.data().chunks(c)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (v, &y) in row.iter_mut().zip(lab) {
                let logp = *v - lse;
                s -= y * logp;
                *v = logp.exp();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.data().to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. A tape supports exactly one pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // every requires-grad leaf gets a gradient, zero when unreachable
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad {
                    return None;
                }
                let (r, c) = node.value.dims2();
                let data = match g {
                    Some(g) => g,
                    None if matches!(node.op, Op::Leaf) => vec![0.0; r * c],
                    None => return None,
                };
                Some(Tensor::new(node.value.shape().to_vec(), data).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients {
            grads: out,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2();
                let n = tb.cols();
                if self.requires_grad(*a) {
                    gemm_nt_acc(self.slot(grads, *a), g, tb.data(), m, n, k);
                }
                if self.requires_grad(*b) {
                    gemm_tn_acc(self.slot(grads, *b), ta.data(), g, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        axpy(self.slot(grads, v), g, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    axpy(self.slot(grads, *a), g, 1.0);
                }
                if self.requires_grad(*b) {
                    axpy(self.slot(grads, *b), g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let s = self.slot(grads, *a);
                    for ((d, &gv), &bv) in s.iter_mut().zip(g).zip(tb.data()) {
                        *d += gv * bv;
                    }
                }
                if self.requires_grad(*b) {
                    let s = self.slot(grads, *b);
                    for ((d, &gv), &av) in s.iter_mut().zip(g).zip(ta.data()) {
                        *d += gv * av;
                    }
                }
            }
            Op::AddRow(x, row) => {
                if self.requires_grad(*x) {
                    axpy(self.slot(grads, *x), g, 1.0);
                }
                if self.requires_grad(*row) {
                    let c = out.cols();
                    let s = self.slot(grads, *row);
                    for chunk in g.chunks(c) {
                        axpy(s, chunk, 1.0);
                    }
                }
            }
            Op::Scale(x, k) => {
                if self.requires_grad(*x) {
                    axpy(self.slot(grads, *x), g, *k);
                }
            }
            Op::Tanh(x) => {
                let s = self.slot(grads, *x);
                for ((d, &gv), &y) in s.iter_mut().zip(g).zip(out.data()) {
                    *d += gv * (1.0 - y * y);
                }
            }
            Op::Sigmoid(x) => {
                let s = self.slot(grads, *x);
                for ((d, &gv), &y) in s.iter_mut().zip(g).zip(out.data()) {
                    *d += gv * y * (1.0 - y);
                }
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let s = self.slot(grads, *x);
                for ((d, &gv), &xv) in s.iter_mut().zip(g).zip(xs) {
                    if xv > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let s = self.slot(grads, *x);
                for ((ds, gs), ys) in s.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let dot: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &y) in ds.iter_mut().zip(gs).zip(ys) {
                        *d += y * (gv - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let c = out.cols();
                let s = self.slot(grads, *x);
                for ((ds, gs), ys) in s.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let total: f64 = gs.iter().sum();
                    for ((d, &gv), &y) in ds.iter_mut().zip(gs).zip(ys) {
                        *d += gv - y.exp() * total;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, c) = out.dims2();
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.requires_grad(p) {
                        let s = self.slot(grads, p);
                        for i in 0..r {
                            axpy(
                                &mut s[i * pc..(i + 1) * pc],
                                &g[i * c + off..i * c + off + pc],
                                1.0,
                            );
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.requires_grad(p) {
                        axpy(self.slot(grads, p), &g[off..off + n], 1.0);
                    }
                    off += n;
                }
            }
            Op::Gather(x, flat) => {
                let s = self.slot(grads, *x);
                for (&i, &gv) in flat.iter().zip(g) {
                    s[i] += gv;
                }
            }
            Op::ScatterRows(x, targets) => {
                let c = out.cols();
                let s = self.slot(grads, *x);
                for (i, &dst) in targets.iter().enumerate() {
                    axpy(&mut s[i * c..(i + 1) * c], &g[dst * c..(dst + 1) * c], 1.0);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2();
                let s = self.slot(grads, *x);
                for i in 0..r {
                    for j in 0..c {
                        s[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Sum(x) => {
                let gv = g[0];
                self.slot(grads, *x).iter_mut().for_each(|d| *d += gv);
            }
            Op::RowNorms(x) => {
                let t = self.value(*x);
                let c = t.cols();
                let s = self.slot(grads, *x);
                for (i, (ds, xs)) in s.chunks_mut(c).zip(t.data().chunks(c)).enumerate() {
                    let norm = out.data()[i];
                    if norm > 0.0 {
                        for (d, &xv) in ds.iter_mut().zip(xs) {
                            *d += g[i] * xv / norm;
                        }
                    }
                }
            }
            Op::NormalizeRows(x) => {
                let t = self.value(*x);
                let c = t.cols();
                let s = self.slot(grads, *x);
                for ((ds, xs), (ys, gs)) in s
                    .chunks_mut(c)
                    .zip(t.data().chunks(c))
                    .zip(out.data().chunks(c).zip(g.chunks(c)))
                {
                    let n = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > 0.0 {
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for ((d, &y), &gv) in ds.iter_mut().zip(ys).zip(gs) {
                            *d += (gv - y * dot) / n;
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let c = self.value(*a).cols();
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.requires_grad(v) {
                        let od = self.value(other).data();
                        let s = self.slot(grads, v);
                        for (i, (ds, os)) in s.chunks_mut(c).zip(od.chunks(c)).enumerate() {
                            for (d, &o) in ds.iter_mut().zip(os) {
                                *d += g[i] * o;
                            }
                        }
                    }
                }
            }
            Op::ScaleRows(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let c = tx.cols();
                if self.requires_grad(*x) {
                    let s = self.slot(grads, *x);
                    for ((ds, gs), &wv) in s.chunks_mut(c).zip(g.chunks(c)).zip(tw.data()) {
                        for (d, &gv) in ds.iter_mut().zip(gs) {
                            *d += gv * wv;
                        }
                    }
                }
                if self.requires_grad(*w) {
                    let s = self.slot(grads, *w);
                    for ((d, gs), xs) in s.iter_mut().zip(g.chunks(c)).zip(tx.data().chunks(c)) {
                        *d += gs.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::SegmentSoftmax(x, lens) => {
                let y = out.data();
                let s = self.slot(grads, *x);
                let mut start = 0;
                for &len in lens {
                    let seg = start..start + len;
                    let dot: f64 = y[seg.clone()]
                        .iter()
                        .zip(&g[seg.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for i in seg {
                        s[i] += y[i] * (g[i] - dot);
                    }
                    start += len;
                }
            }
            Op::Conv1d { x, w, b, kernel } => {
                let tx = self.value(*x);
                let (len, cin) = tx.dims2();
                let tw = self.value(*w);
                let cout = tw.cols();
                let width = kernel * cin;
                if self.requires_grad(*w) {
                    let cols = im2col(tx.data(), len, cin, *kernel);
                    gemm_tn_acc(self.slot(grads, *w), &cols, g, len, width, cout);
                }
                if self.requires_grad(*b) {
                    let s = self.slot(grads, *b);
                    for chunk in g.chunks(cout) {
                        axpy(s, chunk, 1.0);
                    }
                }
                if self.requires_grad(*x) {
                    let mut dcols = vec![0.0; len * width];
                    gemm_nt_acc(&mut dcols, g, tw.data(), len, cout, width);
                    col2im_acc(self.slot(grads, *x), &dcols, len, cin, *kernel);
                }
            }
            Op::Gru(s) => self.gru_backward(s, g, grads),
            Op::CrossEntropy(p, labels) => {
                let tp = self.value(*p);
                let sl = self.slot(grads, *p);
                for ((d, &pv), &y) in sl.iter_mut().zip(tp.data()).zip(labels) {
                    if y != 0.0 {
                        *d -= g[0] * y / pv;
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let sl = self.slot(grads, *logits);
                for ((ds, ps), ys) in sl.chunks_mut(c).zip(probs.chunks(c)).zip(labels.chunks(c)) {
                    let total: f64 = ys.iter().sum();
                    for ((d, &p), &y) in ds.iter_mut().zip(ps).zip(ys) {
                        *d += g[0] * (p * total - y);
                    }
                }
            }
        }
    }

    fn gru_backward(&self, s: &GruSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rows, d) = self.value(s.h).dims2();
        let inp = self.value(s.x).cols();
        let gw = 3 * d;
        let hv = self.value(s.h).data();
        let mut dgx = vec![0.0; rows * gw];
        let mut dgh = vec![0.0; rows * gw];
        let mut dh_direct = vec![0.0; rows * d];
        for i in 0..rows {
            for j in 0..d {
                let e = i * d + j;
                let o = i * gw;
                let (r, z, n) = (s.r[e], s.z[e], s.n[e]);
                let dn = g[e] * (1.0 - z);
                let dz = g[e] * (hv[e] - n);
                dh_direct[e] = g[e] * z;
                let dn_pre = dn * (1.0 - n * n);
                let dr = dn_pre * s.gh_n[e];
                let dr_pre = dr * r * (1.0 - r);
                let dz_pre = dz * z * (1.0 - z);
                dgx[o + j] = dr_pre;
                dgx[o + d + j] = dz_pre;
                dgx[o + 2 * d + j] = dn_pre;
                dgh[o + j] = dr_pre;
                dgh[o + d + j] = dz_pre;
                dgh[o + 2 * d + j] = dn_pre * r;
            }
        }
        if self.requires_grad(s.x) {
            let wx = self.value(s.wx).data();
            gemm_nt_acc(self.slot(grads, s.x), &dgx, wx, rows, gw, inp);
        }
        if self.requires_grad(s.h) {
            let wh = self.value(s.wh).data();
            let sl = self.slot(grads, s.h);
            axpy(sl, &dh_direct, 1.0);
            gemm_nt_acc(sl, &dgh, wh, rows, gw, d);
        }
        if self.requires_grad(s.wx) {
            gemm_tn_acc(
                self.slot(grads, s.wx),
                self.value(s.x).data(),
                &dgx,
                rows,
                inp,
                gw,
            );
        }
        if self.requires_grad(s.wh) {
            gemm_tn_acc(self.slot(grads, s.wh), hv, &dgh, rows, d, gw);
        }
        if self.requires_grad(s.bx) {
            let sl = self.slot(grads, s.bx);
            for chunk in dgx.chunks(gw) {
                axpy(sl, chunk, 1.0);
            }
        }
        if self.requires_grad(s.bh) {
            let sl = self.slot(grads, s.bh);
            for chunk in dgh.chunks(gw) {
                axpy(sl, chunk, 1.0);
            }
        }
    }

    #[allow(clippy::mut_from_ref)]
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let n = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}
