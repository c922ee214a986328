//! Reverse- and forward-mode differentiation over a recorded op list.
//!
//! A [`Tape`] is a Wengert list: leaves enter via [`Tape::input`] /
//! [`Tape::param`], every primitive records its operands and its eagerly
//! computed output, and [`Tape::backward`] replays the list in reverse,
//! visiting each node exactly once. [`Tape::jvp`] propagates tangents
//! forward along the same list for directional derivatives.
//!
//! The primitive set is fixed to what the flow, posterior, and losses in
//! this crate need: matmul, elementwise maps, batch reductions, column
//! slicing/concatenation, diagonal embedding, and triangular solves.
//! Broadcasting exists only across the leading batch dimension.
//!
//! Tapes are single-threaded; tensors are immutable after creation.

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{dgemm_rowmajor, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Neg { x: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    Exp { x: usize },
    Ln { x: usize },
    Sqrt { x: usize },
    Tanh { x: usize },
    Softplus { x: usize },
    Powi { x: usize, n: u32 },
    ReplaceNonFinite { x: usize },
    AddRow { x: usize, row: usize },
    MulRow { x: usize, row: usize },
    SubCol { x: usize, col: usize },
    Matmul { a: usize, b: usize },
    MatmulTB { a: usize, b: usize },
    Sum { x: usize },
    Mean { x: usize },
    SumRows { x: usize },
    Reshape { x: usize },
    SliceCols { x: usize, start: usize, len: usize },
    ConcatCols { a: usize, b: usize },
    EmbedDiag { v: usize, rows: usize, cols: usize, row_off: usize, col_off: usize },
    SolveTri { m: usize, rhs: usize, lower: bool, unit: bool },
    TriInverse { m: usize, lower: bool, unit: bool },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Wengert-list tape holding values plus the recorded primitive graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<usize>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `id`, if any gradient reached it.
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of the loss w.r.t. `id`; zeros when the loss does not reach it.
    pub fn get_or_zeros(&self, id: VarId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
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

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

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

    /// Non-trainable leaf (data, constants).
    pub fn input(&mut self, t: Tensor) -> VarId {
        self.push(Op::Leaf, t)
    }

    /// Trainable leaf; tracked so gradients can be enumerated per parameter.
    pub fn param(&mut self, t: Tensor) -> VarId {
        let id = self.push(Op::Leaf, t);
        self.params.push(id.0);
        id
    }

    pub fn scalar_input(&mut self, v: f64) -> VarId {
        self.input(Tensor::scalar(v))
    }

    /// Value currently stored at a node.
    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> VarId {
        self.nodes.push(Node { op, value });
        VarId(self.nodes.len() - 1)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn check_same_shape(&self, op: &'static str, a: VarId, b: VarId) -> Result<()> {
        if !self.val(a.0).same_shape(self.val(b.0)) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.val(a.0).shape().to_vec(),
                rhs: self.val(b.0).shape().to_vec(),
            });
        }
        Ok(())
    }

    // ── Elementwise binary ───────────────────────────────────────────

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_same_shape("add", a, b)?;
        let data =
            self.val(a.0).data().iter().zip(self.val(b.0).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.val(a.0).shape().to_vec(), data)?;
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, t))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_same_shape("sub", a, b)?;
        let data =
            self.val(a.0).data().iter().zip(self.val(b.0).data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(self.val(a.0).shape().to_vec(), data)?;
        Ok(self.push(Op::Sub { a: a.0, b: b.0 }, t))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_same_shape("mul", a, b)?;
        let data =
            self.val(a.0).data().iter().zip(self.val(b.0).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.val(a.0).shape().to_vec(), data)?;
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, t))
    }

    // ── Elementwise unary ────────────────────────────────────────────

    fn unary(&mut self, op: Op, x: VarId, f: impl Fn(f64) -> f64) -> VarId {
        let data = self.val(x.0).data().iter().map(|v| f(*v)).collect();
        let t = Tensor::new(self.val(x.0).shape().to_vec(), data).expect("unary keeps shape");
        self.push(op, t)
    }

    pub fn neg(&mut self, x: VarId) -> VarId {
        self.unary(Op::Neg { x: x.0 }, x, |v| -v)
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        self.unary(Op::Scale { x: x.0, c }, x, |v| c * v)
    }

    pub fn add_scalar(&mut self, x: VarId, c: f64) -> VarId {
        self.unary(Op::AddScalar { x: x.0 }, x, |v| v + c)
    }

    pub fn exp(&mut self, x: VarId) -> VarId {
        self.unary(Op::Exp { x: x.0 }, x, f64::exp)
    }

    pub fn ln(&mut self, x: VarId) -> VarId {
        self.unary(Op::Ln { x: x.0 }, x, f64::ln)
    }

    pub fn sqrt(&mut self, x: VarId) -> VarId {
        self.unary(Op::Sqrt { x: x.0 }, x, f64::sqrt)
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        self.unary(Op::Tanh { x: x.0 }, x, f64::tanh)
    }

    pub fn softplus(&mut self, x: VarId) -> VarId {
        self.unary(Op::Softplus { x: x.0 }, x, softplus)
    }

    /// Elementwise integer power, `n >= 0` (`n = 0` yields ones).
    pub fn powi(&mut self, x: VarId, n: u32) -> VarId {
        self.unary(Op::Powi { x: x.0, n }, x, |v| v.powi(n as i32))
    }

    /// Replace non-finite entries by `floor`; gradient is blocked there.
    pub fn replace_non_finite(&mut self, x: VarId, floor: f64) -> VarId {
        self.unary(Op::ReplaceNonFinite { x: x.0 }, x, |v| {
            if v.is_finite() {
                v
            } else {
                floor
            }
        })
    }

    // ── Batch broadcasts ─────────────────────────────────────────────

    fn check_matrix_vec(
        &self,
        op: &'static str,
        x: VarId,
        v: VarId,
        want: usize,
    ) -> Result<(usize, usize)> {
        let xs = self.val(x.0);
        let vs = self.val(v.0);
        if xs.shape().len() != 2 || vs.shape().len() != 1 || vs.shape()[0] != want {
            return Err(Error::ShapeMismatch {
                op,
                lhs: xs.shape().to_vec(),
                rhs: vs.shape().to_vec(),
            });
        }
        Ok((xs.shape()[0], xs.shape()[1]))
    }

    /// `[N, m] + [m]`, the bias add.
    pub fn add_row(&mut self, x: VarId, row: VarId) -> Result<VarId> {
        let cols = self.val(x.0).cols();
        let (n, m) = self.check_matrix_vec("add_row", x, row, cols)?;
        let mut data = self.val(x.0).data().to_vec();
        let r = self.val(row.0).data();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += r[j];
            }
        }
        let t = Tensor::from_shape(n, m, data)?;
        Ok(self.push(Op::AddRow { x: x.0, row: row.0 }, t))
    }

    /// `[N, m] * [m]` columnwise.
    pub fn mul_row(&mut self, x: VarId, row: VarId) -> Result<VarId> {
        let cols = self.val(x.0).cols();
        let (n, m) = self.check_matrix_vec("mul_row", x, row, cols)?;
        let mut data = self.val(x.0).data().to_vec();
        let r = self.val(row.0).data();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] *= r[j];
            }
        }
        let t = Tensor::from_shape(n, m, data)?;
        Ok(self.push(Op::MulRow { x: x.0, row: row.0 }, t))
    }

    /// `[N, m] - [N]` broadcast across columns.
    pub fn sub_col(&mut self, x: VarId, col: VarId) -> Result<VarId> {
        let rows = self.val(x.0).rows();
        let (n, m) = self.check_matrix_vec("sub_col", x, col, rows)?;
        let mut data = self.val(x.0).data().to_vec();
        let c = self.val(col.0).data();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] -= c[i];
            }
        }
        let t = Tensor::from_shape(n, m, data)?;
        Ok(self.push(Op::SubCol { x: x.0, col: col.0 }, t))
    }

    // ── Matrix products ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (av, bv) = (self.val(a.0), self.val(b.0));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        dgemm_rowmajor(m, k, n, av.data(), bv.data(), false, &mut out);
        let t = Tensor::from_shape(m, n, out)?;
        Ok(self.push(Op::Matmul { a: a.0, b: b.0 }, t))
    }

    /// `a @ b^T` with `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_tb(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (av, bv) = (self.val(a.0), self.val(b.0));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(Error::ShapeMismatch {
                op: "matmul_tb",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![0.0; m * n];
        dgemm_rowmajor(m, k, n, av.data(), bv.data(), true, &mut out);
        let t = Tensor::from_shape(m, n, out)?;
        Ok(self.push(Op::MatmulTB { a: a.0, b: b.0 }, t))
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, x: VarId) -> VarId {
        let s: f64 = self.val(x.0).data().iter().sum();
        self.push(Op::Sum { x: x.0 }, Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: VarId) -> VarId {
        let n = self.val(x.0).numel().max(1);
        let s: f64 = self.val(x.0).data().iter().sum();
        self.push(Op::Mean { x: x.0 }, Tensor::scalar(s / n as f64))
    }

    /// Row sums of a `[N, m]` tensor, as `[N]`.
    pub fn sum_rows(&mut self, x: VarId) -> Result<VarId> {
        let xv = self.val(x.0);
        if xv.shape().len() != 2 {
            return Err(Error::invalid("sum_rows", format!("need 2-d, got {:?}", xv.shape())));
        }
        let (n, m) = (xv.rows(), xv.cols());
        let data: Vec<f64> = (0..n).map(|i| xv.row(i).iter().sum()).collect();
        let _ = m;
        Ok(self.push(Op::SumRows { x: x.0 }, Tensor::from_vec(data)))
    }

    // ── Shape ops ────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        let t = Tensor::new(shape, self.val(x.0).data().to_vec())?;
        Ok(self.push(Op::Reshape { x: x.0 }, t))
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let xv = self.val(x.0);
        if xv.shape().len() != 2 || start + len > xv.cols() {
            return Err(Error::invalid(
                "slice_cols",
                format!("range {}..{} out of shape {:?}", start, start + len, xv.shape()),
            ));
        }
        let (n, m) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&xv.data()[i * m + start..i * m + start + len]);
        }
        let t = Tensor::from_shape(n, len, data)?;
        Ok(self.push(Op::SliceCols { x: x.0, start, len }, t))
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (av, bv) = (self.val(a.0), self.val(b.0));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.rows() != bv.rows() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (n, p, q) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let t = Tensor::from_shape(n, p + q, data)?;
        Ok(self.push(Op::ConcatCols { a: a.0, b: b.0 }, t))
    }

    /// Zero `[rows, cols]` matrix with `v` placed on the diagonal starting at
    /// `(row_off, col_off)`.
    pub fn embed_diag(
        &mut self,
        v: VarId,
        rows: usize,
        cols: usize,
        row_off: usize,
        col_off: usize,
    ) -> Result<VarId> {
        let vv = self.val(v.0);
        let len = vv.numel();
        if vv.shape().len() != 1 || row_off + len > rows || col_off + len > cols {
            return Err(Error::invalid(
                "embed_diag",
                format!("vector {:?} does not fit at ({row_off},{col_off}) in {rows}x{cols}", vv.shape()),
            ));
        }
        let mut data = vec![0.0; rows * cols];
        for k in 0..len {
            data[(row_off + k) * cols + col_off + k] = vv.data()[k];
        }
        let t = Tensor::from_shape(rows, cols, data)?;
        Ok(self.push(Op::EmbedDiag { v: v.0, rows, cols, row_off, col_off }, t))
    }

    // ── Triangular ops ───────────────────────────────────────────────

    /// Row-wise triangular solve: `out[i, :]` solves `M x = rhs[i, :]`.
    ///
    /// Only the active triangle of `M` is read; with `unit` the diagonal is
    /// taken as ones regardless of storage.
    pub fn solve_tri(&mut self, m: VarId, rhs: VarId, lower: bool, unit: bool) -> Result<VarId> {
        let (mv, rv) = (self.val(m.0), self.val(rhs.0));
        let d = mv.rows();
        if mv.cols() != d || rv.shape().len() != 2 || rv.cols() != d {
            return Err(Error::ShapeMismatch {
                op: "solve_tri",
                lhs: mv.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            });
        }
        let n = rv.rows();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            data.extend(linalg::tri_solve(mv.data(), d, rv.row(i), lower, unit, false));
        }
        let t = Tensor::from_shape(n, d, data)?;
        Ok(self.push(Op::SolveTri { m: m.0, rhs: rhs.0, lower, unit }, t))
    }

    /// Dense inverse of a triangular matrix.
    pub fn tri_inverse(&mut self, m: VarId, lower: bool, unit: bool) -> Result<VarId> {
        let mv = self.val(m.0);
        let d = mv.rows();
        if mv.cols() != d {
            return Err(Error::invalid("tri_inverse", format!("not square: {:?}", mv.shape())));
        }
        let inv = linalg::tri_inverse(mv.data(), d, lower, unit);
        let t = Tensor::from_shape(d, d, inv)?;
        Ok(self.push(Op::TriInverse { m: m.0, lower, unit }, t))
    }

    // ── Composites ───────────────────────────────────────────────────

    /// `sum(a * b)` as a scalar.
    pub fn dot(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Squared Euclidean norm per row: `[N, m] -> [N]`.
    pub fn norm_sq_rows(&mut self, x: VarId) -> Result<VarId> {
        let sq = self.mul(x, x)?;
        self.sum_rows(sq)
    }

    /// Numerically stable `log(mean(exp(x)))` per row, `[N, M] -> [N]`.
    ///
    /// The row maximum is detached (treated as a constant); the gradient is
    /// exact regardless because the softmax identity absorbs the shift.
    pub fn log_mean_exp_rows(&mut self, x: VarId) -> Result<VarId> {
        let xv = self.val(x.0);
        if xv.shape().len() != 2 {
            return Err(Error::invalid("log_mean_exp_rows", "need 2-d input"));
        }
        let (n, m) = (xv.rows(), xv.cols());
        let maxes: Vec<f64> = (0..n)
            .map(|i| xv.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let c = self.input(Tensor::from_vec(maxes));
        let shifted = self.sub_col(x, c)?;
        let e = self.exp(shifted);
        let se = self.sum_rows(e)?;
        let l = self.ln(se);
        let l2 = self.add_scalar(l, -(m as f64).ln());
        self.add(l2, c)
    }

    // ── Reverse mode ─────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar `loss` w.r.t. every node.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        let lv = self.val(loss.0);
        if !lv.is_scalar() {
            return Err(Error::NotScalar { op: "backward", shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(grads: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
        match &mut grads[idx] {
            Some(existing) => {
                let e = existing.data_mut();
                for (ev, dv) in e.iter_mut().zip(delta.data()) {
                    *ev += dv;
                }
            }
            None => grads[idx] = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backward_op(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let shape_of = |i: usize| self.val(i).shape().to_vec();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                Self::accumulate(grads, *a, g.clone());
                let neg = Tensor::new(shape_of(*b), g.data().iter().map(|v| -v).collect())
                    .expect("shape");
                Self::accumulate(grads, *b, neg);
            }
            Op::Mul { a, b } => {
                let ga: Vec<f64> =
                    g.data().iter().zip(self.val(*b).data()).map(|(gv, bv)| gv * bv).collect();
                let gb: Vec<f64> =
                    g.data().iter().zip(self.val(*a).data()).map(|(gv, av)| gv * av).collect();
                Self::accumulate(grads, *a, Tensor::new(shape_of(*a), ga).expect("shape"));
                Self::accumulate(grads, *b, Tensor::new(shape_of(*b), gb).expect("shape"));
            }
            Op::Neg { x } => {
                let gx = g.data().iter().map(|v| -v).collect();
                Self::accumulate(grads, *x, Tensor::new(shape_of(*x), gx).expect("shape"));
            }
            Op::Scale { x, c } => {
                let gx = g.data().iter().map(|v| c * v).collect();
                Self::accumulate(grads, *x, Tensor::new(shape_of(*x), gx).expect("shape"));
            }
            Op::AddScalar { x } => {
                Self::accumulate(grads, *x, g.clone());
            }
            Op::Exp { x } => {
                let out = self.val(idx);
                let gx = g.data().iter().zip(out.data()).map(|(gv, ov)| gv * ov).collect();
                Self::accumulate(grads, *x, Tensor::new(shape_of(*x), gx).expect("shape"));
            }
            Op::Ln { x } => {
                let gx = g.data().iter().zip(self.val(*x).data()).map(|(gv, xv)| gv / xv).collect();
                Self::accumulate(grads, *x, Tensor::new(shape_of(*x), gx).expect("shape"));
            }
            Op::Sqrt { x } => {
                let out = self.val(idx);
                let gx =
                    g.data().iter().zip(out.data()).map(|(gv, ov)| gv / (2.0 * ov)).collect();
                Self::accumulate(grads, *x, Tensor::new(shape_of(*x), gx).expect("shape"));
            }
            Op::Tanh { x } => {
                let out = self.val(idx);
                let gx = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, ov)| gv * (1.0 - ov * ov))
                    .collect();
                Self::accumulate(grads, *x, Tensor::new(shape_of(*x), gx).expect("shape"));
            }
            Op::Softplus { x } => {
                let gx = g
                    .data()
                    .iter()
                    .zip(self.val(*x).data())
                    .map(|(gv, xv)| gv * sigmoid(*xv))
                    .collect();
                Self::accumulate(grads, *x, Tensor::new(shape_of(*x), gx).expect("shape"));
            }
            Op::Powi { x, n } => {
                let n = *n;
                let gx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.val(*x).data())
                    .map(|(gv, xv)| {
                        if n == 0 {
                            0.0
                        } else {
                            gv * (n as f64) * xv.powi(n as i32 - 1)
                        }
                    })
                    .collect();
                Self::accumulate(grads, *x, Tensor::new(shape_of(*x), gx).expect("shape"));
            }
            Op::ReplaceNonFinite { x } => {
                let gx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.val(*x).data())
                    .map(|(gv, xv)| if xv.is_finite() { *gv } else { 0.0 })
                    .collect();
                Self::accumulate(grads, *x, Tensor::new(shape_of(*x), gx).expect("shape"));
            }
            Op::AddRow { x, row } => {
                Self::accumulate(grads, *x, g.clone());
                let m = self.val(*row).numel();
                let n = self.val(*x).rows();
                let mut gr = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        gr[j] += g.data()[i * m + j];
                    }
                }
                Self::accumulate(grads, *row, Tensor::from_vec(gr));
            }
            Op::MulRow { x, row } => {
                let xv = self.val(*x);
                let rv = self.val(*row);
                let (n, m) = (xv.rows(), xv.cols());
                let mut gx = vec![0.0; n * m];
                let mut gr = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        let gv = g.data()[i * m + j];
                        gx[i * m + j] = gv * rv.data()[j];
                        gr[j] += gv * xv.data()[i * m + j];
                    }
                }
                Self::accumulate(grads, *x, Tensor::from_shape(n, m, gx).expect("shape"));
                Self::accumulate(grads, *row, Tensor::from_vec(gr));
            }
            Op::SubCol { x, col } => {
                Self::accumulate(grads, *x, g.clone());
                let (n, m) = (self.val(*x).rows(), self.val(*x).cols());
                let mut gc = vec![0.0; n];
                for i in 0..n {
                    for j in 0..m {
                        gc[i] -= g.data()[i * m + j];
                    }
                }
                Self::accumulate(grads, *col, Tensor::from_vec(gc));
            }
            Op::Matmul { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // dA = g @ B^T, dB = A^T @ g
                let mut ga = vec![0.0; m * k];
                dgemm_rowmajor(m, n, k, g.data(), bv.data(), true, &mut ga);
                let at = linalg::transpose(av);
                let mut gb = vec![0.0; k * n];
                dgemm_rowmajor(k, m, n, at.data(), g.data(), false, &mut gb);
                Self::accumulate(grads, *a, Tensor::from_shape(m, k, ga).expect("shape"));
                Self::accumulate(grads, *b, Tensor::from_shape(k, n, gb).expect("shape"));
            }
            Op::MatmulTB { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                // out = A @ B^T: dA = g @ B, dB = g^T @ A
                let mut ga = vec![0.0; m * k];
                dgemm_rowmajor(m, n, k, g.data(), bv.data(), false, &mut ga);
                let gt = linalg::transpose(g);
                let mut gb = vec![0.0; n * k];
                dgemm_rowmajor(n, m, k, gt.data(), av.data(), false, &mut gb);
                Self::accumulate(grads, *a, Tensor::from_shape(m, k, ga).expect("shape"));
                Self::accumulate(grads, *b, Tensor::from_shape(n, k, gb).expect("shape"));
            }
            Op::Sum { x } => {
                let s = g.data()[0];
                let xv = self.val(*x);
                let gx = vec![s; xv.numel()];
                Self::accumulate(grads, *x, Tensor::new(shape_of(*x), gx).expect("shape"));
            }
            Op::Mean { x } => {
                let xv = self.val(*x);
                let s = g.data()[0] / xv.numel().max(1) as f64;
                let gx = vec![s; xv.numel()];
                Self::accumulate(grads, *x, Tensor::new(shape_of(*x), gx).expect("shape"));
            }
            Op::SumRows { x } => {
                let xv = self.val(*x);
                let (n, m) = (xv.rows(), xv.cols());
                let mut gx = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        gx[i * m + j] = g.data()[i];
                    }
                }
                Self::accumulate(grads, *x, Tensor::from_shape(n, m, gx).expect("shape"));
            }
            Op::Reshape { x } => {
                let t = Tensor::new(shape_of(*x), g.data().to_vec()).expect("shape");
                Self::accumulate(grads, *x, t);
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.val(*x);
                let (n, m) = (xv.rows(), xv.cols());
                let mut gx = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..*len {
                        gx[i * m + start + j] = g.data()[i * len + j];
                    }
                }
                Self::accumulate(grads, *x, Tensor::from_shape(n, m, gx).expect("shape"));
            }
            Op::ConcatCols { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (n, p, q) = (av.rows(), av.cols(), bv.cols());
                let mut ga = vec![0.0; n * p];
                let mut gb = vec![0.0; n * q];
                for i in 0..n {
                    ga[i * p..(i + 1) * p].copy_from_slice(&g.data()[i * (p + q)..i * (p + q) + p]);
                    gb[i * q..(i + 1) * q]
                        .copy_from_slice(&g.data()[i * (p + q) + p..(i + 1) * (p + q)]);
                }
                Self::accumulate(grads, *a, Tensor::from_shape(n, p, ga).expect("shape"));
                Self::accumulate(grads, *b, Tensor::from_shape(n, q, gb).expect("shape"));
            }
            Op::EmbedDiag { v, cols, row_off, col_off, .. } => {
                let len = self.val(*v).numel();
                let mut gv = vec![0.0; len];
                for k in 0..len {
                    gv[k] = g.data()[(row_off + k) * cols + col_off + k];
                }
                Self::accumulate(grads, *v, Tensor::from_vec(gv));
            }
            Op::SolveTri { m, rhs, lower, unit } => {
                let mv = self.val(*m);
                let d = mv.rows();
                let out = self.val(idx);
                let n = out.rows();
                let mut g_rhs = vec![0.0; n * d];
                let mut g_m = vec![0.0; d * d];
                for i in 0..n {
                    // w = M^{-T} g_i; grad_rhs_i = w; grad_M -= w (x) out_i
                    let w = linalg::tri_solve(
                        mv.data(),
                        d,
                        &g.data()[i * d..(i + 1) * d],
                        *lower,
                        *unit,
                        true,
                    );
                    g_rhs[i * d..(i + 1) * d].copy_from_slice(&w);
                    let oi = out.row(i);
                    for r in 0..d {
                        for c in 0..d {
                            g_m[r * d + c] -= w[r] * oi[c];
                        }
                    }
                }
                Self::accumulate(grads, *rhs, Tensor::from_shape(n, d, g_rhs).expect("shape"));
                Self::accumulate(grads, *m, Tensor::from_shape(d, d, g_m).expect("shape"));
            }
            Op::TriInverse { m, .. } => {
                let c = self.val(idx); // C = M^{-1}
                let d = c.rows();
                let ct = linalg::transpose(c);
                // grad_M = -C^T @ g @ C^T
                let mut tmp = vec![0.0; d * d];
                dgemm_rowmajor(d, d, d, ct.data(), g.data(), false, &mut tmp);
                let mut gm = vec![0.0; d * d];
                dgemm_rowmajor(d, d, d, &tmp, ct.data(), false, &mut gm);
                gm.iter_mut().for_each(|v| *v = -*v);
                Self::accumulate(grads, *m, Tensor::from_shape(d, d, gm).expect("shape"));
            }
        }
    }

    // ── Forward mode ─────────────────────────────────────────────────

    /// Forward-mode directional derivative of `target` given tangent seeds
    /// at leaves. Unseeded leaves carry zero tangents.
    pub fn jvp(&self, seeds: &[(VarId, Tensor)], target: VarId) -> Result<Tensor> {
        let mut tangents: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, t) in seeds {
            if !t.same_shape(self.val(id.0)) {
                return Err(Error::ShapeMismatch {
                    op: "jvp",
                    lhs: self.val(id.0).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            tangents[id.0] = Some(t.clone());
        }
        for idx in 0..self.nodes.len() {
            if let Some(t) = self.tangent_op(idx, &tangents) {
                tangents[idx] = Some(t);
            }
        }
        Ok(tangents[target.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.val(target.0).shape())))
    }

    #[allow(clippy::too_many_lines)]
    fn tangent_op(&self, idx: usize, tangents: &[Option<Tensor>]) -> Option<Tensor> {
        let tan = |i: usize| tangents[i].as_ref();
        let zeros_like = |i: usize| Tensor::zeros(self.val(i).shape());
        match &self.nodes[idx].op {
            Op::Leaf => None,
            Op::Add { a, b } => match (tan(*a), tan(*b)) {
                (None, None) => None,
                (ta, tb) => {
                    let ta = ta.cloned().unwrap_or_else(|| zeros_like(*a));
                    let tb = tb.cloned().unwrap_or_else(|| zeros_like(*b));
                    let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
                    Some(Tensor::new(ta.shape().to_vec(), data).expect("shape"))
                }
            },
            Op::Sub { a, b } => match (tan(*a), tan(*b)) {
                (None, None) => None,
                (ta, tb) => {
                    let ta = ta.cloned().unwrap_or_else(|| zeros_like(*a));
                    let tb = tb.cloned().unwrap_or_else(|| zeros_like(*b));
                    let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
                    Some(Tensor::new(ta.shape().to_vec(), data).expect("shape"))
                }
            },
            Op::Mul { a, b } => {
                if tan(*a).is_none() && tan(*b).is_none() {
                    return None;
                }
                let (av, bv) = (self.val(*a), self.val(*b));
                let ta = tan(*a).cloned().unwrap_or_else(|| zeros_like(*a));
                let tb = tan(*b).cloned().unwrap_or_else(|| zeros_like(*b));
                let data = (0..av.numel())
                    .map(|i| ta.data()[i] * bv.data()[i] + av.data()[i] * tb.data()[i])
                    .collect();
                Some(Tensor::new(av.shape().to_vec(), data).expect("shape"))
            }
            Op::Neg { x } => tan(*x).map(|t| {
                Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| -v).collect())
                    .expect("shape")
            }),
            Op::Scale { x, c } => tan(*x).map(|t| {
                Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| c * v).collect())
                    .expect("shape")
            }),
            Op::AddScalar { x } => tan(*x).cloned(),
            Op::Exp { x } => tan(*x).map(|t| {
                let out = self.val(idx);
                let data = t.data().iter().zip(out.data()).map(|(tv, ov)| tv * ov).collect();
                Tensor::new(t.shape().to_vec(), data).expect("shape")
            }),
            Op::Ln { x } => tan(*x).map(|t| {
                let xv = self.val(*x);
                let data = t.data().iter().zip(xv.data()).map(|(tv, xv)| tv / xv).collect();
                Tensor::new(t.shape().to_vec(), data).expect("shape")
            }),
            Op::Sqrt { x } => tan(*x).map(|t| {
                let out = self.val(idx);
                let data =
                    t.data().iter().zip(out.data()).map(|(tv, ov)| tv / (2.0 * ov)).collect();
                Tensor::new(t.shape().to_vec(), data).expect("shape")
            }),
            Op::Tanh { x } => tan(*x).map(|t| {
                let out = self.val(idx);
                let data = t
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(tv, ov)| tv * (1.0 - ov * ov))
                    .collect();
                Tensor::new(t.shape().to_vec(), data).expect("shape")
            }),
            Op::Softplus { x } => tan(*x).map(|t| {
                let xv = self.val(*x);
                let data =
                    t.data().iter().zip(xv.data()).map(|(tv, xv)| tv * sigmoid(*xv)).collect();
                Tensor::new(t.shape().to_vec(), data).expect("shape")
            }),
            Op::Powi { x, n } => tan(*x).map(|t| {
                let n = *n;
                let xv = self.val(*x);
                let data = t
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(tv, xv)| {
                        if n == 0 {
                            0.0
                        } else {
                            tv * (n as f64) * xv.powi(n as i32 - 1)
                        }
                    })
                    .collect();
                Tensor::new(t.shape().to_vec(), data).expect("shape")
            }),
            Op::ReplaceNonFinite { x } => tan(*x).map(|t| {
                let xv = self.val(*x);
                let data = t
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(tv, xv)| if xv.is_finite() { *tv } else { 0.0 })
                    .collect();
                Tensor::new(t.shape().to_vec(), data).expect("shape")
            }),
            Op::AddRow { x, row } => {
                if tan(*x).is_none() && tan(*row).is_none() {
                    return None;
                }
                let xv = self.val(*x);
                let (n, m) = (xv.rows(), xv.cols());
                let tx = tan(*x).cloned().unwrap_or_else(|| zeros_like(*x));
                let tr = tan(*row).cloned().unwrap_or_else(|| zeros_like(*row));
                let mut data = tx.into_data();
                for i in 0..n {
                    for j in 0..m {
                        data[i * m + j] += tr.data()[j];
                    }
                }
                Some(Tensor::from_shape(n, m, data).expect("shape"))
            }
            Op::MulRow { x, row } => {
                if tan(*x).is_none() && tan(*row).is_none() {
                    return None;
                }
                let (xv, rv) = (self.val(*x), self.val(*row));
                let (n, m) = (xv.rows(), xv.cols());
                let tx = tan(*x).cloned().unwrap_or_else(|| zeros_like(*x));
                let tr = tan(*row).cloned().unwrap_or_else(|| zeros_like(*row));
                let mut data = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        data[i * m + j] = tx.data()[i * m + j] * rv.data()[j]
                            + xv.data()[i * m + j] * tr.data()[j];
                    }
                }
                Some(Tensor::from_shape(n, m, data).expect("shape"))
            }
            Op::SubCol { x, col } => {
                if tan(*x).is_none() && tan(*col).is_none() {
                    return None;
                }
                let xv = self.val(*x);
                let (n, m) = (xv.rows(), xv.cols());
                let tx = tan(*x).cloned().unwrap_or_else(|| zeros_like(*x));
                let tc = tan(*col).cloned().unwrap_or_else(|| zeros_like(*col));
                let mut data = tx.into_data();
                for i in 0..n {
                    for j in 0..m {
                        data[i * m + j] -= tc.data()[i];
                    }
                }
                Some(Tensor::from_shape(n, m, data).expect("shape"))
            }
            Op::Matmul { a, b } => {
                if tan(*a).is_none() && tan(*b).is_none() {
                    return None;
                }
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut out = vec![0.0; m * n];
                if let Some(ta) = tan(*a) {
                    dgemm_rowmajor(m, k, n, ta.data(), bv.data(), false, &mut out);
                }
                if let Some(tb) = tan(*b) {
                    let mut out2 = vec![0.0; m * n];
                    dgemm_rowmajor(m, k, n, av.data(), tb.data(), false, &mut out2);
                    for (o, v) in out.iter_mut().zip(out2) {
                        *o += v;
                    }
                }
                Some(Tensor::from_shape(m, n, out).expect("shape"))
            }
            Op::MatmulTB { a, b } => {
                if tan(*a).is_none() && tan(*b).is_none() {
                    return None;
                }
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                let mut out = vec![0.0; m * n];
                if let Some(ta) = tan(*a) {
                    dgemm_rowmajor(m, k, n, ta.data(), bv.data(), true, &mut out);
                }
                if let Some(tb) = tan(*b) {
                    let mut out2 = vec![0.0; m * n];
                    dgemm_rowmajor(m, k, n, av.data(), tb.data(), true, &mut out2);
                    for (o, v) in out.iter_mut().zip(out2) {
                        *o += v;
                    }
                }
                Some(Tensor::from_shape(m, n, out).expect("shape"))
            }
            Op::Sum { x } => tan(*x).map(|t| Tensor::scalar(t.data().iter().sum())),
            Op::Mean { x } => tan(*x).map(|t| {
                Tensor::scalar(t.data().iter().sum::<f64>() / t.numel().max(1) as f64)
            }),
            Op::SumRows { x } => tan(*x).map(|t| {
                let (n, _m) = (t.rows(), t.cols());
                Tensor::from_vec((0..n).map(|i| t.row(i).iter().sum()).collect())
            }),
            Op::Reshape { x } => tan(*x).map(|t| {
                Tensor::new(self.val(idx).shape().to_vec(), t.data().to_vec()).expect("shape")
            }),
            Op::SliceCols { x, start, len } => tan(*x).map(|t| {
                let (n, m) = (t.rows(), t.cols());
                let mut data = Vec::with_capacity(n * len);
                for i in 0..n {
                    data.extend_from_slice(&t.data()[i * m + start..i * m + start + len]);
                }
                Tensor::from_shape(n, *len, data).expect("shape")
            }),
            Op::ConcatCols { a, b } => {
                if tan(*a).is_none() && tan(*b).is_none() {
                    return None;
                }
                let ta = tan(*a).cloned().unwrap_or_else(|| zeros_like(*a));
                let tb = tan(*b).cloned().unwrap_or_else(|| zeros_like(*b));
                let (n, p, q) = (ta.rows(), ta.cols(), tb.cols());
                let mut data = Vec::with_capacity(n * (p + q));
                for i in 0..n {
                    data.extend_from_slice(ta.row(i));
                    data.extend_from_slice(tb.row(i));
                }
                Some(Tensor::from_shape(n, p + q, data).expect("shape"))
            }
            Op::EmbedDiag { v, rows, cols, row_off, col_off } => tan(*v).map(|t| {
                let mut data = vec![0.0; rows * cols];
                for k in 0..t.numel() {
                    data[(row_off + k) * cols + col_off + k] = t.data()[k];
                }
                Tensor::from_shape(*rows, *cols, data).expect("shape")
            }),
            Op::SolveTri { m, rhs, lower, unit } => {
                if tan(*m).is_none() && tan(*rhs).is_none() {
                    return None;
                }
                let mv = self.val(*m);
                let d = mv.rows();
                let out = self.val(idx);
                let n = out.rows();
                let tm = tan(*m);
                let trhs = tan(*rhs);
                let mut data = Vec::with_capacity(n * d);
                for i in 0..n {
                    // o_dot = M^{-1} (rhs_dot - M_dot o)
                    let mut r: Vec<f64> = match trhs {
                        Some(t) => t.row(i).to_vec(),
                        None => vec![0.0; d],
                    };
                    if let Some(tm) = tm {
                        let oi = out.row(i);
                        // Only the active triangle of M_dot acts.
                        for row in 0..d {
                            let (lo, hi) = if *lower { (0, row + 1) } else { (row, d) };
                            for col in lo..hi {
                                if *unit && col == row {
                                    continue;
                                }
                                r[row] -= tm.data()[row * d + col] * oi[col];
                            }
                        }
                    }
                    data.extend(linalg::tri_solve(mv.data(), d, &r, *lower, *unit, false));
                }
                Some(Tensor::from_shape(n, d, data).expect("shape"))
            }
            Op::TriInverse { m, lower, unit } => tan(*m).map(|tm| {
                let c = self.val(idx);
                let d = c.rows();
                // C_dot = -C M_dot C, with M_dot masked to the active triangle.
                let mut masked = vec![0.0; d * d];
                for row in 0..d {
                    let (lo, hi) = if *lower { (0, row + 1) } else { (row, d) };
                    for col in lo..hi {
                        if *unit && col == row {
                            continue;
                        }
                        masked[row * d + col] = tm.data()[row * d + col];
                    }
                }
                let mut tmp = vec![0.0; d * d];
                dgemm_rowmajor(d, d, d, c.data(), &masked, false, &mut tmp);
                let mut out = vec![0.0; d * d];
                dgemm_rowmajor(d, d, d, &tmp, c.data(), false, &mut out);
                out.iter_mut().for_each(|v| *v = -*v);
                Tensor::from_shape(d, d, out).expect("shape")
            }),
        }
    }
}
