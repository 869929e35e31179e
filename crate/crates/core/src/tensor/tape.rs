//! Wengert tape: records operations during a forward pass, replays them in
//! reverse to compute gradients.
//!
//! Nodes only reference earlier nodes, so tape order is already topological.
//! Parameters are introduced with [`Tape::param`] and deduplicated by name;
//! [`Tape::backward`] returns a gradient for every registered parameter,
//! zero-filled for those the loss does not reach.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::{Real, Tensor};
use crate::{CoreError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Reduction / normalization axis for 2-D tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

pub type GradMap = BTreeMap<String, Tensor>;

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    AddScalar(Var),
    MulScalar(Var, Real),
    Relu(Var),
    Sqrt(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Softmax(Var, Axis),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: Real },
    Dropout { x: Var, mask: Vec<Real> },
    SumAll(Var),
    MeanAll(Var),
    AddRow(Var, Var),
    MulColVec(Var, Var),
    BroadcastRow(Var, usize),
    Reshape(Var),
    SliceRows(Var, Range<usize>),
    SliceCols(Var, Range<usize>),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    SelectRows(Var, Vec<usize>),
    ScatterRows { base: Var, rows: Var, indices: Vec<usize> },
    NormalizeRows(Var),
    RowDot(Var, Var),
    RowCross(Var, Var),
    RotFromCols(Var, Var, Var),
    RotCompose(Var, Var),
    RotApply(Var, Var),
    UnfoldRows(Var, usize),
    PoolRows(Var, usize),
    RepeatRows(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording context for one computation graph.
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    training: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), training: false }
    }

    /// Enables dropout. Everything else is unaffected.
    pub fn training() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), training: true }
    }

    pub fn is_training(&self) -> bool {
        self.training
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Introduce a constant leaf; no gradient is tracked for it.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf)
    }

    /// Introduce a named parameter leaf. Re-registering a name yields the
    /// original handle, so shared weights accumulate one gradient.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some((_, id)) = self.params.iter().find(|(n, _)| n == name) {
            return Var(*id);
        }
        let v = self.push(t.clone(), Op::Param);
        self.params.push((name.to_string(), v.0));
        v
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        match t.shape().len() {
            2 => Ok((t.shape()[0], t.shape()[1])),
            d => Err(CoreError::Dimension {
                op,
                detail: format!("expected rank-2 tensor, got rank {d}"),
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(CoreError::Dimension {
                op,
                detail: format!(
                    "shapes {:?} and {:?} differ",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        Ok(())
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = self.value(a).with_data(data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let value = self.value(a).with_data(data)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = self.value(a).with_data(data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| -v);
        self.push(value, Op::Neg(a))
    }

    pub fn add_scalar(&mut self, a: Var, s: Real) -> Var {
        let value = self.value(a).map(|v| v + s);
        self.push(value, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Real) -> Var {
        let value = self.value(a).map(|v| v * s);
        self.push(value, Op::MulScalar(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu(a))
    }

    /// Elementwise square root. Inputs must be nonnegative; callers add an
    /// epsilon beforehand when the argument can reach zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(Real::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    // ── matrix products ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(CoreError::Dimension {
                op: "matmul",
                detail: format!("inner dimensions {k} and {k2} differ"),
            });
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b)))
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(CoreError::Dimension {
                op: "matmul_nt",
                detail: format!("inner dimensions {k} and {k2} differ"),
            });
        }
        let data = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMulNT(a, b)))
    }

    // ── normalization ────────────────────────────────────────────────

    /// Max-subtracted softmax along `axis` of a rank-2 tensor (rank-1 values
    /// are treated as a single row).
    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() > 2 || t.numel() == 0 {
            return Err(CoreError::Dimension {
                op: "softmax",
                detail: format!("expected rank 1 or 2, got shape {:?}", t.shape()),
            });
        }
        let (m, n) = (t.rows(), t.cols());
        let mut data = t.data().to_vec();
        for lane in lanes(m, n, axis) {
            let hi = lane.clone().map(|i| data[i]).fold(Real::NEG_INFINITY, Real::max);
            let mut sum = 0.0;
            for i in lane.clone() {
                data[i] = (data[i] - hi).exp();
                sum += data[i];
            }
            for i in lane {
                data[i] /= sum;
            }
        }
        let value = t.with_data(data)?;
        Ok(self.push(value, Op::Softmax(a, axis)))
    }

    /// Layer normalization over the last axis, then affine gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: Real) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        for (v, label) in [(gain, "gain"), (bias, "bias")] {
            if self.value(v).numel() != n {
                return Err(CoreError::Dimension {
                    op: "layer_norm",
                    detail: format!("{label} has {} values, rows have {n}", self.value(v).numel()),
                });
            }
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let t = self.value(x);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &t.data()[r * n..(r + 1) * n];
            let (mean, inv_std) = row_moments(row, eps);
            for c in 0..n {
                out[r * n + c] = (row[c] - mean) * inv_std * g[c] + b[c];
            }
        }
        let value = t.with_data(out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Train-mode-only inverted-scale Bernoulli dropout. Identity in eval
    /// mode or at rate zero.
    pub fn dropout(&mut self, x: Var, rate: Real, rng: &mut ChaCha8Rng) -> Var {
        if !self.training || rate == 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask: Vec<Real> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < keep as f64 { 1.0 / keep } else { 0.0 })
            .collect();
        let data = zip_map(self.value(x).data(), &mask, |v, m| v * m);
        let value = self.value(x).with_data(data).expect("same shape");
        self.push(value, Op::Dropout { x, mask })
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: Real = t.data().iter().sum();
        let m = s / t.numel() as Real;
        self.push(Tensor::scalar(m), Op::MeanAll(a))
    }

    // ── broadcasting (the shapes the denoiser needs) ─────────────────

    /// Add a rank-1 row vector to every row of a rank-2 tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        if self.value(row).numel() != n {
            return Err(CoreError::Dimension {
                op: "add_row",
                detail: format!("row has {} values, matrix rows {n}", self.value(row).numel()),
            });
        }
        let r = self.value(row).data().to_vec();
        let t = self.value(a);
        let mut data = t.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += r[j];
            }
        }
        let value = t.with_data(data)?;
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    /// Multiply each row of `a` by the matching entry of an `[m,1]` column.
    pub fn mul_col_vec(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "mul_col_vec")?;
        if self.value(col).numel() != m {
            return Err(CoreError::Dimension {
                op: "mul_col_vec",
                detail: format!("column has {} values, matrix has {m} rows", self.value(col).numel()),
            });
        }
        let c = self.value(col).data().to_vec();
        let t = self.value(a);
        let mut data = t.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= c[i];
            }
        }
        let value = t.with_data(data)?;
        Ok(self.push(value, Op::MulColVec(a, col)))
    }

    /// Tile a rank-1 vector into `m` identical rows.
    pub fn broadcast_row(&mut self, row: Var, m: usize) -> Result<Var> {
        let t = self.value(row);
        if t.shape().len() != 1 {
            return Err(CoreError::Dimension {
                op: "broadcast_row",
                detail: format!("expected rank-1 vector, got shape {:?}", t.shape()),
            });
        }
        let n = t.numel();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(t.data());
        }
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::BroadcastRow(row, m)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(CoreError::Dimension {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", t.shape(), shape),
            });
        }
        let value = Tensor::new(shape, t.data().to_vec())?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    // ── slicing and assembly ─────────────────────────────────────────

    pub fn slice_rows(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_rows")?;
        if range.end > m || range.start >= range.end {
            return Err(CoreError::Dimension {
                op: "slice_rows",
                detail: format!("range {range:?} invalid for {m} rows"),
            });
        }
        let data = self.value(a).data()[range.start * n..range.end * n].to_vec();
        let value = Tensor::new(vec![range.len(), n], data)?;
        Ok(self.push(value, Op::SliceRows(a, range)))
    }

    pub fn slice_cols(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if range.end > n || range.start >= range.end {
            return Err(CoreError::Dimension {
                op: "slice_cols",
                detail: format!("range {range:?} invalid for {n} columns"),
            });
        }
        let w = range.len();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + range.start..i * n + range.end]);
        }
        let value = Tensor::new(vec![m, w], data)?;
        Ok(self.push(value, Op::SliceCols(a, range)))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, n) = self.dims2(a, "concat_rows")?;
        let (mb, nb) = self.dims2(b, "concat_rows")?;
        if n != nb {
            return Err(CoreError::Dimension {
                op: "concat_rows",
                detail: format!("widths {n} and {nb} differ"),
            });
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(vec![ma + mb, n], data)?;
        Ok(self.push(value, Op::ConcatRows(a, b)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, na) = self.dims2(a, "concat_cols")?;
        let (mb, nb) = self.dims2(b, "concat_cols")?;
        if m != mb {
            return Err(CoreError::Dimension {
                op: "concat_cols",
                detail: format!("row counts {m} and {mb} differ"),
            });
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            data.extend_from_slice(&da[i * na..(i + 1) * na]);
            data.extend_from_slice(&db[i * nb..(i + 1) * nb]);
        }
        let value = Tensor::new(vec![m, na + nb], data)?;
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    /// Gather rows by index; duplicate indices are allowed and their
    /// gradients accumulate.
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(a, "select_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(CoreError::Dimension {
                op: "select_rows",
                detail: format!("index {bad} out of range for {m} rows"),
            });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(vec![indices.len(), n], data)?;
        Ok(self.push(value, Op::SelectRows(a, indices.to_vec())))
    }

    /// Overwrite the rows of `base` listed in `indices` with the rows of
    /// `rows` (k-th index receives the k-th row).
    pub fn scatter_rows(&mut self, base: Var, rows: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(base, "scatter_rows")?;
        let (l, nr) = self.dims2(rows, "scatter_rows")?;
        if nr != n {
            return Err(CoreError::Dimension {
                op: "scatter_rows",
                detail: format!("row widths {nr} and {n} differ"),
            });
        }
        if l != indices.len() {
            return Err(CoreError::Dimension {
                op: "scatter_rows",
                detail: format!("{l} rows for {} indices", indices.len()),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(CoreError::Dimension {
                op: "scatter_rows",
                detail: format!("index {bad} out of range for {m} rows"),
            });
        }
        let mut data = self.value(base).data().to_vec();
        let src = self.value(rows).data();
        for (k, &i) in indices.iter().enumerate() {
            data[i * n..(i + 1) * n].copy_from_slice(&src[k * n..(k + 1) * n]);
        }
        let value = self.value(base).with_data(data)?;
        Ok(self.push(value, Op::ScatterRows { base, rows, indices: indices.to_vec() }))
    }

    // ── rowwise geometry (rotation matrices stored as 9 columns) ─────

    /// Normalize each row to unit length.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "normalize_rows")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let norm = row_norm(row);
            for j in 0..n {
                data[i * n + j] = row[j] / norm;
            }
        }
        let value = self.value(a).with_data(data)?;
        Ok(self.push(value, Op::NormalizeRows(a)))
    }

    /// Rowwise dot product, producing an `[m,1]` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_dot")?;
        let (m, n) = self.dims2(a, "row_dot")?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; m];
        for i in 0..m {
            for j in 0..n {
                data[i] += da[i * n + j] * db[i * n + j];
            }
        }
        Ok(self.push(Tensor::new(vec![m, 1], data)?, Op::RowDot(a, b)))
    }

    /// Rowwise 3-vector cross product.
    pub fn row_cross(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_cross")?;
        let (m, n) = self.dims2(a, "row_cross")?;
        if n != 3 {
            return Err(CoreError::Dimension {
                op: "row_cross",
                detail: format!("rows must have width 3, got {n}"),
            });
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; m * 3];
        for i in 0..m {
            kernels::cross3(&da[i * 3..i * 3 + 3], &db[i * 3..i * 3 + 3], &mut data[i * 3..i * 3 + 3]);
        }
        let value = self.value(a).with_data(data)?;
        Ok(self.push(value, Op::RowCross(a, b)))
    }

    /// Assemble per-row 3x3 rotation matrices (row-major, 9 columns) from
    /// three `[m,3]` column tensors.
    pub fn rot_from_cols(&mut self, x: Var, y: Var, z: Var) -> Result<Var> {
        self.same_shape(x, y, "rot_from_cols")?;
        self.same_shape(x, z, "rot_from_cols")?;
        let (m, n) = self.dims2(x, "rot_from_cols")?;
        if n != 3 {
            return Err(CoreError::Dimension {
                op: "rot_from_cols",
                detail: format!("columns must have width 3, got {n}"),
            });
        }
        let (dx, dy, dz) = (self.value(x).data(), self.value(y).data(), self.value(z).data());
        let mut data = vec![0.0; m * 9];
        for i in 0..m {
            for r in 0..3 {
                data[i * 9 + r * 3] = dx[i * 3 + r];
                data[i * 9 + r * 3 + 1] = dy[i * 3 + r];
                data[i * 9 + r * 3 + 2] = dz[i * 3 + r];
            }
        }
        Ok(self.push(Tensor::new(vec![m, 9], data)?, Op::RotFromCols(x, y, z)))
    }

    /// Rowwise 3x3 matrix product of `[m,9]` tensors.
    pub fn rot_compose(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "rot_compose")?;
        let (m, n) = self.dims2(a, "rot_compose")?;
        if n != 9 {
            return Err(CoreError::Dimension {
                op: "rot_compose",
                detail: format!("rows must have width 9, got {n}"),
            });
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; m * 9];
        for i in 0..m {
            kernels::mat3_mul(&da[i * 9..(i + 1) * 9], &db[i * 9..(i + 1) * 9], &mut data[i * 9..(i + 1) * 9]);
        }
        let value = self.value(a).with_data(data)?;
        Ok(self.push(value, Op::RotCompose(a, b)))
    }

    /// Rotate each `[m,3]` row by the matching `[m,9]` matrix.
    pub fn rot_apply(&mut self, a: Var, v: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "rot_apply")?;
        let (mv, nv) = self.dims2(v, "rot_apply")?;
        if n != 9 || nv != 3 || m != mv {
            return Err(CoreError::Dimension {
                op: "rot_apply",
                detail: format!("expected [m,9] and [m,3], got [{m},{n}] and [{mv},{nv}]"),
            });
        }
        let (da, dv) = (self.value(a).data(), self.value(v).data());
        let mut data = vec![0.0; m * 3];
        for i in 0..m {
            kernels::mat3_apply(&da[i * 9..(i + 1) * 9], &dv[i * 3..i * 3 + 3], &mut data[i * 3..i * 3 + 3]);
        }
        Ok(self.push(Tensor::new(vec![m, 3], data)?, Op::RotApply(a, v)))
    }

    // ── temporal convolution support ─────────────────────────────────

    /// Same-padded im2col over rows: output row `i` is the concatenation of
    /// rows `i-k/2 ..= i+k/2`, zero outside. `kernel` must be odd.
    pub fn unfold_rows(&mut self, a: Var, kernel: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "unfold_rows")?;
        if kernel % 2 == 0 || kernel == 0 {
            return Err(CoreError::Dimension {
                op: "unfold_rows",
                detail: format!("kernel must be odd, got {kernel}"),
            });
        }
        let half = kernel / 2;
        let src = self.value(a).data();
        let mut data = vec![0.0; m * kernel * n];
        for i in 0..m {
            for t in 0..kernel {
                let j = i as isize + t as isize - half as isize;
                if j < 0 || j >= m as isize {
                    continue;
                }
                let j = j as usize;
                data[(i * kernel + t) * n..(i * kernel + t + 1) * n]
                    .copy_from_slice(&src[j * n..(j + 1) * n]);
            }
        }
        let value = Tensor::new(vec![m, kernel * n], data)?;
        Ok(self.push(value, Op::UnfoldRows(a, kernel)))
    }

    /// Non-overlapping mean pooling over groups of `stride` rows.
    pub fn pool_rows(&mut self, a: Var, stride: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "pool_rows")?;
        if stride == 0 || m % stride != 0 {
            return Err(CoreError::Dimension {
                op: "pool_rows",
                detail: format!("{m} rows not divisible by stride {stride}"),
            });
        }
        let src = self.value(a).data();
        let mo = m / stride;
        let mut data = vec![0.0; mo * n];
        for i in 0..mo {
            for s in 0..stride {
                for j in 0..n {
                    data[i * n + j] += src[(i * stride + s) * n + j];
                }
            }
            for j in 0..n {
                data[i * n + j] /= stride as Real;
            }
        }
        let value = Tensor::new(vec![mo, n], data)?;
        Ok(self.push(value, Op::PoolRows(a, stride)))
    }

    /// Repeat each row `times` consecutive times (nearest-neighbor upsample).
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "repeat_rows")?;
        if times == 0 {
            return Err(CoreError::Dimension { op: "repeat_rows", detail: "times is zero".into() });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * times * n);
        for i in 0..m {
            for _ in 0..times {
                data.extend_from_slice(&src[i * n..(i + 1) * n]);
            }
        }
        let value = Tensor::new(vec![m * times, n], data)?;
        Ok(self.push(value, Op::RepeatRows(a, times)))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Returns the gradient for every
    /// parameter registered on this tape; parameters the loss does not reach
    /// get a zero gradient.
    pub fn backward(&self, loss: Var) -> Result<GradMap> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(CoreError::NotScalar { op: "backward", numel: lt.numel() });
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        let mut param_grads: GradMap = GradMap::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Param => {
                    let (name, _) = self
                        .params
                        .iter()
                        .find(|(_, pid)| *pid == id)
                        .expect("param node registered");
                    let t = Tensor::new(self.nodes[id].value.shape().to_vec(), g)?;
                    param_grads.insert(name.clone(), t);
                }
                op => self.backward_op(id, op, &g, &mut grads),
            }
        }
        for (name, id) in &self.params {
            param_grads
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(self.nodes[*id].value.shape()));
        }
        Ok(param_grads)
    }

    fn backward_op(&self, id: usize, op: &Op, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let acc = |grads: &mut [Option<Vec<Real>>], v: Var, delta: Vec<Real>| {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(&delta) {
                        *e += d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };
        match op {
            Op::Leaf | Op::Param => unreachable!("handled by caller"),
            Op::Add(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                acc(grads, *a, zip_map(g, self.value(*b).data(), |x, y| x * y));
                acc(grads, *b, zip_map(g, self.value(*a).data(), |x, y| x * y));
            }
            Op::Neg(a) => acc(grads, *a, g.iter().map(|v| -v).collect()),
            Op::AddScalar(a) => acc(grads, *a, g.to_vec()),
            Op::MulScalar(a, s) => acc(grads, *a, g.iter().map(|v| v * s).collect()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(grads, *a, zip_map(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::Sqrt(a) => {
                let y = self.nodes[id].value.data();
                acc(grads, *a, zip_map(g, y, |gv, yv| 0.5 * gv / yv));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                acc(grads, *a, kernels::matmul_nt(g, self.value(*b).data(), m, n, k));
                acc(grads, *b, kernels::matmul_tn(self.value(*a).data(), g, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                acc(grads, *a, kernels::matmul(g, self.value(*b).data(), m, n, k));
                acc(grads, *b, kernels::matmul_tn(g, self.value(*a).data(), m, n, k));
            }
            Op::Softmax(a, axis) => {
                let y = self.nodes[id].value.data();
                let t = self.value(*a);
                let (m, n) = (t.rows(), t.cols());
                let mut dx = vec![0.0; y.len()];
                for lane in lanes(m, n, *axis) {
                    let dot: Real = lane.clone().map(|i| g[i] * y[i]).sum();
                    for i in lane {
                        dx[i] = (g[i] - dot) * y[i];
                    }
                }
                acc(grads, *a, dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let t = self.value(*x);
                let (m, n) = (t.rows(), t.cols());
                let gd = self.value(*gain).data();
                let src = t.data();
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for r in 0..m {
                    let row = &src[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let (mean, inv_std) = row_moments(row, *eps);
                    // dy w.r.t. the normalized value, plus mean corrections
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for c in 0..n {
                        let h = (row[c] - mean) * inv_std;
                        let dh = grow[c] * gd[c];
                        sum_dh += dh;
                        sum_dh_h += dh * h;
                        dgain[c] += grow[c] * h;
                        dbias[c] += grow[c];
                    }
                    let inv_n = 1.0 / n as Real;
                    for c in 0..n {
                        let h = (row[c] - mean) * inv_std;
                        let dh = grow[c] * gd[c];
                        dx[r * n + c] = inv_std * (dh - inv_n * sum_dh - h * inv_n * sum_dh_h);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dgain);
                acc(grads, *bias, dbias);
            }
            Op::Dropout { x, mask } => {
                acc(grads, *x, zip_map(g, mask, |gv, mv| gv * mv));
            }
            Op::SumAll(a) => {
                acc(grads, *a, vec![g[0]; self.value(*a).numel()]);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                acc(grads, *a, vec![g[0] / n as Real; n]);
            }
            Op::AddRow(a, row) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                acc(grads, *a, g.to_vec());
                let mut dr = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dr[j] += g[i * n + j];
                    }
                }
                acc(grads, *row, dr);
            }
            Op::MulColVec(a, col) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let c = self.value(*col).data();
                let x = self.value(*a).data();
                let mut da = vec![0.0; m * n];
                let mut dc = vec![0.0; m];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[i * n + j] * c[i];
                        dc[i] += g[i * n + j] * x[i * n + j];
                    }
                }
                acc(grads, *a, da);
                acc(grads, *col, dc);
            }
            Op::BroadcastRow(row, m) => {
                let n = self.value(*row).numel();
                let mut dr = vec![0.0; n];
                for i in 0..*m {
                    for j in 0..n {
                        dr[j] += g[i * n + j];
                    }
                }
                acc(grads, *row, dr);
            }
            Op::Reshape(a) => acc(grads, *a, g.to_vec()),
            Op::SliceRows(a, range) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let mut da = vec![0.0; m * n];
                da[range.start * n..range.end * n].copy_from_slice(g);
                acc(grads, *a, da);
            }
            Op::SliceCols(a, range) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let w = range.len();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for (jw, j) in range.clone().enumerate() {
                        da[i * n + j] = g[i * w + jw];
                    }
                }
                acc(grads, *a, da);
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).numel();
                acc(grads, *a, g[..split].to_vec());
                acc(grads, *b, g[split..].to_vec());
            }
            Op::ConcatCols(a, b) => {
                let (m, na) = (self.value(*a).rows(), self.value(*a).cols());
                let nb = self.value(*b).cols();
                let n = na + nb;
                let mut da = vec![0.0; m * na];
                let mut db = vec![0.0; m * nb];
                for i in 0..m {
                    da[i * na..(i + 1) * na].copy_from_slice(&g[i * n..i * n + na]);
                    db[i * nb..(i + 1) * nb].copy_from_slice(&g[i * n + na..(i + 1) * n]);
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::SelectRows(a, indices) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let mut da = vec![0.0; m * n];
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..n {
                        da[i * n + j] += g[k * n + j];
                    }
                }
                acc(grads, *a, da);
            }
            Op::ScatterRows { base, rows, indices } => {
                let n = self.value(*base).cols();
                let mut dbase = g.to_vec();
                let mut drows = vec![0.0; indices.len() * n];
                for (k, &i) in indices.iter().enumerate() {
                    drows[k * n..(k + 1) * n].copy_from_slice(&g[i * n..(i + 1) * n]);
                    dbase[i * n..(i + 1) * n].fill(0.0);
                }
                acc(grads, *base, dbase);
                acc(grads, *rows, drows);
            }
            Op::NormalizeRows(a) => {
                let t = self.value(*a);
                let (m, n) = (t.rows(), t.cols());
                let src = t.data();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let row = &src[i * n..(i + 1) * n];
                    let norm = row_norm(row);
                    let grow = &g[i * n..(i + 1) * n];
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += grow[j] * row[j] / norm;
                    }
                    for j in 0..n {
                        da[i * n + j] = (grow[j] - row[j] / norm * dot) / norm;
                    }
                }
                acc(grads, *a, da);
            }
            Op::RowDot(a, b) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let (da_src, db_src) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; m * n];
                let mut db = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[i] * db_src[i * n + j];
                        db[i * n + j] = g[i] * da_src[i * n + j];
                    }
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::RowCross(a, b) => {
                let m = self.value(*a).rows();
                let (sa, sb) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; m * 3];
                let mut db = vec![0.0; m * 3];
                for i in 0..m {
                    let r = i * 3..i * 3 + 3;
                    kernels::cross3(&sb[r.clone()], &g[r.clone()], &mut da[r.clone()]);
                    kernels::cross3(&g[r.clone()], &sa[r.clone()], &mut db[r]);
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::RotFromCols(x, y, z) => {
                let m = self.value(*x).rows();
                let mut dx = vec![0.0; m * 3];
                let mut dy = vec![0.0; m * 3];
                let mut dz = vec![0.0; m * 3];
                for i in 0..m {
                    for r in 0..3 {
                        dx[i * 3 + r] = g[i * 9 + r * 3];
                        dy[i * 3 + r] = g[i * 9 + r * 3 + 1];
                        dz[i * 3 + r] = g[i * 9 + r * 3 + 2];
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *y, dy);
                acc(grads, *z, dz);
            }
            Op::RotCompose(a, b) => {
                let m = self.value(*a).rows();
                let (sa, sb) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; m * 9];
                let mut db = vec![0.0; m * 9];
                for i in 0..m {
                    let ga = &g[i * 9..(i + 1) * 9];
                    let a3 = &sa[i * 9..(i + 1) * 9];
                    let b3 = &sb[i * 9..(i + 1) * 9];
                    // dA = G * B^T, dB = A^T * G
                    for r in 0..3 {
                        for c in 0..3 {
                            let mut va = 0.0;
                            let mut vb = 0.0;
                            for p in 0..3 {
                                va += ga[r * 3 + p] * b3[c * 3 + p];
                                vb += a3[p * 3 + r] * ga[p * 3 + c];
                            }
                            da[i * 9 + r * 3 + c] = va;
                            db[i * 9 + r * 3 + c] = vb;
                        }
                    }
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::RotApply(a, v) => {
                let m = self.value(*a).rows();
                let (sa, sv) = (self.value(*a).data(), self.value(*v).data());
                let mut da = vec![0.0; m * 9];
                let mut dv = vec![0.0; m * 3];
                for i in 0..m {
                    let gi = &g[i * 3..i * 3 + 3];
                    for r in 0..3 {
                        for c in 0..3 {
                            da[i * 9 + r * 3 + c] = gi[r] * sv[i * 3 + c];
                        }
                    }
                    kernels::mat3_apply_t(&sa[i * 9..(i + 1) * 9], gi, &mut dv[i * 3..i * 3 + 3]);
                }
                acc(grads, *a, da);
                acc(grads, *v, dv);
            }
            Op::UnfoldRows(a, kernel) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let half = kernel / 2;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for t in 0..*kernel {
                        let j = i as isize + t as isize - half as isize;
                        if j < 0 || j >= m as isize {
                            continue;
                        }
                        let j = j as usize;
                        for c in 0..n {
                            da[j * n + c] += g[(i * kernel + t) * n + c];
                        }
                    }
                }
                acc(grads, *a, da);
            }
            Op::PoolRows(a, stride) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[(i / stride) * n + j] / *stride as Real;
                    }
                }
                acc(grads, *a, da);
            }
            Op::RepeatRows(a, times) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let mut da = vec![0.0; m * n];
                for i in 0..m * times {
                    for j in 0..n {
                        da[(i / times) * n + j] += g[i * n + j];
                    }
                }
                acc(grads, *a, da);
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn zip_map(a: &[Real], b: &[Real], f: impl Fn(Real, Real) -> Real) -> Vec<Real> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn row_norm(row: &[Real]) -> Real {
    let sq: Real = row.iter().map(|v| v * v).sum();
    (sq + 1e-24).sqrt()
}

fn row_moments(row: &[Real], eps: Real) -> (Real, Real) {
    let n = row.len() as Real;
    let mean = row.iter().sum::<Real>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Index lanes for softmax along an axis of an `m x n` layout.
fn lanes(m: usize, n: usize, axis: Axis) -> Vec<std::iter::StepBy<Range<usize>>> {
    match axis {
        Axis::Cols => (0..m).map(|i| (i * n..(i + 1) * n).step_by(1)).collect(),
        Axis::Rows => (0..n).map(|j| (j..j + (m - 1) * n + 1).step_by(n)).collect(),
    }
}
