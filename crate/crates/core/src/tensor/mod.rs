//! Dense array values and reverse-mode differentiation.
//!
//! [`Tensor`] is an immutable value (shape + shared data, plus an optional
//! gradient buffer on parameters). Differentiation is tape-based: a [`Tape`]
//! records operations on [`Var`] handles during a forward pass, and
//! [`Tape::backward`] replays it in reverse to produce gradients for every
//! registered parameter. Recording is single-threaded per tape; tensors are
//! immutable and can be shared read-only across threads.

mod kernels;
mod tape;

pub mod check;

#[cfg(test)]
mod tests;

pub use tape::{Axis, GradMap, Tape, Var};

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{CoreError, Result};

#[cfg(feature = "f32")]
pub type Real = f32;
#[cfg(not(feature = "f32"))]
pub type Real = f64;

/// Epsilon added under square roots so gradients stay finite at zero.
pub const SQRT_EPS: Real = 1e-12;

/// An immutable dense array. Scalars have the empty shape.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<Real>>,
    grad: Option<Vec<Real>>,
}

/// Value equality: shape and data; gradient buffers are transient state.
impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::Dimension {
                op: "Tensor::new",
                detail: format!("shape {:?} holds {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Self { shape, data: Arc::new(data), grad: None })
    }

    pub fn scalar(v: Real) -> Self {
        Self { shape: vec![], data: Arc::new(vec![v]), grad: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: Arc::new(vec![0.0; numel]), grad: None }
    }

    pub fn filled(shape: &[usize], v: Real) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: Arc::new(vec![v; numel]), grad: None }
    }

    pub fn from_rows(rows: &[Vec<Real>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(CoreError::Dimension {
                op: "Tensor::from_rows",
                detail: "ragged rows".into(),
            });
        }
        Self::new(vec![rows.len(), n], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<Real> {
        if !self.is_scalar() {
            return Err(CoreError::NotScalar { op: "Tensor::item", numel: self.numel() });
        }
        Ok(self.data[0])
    }

    /// Rows of a rank-2 tensor (rank-1 counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Columns of a rank-1 or rank-2 tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[Real] {
        let w = self.cols();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn at(&self, i: usize, j: usize) -> Real {
        self.data[i * self.cols() + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rebuild with the same shape and new data, dropping any gradient.
    pub fn with_data(&self, data: Vec<Real>) -> Result<Self> {
        Self::new(self.shape.clone(), data)
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
            grad: None,
        }
    }

    /// The gradient buffer, if one has been accumulated.
    pub fn grad(&self) -> Option<&[Real]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Add `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[Real]) -> Result<()> {
        if delta.len() != self.numel() {
            return Err(CoreError::Dimension {
                op: "accumulate_grad",
                detail: format!("gradient has {} values, tensor {}", delta.len(), self.numel()),
            });
        }
        match &mut self.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    /// In-place update of the values; used by optimizers that own the tensor.
    pub fn update_data(&mut self, f: impl FnMut(usize, &mut Real)) {
        let data = Arc::make_mut(&mut self.data);
        let mut f = f;
        for (i, v) in data.iter_mut().enumerate() {
            f(i, v);
        }
    }
}

/// Fresh standard-normal tensor drawn from the given stream.
pub fn standard_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<Real> = (0..numel).map(|_| rng.sample::<f64, _>(StandardNormal) as Real).collect();
    Tensor { shape: shape.to_vec(), data: Arc::new(data), grad: None }
}

/// Named parameter set of a model, in deterministic (sorted) order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    /// Accumulate a backward pass result into the parameter gradient buffers.
    pub fn accumulate(&mut self, grads: &GradMap) -> Result<()> {
        for (name, g) in grads {
            let p = self.params.get_mut(name).ok_or_else(|| CoreError::Dimension {
                op: "ParamStore::accumulate",
                detail: format!("unknown parameter {name}"),
            })?;
            p.accumulate_grad(g.data())?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.zero_grad();
        }
    }

    /// Euclidean norm over every parameter gradient, for clipping.
    pub fn grad_norm(&self) -> Real {
        let mut acc = 0.0;
        for p in self.params.values() {
            if let Some(g) = p.grad() {
                for v in g {
                    acc += v * v;
                }
            }
        }
        acc.sqrt()
    }
}
