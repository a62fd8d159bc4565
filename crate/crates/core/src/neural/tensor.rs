use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<S> {
    dims: Vec<usize>,
    values: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(dims: &[usize]) -> Self {
        Tensor {
            dims: dims.to_vec(),
            values: vec![S::zero(); dims.iter().product()],
        }
    }

    pub fn from_vec(dims: Vec<usize>, values: Vec<S>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                context: format!("tensor of shape {dims:?}"),
                expected,
                actual: values.len(),
            });
        }
        Ok(Tensor { dims, values })
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            values: (0..n).map(&mut f).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.dims)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Leading dimension; 1 for scalars.
    pub fn rows(&self) -> usize {
        self.dims.first().copied().unwrap_or(1)
    }

    /// Product of the trailing dimensions; 1 for vectors.
    pub fn cols(&self) -> usize {
        self.dims.iter().skip(1).product()
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.values[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: S) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: S) {
        self.values.iter_mut().for_each(|x| *x *= k);
    }

    pub fn sum_squares(&self) -> S {
        self.values.iter().map(|&v| v * v).sum()
    }

    /// `out += self · x` for a 2-D tensor.
    pub fn matvec_acc(&self, x: &[S], out: &mut [S]) {
        let cols = self.cols();
        debug_assert_eq!(x.len(), cols);
        debug_assert_eq!(out.len(), self.rows());
        for (o, row) in out.iter_mut().zip(self.values.chunks_exact(cols)) {
            *o += dot(row, x);
        }
    }

    /// `out += selfᵀ · y` for a 2-D tensor.
    pub fn matvec_t_acc(&self, y: &[S], out: &mut [S]) {
        let cols = self.cols();
        debug_assert_eq!(y.len(), self.rows());
        debug_assert!(out.len() <= cols);
        let n = out.len();
        for (&yr, row) in y.iter().zip(self.values.chunks_exact(cols)) {
            if yr == S::zero() {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(&row[..n]) {
                *o += yr * w;
            }
        }
    }

    /// `self += y ⊗ x` for a 2-D tensor with `x.len() <= cols`.
    pub fn outer_acc(&mut self, y: &[S], x: &[S]) {
        let cols = self.cols();
        debug_assert_eq!(y.len(), self.rows());
        for (&yr, row) in y.iter().zip(self.values.chunks_exact_mut(cols)) {
            if yr == S::zero() {
                continue;
            }
            for (w, &xc) in row.iter_mut().zip(x) {
                *w += yr * xc;
            }
        }
    }
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}
