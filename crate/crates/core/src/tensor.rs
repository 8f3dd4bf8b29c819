//! Dense row-major tensor over a [`Scalar`] type.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense multi-dimensional array of real scalars, row-major.
///
/// Invariants enforced by every constructor and public operation:
/// the element count equals the product of the dimension sizes, every
/// dimension is at least 1, and every stored value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

fn checked_elem_count(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::invalid("tensor shape must have at least one axis"));
    }
    let mut n: usize = 1;
    for (axis, &d) in shape.iter().enumerate() {
        if d == 0 {
            return Err(Error::invalid(format!(
                "tensor axis {axis} has size 0; all dimensions must be >= 1"
            )));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::invalid("tensor element count overflows usize"))?;
    }
    Ok(n)
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor from a shape and row-major data, validating the
    /// shape/data agreement and value finiteness.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        let n = checked_elem_count(&shape)?;
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} implies {} elements but {} were provided",
                shape,
                n,
                data.len()
            )));
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite value {v} at flat index {i}"
                )));
            }
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Result<Self> {
        let shape = shape.into();
        let n = checked_elem_count(&shape)?;
        if !value.is_finite() {
            return Err(Error::invalid(format!("non-finite fill value {value}")));
        }
        Ok(Tensor {
            shape,
            data: vec![value; n],
        })
    }

    /// Builds a rank-3 tensor by evaluating `f(c, y, x)`.
    pub fn from_fn3(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> S) -> Result<Self> {
        let n = checked_elem_count(&[c, h, w])?;
        let mut data = Vec::with_capacity(n);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ci, y, x));
                }
            }
        }
        Self::new(vec![c, h, w], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable access to the raw data. The caller is responsible for keeping
    /// values finite; all operations in this crate do.
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Interprets the tensor as `(height, width)`, failing on other ranks.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::invalid(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Interprets the tensor as `(channels, height, width)`. Rank-2 tensors
    /// are treated as a single channel.
    pub fn dims_chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((1, h, w)),
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::invalid(format!(
                "expected a rank-2 or rank-3 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Flat index for `(c, y, x)` given spatial extent `h`x`w`.
    #[inline]
    pub fn idx3(c: usize, y: usize, x: usize, h: usize, w: usize) -> usize {
        (c * h + y) * w + x
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Result<Self> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::new(self.shape.clone(), data)
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(self.shape.clone(), data)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: S) -> Result<Self> {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    pub fn sum_sq(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v * v)
    }

    pub fn mean(&self) -> S {
        self.sum() / S::from_usize(self.len()).expect("len fits scalar")
    }

    pub fn min_val(&self) -> S {
        self.data.iter().fold(S::infinity(), |acc, &v| acc.min(v))
    }

    pub fn max_val(&self) -> S {
        self.data
            .iter()
            .fold(S::neg_infinity(), |acc, &v| acc.max(v))
    }

    /// Largest absolute elementwise difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(S::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    /// Converts the scalar type, rounding through the target precision.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::from_f64_c(v.to_f64().expect("finite")))
                .collect(),
        }
    }
}
