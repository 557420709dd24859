use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major N-dimensional array.
///
/// A tensor that `requires_grad` carries a gradient buffer of the same length,
/// filled in after a backward pass (see [`Tape::backward`](crate::Tape::backward)).
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, checking that `dims` are positive, match the data
    /// length, and that every element is finite.
    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("tensor", format!("zero extent in dims {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", "length", n, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor", what: "data".into() });
        }
        Ok(Self::from_parts(dims.to_vec(), data))
    }

    /// Unchecked construction used by kernels that produce finite outputs by
    /// construction.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor { dims, data, requires_grad: false, grad: None }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, T::one())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims.to_vec(), vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    /// Uniform samples in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = dims.iter().product();
        let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
        Self::from_parts(dims.to_vec(), data)
    }

    /// Marks the tensor as a trainable leaf and allocates its gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        self.grad = on.then(|| vec![T::zero(); self.data.len()]);
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable element access. Callers are responsible for keeping values finite.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, op: &'static str, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op, what: what.into() })
        }
    }

    /// Same data, new dims with equal element count. Drops gradient state.
    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.len() || dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", "length", self.len(), format!("{dims:?}")));
        }
        Ok(Self::from_parts(dims.to_vec(), self.data.clone()))
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.dims.len(), "index rank");
        index
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {i} out of bounds for extent {d}");
                acc * d + i
            })
    }

    /// Converts element type (e.g. `f32` parameters into an `f64` gradcheck clone).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let mut out = Tensor::from_parts(self.dims.clone(), self.data.iter().map(|v| U::lit(v.as_f64())).collect());
        if self.requires_grad {
            out.set_requires_grad(true);
        }
        out
    }

    /// Sum of all elements accumulated in `f64`.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Slices `[start, end)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, end: usize) -> Result<Self> {
        if axis >= self.rank() || start >= end || end > self.dims[axis] {
            return Err(Error::invalid("narrow", format!("range {start}..{end} on axis {axis} of {:?}", self.dims)));
        }
        let outer: usize = self.dims[..axis].iter().product();
        let inner: usize = self.dims[axis + 1..].iter().product();
        let len = self.dims[axis];
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&self.data[base + start * inner..base + end * inner]);
        }
        let mut dims = self.dims.clone();
        dims[axis] = end - start;
        Ok(Self::from_parts(dims, data))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("requires_grad", &self.requires_grad)
            .field("data", &format_args!("{preview:?}{}", if self.len() > 8 { " .." } else { "" }))
            .finish()
    }
}
