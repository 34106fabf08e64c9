//! Dense N-dimensional value array, row-major, channels-last for images.
//!
//! Data lives behind an `Arc` so cloning a tensor (e.g. registering model
//! parameters on a tape) is cheap; mutation copies on write.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorBase<S> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> TensorBase<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} holds {} elements but {} were provided",
                shape,
                n,
                data.len()
            )));
        }
        Ok(TensorBase { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        TensorBase { shape, data: Arc::new(vec![S::zero(); n]) }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n = shape.iter().product();
        TensorBase { shape, data: Arc::new(vec![value; n]) }
    }

    pub fn scalar(value: S) -> Self {
        TensorBase { shape: vec![1], data: Arc::new(vec![value]) }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> S) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(&mut f).collect();
        TensorBase { shape, data: Arc::new(data) }
    }

    /// Uniform values in [lo, hi), drawn in flat order.
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| S::of_f64(rng.uniform(lo, hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn item(&self) -> S {
        debug_assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same data viewed under a new shape (element count must match).
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.numel(),
                shape,
                n
            )));
        }
        Ok(TensorBase { shape, data: Arc::clone(&self.data) })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        TensorBase {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> S {
        self.data[self.offset(index)]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Lossy conversion between scalar types (used for f32 checkpoints).
    pub fn cast<T: Scalar>(&self) -> TensorBase<T> {
        TensorBase {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| T::of_f64(v.as_f64())).collect()),
        }
    }
}
