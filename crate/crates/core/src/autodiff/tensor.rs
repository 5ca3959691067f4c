use rand::Rng;

use crate::error::{IqtError, Result};
use crate::scalar::Scalar;

/// Dense 5-D tensor in (N, C, X, Y, Z) order, Z fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 5],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: [usize; 5], data: Vec<T>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(IqtError::Argument(format!(
                "tensor data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: [usize; 5]) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 5], value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: [1; 5],
            data: vec![value],
        }
    }

    /// Uniform entries in `[-1, 1)`.
    pub fn random(shape: [usize; 5], rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect(),
        }
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn spatial_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn reshape(mut self, shape: [usize; 5]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(IqtError::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Batch item `n` as a flat slice of `C * X * Y * Z` values.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.len() / self.shape[0];
        &self.data[n * len..(n + 1) * len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack equally shaped batch-1 tensors (or flat item slices) along N.
    pub fn stack(items: &[&[T]], item_shape: [usize; 4]) -> Result<Self> {
        let len: usize = item_shape.iter().product();
        let mut data = Vec::with_capacity(len * items.len());
        for it in items {
            if it.len() != len {
                return Err(IqtError::shape("stack", &[it.len()], &[len]));
            }
            data.extend_from_slice(it);
        }
        Tensor::new(
            [items.len(), item_shape[0], item_shape[1], item_shape[2], item_shape[3]],
            data,
        )
    }
}
