//! Dense rank-4 tensors in batch, channel, height, width order.

mod conv;
mod ops;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use conv::{conv2d, conv2d_backward_input, conv2d_backward_weight, ConvParams};
pub use ops::*;

/// Element type of a tensor. `f32` serves inference and benchmarks, `f64`
/// gradient checking.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    /// Spatial positions per plane, the token count `N = H·W`.
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Self { channels, ..self }
    }

    pub fn offset(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.channels + c) * self.height + h) * self.width + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

/// Immutable-by-convention dense tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.dims().contains(&0) {
            return Err(Error::invalid("tensor", format!("zero-sized dimension in {shape}")));
        }
        if data.len() != shape.numel() {
            return Err(Error::invalid(
                "tensor",
                format!("{} values do not fill {shape}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from a slice; convenience for literals in tests and examples.
    pub fn from_slice(dims: [usize; 4], data: &[T]) -> Result<Self> {
        Self::new(Shape::new(dims[0], dims[1], dims[2], dims[3]), data.to_vec())
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        assert!(!shape.dims().contains(&0), "zero-sized dimension in {shape}");
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    /// Fills elements in storage order from `f(flat_index)`.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Self {
        assert!(!shape.dims().contains(&0), "zero-sized dimension in {shape}");
        Self {
            shape,
            data: (0..shape.numel()).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::new(1, 1, 1, 1), value)
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.offset(b, c, h, w)]
    }

    /// Single value of a `(1,1,1,1)` tensor, or the first element otherwise.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Contiguous `(H, W)` plane of batch item `b`, channel `c`.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let n = self.shape.tokens();
        let start = (b * self.shape.channels + c) * n;
        &self.data[start..start + n]
    }

    /// Elements `[b, ..]` of one batch item.
    pub fn item_slice(&self, b: usize) -> &[T] {
        let n = self.shape.channels * self.shape.tokens();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, v| if v.abs() > m { v.abs() } else { m })
    }

    /// Copies out batch items `start..start + len`.
    pub fn batch_range(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.shape.batch {
            return Err(Error::invalid(
                "batch_range",
                format!("items {start}..{} outside {}", start + len, self.shape),
            ));
        }
        let per = self.shape.channels * self.shape.tokens();
        Ok(Self {
            shape: Shape {
                batch: len,
                ..self.shape
            },
            data: self.data[start * per..(start + len) * per].to_vec(),
        })
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

/// Norm-wise relative difference `max|a-b| / max|b|`, guarded against a zero reference.
pub fn relative_error<T: Scalar>(actual: &Tensor<T>, reference: &Tensor<T>) -> f64 {
    assert_eq!(actual.shape(), reference.shape(), "relative_error shape mismatch");
    let diff = actual
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .fold(0.0, f64::max);
    let scale = reference.max_abs().as_f64().max(f64::MIN_POSITIVE);
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length_and_zero_dims() {
        assert!(Tensor::<f32>::new(Shape::new(1, 2, 2, 2), vec![0.0; 7]).is_err());
        assert!(Tensor::<f32>::new(Shape::new(1, 0, 2, 2), vec![]).is_err());
    }

    #[test]
    fn offsets_are_row_major() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.offset(0, 0, 0, 1), 1);
        assert_eq!(s.offset(0, 0, 1, 0), 5);
        assert_eq!(s.offset(0, 1, 0, 0), 20);
        assert_eq!(s.offset(1, 0, 0, 0), 60);
        assert_eq!(s.offset(1, 2, 3, 4), s.numel() - 1);
    }

    #[test]
    fn relative_error_is_normwise() {
        let a = Tensor::from_slice([1, 1, 1, 2], &[1.0f64, 2.0]).unwrap();
        let b = Tensor::from_slice([1, 1, 1, 2], &[1.0f64, 2.5]).unwrap();
        assert!((relative_error(&a, &b) - 0.2).abs() < 1e-12);
    }
}
