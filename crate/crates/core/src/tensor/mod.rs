//! Minimal dense-tensor arithmetic with reverse-mode gradients.
//!
//! Values are plain row-major buffers ([`Tensor`]); differentiation happens on
//! a [`Tape`] that records operations and replays them in reverse. Compute is
//! 32-bit by default; everything is generic over [`Scalar`] so oracles and
//! gradient checks can run the same graph in 64-bit.
//!
//! Gradients live on the tape: watch a tensor with [`Tape::param`], run ops,
//! call [`Tape::backward`] on a scalar loss, then read [`Tape::grad`].

pub mod check;
mod tape;

pub use tape::{Tape, Var};

use std::fmt;
use thiserror::Error;

/// Floating-point element type of the engine (f32 compute, f64 reference).
pub trait Scalar:
    num_traits::Float
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("shape {shape:?} holds {expected} elements but {got} were provided")]
    ElementCountMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("non-finite scalar at index {0}")]
    NonFinite(usize),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("backward already ran; the tape is consumed")]
    TapeConsumed,
    #[error("tape is empty; nothing to differentiate")]
    EmptyTape,
}

/// Dense row-major tensor of real scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ElementCountMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Like [`Tensor::new`] but rejects NaN/Inf entries.
    pub fn checked(shape: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite(i));
            }
        }
        Self::new(shape, data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); n] }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(data: Vec<S>) -> Self {
        Tensor { shape: vec![data.len()], data }
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

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Scalar extraction for shape-[1] tensors.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() requires a single-element tensor");
        self.data[0]
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }

    pub(crate) fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::ElementCountMismatch {
                shape,
                expected,
                got: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }
}
