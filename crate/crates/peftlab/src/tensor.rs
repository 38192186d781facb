//! Dense row-major tensors and named parameters.
//!
//! A [`Tensor`] is plain storage: a shape and a flat `Vec<f64>`. All
//! differentiation state lives on the tape in [`crate::graph`], so tensors
//! stay cheap to clone and safe to ship between threads.

use std::fmt;

use rand::rngs::StdRng;
use rand_distr::{Distribution, Normal};

/// Errors from tensor construction and primitive operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Shape product does not match the provided data length.
    DataLength { expected: usize, got: usize },
    /// Two operands have incompatible shapes for the named operation.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Matmul inner dimensions disagree.
    InnerDim { left: Vec<usize>, right: Vec<usize> },
    /// An operation required a rank-2 tensor.
    NotAMatrix { op: &'static str, shape: Vec<usize> },
    /// `backward` was called on a non-scalar value.
    NonScalarLoss { shape: Vec<usize> },
    /// Polynomial degrees are restricted to non-negative integers.
    UnsupportedDegree { degree: i64 },
    /// An operation received an empty input list.
    EmptyInput(&'static str),
    /// Column slice bounds out of range.
    BadSlice { lo: usize, hi: usize, cols: usize },
    /// A class label fell outside `[0, classes)`.
    LabelOutOfRange { label: usize, classes: usize },
    /// Token id outside the embedding table.
    TokenOutOfRange { token: usize, vocab: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            TensorError::InnerDim { left, right } => {
                write!(f, "matmul: inner dimensions disagree: {left:?} x {right:?}")
            }
            TensorError::NotAMatrix { op, shape } => {
                write!(f, "{op}: expected a rank-2 tensor, got shape {shape:?}")
            }
            TensorError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            TensorError::UnsupportedDegree { degree } => {
                write!(f, "unsupported propulsion degree {degree}: must be a non-negative integer")
            }
            TensorError::EmptyInput(op) => write!(f, "{op}: empty input"),
            TensorError::BadSlice { lo, hi, cols } => {
                write!(f, "column slice {lo}..{hi} out of range for {cols} columns")
            }
            TensorError::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            TensorError::TokenOutOfRange { token, vocab } => {
                write!(f, "token id {token} out of range for vocab {vocab}")
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense real-valued tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking `product(shape) == data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength { expected, got: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::EmptyInput("from_rows"));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![rows.len(), cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// Seeded Gaussian tensor with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut StdRng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }
}

/// A named tensor that may or may not receive gradient updates.
///
/// `trainable == false` is a hard freeze: no optimizer ever mutates the
/// tensor, and `backward` leaves its grad absent.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    /// Value the optimizer's weight decay pulls toward (1.0 for
    /// propulsion vectors, 0.0 for everything else).
    pub decay_target: f64,
}

impl Parameter {
    pub fn frozen(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter { name: name.into(), tensor, trainable: false, decay_target: 0.0 }
    }

    pub fn trainable(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter { name: name.into(), tensor, trainable: true, decay_target: 0.0 }
    }

    pub fn with_decay_target(mut self, target: f64) -> Self {
        self.decay_target = target;
        self
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}
