//! Dense f64 tensors and the reverse-mode tape built on them.

pub mod tape;

pub use tape::{Tape, Var};

use crate::error::{Result, SageError};

/// Dense n-dimensional array, row-major, 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// Same-shape gradient accumulator, present on trainable tensors.
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if numel(&shape) != values.len() {
            return Err(SageError::shape(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                numel(&shape),
                values.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(SageError::shape(format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; numel(shape)],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    /// Trainable tensor with a zeroed gradient slot.
    pub fn with_grad_slot(shape: Vec<usize>, values: Vec<f64>) -> Self {
        let n = values.len();
        debug_assert_eq!(numel(&shape), n);
        Tensor {
            shape,
            values,
            grad: Some(vec![0.0; n]),
            requires_grad: true,
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Numerically guarded logistic function. For arguments beyond +/-30 the
/// result equals the asymptote to machine precision without overflowing.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Guarded softplus: `ln(1 + e^x)`, computed as `max(x, 0) + ln(1 + e^-|x|)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
