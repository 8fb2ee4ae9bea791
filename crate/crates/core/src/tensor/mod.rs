//! Dense f64 tensors, layers with hand-written backward passes, Adam, and a
//! finite-difference gradient checker.

mod adam;
mod gemm;
mod gradcheck;
mod layers;
mod sequential;

pub use adam::Adam;
pub use gradcheck::{gradient_check, GradCheckReport, GradTarget, ParamSelection};
pub use layers::{
    BatchNorm, Conv2d, Flatten, Layer, LayerConfig, Linear, MaxPool2d, Relu, Scale,
    ShiftedLeakyRelu,
};
pub use sequential::Sequential;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(config_err!("tensor shape {shape:?} must have positive dimensions"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(config_err!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// 1-D tensor from a slice.
    pub fn from_slice(values: &[f64]) -> Self {
        Self { shape: vec![values.len()], data: values.to_vec() }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(config_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Value at a multi-index (row-major).
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {i} out of range");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.shape.len() != rank {
            return Err(config_err!(
                "{what} expects a rank-{rank} input, got shape {:?}",
                self.shape
            ));
        }
        Ok(())
    }
}

/// How a trainable tensor participates in regularization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    /// Conv kernels and fully-connected matrices; L1-penalized.
    Weight,
    Bias,
    /// Batchnorm gamma.
    Scale,
    /// Batchnorm beta.
    Shift,
}

/// A trainable tensor together with its gradient and Adam moments.
#[derive(Clone, Debug)]
pub struct ParamTensor {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub step_count: u64,
    grad_pending: bool,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, role: ParamRole, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            name: name.into(),
            role,
            value,
            grad: Tensor::zeros(&shape),
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
            step_count: 0,
            grad_pending: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Adds `g` into the gradient buffer.
    pub fn accumulate(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.grad.len());
        for (a, b) in self.grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
        self.grad_pending = true;
    }

    /// Marks the gradient as populated after writing to `grad` directly.
    pub fn mark_grad(&mut self) {
        self.grad_pending = true;
    }

    pub fn has_grad(&self) -> bool {
        self.grad_pending
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
        self.grad_pending = false;
    }

    pub fn is_l1_penalized(&self) -> bool {
        self.role == ParamRole::Weight
    }
}

/// Batchnorm behaviour and caching policy of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
