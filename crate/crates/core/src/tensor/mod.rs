//! Dense row-major tensors, the reverse-mode tape, and the differentiable
//! kernels the segmentation network is built from.

pub mod gradcheck;
pub mod kernels;
mod tape;

pub use tape::{Tape, Var};

/// Test fixture for checking that the gradient checker catches a broken
/// kernel. Not part of the stable interface.
#[doc(hidden)]
pub mod fault {
    use std::cell::Cell;

    thread_local!(static CONV_WEIGHT_GRAD_SCALE: Cell<f64> = const { Cell::new(1.0) });

    /// Multiplies every conv weight gradient computed on this thread by
    /// `scale`; `1.0` restores correct behaviour.
    pub fn set_conv_backward_fault(scale: f64) {
        CONV_WEIGHT_GRAD_SCALE.with(|c| c.set(scale));
    }

    pub(crate) fn conv_weight_grad_scale() -> f64 {
        CONV_WEIGHT_GRAD_SCALE.with(Cell::get)
    }
}

use crate::error::{shape_err, Result};

/// Numeric precision of a computation.
///
/// All kernels compute in `f64`. `Single` is accepted by configuration for
/// compatibility and rounds trained parameters through `f32` after each
/// optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    Single,
    #[default]
    Double,
}

/// Dense N-dimensional array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err!("zero-sized dimension in shape {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(shape_err!(
                "gradient of length {} for tensor of shape {:?}",
                grad.len(),
                self.shape
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Same data viewed under a new shape with equal element count.
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    /// `[B, C, H, W]` accessor for feature maps.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok([b, c, h, w]),
            other => Err(shape_err!("expected a [B, C, H, W] feature map, got {other:?}")),
        }
    }

    pub fn at4(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cs, hs, ws] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        self.data[((b * cs + c) * hs + y) * ws + x]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
