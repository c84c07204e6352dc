//! Rank-3 tensors of 64-bit floats.
//!
//! Everything the networks touch — signals, convolution kernels, biases,
//! activations — is a [`Tensor3`] with shape `(batch, channels, length)`.
//! Data is stored batch-major: element `(b, c, l)` lives at
//! `b * channels * length + c * length + l`. Kernels reuse the same type with
//! shape `(out_channels, in_channels, kernel_len)`.

use crate::error::{Error, Result};

/// Shape of a rank-3 tensor: `(batch, channels, length)`.
pub type Shape3 = (usize, usize, usize);

/// A rank-3 tensor of `f64` values with an optional gradient buffer.
///
/// The gradient buffer, when present, always has the same number of elements
/// as `data` and is *accumulated into*, never overwritten, so repeated
/// backward passes sum their contributions until [`Tensor3::zero_grad`] runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    data: Vec<f64>,
    shape: Shape3,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor3 {
    /// An all-zero tensor of the given shape.
    pub fn zeros(batch: usize, channels: usize, length: usize) -> Self {
        Tensor3 {
            data: vec![0.0; batch * channels * length],
            shape: (batch, channels, length),
            grad: None,
            requires_grad: false,
        }
    }

    /// Build from a flat batch-major buffer. The buffer length must equal the
    /// product of the shape dimensions.
    pub fn from_vec(data: Vec<f64>, shape: Shape3) -> Result<Self> {
        let expect = shape.0 * shape.1 * shape.2;
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "buffer of {} elements cannot fill shape {:?} ({} elements)",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor3 { data, shape, grad: None, requires_grad: false })
    }

    /// A single-channel tensor `[1, 1, len]` holding one signal.
    pub fn from_signal(samples: &[f64]) -> Self {
        Tensor3 {
            data: samples.to_vec(),
            shape: (1, 1, samples.len()),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Element at `(b, c, l)`; debug-asserts bounds.
    #[inline]
    pub fn at(&self, b: usize, c: usize, l: usize) -> f64 {
        let (_, channels, length) = self.shape;
        debug_assert!(b < self.shape.0 && c < channels && l < length);
        self.data[(b * channels + c) * length + l]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, l: usize, value: f64) {
        let (_, channels, length) = self.shape;
        debug_assert!(b < self.shape.0 && c < channels && l < length);
        self.data[(b * channels + c) * length + l] = value;
    }

    /// Whether gradients should flow to this tensor during backward passes.
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Mark the tensor as a trainable leaf and allocate its gradient buffer.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if on && self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    /// The accumulated gradient, if any backward pass has touched this tensor.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Reset the gradient buffer to zero (allocating it if missing).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    /// Add `delta` into the gradient buffer element-wise. Accumulates; never
    /// overwrites previous contributions.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient of {} elements for tensor of {}",
                delta.len(),
                self.data.len()
            )));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    /// Multiply the gradient buffer by a constant, e.g. to average over a
    /// batch. A missing buffer stays missing (it reads as zero).
    pub fn scale_grad(&mut self, factor: f64) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// True when every value is finite (no NaN or infinity).
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest value in the tensor. Empty tensors return negative infinity.
    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}
