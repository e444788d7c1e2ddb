//! Dense row-major f64 tensors.
//!
//! Values live behind an `Arc` so autodiff tapes can reference parameter
//! data without copying; gradients live beside the values and are summed
//! across per-sample tapes by the trainer.

use std::sync::Arc;

use super::{NumericsError, Result, Rng};

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    grad: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let want: usize = shape.iter().product();
        if values.len() != want {
            return Err(NumericsError::BadElementCount {
                shape: shape.to_vec(),
                want,
                got: values.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            grad: vec![0.0; values.len()],
            values: Arc::new(values),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("zeros: count matches by construction")
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("full: count matches by construction")
    }

    /// Truncated-normal init: N(0, std^2) resampled until |z| <= 2*std.
    pub fn randn_truncated(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| loop {
                let z = rng.normal() * std;
                if z.abs() <= 2.0 * std {
                    break z;
                }
            })
            .collect();
        Tensor::new(shape, values).expect("randn: count matches by construction")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Shared handle to the value buffer (cheap clone for tape leaves).
    pub(crate) fn values_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.values)
    }

    /// Mutable view of the values. Copy-on-write: if a tape still holds the
    /// buffer this clones it, so drop tapes before optimizer steps.
    pub fn values_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.values).as_mut_slice()
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Add `delta` into the stored gradient (used to reduce per-sample tape
    /// gradients in a fixed order).
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.grad.len(), "gradient length mismatch");
        for (g, d) in self.grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Add `scale * delta` into the stored gradient (batch-mean reduction).
    pub fn accumulate_grad_scaled(&mut self, delta: &[f64], scale: f64) {
        assert_eq!(delta.len(), self.grad.len(), "gradient length mismatch");
        for (g, d) in self.grad.iter_mut().zip(delta) {
            *g += scale * d;
        }
    }
}
