//! Bias-corrected Adam optimizer over [`Tensor3`] parameter lists.

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment estimates for a fixed list of parameters, plus a
/// step counter shared by all of them.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    /// Fresh zeroed state shaped after the given parameters.
    pub fn new(params: &[&Tensor3]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    /// Rebuild from checkpointed moments.
    pub fn from_parts(m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step: u64) -> Result<AdamState> {
        if m.len() != v.len() {
            return Err(Error::Config(format!(
                "moment lists differ in length: {} vs {}",
                m.len(),
                v.len()
            )));
        }
        for (i, (a, b)) in m.iter().zip(&v).enumerate() {
            if a.len() != b.len() {
                return Err(Error::Config(format!(
                    "moment buffers for parameter {i} differ in length: {} vs {}",
                    a.len(),
                    b.len()
                )));
            }
        }
        Ok(AdamState { m, v, step })
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: `p -= lr * m_hat / (sqrt(v_hat) + eps)` per element, with
    /// bias-corrected moments. A parameter whose gradient is absent is
    /// treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor3], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let m_corr = 1.0 - BETA1.powi(t);
        let v_corr = 1.0 - BETA2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            if p.len() != self.m[i].len() {
                return Err(Error::Shape(format!(
                    "parameter {i} has {} elements but its moment buffers have {}",
                    p.len(),
                    self.m[i].len()
                )));
            }
            let grad = p.grad().map(<[f64]>::to_vec);
            let data = p.data_mut();
            for (j, slot) in data.iter_mut().enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / m_corr;
                let v_hat = *v / v_corr;
                *slot -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}
