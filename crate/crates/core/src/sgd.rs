//! SGD with classical momentum.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer state: one velocity buffer per parameter, matched by position.
///
/// Callers must pass the same parameter list, in the same order, on every
/// step; buffers are allocated on first use and shape-checked afterwards.
#[derive(Debug, Clone)]
pub struct Sgd {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Sgd { learning_rate, momentum, velocity: Vec::new() }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// `v ← m·v + g; p ← p − lr·v`, then clears each gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| alloc::vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::InvalidSpec(alloc::format!(
                "optimizer saw {} parameters, expected {}",
                params.len(),
                self.velocity.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if self.velocity[i].len() != p.numel() {
                return Err(Error::InvalidSpec(alloc::format!(
                    "parameter {i} changed size: {} vs velocity {}",
                    p.numel(),
                    self.velocity[i].len()
                )));
            }
            if p.grad().is_none() {
                return Err(Error::MissingGradient { index: i });
            }
        }
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad().expect("checked above").to_vec();
            let v = &mut self.velocity[i];
            let data = p.data_mut();
            for k in 0..data.len() {
                v[k] = self.momentum * v[k] + grad[k];
                data[k] -= self.learning_rate * v[k];
            }
            p.clear_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64) -> Tensor {
        let mut t = Tensor::scalar(v);
        t.set_requires_grad(true);
        t
    }

    #[test]
    fn plain_step_without_momentum() {
        let mut p = param(1.0);
        p.accumulate_grad(&[1.0]);
        let mut opt = Sgd::new(0.01, 0.0);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 0.99).abs() < 1e-15);
        assert!(p.grad().is_none());
    }

    #[test]
    fn momentum_recurrence() {
        // v1 = 1, v2 = 1.9 → p moves by 0.1 then 0.19
        let mut p = param(0.0);
        let mut opt = Sgd::new(0.1, 0.9);
        p.accumulate_grad(&[1.0]);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-15);
        p.accumulate_grad(&[1.0]);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_from_rest_leaves_params_unchanged() {
        let mut p = param(3.5);
        let mut opt = Sgd::new(0.1, 0.9);
        p.accumulate_grad(&[0.0]);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data()[0], 3.5);
        assert_eq!(opt.velocity[0][0], 0.0);
    }

    #[test]
    fn zero_grad_scales_velocity_only() {
        let mut p = param(2.0);
        let mut opt = Sgd::new(0.1, 0.5);
        p.accumulate_grad(&[4.0]);
        opt.step(&mut [&mut p]).unwrap();
        let after_first = p.data()[0];
        // zero gradient: p moves by lr·m·v, velocity decays
        p.accumulate_grad(&[0.0]);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - (after_first - 0.1 * 0.5 * 4.0)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = param(1.0);
        let mut opt = Sgd::new(0.01, 0.9);
        assert!(matches!(opt.step(&mut [&mut p]), Err(Error::MissingGradient { index: 0 })));
    }
}
