use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments. Moment buffers are created lazily on the
/// first step and must stay shape-congruent with the parameter list.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that carries a gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} parameters, step got {}",
                self.first.len(),
                params.len()
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in params.into_iter().zip(&mut self.first).zip(&mut self.second) {
            if m.len() != p.numel() {
                return Err(Error::dim("adam", "parameter", "moment buffer shape changed"));
            }
            let (values, grad) = p.data_and_grad_mut();
            let Some(grad) = grad else { continue };
            for i in 0..values.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                values[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_untouched() {
        let mut p = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap().with_grad();
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            opt.step([&mut p]).unwrap();
        }
        assert_eq!(p.data(), before.data());
        assert_eq!(opt.steps(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut p = Tensor::new([2], vec![1.0, 1.0]).unwrap().with_grad();
        p.grad_mut().unwrap().copy_from_slice(&[0.3, -2.0]);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step([&mut p]).unwrap();
        assert!((p.data()[0] - (1.0 - 1e-3 * 0.3 / (0.3 + 1e-8))).abs() < 1e-15);
        assert!((p.data()[1] - (1.0 + 1e-3 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::new([1], vec![3.0]).unwrap().with_grad();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            ..Default::default()
        });
        for _ in 0..2000 {
            let x = p.data()[0];
            p.grad_mut().unwrap()[0] = 2.0 * (x - 1.0);
            opt.step([&mut p]).unwrap();
        }
        assert!((p.data()[0] - 1.0).abs() < 1e-3);
    }
}
