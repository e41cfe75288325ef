use serde::{Deserialize, Serialize};

use super::tensor::Parameter;
use crate::error::{PiernError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments. One accumulator pair per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&mut Parameter]) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            shapes: params.iter().map(|p| p.value.shape().to_vec()).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// First moment after bias correction, for inspection.
    pub fn corrected_first_moment(&self, index: usize) -> Vec<f64> {
        let c = 1.0 - self.config.beta1.powi(self.step as i32);
        self.first[index].iter().map(|m| m / c).collect()
    }

    /// Applies one update to every trainable parameter; frozen ones are skipped.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        if params.len() != self.shapes.len() {
            return Err(PiernError::Shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.shapes.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.value.shape() != self.shapes[i].as_slice() || !p.grad.same_shape(&p.value) {
                return Err(PiernError::Shape(format!(
                    "parameter {i}: accumulator {:?} vs value {:?}",
                    self.shapes[i],
                    p.value.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let g = p.grad.data().to_vec();
            let w = p.value.data_mut();
            for j in 0..w.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                w[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn param(v: f64, g: f64) -> Parameter {
        let mut p = Parameter::new(Tensor::from_vec(vec![v]));
        p.grad = Tensor::from_vec(vec![g]);
        p
    }

    #[test]
    fn zero_gradient_leaves_value() {
        let mut p = param(0.7, 0.0);
        let mut opt = Adam::new(AdamConfig::default(), &[&mut p]);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.w()[0], 0.7);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = param(0.0, 1.0);
        let mut opt = Adam::new(AdamConfig::default(), &[&mut p]);
        opt.step(&mut [&mut p]).unwrap();
        // lr * g / (|g| + eps)
        let expected = 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p.w()[0] + expected).abs() < 1e-18);
        assert_eq!(opt.corrected_first_moment(0), vec![1.0]);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut p = param(2.0, 5.0);
        p.freeze();
        let mut opt = Adam::new(AdamConfig::default(), &[&mut p]);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.w()[0], 2.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = param(0.0, 1.0);
        let mut opt = Adam::new(AdamConfig::default(), &[&mut p]);
        let mut q = Parameter::zeros(&[2, 2]);
        assert!(matches!(opt.step(&mut [&mut q]), Err(PiernError::Shape(_))));
    }
}
