use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments. State is keyed by parameter position,
/// so callers must pass parameters in the same order every step.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every parameter from its gradient buffer. Nothing is changed
    /// if any gradient is missing or non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor3]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            let g = p
                .grad
                .as_ref()
                .ok_or_else(|| NnError::Invalid(format!("parameter {i} has no gradient buffer")))?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(NnError::Shape("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.as_ref().expect("checked above").clone();
            for (((x, gi), mi), vi) in p.data.iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(vals: Vec<f64>, grad: Vec<f64>) -> Tensor3 {
        let mut p = Tensor3::param([1, 1, vals.len()], vals).unwrap();
        p.grad = Some(grad);
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = param(vec![0.5, -2.0, 3.0], vec![1.0; 3]);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut [&mut p]).unwrap();
        let expected = 1e-4 / (1.0 + 1e-8);
        for (x, x0) in p.data.iter().zip([0.5, -2.0, 3.0]) {
            assert!(((x0 - x) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = param(vec![1.0, 2.0], vec![0.0, 0.0]);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..3 {
            opt.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.data, vec![1.0, 2.0]);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut a = param(vec![1.0], vec![1.0]);
        let mut b = param(vec![1.0], vec![f64::NAN]);
        let mut opt = Adam::new(AdamConfig::default());
        assert!(matches!(opt.step(&mut [&mut a, &mut b]), Err(NnError::NonFinite(_))));
        assert_eq!(a.data, vec![1.0]);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = param(vec![0.3, -0.7], vec![0.0, 0.0]);
            let mut opt = Adam::new(AdamConfig::default());
            for k in 0..20 {
                p.grad = Some(vec![(k as f64).sin(), (k as f64 * 0.3).cos()]);
                opt.step(&mut [&mut p]).unwrap();
            }
            p.data
        };
        assert_eq!(run(), run());
    }
}
