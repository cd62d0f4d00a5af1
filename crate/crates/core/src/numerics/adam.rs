use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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

/// First and second moments for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let m: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            config,
            v: m.clone(),
            m,
            step_count: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected update. A non-finite gradient anywhere leaves
    /// parameters and moments untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam",
                format!("{} moments, {} params, {} grads", self.m.len(), params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.shape() != p.shape() {
                return Err(Error::shape("adam", format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            log::warn!("skipping optimizer step: non-finite gradient in parameter {i}");
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step_count += 1;
        let t = self.step_count as f64;
        let c1 = 1.0 - beta1.powf(t);
        let c2 = 1.0 - beta2.powf(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::full(&[3], 0.4)];
        let mut s = AdamState::new(AdamConfig::default(), &p);
        s.step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
        assert_eq!(p[0].data(), &[0.4; 3]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(cfg, &p);
        s.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        assert!((p[0].data()[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        let mut p = vec![Tensor::scalar(1.0)];
        let mut s = AdamState::new(cfg, &p);
        for _ in 0..500 {
            let g = Tensor::scalar(2.0 * p[0].data()[0]);
            s.step(&mut p, &[g]).unwrap();
        }
        assert!(p[0].data()[0].abs() < 1e-2);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut p = vec![Tensor::full(&[2], 1.0)];
        let mut s = AdamState::new(AdamConfig::default(), &p);
        let g = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(s.step(&mut p, &[g]).is_err());
        assert_eq!(p[0].data(), &[1.0, 1.0]);
        assert_eq!(s.step_count(), 0);
    }
}
