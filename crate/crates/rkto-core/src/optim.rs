//! Adaptive-moment optimizer with decoupled weight decay, plus small
//! gradient-vector helpers.

use serde::{Deserialize, Serialize};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const ADAM_WEIGHT_DECAY: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One minimization step on `theta` along `grad`.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(theta.len(), grad.len());
        assert_eq!(theta.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + ADAM_WEIGHT_DECAY * theta[i]);
        }
    }
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_l2norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = crate::numerics::l2_norm(grad);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

pub fn axpy(acc: &mut [f64], scale: f64, x: &[f64]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, &xi) in acc.iter_mut().zip(x) {
        *a += scale * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut theta = vec![1.0, -2.0, 3.0];
        let before = theta.clone();
        let mut opt = AdamState::new(3);
        opt.step(&mut theta, &[0.0, 0.0, 0.0], 0.1);
        assert_eq!(theta, before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut theta = vec![1.0, -2.0];
        let before = theta.clone();
        let mut opt = AdamState::new(2);
        opt.step(&mut theta, &[0.5, -0.25], 0.0);
        assert_eq!(theta, before);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut theta = vec![5.0];
        let mut opt = AdamState::new(1);
        for _ in 0..2000 {
            let grad = vec![2.0 * theta[0]];
            opt.step(&mut theta, &grad, 0.01);
        }
        assert!(theta[0].abs() < 1e-2);
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut g = vec![3.0, 4.0];
        let norm = clip_l2norm(&mut g, 10.0);
        assert_eq!(norm, 5.0);
        assert_eq!(g, vec![3.0, 4.0]);
        let norm = clip_l2norm(&mut g, 1.0);
        assert_eq!(norm, 5.0);
        assert!((crate::numerics::l2_norm(&g) - 1.0).abs() < 1e-12);
    }
}
