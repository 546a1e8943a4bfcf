//! Adam and Adamax with bias correction, plus the cosine learning-rate
//! schedule over the full run.

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Adamax,
}

/// First/second moment accumulators (for Adamax `v` holds the infinity-norm).
#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One Adam update; `t` is 1-based for bias correction.
pub fn adam_step(params: &mut [f64], grads: &[f64], mom: &mut Moments, t: usize, lr: f64) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        mom.m[i] = BETA1 * mom.m[i] + (1.0 - BETA1) * g;
        mom.v[i] = BETA2 * mom.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = mom.m[i] / bc1;
        let v_hat = mom.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
    }
}

/// One Adamax update (infinity-norm second moment).
pub fn adamax_step(params: &mut [f64], grads: &[f64], mom: &mut Moments, t: usize, lr: f64) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - BETA1.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        mom.m[i] = BETA1 * mom.m[i] + (1.0 - BETA1) * g;
        mom.v[i] = (BETA2 * mom.v[i]).max(g.abs());
        params[i] -= lr * (mom.m[i] / bc1) / (mom.v[i] + EPS);
    }
}

/// Stateful wrapper used by the training loop.
#[derive(Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    mom: Moments,
    t: usize,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        Optimizer { kind, mom: Moments::zeros(n_params), t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.mom.m.len() || grads.len() != self.mom.m.len() {
            return Err(Error::Shape("optimizer: parameter/gradient length mismatch".into()));
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Adam => adam_step(params, grads, &mut self.mom, self.t, lr),
            OptimizerKind::Adamax => adamax_step(params, grads, &mut self.mom, self.t, lr),
        }
        Ok(())
    }
}

/// Cosine decay across the whole run: lr0 * 0.5 * (1 + cos(pi step/total)).
pub fn cosine_lr(lr0: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = (step as f64 / total_steps as f64).clamp(0.0, 1.0);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![1.0, -2.0, 3.0];
        let g = vec![0.0; 3];
        let mut mom = Moments::zeros(3);
        adam_step(&mut p, &g, &mut mom, 1, 0.1);
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        adamax_step(&mut p, &g, &mut mom, 2, 0.1);
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_adam_step_is_minus_lr() {
        // Bias-corrected first step with g = 1: delta = -lr / (1 + eps).
        let mut p = vec![0.0];
        let mut mom = Moments::zeros(1);
        adam_step(&mut p, &[1.0], &mut mom, 1, 0.1);
        assert!((p[0] + 0.1).abs() < 1e-8, "got {}", p[0]);
    }

    #[test]
    fn adamax_norm_decays_only_through_beta2() {
        let mut rng = Rng::new(4);
        let mut mom = Moments::zeros(1);
        let mut p = vec![0.0];
        let mut prev_u = 0.0;
        for t in 1..=500 {
            let g = rng.range(-2.0, 2.0);
            adamax_step(&mut p, &[g], &mut mom, t, 1e-3);
            let u = mom.v[0];
            assert!(u >= g.abs() - 1e-15);
            assert!(u >= BETA2 * prev_u - 1e-15);
            prev_u = u;
        }
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0.5, 0, 100), 0.5);
        assert!((cosine_lr(0.5, 50, 100) - 0.25).abs() < 1e-15);
        assert!(cosine_lr(0.5, 100, 100).abs() < 1e-16);
    }
}
