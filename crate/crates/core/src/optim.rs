//! Adam with bias correction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("parameter/gradient/state length mismatch ({params} vs {grads} vs {state})")]
    ShapeMismatch { params: usize, grads: usize, state: usize },
    #[error("non-finite gradient at index {0}")]
    NonFinite(usize),
    #[error("learning rate must be positive")]
    InvalidLearningRate,
}

/// First/second moment accumulators for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One in-place Adam update. Nothing is modified when an error is returned.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<(), OptimError> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(OptimError::ShapeMismatch {
            params: params.len(),
            grads: grads.len(),
            state: state.len(),
        });
    }
    if !(lr > 0.0) {
        return Err(OptimError::InvalidLearningRate);
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(OptimError::NonFinite(i));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + EPS);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_move() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.001).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[0.1], &mut s, 0.001).unwrap();
        // m_hat = 0.1, v_hat = 0.01 -> step = lr * 0.1 / (0.1 + 1e-8)
        let expected = -0.001 * 0.1 / (0.1 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-18);
        assert!((p[0].abs() - 0.001).abs() < 1e-9);
    }

    #[test]
    fn descends_quadratic() {
        let mut x = vec![1.0];
        let mut s = AdamState::new(1);
        let mut prev = x[0] * x[0];
        for _ in 0..10 {
            let g = 2.0 * x[0];
            adam_step(&mut x, &[g], &mut s, 0.001).unwrap();
            let f = x[0] * x[0];
            assert!(f < prev);
            prev = f;
        }
    }

    #[test]
    fn rejects_bad_input_without_mutation() {
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        assert_eq!(adam_step(&mut p, &[f64::NAN], &mut s, 0.1), Err(OptimError::NonFinite(0)));
        assert_eq!(s.step, 0);
        assert!(matches!(adam_step(&mut p, &[0.0, 1.0], &mut s, 0.1), Err(OptimError::ShapeMismatch { .. })));
        assert_eq!(adam_step(&mut p, &[0.0], &mut s, 0.0), Err(OptimError::InvalidLearningRate));
    }
}
