//! Adam with bias correction. Moments are kept in `f64` regardless of the
//! parameter type.

use crate::real::Real;
use crate::unet3d::UNetParams;

use super::TrainError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of completed steps.
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0, beta1: BETA1, beta2: BETA2, epsilon: EPSILON }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    fn check_len(&self, params: usize, grads: usize) -> Result<(), TrainError> {
        if params != self.len() || grads != self.len() {
            return Err(TrainError::StateMismatch { state: self.len(), params, grads });
        }
        Ok(())
    }

    /// Advance `t` and return the two bias-correction denominators.
    fn advance(&mut self) -> (f64, f64) {
        self.t += 1;
        let t = self.t as i32;
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }

    fn update<T: Real>(&mut self, offset: usize, params: &mut [T], grads: &[T], lr: f64, bc: (f64, f64)) {
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let m = &mut self.m[offset..offset + params.len()];
        let v = &mut self.v[offset..offset + params.len()];
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m).zip(v) {
            let g = g.as_f64();
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc.0;
            let v_hat = *v / bc.1;
            *p = T::of(p.as_f64() - lr * m_hat / (v_hat.sqrt() + eps));
        }
    }
}

fn check_lr(lr: f64) -> Result<(), TrainError> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(TrainError::InvalidConfig(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    Ok(())
}

/// One Adam step on a flat parameter vector.
pub fn adam_step<T: Real>(params: &mut [T], grads: &[T], state: &mut AdamState, lr: f64) -> Result<(), TrainError> {
    check_lr(lr)?;
    state.check_len(params.len(), grads.len())?;
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { tensor: format!("parameter {i}") });
    }
    let bc = state.advance();
    state.update(0, params, grads, lr, bc);
    Ok(())
}

/// One Adam step over every tensor of a network. Nothing is modified if any
/// gradient is non-finite; the error names the first offending tensor.
pub fn adam_step_net<T: Real>(
    params: &mut UNetParams<T>,
    grads: &UNetParams<T>,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    check_lr(lr)?;
    if params.config() != grads.config() {
        return Err(TrainError::StateMismatch {
            state: state.len(),
            params: params.param_count(),
            grads: grads.param_count(),
        });
    }
    state.check_len(params.param_count(), grads.param_count())?;
    if let Some(i) = grads.tensors().iter().position(|t| t.iter().any(|g| !g.is_finite())) {
        return Err(TrainError::NonFiniteGradient { tensor: grads.tensor_name(i) });
    }
    let bc = state.advance();
    let mut offset = 0;
    for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        state.update(offset, p, g, lr, bc);
        offset += g.len();
    }
    Ok(())
}
