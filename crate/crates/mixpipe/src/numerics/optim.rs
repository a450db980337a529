//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamwHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamwHyper {
    fn default() -> Self {
        // (beta1, beta2) = (0.9, 0.95) and weight decay 0.1; epsilon is not
        // pinned anywhere authoritative, so 1e-8 is adopted and configurable.
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1 }
    }
}

/// Per-parameter-array optimizer state.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: usize,
}

impl OptimState {
    pub fn new(len: usize) -> Self {
        Self { first_moment: vec![0.0; len], second_moment: vec![0.0; len], step_count: 0 }
    }
}

/// One AdamW update. Weight decay is decoupled: it is applied directly to
/// the parameters and never enters the moment estimates. Bias correction
/// uses the post-increment step count, so the very first step sees
/// `m_hat = g` for a fresh state.
///
/// Non-finite gradients are rejected before any mutation.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimState,
    hyper: &AdamwHyper,
) -> Result<()> {
    if params.len() != grads.len()
        || state.first_moment.len() != params.len()
        || state.second_moment.len() != params.len()
    {
        return Err(Error::ShapeMismatch {
            op: "adamw_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    if hyper.lr < 0.0 {
        return Err(Error::InvalidConfig("adamw lr must be >= 0".into()));
    }
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite { op: "adamw_step" });
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);

    for i in 0..params.len() {
        let g = grads[i];
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        params[i] -= hyper.lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * params[i]);
    }
    Ok(())
}
