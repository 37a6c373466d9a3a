use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps_hat: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Plain gradient step `θ ← θ − η∇L`.
    Sgd,
}

/// Adam moments, one pair per trained block, in a fixed block order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub m: Vec<Matrix<f64>>,
    pub v: Vec<Matrix<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(hyper: AdamHyper, shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Self { hyper, m: zeros(), v: zeros(), step: 0 }
    }
}

fn check(params: &[&mut Matrix<f64>], grads: &[&Matrix<f64>]) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.shape() != g.shape()) {
        return Err(contract("parameter and gradient blocks do not line up"));
    }
    if let Some((k, _)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient block {k} has non-finite entries")));
    }
    Ok(())
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [&mut Matrix<f64>], grads: &[&Matrix<f64>], lr: f64) -> Result<()> {
    check(params, grads)?;
    if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape()) {
        return Err(contract("Adam state does not match the trained blocks"));
    }
    state.step += 1;
    let AdamHyper { beta1, beta2, eps_hat } = state.hyper;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[k].as_mut_slice();
        let v = state.v[k].as_mut_slice();
        for (((pi, gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps_hat);
        }
    }
    Ok(())
}

pub fn sgd_step(params: &mut [&mut Matrix<f64>], grads: &[&Matrix<f64>], lr: f64) -> Result<()> {
    check(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (pi, gi) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *pi -= lr * gi;
        }
    }
    Ok(())
}
