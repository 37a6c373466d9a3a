//! Target updates the attention block is trained to reproduce: batch
//! semi-gradient SARSA and batch actor-critic over one trajectory window.

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::features::{score_function, FeatureKind, FeatureMap};
use crate::linalg::dot;
use crate::mdp::Trajectory;
use crate::scalar::{Real, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    /// SARSA step size, or the actor step size in actor-critic mode.
    pub alpha: f64,
    /// Critic step size.
    pub beta: f64,
    pub gamma: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { alpha: 0.2, beta: 0.8, gamma: 0.5 }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) || !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(config(format!("step sizes must be positive, got α={}, β={}", self.alpha, self.beta)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(config(format!("γ must lie in [0, 1), got {}", self.gamma)));
        }
        Ok(())
    }
}

fn check(traj: &Trajectory, f: &FeatureMap<impl Scalar>, kind: FeatureKind) -> Result<()> {
    if f.kind() != kind {
        return Err(contract(format!("expected {kind:?} features, got {:?}", f.kind())));
    }
    if traj.is_empty() {
        return Err(contract("empty trajectory window"));
    }
    traj.validate(f.n_states(), f.n_actions())
}

/// `w + (α/n) Σ_i δ_i φ_i` with `δ_i = r_{i+1} + γwᵀφ_i⁺ − wᵀφ_i`.
pub fn sarsa_teacher<T: Scalar>(traj: &Trajectory, features: &FeatureMap<T>, w: &[T], cfg: &TeacherConfig) -> Result<Vec<T>> {
    check(traj, features, FeatureKind::StateAction)?;
    if w.len() != features.dim() {
        return Err(contract(format!("w has length {}, expected {}", w.len(), features.dim())));
    }
    let (alpha, gamma) = (T::lit(cfg.alpha), T::lit(cfg.gamma));
    let n = traj.len();
    let mut acc = vec![T::zero(); w.len()];
    for i in 0..n {
        let phi = features.feature(traj.states[i], traj.actions[i]);
        let phi_next = features.feature(traj.states[i + 1], traj.actions[i + 1]);
        let delta = T::lit(traj.rewards[i]) + gamma.clone() * dot(w, phi_next) - dot(w, phi);
        for (a, p) in acc.iter_mut().zip(phi) {
            *a = a.clone() + delta.clone() * p.clone();
        }
    }
    let step = alpha / T::from_usize_lit(n);
    Ok(w.iter().zip(acc).map(|(wi, a)| wi.clone() + step.clone() * a).collect())
}

/// Returns `(w_AC, λ_AC)`; the score is evaluated at the incoming `λ`.
pub fn ac_teacher<T: Real>(
    traj: &Trajectory,
    value_features: &FeatureMap<T>,
    policy_features: &FeatureMap<T>,
    w: &[T],
    lambda: &[T],
    cfg: &TeacherConfig,
) -> Result<(Vec<T>, Vec<T>)> {
    check(traj, value_features, FeatureKind::StateValue)?;
    check(traj, policy_features, FeatureKind::Policy)?;
    if w.len() != value_features.dim() || lambda.len() != policy_features.dim() {
        return Err(contract("parameter lengths do not match feature dimensions"));
    }
    let (alpha, beta, gamma) = (T::lit(cfg.alpha), T::lit(cfg.beta), T::lit(cfg.gamma));
    let n = traj.len();
    let mut dw = vec![T::zero(); w.len()];
    let mut dl = vec![T::zero(); lambda.len()];
    let mut discount = T::one();
    for i in 0..n {
        let phi = value_features.state_feature(traj.states[i]);
        let phi_next = value_features.state_feature(traj.states[i + 1]);
        let delta = T::lit(traj.rewards[i]) + gamma * dot(w, phi_next) - dot(w, phi);
        for (a, p) in dw.iter_mut().zip(phi) {
            *a = *a + delta * *p;
        }
        let g = score_function(policy_features, lambda, traj.states[i], traj.actions[i])?;
        for (a, gi) in dl.iter_mut().zip(g) {
            *a = *a + discount * delta * gi;
        }
        discount = discount * gamma;
    }
    let nn = T::from_usize_lit(n);
    let w_ac = w.iter().zip(dw).map(|(wi, a)| *wi + beta / nn * a).collect();
    let l_ac = lambda.iter().zip(dl).map(|(li, a)| *li + alpha / nn * a).collect();
    Ok((w_ac, l_ac))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sarsa_hand_example() {
        // one state per time step so φ can be chosen freely: φ = (1, 2, 1)
        let f = FeatureMap::<f64>::new(FeatureKind::StateAction, 3, 1, 1, vec![1.0, 2.0, 1.0]).unwrap();
        let t = Trajectory { states: vec![0, 1, 2], actions: vec![0, 0, 0], rewards: vec![1.0, -1.0] };
        let cfg = TeacherConfig { alpha: 0.1, beta: 0.8, gamma: 0.5 };
        let out = sarsa_teacher(&t, &f, &[1.0], &cfg).unwrap();
        assert!((out[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn ac_hand_example() {
        let vf = FeatureMap::<f64>::new(FeatureKind::StateValue, 2, 2, 1, vec![1.0, 1.0]).unwrap();
        let pf = FeatureMap::new(FeatureKind::Policy, 2, 2, 1, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        // the taken action is the one with φ_π = 1, so g = 1 − ½ = ½
        let t = Trajectory { states: vec![0, 1], actions: vec![0, 0], rewards: vec![1.0] };
        let (w, l) = ac_teacher(&t, &vf, &pf, &[0.0], &[0.0], &TeacherConfig::default()).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-15);
        assert!((l[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_rewards_zero_w() {
        let f = FeatureMap::new(FeatureKind::StateAction, 2, 2, 2, vec![0.3, -0.1, 0.5, 0.2, -0.7, 0.9, 0.1, 0.4]).unwrap();
        let t = Trajectory { states: vec![0, 1, 1, 0], actions: vec![1, 0, 1, 1], rewards: vec![0.0; 3] };
        assert_eq!(sarsa_teacher(&t, &f, &[0.0, 0.0], &TeacherConfig::default()).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TeacherConfig { gamma: 1.0, ..Default::default() }.validate().is_err());
        assert!(TeacherConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(TeacherConfig::default().validate().is_ok());
    }

    #[test]
    fn kind_mismatch_is_contract_error() {
        let f = FeatureMap::new(FeatureKind::Policy, 2, 1, 1, vec![1.0, 1.0]).unwrap();
        let t = Trajectory { states: vec![0, 1], actions: vec![0, 0], rewards: vec![1.0] };
        assert!(sarsa_teacher(&t, &f, &[0.0], &TeacherConfig::default()).is_err());
    }
}
