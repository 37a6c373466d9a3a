//! Prompt matrices that place a trajectory window and the current
//! parameters into the attention block's input, and the empirical
//! trajectory moments derived from them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::features::{score_function, FeatureKind, FeatureMap};
use crate::linalg::{dot, Matrix};
use crate::mdp::Trajectory;
use crate::scalar::{Real, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sarsa,
    #[serde(rename = "ac")]
    ActorCritic,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Sarsa => "sarsa",
            Mode::ActorCritic => "ac",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sarsa" => Ok(Mode::Sarsa),
            "ac" | "actor_critic" | "actor-critic" => Ok(Mode::ActorCritic),
            other => Err(crate::error::config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Row/column split of the `D×D` parameters.
///
/// The top block holds the trajectory rows `x_i` (`2d+1`, plus `m` score rows
/// in actor-critic mode); the bottom block holds `w̃ = (1; λ; w)`. The readout
/// is the bottom block minus its leading constant row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub mode: Mode,
    pub d: usize,
    pub m: usize,
}

impl BlockLayout {
    pub fn sarsa(d: usize) -> Self {
        Self { mode: Mode::Sarsa, d, m: 0 }
    }

    pub fn actor_critic(d: usize, m: usize) -> Self {
        Self { mode: Mode::ActorCritic, d, m }
    }

    pub fn top(&self) -> usize {
        2 * self.d + self.m + 1
    }

    pub fn bottom(&self) -> usize {
        self.d + self.m + 1
    }

    pub fn dim(&self) -> usize {
        self.top() + self.bottom()
    }

    pub fn readout_len(&self) -> usize {
        self.d + self.m
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.d > 0
            && match self.mode {
                Mode::Sarsa => self.m == 0,
                Mode::ActorCritic => self.m > 0,
            };
        if ok {
            Ok(())
        } else {
            Err(contract(format!("inconsistent layout {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prompt<T> {
    layout: BlockLayout,
    matrix: Matrix<T>,
    n: usize,
}

impl<T: Scalar> Prompt<T> {
    pub fn layout(&self) -> BlockLayout {
        self.layout
    }

    pub fn mode(&self) -> Mode {
        self.layout.mode
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    /// Window length `n`; the matrix has `n + 1` columns.
    pub fn n(&self) -> usize {
        self.n
    }

    /// `x_i`, the top-block part of column `i < n`.
    pub fn x(&self, i: usize) -> Vec<T> {
        (0..self.layout.top()).map(|r| self.matrix[(r, i)].clone()).collect()
    }

    /// `w̃ = (1; λ; w)`, the bottom of the final column.
    pub fn w_tilde(&self) -> Vec<T> {
        let top = self.layout.top();
        (top..self.layout.dim()).map(|r| self.matrix[(r, self.n)].clone()).collect()
    }

    /// The embedded current parameters `(λ; w)` (just `w` in SARSA mode).
    pub fn current(&self) -> Vec<T> {
        self.w_tilde()[1..].to_vec()
    }

    /// `Σ̂ = (1/n) Σ_i x_i x_iᵀ`.
    pub fn sigma_hat(&self) -> Matrix<T> {
        let top = self.layout.top();
        let mut s = Matrix::zeros(top, top);
        let inv_n = T::one() / T::from_usize_lit(self.n);
        for i in 0..self.n {
            let x = self.x(i);
            s.add_outer(&inv_n, &x, &x);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.matrix.rows() {
            let row: Vec<String> = self.matrix.row(r).iter().map(|v| format!("{:?}", v.to_f64_lossy())).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    /// Assembles a prompt from explicit columns; used by tests and samplers
    /// that synthesise `x_i` directly.
    pub fn from_columns(layout: BlockLayout, xs: &[Vec<T>], w_tilde: &[T]) -> Result<Self> {
        layout.validate()?;
        if xs.is_empty() {
            return Err(contract("prompt needs at least one trajectory column"));
        }
        if xs.iter().any(|x| x.len() != layout.top()) || w_tilde.len() != layout.bottom() {
            return Err(contract("prompt column sizes do not match the layout"));
        }
        let n = xs.len();
        let mut matrix = Matrix::zeros(layout.dim(), n + 1);
        for (i, x) in xs.iter().enumerate() {
            for (r, v) in x.iter().enumerate() {
                matrix[(r, i)] = v.clone();
            }
        }
        for (k, v) in w_tilde.iter().enumerate() {
            matrix[(layout.top() + k, n)] = v.clone();
        }
        Ok(Self { layout, matrix, n })
    }
}

fn check_traj(traj: &Trajectory, f: &FeatureMap<impl Scalar>) -> Result<()> {
    if traj.is_empty() {
        return Err(contract("trajectory window must contain at least one transition"));
    }
    traj.validate(f.n_states(), f.n_actions())
}

/// SARSA prompt: columns `(φ_i; γφ_i⁺; r_{i+1}; 0)` then `(0; 1; w)`.
pub fn build_sarsa_prompt<T: Scalar>(traj: &Trajectory, features: &FeatureMap<T>, w: &[T], gamma: f64) -> Result<Prompt<T>> {
    if features.kind() != FeatureKind::StateAction {
        return Err(contract("SARSA prompts need state-action features"));
    }
    if w.len() != features.dim() {
        return Err(contract(format!("w has length {}, features have dim {}", w.len(), features.dim())));
    }
    check_traj(traj, features)?;
    let d = features.dim();
    let g = T::lit(gamma);
    let xs: Vec<Vec<T>> = (0..traj.len())
        .map(|i| {
            let mut x = Vec::with_capacity(2 * d + 1);
            x.extend_from_slice(features.feature(traj.states[i], traj.actions[i]));
            x.extend(features.feature(traj.states[i + 1], traj.actions[i + 1]).iter().map(|v| g.clone() * v.clone()));
            x.push(T::lit(traj.rewards[i]));
            x
        })
        .collect();
    let mut w_tilde = vec![T::one()];
    w_tilde.extend_from_slice(w);
    Prompt::from_columns(BlockLayout::sarsa(d), &xs, &w_tilde)
}

/// Actor-critic prompt: columns `(φ_V(s_i); γφ_V(s_{i+1}); r_{i+1}; γ^i g_λ(s_i,a_i); 0)`
/// then `(0; 1; λ; w)`.
pub fn build_ac_prompt<T: Real>(
    traj: &Trajectory,
    value_features: &FeatureMap<T>,
    policy_features: &FeatureMap<T>,
    w: &[T],
    lambda: &[T],
    gamma: f64,
) -> Result<Prompt<T>> {
    if value_features.kind() != FeatureKind::StateValue || policy_features.kind() != FeatureKind::Policy {
        return Err(contract("actor-critic prompts need state-value and policy features"));
    }
    if w.len() != value_features.dim() || lambda.len() != policy_features.dim() {
        return Err(contract("parameter lengths do not match feature dimensions"));
    }
    check_traj(traj, policy_features)?;
    check_traj(traj, value_features)?;
    let (d, m) = (value_features.dim(), policy_features.dim());
    let g = T::lit(gamma);
    let mut discount = T::one();
    let mut xs = Vec::with_capacity(traj.len());
    for i in 0..traj.len() {
        let mut x = Vec::with_capacity(2 * d + m + 1);
        x.extend_from_slice(value_features.state_feature(traj.states[i]));
        x.extend(value_features.state_feature(traj.states[i + 1]).iter().map(|v| g * *v));
        x.push(T::lit(traj.rewards[i]));
        let score = score_function(policy_features, lambda, traj.states[i], traj.actions[i])?;
        x.extend(score.into_iter().map(|s| discount * s));
        xs.push(x);
        discount = discount * g;
    }
    let mut w_tilde = vec![T::one()];
    w_tilde.extend_from_slice(lambda);
    w_tilde.extend_from_slice(w);
    Prompt::from_columns(BlockLayout::actor_critic(d, m), &xs, &w_tilde)
}

/// Empirical moments of a SARSA window.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStats<T> {
    /// `Σ̂ = (1/n) Σ x_i x_iᵀ`.
    pub sigma_hat: Matrix<T>,
    /// `R = (1/n) Σ φ_i x_iᵀ`.
    pub regressor: Matrix<T>,
    /// `b = (1/n) Σ x_i δ_i`.
    pub td_target: Vec<T>,
    /// `δ_i = r_{i+1} + γwᵀφ_i⁺ − wᵀφ_i`.
    pub td_errors: Vec<T>,
    pub n: usize,
}

pub fn trajectory_stats<T: Scalar>(prompt: &Prompt<T>, w: &[T]) -> Result<TrajectoryStats<T>> {
    let layout = prompt.layout();
    if layout.mode != Mode::Sarsa {
        return Err(contract("trajectory statistics are defined for SARSA prompts"));
    }
    let d = layout.d;
    if w.len() != d {
        return Err(contract("w length does not match the prompt"));
    }
    let n = prompt.n();
    let top = layout.top();
    // x_iᵀ(−w; w; 1) = δ_i
    let mut probe = Vec::with_capacity(top);
    probe.extend(w.iter().map(|v| -v.clone()));
    probe.extend_from_slice(w);
    probe.push(T::one());
    let inv_n = T::one() / T::from_usize_lit(n);
    let mut sigma_hat = Matrix::zeros(top, top);
    let mut regressor = Matrix::zeros(d, top);
    let mut td_target = vec![T::zero(); top];
    let mut td_errors = Vec::with_capacity(n);
    for i in 0..n {
        let x = prompt.x(i);
        let delta = dot(&x, &probe);
        sigma_hat.add_outer(&inv_n, &x, &x);
        regressor.add_outer(&inv_n, &x[..d], &x);
        let scale = inv_n.clone() * delta.clone();
        td_target.iter_mut().zip(&x).for_each(|(b, xi)| *b = b.clone() + scale.clone() * xi.clone());
        td_errors.push(delta);
    }
    Ok(TrajectoryStats { sigma_hat, regressor, td_target, td_errors, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::sample_features;
    use crate::mdp::{rollout, sample_mdp, MdpConfig, PolicySpec};
    use crate::rng::Rng;
    use rand::{Rng as _, SeedableRng};

    fn random_sarsa(seed: u64, d: usize, n: usize) -> (Prompt<f64>, Vec<f64>) {
        let mut rng = Rng::seed_from_u64(seed);
        let mdp = sample_mdp(&mut rng, &MdpConfig::new(4, 3, 0.5)).unwrap();
        let f = sample_features(&mut rng, FeatureKind::StateAction, 4, 3, d).unwrap();
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = rollout(&mdp, &PolicySpec::UniformRandom, 0, n, &mut rng).unwrap();
        (build_sarsa_prompt(&t, &f, &w, 0.5).unwrap(), w)
    }

    #[test]
    fn full_size_sarsa_prompt_shape() {
        let mut rng = Rng::seed_from_u64(0);
        let mdp = sample_mdp(&mut rng, &MdpConfig::new(9, 4, 0.5)).unwrap();
        let f = sample_features(&mut rng, FeatureKind::StateAction, 9, 4, 36).unwrap();
        let t = rollout(&mdp, &PolicySpec::UniformRandom, 0, 20, &mut rng).unwrap();
        let p = build_sarsa_prompt(&t, &f, &[0.0; 36], 0.5).unwrap();
        assert_eq!(p.matrix().shape(), (110, 21));
        let last = p.matrix().col(20);
        for (r, v) in last.iter().enumerate() {
            assert_eq!(*v, if r == 2 * 36 + 1 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn full_size_ac_prompt_shape() {
        let mut rng = Rng::seed_from_u64(1);
        let mdp = sample_mdp(&mut rng, &MdpConfig::new(9, 4, 0.5)).unwrap();
        let vf = sample_features(&mut rng, FeatureKind::StateValue, 9, 4, 9).unwrap();
        let pf = sample_features(&mut rng, FeatureKind::Policy, 9, 4, 36).unwrap();
        let t = rollout(&mdp, &PolicySpec::UniformRandom, 0, 20, &mut rng).unwrap();
        let p = build_ac_prompt(&t, &vf, &pf, &[0.0; 9], &[0.0; 36], 0.5).unwrap();
        assert_eq!(p.matrix().shape(), (101, 21));
        let last = p.matrix().col(20);
        for (r, v) in last.iter().enumerate() {
            assert_eq!(*v, if r == 2 * 9 + 36 + 1 { 1.0 } else { 0.0 });
        }
        // Column 0 carries γ⁰ g_λ exactly.
        let g0 = score_function(&pf, &[0.0; 36], t.states[0], t.actions[0]).unwrap();
        for k in 0..36 {
            assert_eq!(p.matrix()[(19 + k, 0)], g0[k]);
        }
        let g1 = score_function(&pf, &[0.0; 36], t.states[1], t.actions[1]).unwrap();
        assert_eq!(p.matrix()[(19, 1)], 0.5 * g1[0]);
    }

    #[test]
    fn column_norm_recomputation() {
        let (p, _) = random_sarsa(3, 4, 6);
        let mut rng = Rng::seed_from_u64(3);
        let _ = &mut rng;
        for i in 0..p.n() {
            let x = p.x(i);
            let direct: f64 = x.iter().map(|v| v * v).sum();
            let phi: f64 = x[..4].iter().map(|v| v * v).sum();
            let gphi: f64 = x[4..8].iter().map(|v| v * v).sum();
            assert!((direct - (phi + gphi + x[8] * x[8])).abs() < 1e-14);
        }
    }

    #[test]
    fn wrong_kind_or_dims_is_contract_error() {
        let mut rng = Rng::seed_from_u64(0);
        let mdp = sample_mdp(&mut rng, &MdpConfig::new(3, 2, 0.5)).unwrap();
        let f = sample_features(&mut rng, FeatureKind::Policy, 3, 2, 2).unwrap();
        let t = rollout(&mdp, &PolicySpec::UniformRandom, 0, 3, &mut rng).unwrap();
        assert!(build_sarsa_prompt(&t, &f, &[0.0; 2], 0.5).is_err());
        let f = sample_features(&mut rng, FeatureKind::StateAction, 3, 2, 2).unwrap();
        assert!(build_sarsa_prompt(&t, &f, &[0.0; 3], 0.5).is_err());
        let empty = Trajectory { states: vec![0], actions: vec![0], rewards: vec![] };
        assert!(build_sarsa_prompt(&empty, &f, &[0.0; 2], 0.5).is_err());
    }

    #[test]
    fn stats_hand_example() {
        // n=1, d=1: φ0=1, φ0⁺=2, r1=1, γ=0.5, w=1.
        let layout = BlockLayout::sarsa(1);
        let p = Prompt::from_columns(layout, &[vec![1.0, 0.5 * 2.0, 1.0]], &[1.0, 1.0]).unwrap();
        let s = trajectory_stats(&p, &[1.0]).unwrap();
        assert_eq!(s.td_errors, vec![1.0]);
        assert_eq!(s.td_target, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn stats_zero_rewards_zero_w() {
        let mut rng = Rng::seed_from_u64(4);
        let f = sample_features(&mut rng, FeatureKind::StateAction, 3, 2, 3).unwrap();
        let t = Trajectory { states: vec![0, 1, 2, 0], actions: vec![1, 0, 1, 1], rewards: vec![0.0; 3] };
        let p = build_sarsa_prompt(&t, &f, &[0.0; 3], 0.5).unwrap();
        let s = trajectory_stats(&p, &[0.0; 3]).unwrap();
        assert_eq!(*s.td_target.last().unwrap(), 0.0);
        assert!(s.td_target.iter().all(|b| *b == 0.0));
    }

    #[test]
    fn stats_structure_identities() {
        for seed in 0..20 {
            let (p, w) = random_sarsa(seed, 3, 7);
            let s = trajectory_stats(&p, &w).unwrap();
            let d = 3;
            // R equals the first d rows of Σ̂.
            for r in 0..d {
                assert_eq!(s.regressor.row(r), s.sigma_hat.row(r));
            }
            // b = Σ̂ (−w; w; 1).
            let mut probe: Vec<f64> = w.iter().map(|v| -v).collect();
            probe.extend_from_slice(&w);
            probe.push(1.0);
            let b = s.sigma_hat.matvec(&probe);
            for (x, y) in b.iter().zip(&s.td_target) {
                assert!((x - y).abs() < 1e-12);
            }
            assert!(s.sigma_hat.min_symmetric_eigenvalue() >= -1e-10);
            assert!(s.sigma_hat.max_abs_diff(&s.sigma_hat.transpose()) == 0.0);
            assert_eq!(s.sigma_hat, p.sigma_hat());
        }
    }

    #[test]
    fn column_norms_respect_boundedness() {
        let (p, _) = random_sarsa(9, 5, 10);
        let b_phi2 = 5.0; // ‖φ‖² ≤ d for entries in [−1, 1]
        let b_sigma = 2.0 * b_phi2 + 1.0;
        for i in 0..p.n() {
            let x = p.x(i);
            assert!(dot(&x, &x) <= b_sigma);
        }
    }

    #[test]
    fn csv_export_has_one_line_per_row() {
        let (p, _) = random_sarsa(1, 2, 3);
        let csv = p.to_csv();
        assert_eq!(csv.lines().count(), 3 * 2 + 2);
        assert!(csv.lines().all(|l| l.split(',').count() == 4));
    }
}
