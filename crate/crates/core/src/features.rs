//! Feature tables and the softmax score function.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::linalg::dot;
use crate::rng::Rng;
use crate::scalar::{Real, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// `φ: S×A → R^d`.
    StateAction,
    /// `φ_V: S → R^d`.
    StateValue,
    /// `φ_π: S×A → R^m`.
    Policy,
}

impl FeatureKind {
    pub fn per_action(self) -> bool {
        !matches!(self, FeatureKind::StateValue)
    }
}

/// Dense feature table; rows are `s·n_actions + a` for per-action kinds and `s` otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap<T> {
    kind: FeatureKind,
    n_states: usize,
    n_actions: usize,
    dim: usize,
    /// `[rows, dim]` header kept in the serialised form.
    shape: [usize; 2],
    values: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(kind: FeatureKind, n_states: usize, n_actions: usize, dim: usize, values: Vec<T>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || dim == 0 {
            return Err(config("feature dimensions must be positive"));
        }
        let rows = if kind.per_action() { n_states * n_actions } else { n_states };
        if values.len() != rows * dim {
            return Err(contract(format!("feature table has {} values, expected {}", values.len(), rows * dim)));
        }
        Ok(Self { kind, n_states, n_actions, dim, shape: [rows, dim], values })
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    fn row(&self, r: usize) -> &[T] {
        &self.values[r * self.dim..(r + 1) * self.dim]
    }

    /// `φ(s, a)`; for a state-value map the action is ignored.
    pub fn feature(&self, s: usize, a: usize) -> &[T] {
        if self.kind.per_action() {
            self.row(s * self.n_actions + a)
        } else {
            self.row(s)
        }
    }

    pub fn state_feature(&self, s: usize) -> &[T] {
        debug_assert_eq!(self.kind, FeatureKind::StateValue);
        self.row(s)
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            kind: self.kind,
            n_states: self.n_states,
            n_actions: self.n_actions,
            dim: self.dim,
            shape: self.shape,
            values: self.values.iter().map(|x| U::lit(x.to_f64_lossy())).collect(),
        }
    }
}

impl FeatureMap<f64> {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: FeatureMap<f64> = serde_json::from_str(s)?;
        let out = Self::new(raw.kind, raw.n_states, raw.n_actions, raw.dim, raw.values)?;
        if out.shape != raw.shape {
            return Err(contract("feature shape header disagrees with kind and sizes"));
        }
        Ok(out)
    }

    /// Largest Euclidean feature norm in the table.
    pub fn max_norm(&self) -> f64 {
        (0..self.rows()).map(|r| dot(self.row(r), self.row(r)).sqrt()).fold(0.0, f64::max)
    }
}

/// Fills a table with i.i.d. Unif(−1, 1) entries.
pub fn sample_features(
    rng: &mut Rng,
    kind: FeatureKind,
    n_states: usize,
    n_actions: usize,
    dim: usize,
) -> Result<FeatureMap<f64>> {
    if n_states == 0 || n_actions == 0 || dim == 0 {
        return Err(config("feature dimensions must be positive"));
    }
    let rows = if kind.per_action() { n_states * n_actions } else { n_states };
    let values = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureMap::new(kind, n_states, n_actions, dim, values)
}

/// `π_λ(· | s) ∝ exp(λᵀφ_π(s, ·))`, computed with max-subtraction.
pub fn softmax_policy<T: Real>(pf: &FeatureMap<T>, lambda: &[T], s: usize) -> Vec<T> {
    let logits: Vec<T> = (0..pf.n_actions()).map(|a| dot(pf.feature(s, a), lambda)).collect();
    let mx = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let ex: Vec<T> = logits.iter().map(|l| (*l - mx).exp()).collect();
    let z = ex.iter().copied().fold(T::zero(), |a, b| a + b);
    ex.into_iter().map(|e| e / z).collect()
}

/// `g_λ(s,a) = φ_π(s,a) − Σ_b π_λ(b|s) φ_π(s,b)`.
pub fn score_function<T: Real>(pf: &FeatureMap<T>, lambda: &[T], s: usize, a: usize) -> Result<Vec<T>> {
    if lambda.len() != pf.dim() {
        return Err(contract(format!("λ has length {}, policy features have dim {}", lambda.len(), pf.dim())));
    }
    let pi = softmax_policy(pf, lambda, s);
    let mut g = pf.feature(s, a).to_vec();
    for (b, p) in pi.iter().enumerate() {
        for (gi, fi) in g.iter_mut().zip(pf.feature(s, b)) {
            *gi = *gi - *p * *fi;
        }
    }
    Ok(g)
}
