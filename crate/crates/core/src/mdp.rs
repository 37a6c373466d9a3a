//! Tabular MDPs: random task sampling, policy rollouts and exact
//! dynamic-programming oracles.

use rand::Rng as _;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::features::{FeatureKind, FeatureMap};
use crate::linalg::{dot, Matrix};
use crate::rng::Rng;

const SIMPLEX_TOL: f64 = 1e-12;

/// Family of random tasks: Dirichlet(1,…,1) kernels and uniform rewards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpConfig {
    pub n_states: usize,
    pub n_actions: usize,
    pub discount: f64,
    pub reward_low: f64,
    pub reward_high: f64,
}

impl Default for MdpConfig {
    fn default() -> Self {
        Self { n_states: 9, n_actions: 4, discount: 0.5, reward_low: -1.0, reward_high: 1.0 }
    }
}

impl MdpConfig {
    pub fn new(n_states: usize, n_actions: usize, discount: f64) -> Self {
        Self { n_states, n_actions, discount, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(config("state and action sets must be non-empty"));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(config(format!("discount {} outside [0, 1)", self.discount)));
        }
        if !(self.reward_low.is_finite() && self.reward_high.is_finite() && self.reward_low <= self.reward_high) {
            return Err(config(format!("bad reward range [{}, {}]", self.reward_low, self.reward_high)));
        }
        Ok(())
    }

    /// Largest absolute reward the family can emit.
    pub fn reward_bound(&self) -> f64 {
        self.reward_low.abs().max(self.reward_high.abs())
    }
}

/// A continuing tabular MDP with rewards indexed by `(action, next_state)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMdp")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    discount: f64,
    /// Row-major `(state, action, next_state)`.
    transition: Vec<f64>,
    /// Row-major `(action, next_state)`.
    reward: Vec<f64>,
    initial_dist: Vec<f64>,
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct RawMdp {
    n_states: usize,
    n_actions: usize,
    discount: f64,
    transition: Vec<f64>,
    reward: Vec<f64>,
    initial_dist: Vec<f64>,
    #[serde(default)]
    seed: Option<u64>,
}

impl TryFrom<RawMdp> for TabularMdp {
    type Error = Error;

    fn try_from(r: RawMdp) -> Result<Self> {
        let mut mdp = TabularMdp::new(r.n_states, r.n_actions, r.discount, r.transition, r.reward, r.initial_dist)?;
        mdp.seed = r.seed;
        Ok(mdp)
    }
}

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(contract(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(contract(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        discount: f64,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(config("state and action sets must be non-empty"));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(config(format!("discount {discount} outside [0, 1)")));
        }
        if transition.len() != n_states * n_actions * n_states
            || reward.len() != n_actions * n_states
            || initial_dist.len() != n_states
        {
            return Err(contract("MDP table sizes do not match (n_states, n_actions)"));
        }
        for (k, row) in transition.chunks(n_states).enumerate() {
            check_simplex(row, &format!("transition row (s={}, a={})", k / n_actions, k % n_actions))?;
        }
        check_simplex(&initial_dist, "initial distribution")?;
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(contract("non-finite reward"));
        }
        Ok(Self { n_states, n_actions, discount, transition, reward, initial_dist, seed: None })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// `P(· | s, a)`.
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let k = (s * self.n_actions + a) * self.n_states;
        &self.transition[k..k + self.n_states]
    }

    /// `r(a, s')`.
    pub fn reward(&self, a: usize, next: usize) -> f64 {
        self.reward[a * self.n_states + next]
    }

    /// `R(s, a) = Σ_{s'} P(s'|s,a) r(a,s')`.
    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        self.transition_row(s, a).iter().enumerate().map(|(sp, p)| p * self.reward(a, sp)).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn dirichlet_ones(rng: &mut Rng, k: usize) -> Vec<f64> {
    let mut x: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = x.iter().sum();
    x.iter_mut().for_each(|v| *v /= s);
    x
}

/// Draws a task: initial distribution and each `P(·|s,a)` from
/// Dirichlet(1,…,1), rewards `r(a,s')` i.i.d. uniform on the configured range.
pub fn sample_mdp(rng: &mut Rng, cfg: &MdpConfig) -> Result<TabularMdp> {
    cfg.validate()?;
    let (ns, na) = (cfg.n_states, cfg.n_actions);
    let initial_dist = dirichlet_ones(rng, ns);
    let mut transition = Vec::with_capacity(ns * na * ns);
    for _ in 0..ns * na {
        transition.extend(dirichlet_ones(rng, ns));
    }
    let reward = (0..na * ns)
        .map(|_| {
            if cfg.reward_low < cfg.reward_high {
                rng.random_range(cfg.reward_low..cfg.reward_high)
            } else {
                cfg.reward_low
            }
        })
        .collect();
    TabularMdp::new(ns, na, cfg.discount, transition, reward, initial_dist)
}

/// An `n`-step window `(s_0, a_0, r_1, …, s_n, a_n)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    /// Number of transitions `n`.
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn last_state(&self) -> usize {
        *self.states.last().expect("trajectory has at least one state")
    }

    pub fn validate(&self, n_states: usize, n_actions: usize) -> Result<()> {
        let n = self.rewards.len();
        if self.states.len() != n + 1 || self.actions.len() != n + 1 {
            return Err(contract("trajectory lengths must satisfy |s| = |a| = |r| + 1"));
        }
        if self.states.iter().any(|&s| s >= n_states) || self.actions.iter().any(|&a| a >= n_actions) {
            return Err(contract("trajectory index out of range"));
        }
        Ok(())
    }
}

/// Optimal action values from value iteration, row-major `(state, action)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub values: Vec<f64>,
}

impl QTable {
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn greedy_action(&self, s: usize) -> usize {
        argmax_lowest(self.row(s))
    }
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Behaviour policies used for rollouts and evaluation.
#[derive(Clone, Copy, Debug)]
pub enum PolicySpec<'a> {
    /// ε-greedy on `Q_w(s,a) = wᵀφ(s,a)`.
    EpsilonGreedyQ { features: &'a FeatureMap<f64>, w: &'a [f64], epsilon: f64 },
    /// Softmax on `λᵀφ_π(s,·)` mixed with ε uniform exploration.
    SoftmaxActor { features: &'a FeatureMap<f64>, lambda: &'a [f64], epsilon: f64 },
    UniformRandom,
    /// Greedy with respect to a known action-value table (no exploration).
    GreedyOracle { q: &'a QTable },
}

impl PolicySpec<'_> {
    pub fn validate(&self, n_states: usize, n_actions: usize) -> Result<()> {
        let check_map = |f: &FeatureMap<f64>, params: usize, kind: FeatureKind| -> Result<()> {
            if f.kind() != kind {
                return Err(contract(format!("policy expects {kind:?} features, got {:?}", f.kind())));
            }
            if f.n_states() != n_states || f.n_actions() != n_actions {
                return Err(contract("feature map does not match the MDP's state/action sets"));
            }
            if f.dim() != params {
                return Err(contract(format!("parameter length {params} != feature dimension {}", f.dim())));
            }
            Ok(())
        };
        match self {
            PolicySpec::EpsilonGreedyQ { features, w, epsilon } => {
                check_epsilon(*epsilon)?;
                check_map(features, w.len(), FeatureKind::StateAction)
            }
            PolicySpec::SoftmaxActor { features, lambda, epsilon } => {
                check_epsilon(*epsilon)?;
                check_map(features, lambda.len(), FeatureKind::Policy)
            }
            PolicySpec::UniformRandom => Ok(()),
            PolicySpec::GreedyOracle { q } => {
                if q.n_states != n_states || q.n_actions != n_actions {
                    return Err(contract("Q table does not match the MDP"));
                }
                Ok(())
            }
        }
    }

    /// `π(· | s)`.
    pub fn action_probs(&self, s: usize, n_actions: usize) -> Vec<f64> {
        let uniform = 1.0 / n_actions as f64;
        match self {
            PolicySpec::EpsilonGreedyQ { features, w, epsilon } => {
                let q: Vec<f64> = (0..n_actions).map(|a| dot(features.feature(s, a), w)).collect();
                let best = argmax_lowest(&q);
                (0..n_actions)
                    .map(|a| epsilon * uniform + if a == best { 1.0 - epsilon } else { 0.0 })
                    .collect()
            }
            PolicySpec::SoftmaxActor { features, lambda, epsilon } => {
                let pi = crate::features::softmax_policy(features, lambda, s);
                pi.iter().map(|p| epsilon * uniform + (1.0 - epsilon) * p).collect()
            }
            PolicySpec::UniformRandom => vec![uniform; n_actions],
            PolicySpec::GreedyOracle { q } => {
                let best = q.greedy_action(s);
                (0..n_actions).map(|a| if a == best { 1.0 } else { 0.0 }).collect()
            }
        }
    }

    pub fn sample(&self, s: usize, n_actions: usize, rng: &mut Rng) -> usize {
        sample_categorical(&self.action_probs(s, n_actions), rng)
    }
}

fn check_epsilon(eps: f64) -> Result<()> {
    if (0.0..=1.0).contains(&eps) {
        Ok(())
    } else {
        Err(config(format!("epsilon {eps} outside [0, 1]")))
    }
}

/// Inverse-CDF draw; one uniform per call.
pub fn sample_categorical(p: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, pi) in p.iter().enumerate() {
        if *pi > 0.0 {
            last_positive = i;
        }
        acc += pi;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Samples `n` transitions from `start` under `policy`, including the final
/// `(s_n, a_n)` pair.
pub fn rollout(mdp: &TabularMdp, policy: &PolicySpec<'_>, start: usize, n: usize, rng: &mut Rng) -> Result<Trajectory> {
    if start >= mdp.n_states {
        return Err(contract(format!("start state {start} out of range")));
    }
    policy.validate(mdp.n_states, mdp.n_actions)?;
    let na = mdp.n_actions;
    let mut states = Vec::with_capacity(n + 1);
    let mut actions = Vec::with_capacity(n + 1);
    let mut rewards = Vec::with_capacity(n);
    let mut s = start;
    let mut a = policy.sample(s, na, rng);
    states.push(s);
    actions.push(a);
    for _ in 0..n {
        let next = sample_categorical(mdp.transition_row(s, a), rng);
        rewards.push(mdp.reward(a, next));
        s = next;
        a = policy.sample(s, na, rng);
        states.push(s);
        actions.push(a);
    }
    Ok(Trajectory { states, actions, rewards })
}

/// Bellman optimality iteration; the result is within `tol` (sup norm) of `Q*`.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<QTable> {
    if !(tol > 0.0) {
        return Err(config("value iteration tolerance must be positive"));
    }
    let (ns, na, g) = (mdp.n_states, mdp.n_actions, mdp.discount);
    let r: Vec<f64> = (0..ns * na).map(|k| mdp.expected_reward(k / na, k % na)).collect();
    let threshold = if g > 0.0 { tol * (1.0 - g) / g } else { f64::INFINITY };
    let mut q = vec![0.0; ns * na];
    loop {
        let v: Vec<f64> = (0..ns).map(|s| q[s * na..(s + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
        let next: Vec<f64> = (0..ns * na).map(|k| r[k] + g * dot(mdp.transition_row(k / na, k % na), &v)).collect();
        let diff = next.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        q = next;
        if diff < threshold {
            break;
        }
    }
    Ok(QTable { n_states: ns, n_actions: na, values: q })
}

/// State values of `policy` from `(I − γ P_π) v = r_π`.
pub fn policy_state_values(mdp: &TabularMdp, policy: &PolicySpec<'_>) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&mdp.discount) {
        return Err(config("policy evaluation needs discount < 1"));
    }
    policy.validate(mdp.n_states, mdp.n_actions)?;
    let (ns, na, g) = (mdp.n_states, mdp.n_actions, mdp.discount);
    let mut a = Matrix::<f64>::identity(ns);
    let mut r = vec![0.0; ns];
    for s in 0..ns {
        let pi = policy.action_probs(s, na);
        for (act, p) in pi.iter().enumerate() {
            if *p == 0.0 {
                continue;
            }
            r[s] += p * mdp.expected_reward(s, act);
            for (sp, t) in mdp.transition_row(s, act).iter().enumerate() {
                a[(s, sp)] -= g * p * t;
            }
        }
    }
    a.solve(&r).ok_or_else(|| Error::NonFinite("singular policy-evaluation system".into()))
}

/// Expected discounted return from the initial distribution, solved exactly.
pub fn exact_policy_return(mdp: &TabularMdp, policy: &PolicySpec<'_>) -> Result<f64> {
    let v = policy_state_values(mdp, policy)?;
    Ok(dot(&mdp.initial_dist, &v))
}
