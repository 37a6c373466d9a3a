//! A sampled training or test task: an MDP with its feature maps, plus the
//! per-task learner state `(λ, w)` and the glue that turns a window into a
//! prompt and a teacher target.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::features::{sample_features, FeatureKind, FeatureMap};
use crate::mdp::{sample_categorical, sample_mdp, MdpConfig, PolicySpec, TabularMdp, Trajectory};
use crate::prompt::{build_ac_prompt, build_sarsa_prompt, BlockLayout, Mode, Prompt};
use crate::rng::Rng;
use crate::teachers::{ac_teacher, sarsa_teacher, TeacherConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub mdp: MdpConfig,
    pub layout: BlockLayout,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskFeatures {
    Sarsa { q: FeatureMap<f64> },
    ActorCritic { value: FeatureMap<f64>, policy: FeatureMap<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub mdp: TabularMdp,
    pub features: TaskFeatures,
}

/// Learner parameters carried from window to window; `lambda` is empty in SARSA mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    pub w: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl LearnerState {
    /// `(λ; w)`, the readout ordering.
    pub fn to_readout(&self) -> Vec<f64> {
        let mut v = self.lambda.clone();
        v.extend_from_slice(&self.w);
        v
    }

    pub fn from_readout(layout: &BlockLayout, v: &[f64]) -> Self {
        assert_eq!(v.len(), layout.readout_len(), "readout length");
        Self { lambda: v[..layout.m].to_vec(), w: v[layout.m..].to_vec() }
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.lambda).all(|x| x.is_finite())
    }
}

impl Task {
    /// Draws the MDP from `mdp_rng` and the feature maps from `feature_rng`.
    pub fn sample(spec: &TaskSpec, mdp_rng: &mut Rng, feature_rng: &mut Rng) -> Result<Self> {
        spec.layout.validate()?;
        let mdp = sample_mdp(mdp_rng, &spec.mdp)?;
        let (ns, na) = (spec.mdp.n_states, spec.mdp.n_actions);
        let features = match spec.layout.mode {
            Mode::Sarsa => TaskFeatures::Sarsa { q: sample_features(feature_rng, FeatureKind::StateAction, ns, na, spec.layout.d)? },
            Mode::ActorCritic => TaskFeatures::ActorCritic {
                value: sample_features(feature_rng, FeatureKind::StateValue, ns, na, spec.layout.d)?,
                policy: sample_features(feature_rng, FeatureKind::Policy, ns, na, spec.layout.m)?,
            },
        };
        Ok(Self { mdp, features })
    }

    pub fn layout(&self) -> BlockLayout {
        match &self.features {
            TaskFeatures::Sarsa { q } => BlockLayout::sarsa(q.dim()),
            TaskFeatures::ActorCritic { value, policy } => BlockLayout::actor_critic(value.dim(), policy.dim()),
        }
    }

    /// `w, λ ~ Unif(−1, 1)` entrywise (`λ` then `w`) and `s_0 ~ P_0`.
    pub fn initial_state(&self, rng: &mut Rng) -> (LearnerState, usize) {
        let layout = self.layout();
        let lambda = (0..layout.m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = (0..layout.d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s0 = sample_categorical(self.mdp.initial_dist(), rng);
        (LearnerState { w, lambda }, s0)
    }

    /// Behaviour policy: ε-greedy on `Q_w` (SARSA) or the ε-mixed softmax actor.
    pub fn policy<'a>(&'a self, state: &'a LearnerState, epsilon: f64) -> PolicySpec<'a> {
        match &self.features {
            TaskFeatures::Sarsa { q } => PolicySpec::EpsilonGreedyQ { features: q, w: &state.w, epsilon },
            TaskFeatures::ActorCritic { policy, .. } => PolicySpec::SoftmaxActor { features: policy, lambda: &state.lambda, epsilon },
        }
    }

    pub fn prompt(&self, traj: &Trajectory, state: &LearnerState) -> Result<Prompt<f64>> {
        let gamma = self.mdp.discount();
        match &self.features {
            TaskFeatures::Sarsa { q } => build_sarsa_prompt(traj, q, &state.w, gamma),
            TaskFeatures::ActorCritic { value, policy } => build_ac_prompt(traj, value, policy, &state.w, &state.lambda, gamma),
        }
    }

    /// Teacher update in readout ordering `(λ; w)`. The task's discount is used for `γ`.
    pub fn teacher(&self, traj: &Trajectory, state: &LearnerState, cfg: &TeacherConfig) -> Result<LearnerState> {
        let cfg = TeacherConfig { gamma: self.mdp.discount(), ..*cfg };
        match &self.features {
            TaskFeatures::Sarsa { q } => Ok(LearnerState { w: sarsa_teacher(traj, q, &state.w, &cfg)?, lambda: Vec::new() }),
            TaskFeatures::ActorCritic { value, policy } => {
                let (w, lambda) = ac_teacher(traj, value, policy, &state.w, &state.lambda, &cfg)?;
                Ok(LearnerState { w, lambda })
            }
        }
    }
}
