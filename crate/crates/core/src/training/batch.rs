use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::attention::{decompose_parts, grad_parts, loss, EffectiveParams};
use crate::error::Result;
use crate::linalg::Matrix;
use crate::mdp::rollout;
use crate::prompt::Prompt;
use crate::rng::{Rng, SeedStreams};
use crate::task::{Task, TaskSpec};
use crate::teachers::TeacherConfig;

/// One window `z`: its prompt and the teacher target in readout ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub prompt: Prompt<f64>,
    pub target: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub task: TaskSpec,
    pub window: usize,
    pub epsilon: f64,
    pub teacher: TeacherConfig,
}

/// Fresh task, learner state drawn as at the start of a training MDP, one window.
pub fn sample_window(spec: &WindowSpec, rng: &mut Rng) -> Result<WindowSample> {
    let mut feature_rng = Rng::seed_from_u64(rng.next_u64());
    let task = Task::sample(&spec.task, rng, &mut feature_rng)?;
    let (state, s0) = task.initial_state(rng);
    let traj = rollout(&task.mdp, &task.policy(&state, spec.epsilon), s0, spec.window, rng)?;
    let prompt = task.prompt(&traj, &state)?;
    let target = task.teacher(&traj, &state, &spec.teacher)?.to_readout();
    Ok(WindowSample { prompt, target })
}

struct Cached {
    sigma_hat: Matrix<f64>,
    w_tilde: Vec<f64>,
    n: usize,
    target: Vec<f64>,
}

/// A fixed set of windows standing in for the population loss.
pub struct FrozenBatch {
    samples: Vec<WindowSample>,
    cache: Vec<Cached>,
}

impl FrozenBatch {
    pub fn new(samples: Vec<WindowSample>) -> Self {
        let cache = samples
            .iter()
            .map(|s| Cached { sigma_hat: s.prompt.sigma_hat(), w_tilde: s.prompt.w_tilde(), n: s.prompt.n(), target: s.target.clone() })
            .collect();
        Self { samples, cache }
    }

    /// `count` windows, window `i` drawn from stream `("batch", i)` of `seed`.
    pub fn sample(spec: &WindowSpec, count: usize, seed: u64) -> Result<Self> {
        let streams = SeedStreams::new(seed);
        let samples = (0..count).map(|i| sample_window(spec, &mut streams.stream("batch", i as u64))).collect::<Result<_>>()?;
        Ok(Self::new(samples))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[WindowSample] {
        &self.samples
    }

    /// Mean mimicry loss over the batch.
    pub fn loss(&self, eff: &EffectiveParams<f64>) -> f64 {
        let total: f64 = self
            .cache
            .iter()
            .map(|c| loss(&decompose_parts(eff, &c.sigma_hat, &c.w_tilde, c.n, None, None), &c.target))
            .sum();
        total / self.cache.len() as f64
    }

    /// Mean loss and its gradient with respect to `(P12, V̄21)`.
    pub fn loss_and_grad(&self, eff: &EffectiveParams<f64>) -> (f64, EffectiveParams<f64>) {
        let mut g = EffectiveParams {
            p12: Matrix::zeros(eff.p12.rows(), eff.p12.cols()),
            v21_bar: Matrix::zeros(eff.v21_bar.rows(), eff.v21_bar.cols()),
        };
        let mut total = 0.0;
        for c in &self.cache {
            let (gp, l) = grad_parts(eff, &c.sigma_hat, &c.w_tilde, c.n, None, None, &c.target);
            g = g.add(&EffectiveParams { p12: gp.d_p12, v21_bar: gp.d_v21_bar });
            total += l;
        }
        let inv = 1.0 / self.cache.len() as f64;
        (total * inv, g.scale(&inv))
    }
}
