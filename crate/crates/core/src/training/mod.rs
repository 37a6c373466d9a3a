//! Teacher-mimicking training: per MDP, roll out windows, ask the teacher for
//! its update, take an optimizer step on the squared error, then hand the
//! teacher's parameters to the next window.

mod batch;
mod optim;

use std::time::Instant;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use batch::{sample_window, FrozenBatch, WindowSample, WindowSpec};
pub use optim::{adam_step, sgd_step, AdamHyper, AdamState, OptimizerKind};

use crate::attention::{decompose_parts, grad_parts, AttentionParams, Block, EffectiveParams};
use crate::error::{config, Error, Result};
use crate::linalg::Matrix;
use crate::mdp::{rollout, MdpConfig};
use crate::prompt::{BlockLayout, Mode};
use crate::rng::{Rng, SeedStreams};
use crate::task::{LearnerState, Task, TaskSpec};
use crate::teachers::TeacherConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub n_states: usize,
    pub n_actions: usize,
    pub discount: f64,
    /// Value (or state-action) feature dimension.
    pub d: usize,
    /// Policy feature dimension; 0 in SARSA mode.
    pub m: usize,
    /// Window length `n`.
    pub window: usize,
    pub frames_per_mdp: usize,
    pub num_mdps: usize,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub decay_factor: f64,
    /// Number of MDPs between learning-rate decays.
    pub decay_period: usize,
    pub alpha: f64,
    pub beta: f64,
    pub init_gain: f64,
    pub seed: u64,
    /// Also train `P22` and `V̄22`.
    pub full_parameterization: bool,
    pub optimizer: OptimizerKind,
    pub adam: AdamHyper,
    /// Drive the next window with the transformer's output instead of the teacher's.
    pub self_rollout: bool,
    /// Checkpoint every this many MDPs (0 disables intermediate checkpoints).
    pub checkpoint_every: usize,
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(Mode::Sarsa)
    }
}

impl TrainConfig {
    /// Small problem that trains in seconds.
    pub fn desk(mode: Mode) -> Self {
        let (d, m) = match mode {
            Mode::Sarsa => (15, 0),
            Mode::ActorCritic => (5, 8),
        };
        Self {
            mode,
            n_states: 5,
            n_actions: 3,
            discount: 0.5,
            d,
            m,
            window: 10,
            frames_per_mdp: 200,
            num_mdps: 200,
            epsilon: 0.1,
            learning_rate: 1e-3,
            decay_factor: 0.99,
            decay_period: 10,
            alpha: 0.2,
            beta: 0.8,
            init_gain: 0.1,
            seed: 0,
            full_parameterization: false,
            optimizer: OptimizerKind::Adam,
            adam: AdamHyper::default(),
            self_rollout: false,
            checkpoint_every: 0,
            divergence_threshold: 1e6,
        }
    }

    /// 9 states, 4 actions, windows of 20, 1000 frames per MDP, 10 000 MDPs.
    pub fn full_scale(mode: Mode) -> Self {
        let (d, m) = match mode {
            Mode::Sarsa => (36, 0),
            Mode::ActorCritic => (9, 36),
        };
        Self { n_states: 9, n_actions: 4, d, m, window: 20, frames_per_mdp: 1000, num_mdps: 10_000, ..Self::desk(mode) }
    }

    pub fn layout(&self) -> BlockLayout {
        BlockLayout { mode: self.mode, d: self.d, m: self.m }
    }

    pub fn mdp_config(&self) -> MdpConfig {
        MdpConfig::new(self.n_states, self.n_actions, self.discount)
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec { mdp: self.mdp_config(), layout: self.layout() }
    }

    pub fn teacher(&self) -> TeacherConfig {
        TeacherConfig { alpha: self.alpha, beta: self.beta, gamma: self.discount }
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec { task: self.task_spec(), window: self.window, epsilon: self.epsilon, teacher: self.teacher() }
    }

    pub fn validate(&self) -> Result<()> {
        self.mdp_config().validate()?;
        self.layout().validate().map_err(|_| {
            config(format!("mode {} needs d > 0 and {} (got d={}, m={})", self.mode, if self.mode == Mode::Sarsa { "m = 0" } else { "m > 0" }, self.d, self.m))
        })?;
        self.teacher().validate()?;
        if self.window == 0 {
            return Err(config("window length must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) || self.decay_period == 0 {
            return Err(config("decay factor must lie in (0, 1] with a positive period"));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(config(format!("ε must lie in [0, 1], got {}", self.epsilon)));
        }
        if !(self.init_gain >= 0.0 && self.init_gain.is_finite()) {
            return Err(config("init gain must be a nonnegative number"));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(config("divergence threshold must be positive"));
        }
        Ok(())
    }
}

/// Inert and quadratic blocks zero; `P12`, `V̄21` Xavier-normal with the given gain.
pub fn init_params(layout: BlockLayout, gain: f64, rng: &mut Rng) -> Result<AttentionParams<f64>> {
    let mut xavier = |rows: usize, cols: usize| {
        let std = gain * (2.0 / (rows + cols) as f64).sqrt();
        Matrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
    };
    let eff = EffectiveParams { p12: xavier(layout.top(), layout.bottom()), v21_bar: xavier(layout.readout_len(), layout.top()) };
    AttentionParams::from_blocks(layout, &eff, None, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpSummary {
    pub index: usize,
    pub mean_loss: f64,
    pub final_loss: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    /// One entry per frame, MDP-major.
    pub losses: Vec<f64>,
    pub mdp_summaries: Vec<MdpSummary>,
    pub initial_params: AttentionParams<f64>,
    pub final_params: AttentionParams<f64>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// Mean of the last `k` frame losses.
    pub fn tail_mean(&self, k: usize) -> Option<f64> {
        let k = k.min(self.losses.len());
        (k > 0).then(|| self.losses[self.losses.len() - k..].iter().sum::<f64>() / k as f64)
    }

    pub fn loss_csv(&self) -> String {
        let t = self.config.frames_per_mdp.max(1);
        let mut out = String::from("frame,mdp_index,loss\n");
        for (f, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{f},{},{l:?}\n", f / t));
        }
        out
    }
}

/// Blocks being optimised, kept outside `AttentionParams` so inert blocks are
/// never written.
struct Trained {
    eff: EffectiveParams<f64>,
    quad: Option<(Matrix<f64>, Matrix<f64>)>,
}

impl Trained {
    fn assemble(&self, base: &AttentionParams<f64>) -> AttentionParams<f64> {
        let mut p = base.clone();
        p.set_effective(&self.eff).expect("effective shapes are fixed");
        if let Some((p22, v22)) = &self.quad {
            p.set_block(Block::P22, p22).expect("P22 shape");
            p.set_block(Block::V22Bar, v22).expect("V22 shape");
        }
        p
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        let mut s = vec![self.eff.p12.shape(), self.eff.v21_bar.shape()];
        if let Some((a, b)) = &self.quad {
            s.push(a.shape());
            s.push(b.shape());
        }
        s
    }
}

/// Called after every `checkpoint_every`-th MDP and after the last one.
pub type CheckpointHook<'a> = dyn FnMut(usize, &AttentionParams<f64>) -> Result<()> + 'a;

pub fn train_sarsa(cfg: &TrainConfig) -> Result<RunReport> {
    if cfg.mode != Mode::Sarsa {
        return Err(config("train_sarsa needs mode = sarsa"));
    }
    train(cfg, None)
}

pub fn train_ac(cfg: &TrainConfig) -> Result<RunReport> {
    if cfg.mode != Mode::ActorCritic {
        return Err(config("train_ac needs mode = ac"));
    }
    train(cfg, None)
}

/// Runs the training loop for either mode.
///
/// The prediction is evaluated through the block decomposition, which is
/// algebraically identical to the attention readout and avoids forming `HᵀPH`.
pub fn train(cfg: &TrainConfig, mut hook: Option<&mut CheckpointHook<'_>>) -> Result<RunReport> {
    cfg.validate()?;
    let started = Instant::now();
    let layout = cfg.layout();
    let spec = cfg.task_spec();
    let teacher = cfg.teacher();
    let streams = SeedStreams::new(cfg.seed);
    let initial = init_params(layout, cfg.init_gain, &mut streams.stream("init", 0))?;
    let mut trained = Trained {
        eff: initial.effective(),
        quad: cfg.full_parameterization.then(|| (initial.block(Block::P22), initial.block(Block::V22Bar))),
    };
    let mut adam = AdamState::new(cfg.adam, &trained.shapes());
    let mut lr = cfg.learning_rate;
    let n = cfg.window;
    let mut losses = Vec::with_capacity(cfg.num_mdps * cfg.frames_per_mdp);
    let mut summaries = Vec::with_capacity(cfg.num_mdps);

    for k in 0..cfg.num_mdps {
        let idx = k as u64;
        let task = Task::sample(&spec, &mut streams.stream("mdp", idx), &mut streams.stream("features", idx))?;
        let (mut state, mut s) = task.initial_state(&mut streams.stream("start", idx));
        let mut rng = streams.stream("rollout", idx);
        let first = losses.len();
        for _ in 0..cfg.frames_per_mdp {
            let frame = losses.len();
            let traj = rollout(&task.mdp, &task.policy(&state, cfg.epsilon), s, n, &mut rng)?;
            let prompt = task.prompt(&traj, &state)?;
            let target = task.teacher(&traj, &state, &teacher)?;
            let target_vec = target.to_readout();
            let sigma = prompt.sigma_hat();
            let w_tilde = prompt.w_tilde();
            let (p22, v22) = match &trained.quad {
                Some((a, b)) => (Some(a), Some(b)),
                None => (None, None),
            };
            let (grad, l) = grad_parts(&trained.eff, &sigma, &w_tilde, n, p22, v22, &target_vec);
            if !l.is_finite() || l > cfg.divergence_threshold {
                return Err(Error::Diverged { frame, loss: l, last_good: Box::new(trained.assemble(&initial)) });
            }
            let next = if cfg.self_rollout {
                let pred = decompose_parts(&trained.eff, &sigma, &w_tilde, n, p22, v22);
                let st = LearnerState::from_readout(&layout, &pred);
                if !st.is_finite() {
                    return Err(Error::Diverged { frame, loss: l, last_good: Box::new(trained.assemble(&initial)) });
                }
                st
            } else {
                target
            };
            let before = trained.assemble(&initial);
            let step = {
                let mut params: Vec<&mut Matrix<f64>> = vec![&mut trained.eff.p12, &mut trained.eff.v21_bar];
                let mut grads: Vec<&Matrix<f64>> = vec![&grad.d_p12, &grad.d_v21_bar];
                if let Some((a, b)) = trained.quad.as_mut() {
                    params.push(a);
                    params.push(b);
                    grads.push(grad.d_p22.as_ref().expect("quadratic gradient"));
                    grads.push(grad.d_v22_bar.as_ref().expect("quadratic gradient"));
                }
                match cfg.optimizer {
                    OptimizerKind::Adam => adam_step(&mut adam, &mut params, &grads, lr),
                    OptimizerKind::Sgd => sgd_step(&mut params, &grads, lr),
                }
            };
            if let Err(Error::NonFinite(_)) = step {
                return Err(Error::Diverged { frame, loss: l, last_good: Box::new(before) });
            }
            step?;
            losses.push(l);
            state = next;
            s = traj.last_state();
        }
        let window = &losses[first..];
        summaries.push(MdpSummary {
            index: k,
            mean_loss: if window.is_empty() { 0.0 } else { window.iter().sum::<f64>() / window.len() as f64 },
            final_loss: window.last().copied().unwrap_or(0.0),
            learning_rate: lr,
        });
        if (k + 1) % cfg.decay_period == 0 {
            lr *= cfg.decay_factor;
        }
        let due = (cfg.checkpoint_every > 0 && (k + 1) % cfg.checkpoint_every == 0) || k + 1 == cfg.num_mdps;
        if let (true, Some(h)) = (due, hook.as_deref_mut()) {
            h(k + 1, &trained.assemble(&initial))?;
        }
        if k % 50 == 49 {
            log::info!("mdp {}/{}: mean loss {:.3e}", k + 1, cfg.num_mdps, summaries[k].mean_loss);
        }
    }
    let final_params = trained.assemble(&initial);
    Ok(RunReport {
        config: cfg.clone(),
        losses,
        mdp_summaries: summaries,
        initial_params: initial,
        final_params,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
