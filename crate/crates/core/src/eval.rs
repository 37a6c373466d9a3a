//! Closed-loop deployment on held-out tasks: the learner's own output picks
//! the next behaviour policy, and the frozen iterate is scored by Monte Carlo
//! every few steps against the teacher, an optimal oracle and a random policy.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{readout, AttentionParams};
use crate::error::{config, contract, Error, Result};
use crate::mdp::{rollout, sample_categorical, value_iteration, MdpConfig, PolicySpec, TabularMdp};
use crate::rng::{Rng, SeedStreams};
use crate::task::{LearnerState, Task, TaskSpec};
use crate::teachers::TeacherConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Agent {
    Transformer,
    Teacher,
    Oracle,
    Random,
}

impl Agent {
    pub const ALL: [Agent; 4] = [Agent::Transformer, Agent::Teacher, Agent::Oracle, Agent::Random];

    pub fn name(self) -> &'static str {
        match self {
            Agent::Transformer => "transformer",
            Agent::Teacher => "teacher",
            Agent::Oracle => "oracle",
            Agent::Random => "random",
        }
    }
}

impl fmt::Display for Agent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Agent {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Agent::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| config(format!("unknown agent {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_states: usize,
    pub n_actions: usize,
    pub discount: f64,
    pub num_test_mdps: usize,
    pub update_steps: usize,
    pub eval_interval: usize,
    pub mc_rollouts: usize,
    pub mc_horizon: usize,
    pub window: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub agents: Vec<Agent>,
    /// Worker threads; 0 uses the global pool.
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_states: 5,
            n_actions: 3,
            discount: 0.5,
            num_test_mdps: 20,
            update_steps: 200,
            eval_interval: 10,
            mc_rollouts: 32,
            mc_horizon: 50,
            window: 10,
            epsilon: 0.1,
            alpha: 0.2,
            beta: 0.8,
            seed: 1_000_003,
            agents: Agent::ALL.to_vec(),
            jobs: 0,
        }
    }
}

impl EvalConfig {
    /// 100 test tasks at the full problem size.
    pub fn full_scale() -> Self {
        Self { n_states: 9, n_actions: 4, num_test_mdps: 100, window: 20, ..Self::default() }
    }

    pub fn mdp_config(&self) -> MdpConfig {
        MdpConfig::new(self.n_states, self.n_actions, self.discount)
    }

    pub fn teacher(&self) -> TeacherConfig {
        TeacherConfig { alpha: self.alpha, beta: self.beta, gamma: self.discount }
    }

    /// `γ^H · B_r / (1 − γ)`, the worst-case bias from truncating returns at the horizon.
    pub fn truncation_bias(&self) -> f64 {
        self.discount.powi(self.mc_horizon as i32) * self.mdp_config().reward_bound() / (1.0 - self.discount)
    }

    pub fn validate(&self) -> Result<()> {
        self.mdp_config().validate()?;
        self.teacher().validate()?;
        if self.num_test_mdps == 0 || self.eval_interval == 0 || self.mc_rollouts == 0 || self.window == 0 {
            return Err(config("test MDP count, eval interval, Monte-Carlo rollouts and window must be positive"));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(config("ε must lie in [0, 1]"));
        }
        if self.agents.is_empty() {
            return Err(config("at least one agent is required"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    /// Standard error of the mean over rollouts.
    pub std_err: f64,
}

/// Mean truncated discounted return `Σ_{k<H} γ^k r_{k+1}` over `rollouts`
/// episodes started from `P_0`.
pub fn mc_return_with_error(mdp: &TabularMdp, policy: &PolicySpec<'_>, rollouts: usize, horizon: usize, rng: &mut Rng) -> Result<McEstimate> {
    policy.validate(mdp.n_states(), mdp.n_actions())?;
    if rollouts == 0 {
        return Err(contract("need at least one rollout"));
    }
    let gamma = mdp.discount();
    let na = mdp.n_actions();
    let mut returns = Vec::with_capacity(rollouts);
    for _ in 0..rollouts {
        let mut s = sample_categorical(mdp.initial_dist(), rng);
        let (mut g, mut disc) = (0.0, 1.0);
        for _ in 0..horizon {
            let a = policy.sample(s, na, rng);
            let next = sample_categorical(mdp.transition_row(s, a), rng);
            g += disc * mdp.reward(a, next);
            disc *= gamma;
            s = next;
        }
        returns.push(g);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std_err = if returns.len() > 1 {
        (returns.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(McEstimate { mean, std_err })
}

pub fn mc_return(mdp: &TabularMdp, policy: &PolicySpec<'_>, rollouts: usize, horizon: usize, rng: &mut Rng) -> Result<f64> {
    Ok(mc_return_with_error(mdp, policy, rollouts, horizon, rng)?.mean)
}

/// One agent's curve on one test task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentCurve {
    pub returns: Vec<f64>,
    pub std_errs: Vec<f64>,
    /// Set when the iterate became non-finite; the curve stops there.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpCurves {
    pub mdp_id: usize,
    pub agents: BTreeMap<Agent, AgentCurve>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateCurve {
    pub mean: Vec<f64>,
    pub p25: Vec<f64>,
    pub p75: Vec<f64>,
    /// Monte-Carlo standard error of `mean`: `√(Σ_j se_j²) / K`.
    pub mc_std_err: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCurves {
    pub steps: Vec<usize>,
    pub per_mdp: Vec<MdpCurves>,
    pub aggregate: BTreeMap<Agent, AggregateCurve>,
    pub truncation_bias: f64,
}

impl EvalCurves {
    /// Long-format CSV: `mdp_id,step,agent,return`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mdp_id,step,agent,return\n");
        for m in &self.per_mdp {
            for (agent, c) in &m.agents {
                for (step, r) in self.steps.iter().zip(&c.returns) {
                    out.push_str(&format!("{},{step},{agent},{r:?}\n", m.mdp_id));
                }
            }
        }
        out
    }

    /// Per-agent CSV with one row per checkpoint: `step,mean,p25,p75,mc_std_err`.
    pub fn plot_csv(&self, agent: Agent) -> Option<String> {
        let a = self.aggregate.get(&agent)?;
        let mut out = String::from("step,mean,p25,p75,mc_std_err\n");
        for (i, step) in self.steps.iter().enumerate() {
            out.push_str(&format!("{step},{:?},{:?},{:?},{:?}\n", a.mean[i], a.p25[i], a.p75[i], a.mc_std_err[i]));
        }
        Some(out)
    }
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean, interquartile band and Monte-Carlo error per checkpoint for each agent.
/// Truncated curves contribute only the checkpoints they reached.
pub fn aggregate_curves(steps: Vec<usize>, per_mdp: Vec<MdpCurves>, truncation_bias: f64) -> EvalCurves {
    let mut aggregate = BTreeMap::new();
    let agents: Vec<Agent> = per_mdp.first().map(|m| m.agents.keys().copied().collect()).unwrap_or_default();
    for agent in agents {
        let mut curve = AggregateCurve { mean: vec![], p25: vec![], p75: vec![], mc_std_err: vec![] };
        for i in 0..steps.len() {
            let pts: Vec<(f64, f64)> = per_mdp
                .iter()
                .filter_map(|m| m.agents.get(&agent))
                .filter_map(|c| Some((*c.returns.get(i)?, *c.std_errs.get(i)?)))
                .collect();
            if pts.is_empty() {
                for v in [&mut curve.mean, &mut curve.p25, &mut curve.p75, &mut curve.mc_std_err] {
                    v.push(f64::NAN);
                }
                continue;
            }
            let k = pts.len() as f64;
            let mut vals: Vec<f64> = pts.iter().map(|p| p.0).collect();
            vals.sort_by(f64::total_cmp);
            curve.mean.push(vals.iter().sum::<f64>() / k);
            curve.p25.push(percentile(&vals, 0.25));
            curve.p75.push(percentile(&vals, 0.75));
            curve.mc_std_err.push(pts.iter().map(|p| p.1 * p.1).sum::<f64>().sqrt() / k);
        }
        aggregate.insert(agent, curve);
    }
    EvalCurves { steps, per_mdp, aggregate, truncation_bias }
}

enum Learner<'a> {
    Transformer(&'a AttentionParams<f64>),
    Teacher(TeacherConfig),
}

fn checkpoints(cfg: &EvalConfig) -> Vec<usize> {
    (0..=cfg.update_steps).step_by(cfg.eval_interval).collect()
}

fn learning_curve(task: &Task, learner: &Learner<'_>, cfg: &EvalConfig, streams: &SeedStreams, j: u64) -> Result<AgentCurve> {
    let layout = task.layout();
    let (mut state, mut s) = task.initial_state(&mut streams.stream("eval-start", j));
    let mut rng = streams.stream("eval-rollout", j);
    let mut curve = AgentCurve { returns: vec![], std_errs: vec![], truncated: false };
    for t in 0..=cfg.update_steps {
        if t % cfg.eval_interval == 0 {
            let mut mc = streams.stream(&format!("eval-mc-{j}"), t as u64);
            let est = mc_return_with_error(&task.mdp, &task.policy(&state, cfg.epsilon), cfg.mc_rollouts, cfg.mc_horizon, &mut mc)?;
            curve.returns.push(est.mean);
            curve.std_errs.push(est.std_err);
        }
        if t == cfg.update_steps {
            break;
        }
        let traj = rollout(&task.mdp, &task.policy(&state, cfg.epsilon), s, cfg.window, &mut rng)?;
        let next = match learner {
            Learner::Transformer(params) => {
                let prompt = task.prompt(&traj, &state)?;
                LearnerState::from_readout(&layout, &readout(params, &prompt)?)
            }
            Learner::Teacher(tc) => task.teacher(&traj, &state, tc)?,
        };
        if !next.is_finite() {
            curve.truncated = true;
            break;
        }
        state = next;
        s = traj.last_state();
    }
    Ok(curve)
}

fn fixed_curve(mdp: &TabularMdp, policy: &PolicySpec<'_>, cfg: &EvalConfig, streams: &SeedStreams, j: u64, replicate: bool) -> Result<AgentCurve> {
    let steps = checkpoints(cfg);
    let mut curve = AgentCurve { returns: vec![], std_errs: vec![], truncated: false };
    if replicate {
        let est = mc_return_with_error(mdp, policy, cfg.mc_rollouts, cfg.mc_horizon, &mut streams.stream(&format!("eval-mc-{j}"), u64::MAX))?;
        curve.returns = vec![est.mean; steps.len()];
        curve.std_errs = vec![est.std_err; steps.len()];
    } else {
        for t in steps {
            let est = mc_return_with_error(mdp, policy, cfg.mc_rollouts, cfg.mc_horizon, &mut streams.stream(&format!("eval-mc-{j}"), t as u64))?;
            curve.returns.push(est.mean);
            curve.std_errs.push(est.std_err);
        }
    }
    Ok(curve)
}

fn eval_one(params: &AttentionParams<f64>, cfg: &EvalConfig, spec: &TaskSpec, streams: &SeedStreams, j: usize) -> Result<MdpCurves> {
    let idx = j as u64;
    let task = Task::sample(spec, &mut streams.stream("eval-mdp", idx), &mut streams.stream("eval-features", idx))?;
    let mut agents = BTreeMap::new();
    for &agent in &cfg.agents {
        let curve = match agent {
            Agent::Transformer => learning_curve(&task, &Learner::Transformer(params), cfg, streams, idx)?,
            Agent::Teacher => learning_curve(&task, &Learner::Teacher(cfg.teacher()), cfg, streams, idx)?,
            Agent::Oracle => {
                let q = value_iteration(&task.mdp, 1e-10)?;
                fixed_curve(&task.mdp, &PolicySpec::GreedyOracle { q: &q }, cfg, streams, idx, true)?
            }
            Agent::Random => fixed_curve(&task.mdp, &PolicySpec::UniformRandom, cfg, streams, idx, false)?,
        };
        agents.insert(agent, curve);
    }
    Ok(MdpCurves { mdp_id: j, agents })
}

/// Runs every agent on `num_test_mdps` held-out tasks.
///
/// The transformer and the teacher draw from the same per-task streams, so
/// identical updates give identical trajectories and returns.
pub fn closed_loop_eval(params: &AttentionParams<f64>, cfg: &EvalConfig) -> Result<EvalCurves> {
    cfg.validate()?;
    let bias = cfg.truncation_bias();
    if bias >= 1e-3 {
        log::warn!("Monte-Carlo horizon {} leaves a truncation bias of up to {bias:.2e}", cfg.mc_horizon);
    }
    let spec = TaskSpec { mdp: cfg.mdp_config(), layout: params.layout() };
    let streams = SeedStreams::new(cfg.seed);
    let run = || -> Result<Vec<MdpCurves>> {
        (0..cfg.num_test_mdps).into_par_iter().map(|j| eval_one(params, cfg, &spec, &streams, j)).collect()
    };
    let per_mdp = if cfg.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| config(format!("thread pool: {e}")))?
            .install(run)?
    } else {
        run()?
    };
    Ok(aggregate_curves(checkpoints(cfg), per_mdp, bias))
}
