//! Subcommands behind the `icrl-lab` binary.
//!
//! Every command writes into one output directory and finishes with a
//! `manifest.json` listing the config, seeds and artifacts it produced.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use icrl_core::eval::{closed_loop_eval, Agent, EvalConfig};
use icrl_core::mdp::{sample_mdp, value_iteration};
use icrl_core::theory::{
    check_inert_blocks, construct_ac_optimal, construct_sarsa_optimal, estimate_pl_constants, matrix_csv,
    pl_trajectory_check, quadratic_blocks_zero, structure_recovery_metrics, PlLogEntry, PlSettings,
};
use icrl_core::training::{init_params, sample_window, FrozenBatch, OptimizerKind, TrainConfig, WindowSpec};
use icrl_core::{
    load_checkpoint, readout, save_checkpoint, AttentionParams, MdpConfig, Mode, OptimalConstruction, SeedStreams,
};
use rand::RngCore;
use serde::Serialize;
use serde_json::{json, Value};

pub const OUT_ENV: &str = "ICRL_LAB_OUT";

#[derive(Parser, Debug)]
#[command(name = "icrl-lab", version, about = "Train, evaluate and verify in-context RL attention blocks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the attention block by teacher mimicry on random MDPs.
    Train(TrainArgs),
    /// Closed-loop evaluation of a checkpoint against teacher, oracle and random agents.
    Eval(EvalArgs),
    /// Structural and convergence diagnostics for a checkpoint.
    Verify(VerifyArgs),
    /// Draw one MDP from the benchmark family and print it as JSON.
    SampleMdp(SampleMdpArgs),
    /// Write the hand-built optimal parameters as a checkpoint.
    Construct(ConstructArgs),
}

#[derive(Args, Debug, Clone)]
pub struct OutArgs {
    /// Output directory (defaults to $ICRL_LAB_OUT, then ./runs/<command>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub mode: Option<Mode>,
    /// JSON file with any subset of the training config fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the full-size preset instead of the desk one.
    #[arg(long, visible_alias = "paper-scale")]
    pub full_scale: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of training MDPs.
    #[arg(long)]
    pub mdps: Option<usize>,
    /// Frames per MDP.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Checkpoint every this many MDPs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub full_parameterization: bool,
    #[arg(long)]
    pub self_rollout: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Expected mode; a checkpoint of the other mode is rejected.
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// 100 test tasks at the full problem size.
    #[arg(long, visible_alias = "paper-scale")]
    pub full_scale: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of held-out MDPs.
    #[arg(long)]
    pub mdps: Option<usize>,
    /// Comma-separated subset of transformer,teacher,oracle,random.
    #[arg(long, value_delimiter = ',')]
    pub agents: Option<Vec<Agent>>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub rollouts: Option<usize>,
    /// In-context update steps per task.
    #[arg(long)]
    pub steps: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Initial parameters for the inert-block check; defaults to a sibling `init.bin`.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Prompts used for teacher residuals and the constant estimates.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Gradient-descent steps of the trajectory check.
    #[arg(long, default_value_t = 200)]
    pub probe_steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub probe_lr: f64,
    #[arg(long, default_value_t = 0.2)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.8)]
    pub beta: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct SampleMdpArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub index: u64,
    #[arg(long, default_value_t = 5)]
    pub states: usize,
    #[arg(long, default_value_t = 3)]
    pub actions: usize,
    #[arg(long, default_value_t = 0.5)]
    pub discount: f64,
    /// Also write `mdp.json` and `q_star.csv` into the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ConstructArgs {
    #[arg(long, default_value = "sarsa")]
    pub mode: Mode,
    #[arg(long, default_value_t = 15)]
    pub d: usize,
    #[arg(long, default_value_t = 0)]
    pub m: usize,
    #[arg(long, default_value_t = 0.2)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.8)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub c: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Written last by every command; only `timestamps` varies between identical runs.
#[derive(Serialize, Debug)]
pub struct ExperimentManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    /// Paths relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
    pub status: String,
    pub timestamps: Timestamps,
}

#[derive(Serialize, Debug)]
pub struct Timestamps {
    pub started_unix: f64,
    pub finished_unix: f64,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

struct Run {
    dir: PathBuf,
    command: String,
    started: f64,
    artifacts: BTreeMap<String, String>,
}

impl Run {
    fn open(out: &OutArgs, command: &str) -> Result<Self> {
        let dir = match &out.out {
            Some(p) => p.clone(),
            None => std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs").join(command)),
        };
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir, command: command.into(), started: now(), artifacts: BTreeMap::new() })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn write(&mut self, key: &str, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        self.artifacts.insert(key.into(), rel.into());
        Ok(())
    }

    fn checkpoint(&mut self, key: &str, rel: &str, params: &AttentionParams, step: usize, seed: u64) -> Result<()> {
        save_checkpoint(params, &self.path(rel), step, seed).with_context(|| format!("saving {rel}"))?;
        self.artifacts.insert(key.into(), rel.into());
        Ok(())
    }

    fn finish(mut self, config: Value, seeds: BTreeMap<String, u64>, status: &str) -> Result<PathBuf> {
        self.artifacts.insert("manifest".into(), "manifest.json".into());
        let manifest = ExperimentManifest {
            tool: "icrl-lab",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command.clone(),
            config,
            seeds,
            artifacts: self.artifacts.clone(),
            status: status.into(),
            timestamps: Timestamps { started_unix: self.started, finished_unix: now() },
        };
        let p = self.path("manifest.json");
        fs::write(&p, serde_json::to_string_pretty(&manifest)?)?;
        Ok(self.dir)
    }
}

/// Overlays the keys of `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                b.insert(k, v);
            }
            Ok(())
        }
        _ => bail!("config file must hold a JSON object"),
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Preset, then config file, then flags.
pub fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let file = args.config.as_deref().map(read_json).transpose()?;
    let file_mode = match file.as_ref().and_then(|v| v.get("mode")) {
        Some(m) => Some(serde_json::from_value::<Mode>(m.clone()).context("invalid mode in config")?),
        None => None,
    };
    let mode = args.mode.or(file_mode).unwrap_or(Mode::Sarsa);
    let preset = if args.full_scale { TrainConfig::full_scale(mode) } else { TrainConfig::desk(mode) };
    let mut value = serde_json::to_value(&preset)?;
    if let Some(f) = file {
        merge(&mut value, f)?;
    }
    let mut cfg: TrainConfig = serde_json::from_value(value).context("invalid training config")?;
    cfg.mode = mode;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(k) = args.mdps {
        cfg.num_mdps = k;
    }
    if let Some(t) = args.frames {
        cfg.frames_per_mdp = t;
    }
    if let Some(n) = args.window {
        cfg.window = n;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    if let Some(o) = &args.optimizer {
        cfg.optimizer = serde_json::from_value::<OptimizerKind>(Value::String(o.clone())).with_context(|| format!("unknown optimizer {o}"))?;
    }
    if let Some(c) = args.checkpoint_every {
        cfg.checkpoint_every = c;
    }
    cfg.full_parameterization |= args.full_parameterization;
    cfg.self_rollout |= args.self_rollout;
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf> {
    let cfg = resolve_train_config(args)?;
    let mut run = Run::open(&args.out, "train")?;
    run.write("config", "config.json", serde_json::to_string_pretty(&cfg)?)?;
    let init = init_params(cfg.layout(), cfg.init_gain, &mut SeedStreams::new(cfg.seed).stream("init", 0))?;
    run.checkpoint("checkpoint_init", "checkpoints/init.bin", &init, 0, cfg.seed)?;
    log::info!("training {} for {} MDPs × {} frames", cfg.mode, cfg.num_mdps, cfg.frames_per_mdp);

    let mut saved = Vec::new();
    let dir = run.path("checkpoints");
    let seed = cfg.seed;
    let mut hook = |k: usize, p: &AttentionParams| {
        let rel = format!("checkpoints/mdp_{k:06}.bin");
        save_checkpoint(p, &dir.join(format!("mdp_{k:06}.bin")), k, seed)?;
        saved.push(rel);
        Ok(())
    };
    let result = icrl_core::train(&cfg, Some(&mut hook));
    for (i, rel) in saved.iter().enumerate() {
        run.artifacts.insert(format!("checkpoint_{i:04}"), rel.clone());
    }
    let seeds = BTreeMap::from([("master".to_string(), cfg.seed)]);
    let config = serde_json::to_value(&cfg)?;
    match result {
        Ok(report) => {
            debug_assert_eq!(report.initial_params, init);
            run.write("loss_csv", "loss.csv", report.loss_csv())?;
            run.write("mdp_summaries", "mdp_summaries.json", serde_json::to_string_pretty(&report.mdp_summaries)?)?;
            run.checkpoint("checkpoint_final", "checkpoints/final.bin", &report.final_params, cfg.num_mdps, cfg.seed)?;
            if let Some(t) = report.tail_mean(100) {
                log::info!("final-100 mean loss {t:.3e} in {:.1}s", report.wall_clock_secs);
            }
            run.finish(config, seeds, "ok")
        }
        Err(icrl_core::Error::Diverged { frame, loss, last_good }) => {
            run.checkpoint("checkpoint_last_good", "checkpoints/last_good.bin", &last_good, frame, cfg.seed)?;
            run.finish(config, seeds, &format!("diverged at frame {frame}"))?;
            bail!("training diverged at frame {frame} (loss {loss}); last finite parameters kept in checkpoints/last_good.bin")
        }
        Err(e) => Err(e.into()),
    }
}

pub fn resolve_eval_config(args: &EvalArgs) -> Result<EvalConfig> {
    let preset = if args.full_scale { EvalConfig::full_scale() } else { EvalConfig::default() };
    let mut value = serde_json::to_value(&preset)?;
    if let Some(p) = &args.config {
        merge(&mut value, read_json(p)?)?;
    }
    let mut cfg: EvalConfig = serde_json::from_value(value).context("invalid eval config")?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(k) = args.mdps {
        cfg.num_test_mdps = k;
    }
    if let Some(a) = &args.agents {
        cfg.agents = a.clone();
    }
    if let Some(j) = args.jobs {
        cfg.jobs = j;
    }
    if let Some(r) = args.rollouts {
        cfg.mc_rollouts = r;
    }
    if let Some(s) = args.steps {
        cfg.update_steps = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load(path: &Path) -> Result<AttentionParams> {
    let (params, _) = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(params)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<PathBuf> {
    let cfg = resolve_eval_config(args)?;
    let params = load(&args.checkpoint)?;
    let layout = params.layout();
    if let Some(mode) = args.mode {
        ensure!(
            mode == layout.mode,
            "checkpoint layout mismatch: --mode {mode} but the checkpoint holds a {} block (d={}, m={}, D={})",
            layout.mode,
            layout.d,
            layout.m,
            layout.dim()
        );
    }
    let mut run = Run::open(&args.out, "eval")?;
    let curves = closed_loop_eval(&params, &cfg)?;
    run.write("curves_csv", "curves.csv", curves.to_csv())?;
    for agent in &cfg.agents {
        if let Some(csv) = curves.plot_csv(*agent) {
            run.write(&format!("plot_{agent}"), &format!("plot_{agent}.csv"), csv)?;
        }
    }
    let last = curves.steps.len().saturating_sub(1);
    let finals: BTreeMap<String, Value> = curves
        .aggregate
        .iter()
        .map(|(a, c)| {
            (a.to_string(), json!({ "mean": c.mean[last], "p25": c.p25[last], "p75": c.p75[last], "mc_std_err": c.mc_std_err[last] }))
        })
        .collect();
    let summary = json!({
        "checkpoint": args.checkpoint.display().to_string(),
        "mode": layout.mode,
        "final_step": curves.steps.get(last),
        "final": finals,
        "truncation_bias": curves.truncation_bias,
        "curves": curves.aggregate,
        "steps": curves.steps,
    });
    run.write("summary", "summary.json", serde_json::to_string_pretty(&summary)?)?;
    let seeds = BTreeMap::from([("eval".to_string(), cfg.seed)]);
    run.finish(json!({ "eval": cfg, "checkpoint": args.checkpoint.display().to_string() }), seeds, "ok")
}

fn construction_for(params: &AttentionParams, alpha: f64, beta: f64) -> Result<OptimalConstruction> {
    let l = params.layout();
    Ok(match l.mode {
        Mode::Sarsa => construct_sarsa_optimal(l.d, alpha, 1.0)?,
        Mode::ActorCritic => construct_ac_optimal(l.d, l.m, alpha, beta, 1.0)?,
    })
}

fn window_spec_for(params: &AttentionParams, alpha: f64, beta: f64) -> WindowSpec {
    let l = params.layout();
    let mut tc = TrainConfig::desk(l.mode);
    tc.d = l.d;
    tc.m = l.m;
    tc.alpha = alpha;
    tc.beta = beta;
    tc.window_spec()
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<PathBuf> {
    ensure!(args.samples >= 100, "--samples must be at least 100");
    let params = load(&args.checkpoint)?;
    let layout = params.layout();
    let mut run = Run::open(&args.out, "verify")?;
    let star = construction_for(&params, args.alpha, args.beta)?;
    let spec = window_spec_for(&params, args.alpha, args.beta);
    let streams = SeedStreams::new(args.seed);

    // readout against the teacher on fresh prompts
    let mut residual = 0f64;
    for i in 0..args.samples {
        let s = sample_window(&spec, &mut streams.stream("verify-teacher", i as u64))?;
        let out = readout(&params, &s.prompt)?;
        residual = out.iter().zip(&s.target).fold(residual, |m, (a, b)| m.max((a - b).abs()));
    }

    let init_path = args.init.clone().or_else(|| {
        let sibling = args.checkpoint.with_file_name("init.bin");
        (sibling.exists() && sibling != args.checkpoint).then_some(sibling)
    });
    let inert = match &init_path {
        Some(p) => Some(check_inert_blocks(&load(p)?, &params)?),
        None => None,
    };

    let eff = params.effective();
    let structure = structure_recovery_metrics(&eff, &star.canonical, (0.05, 20.0))?;

    let pl_constants = if layout.mode == Mode::Sarsa {
        let settings = PlSettings { alpha: args.alpha, r: structure.projection.distance, ..PlSettings::default() };
        let mut rng = streams.stream("verify-pl", 0);
        Some(estimate_pl_constants(|r| Ok(sample_window(&spec, r)?.prompt), args.samples, &settings, &mut rng)?)
    } else {
        None
    };

    let batch = FrozenBatch::sample(&spec, args.samples, streams.stream("verify-batch", 0).next_u64())?;
    let mut probe = eff.clone();
    let mut log = Vec::with_capacity(args.probe_steps);
    for _ in 0..args.probe_steps {
        let (l, g) = batch.loss_and_grad(&probe);
        log.push(PlLogEntry { loss: l, grad_norm: g.norm_sq().sqrt() });
        probe = probe.sub(&g.scale(&args.probe_lr));
    }
    let trajectory = pl_trajectory_check(&log, pl_constants.as_ref().map(|k| k.mu_r));

    let diagnostics = json!({
        "checkpoint": args.checkpoint.display().to_string(),
        "layout": { "mode": layout.mode, "d": layout.d, "m": layout.m, "D": layout.dim() },
        "teacher_residual_max_abs": residual,
        "inert_blocks": inert,
        "inert_reference": init_path.map(|p| p.display().to_string()),
        "quadratic_blocks_zero": quadratic_blocks_zero(&params),
        "manifold_projection": structure.projection,
        "structure_recovery": {
            "cos_p12": structure.cos_p12,
            "cos_v21_bar": structure.cos_v21_bar,
            "off_pattern_mass": structure.off_pattern_mass,
        },
        "pl_constants": pl_constants,
        "trajectory_check": {
            "steps": args.probe_steps,
            "learning_rate": args.probe_lr,
            "initial_loss": log.first().map(|e| e.loss),
            "final_loss": log.last().map(|e| e.loss),
            "report": trajectory,
        },
    });
    run.write("diagnostics", "diagnostics.json", serde_json::to_string_pretty(&diagnostics)?)?;
    run.write("heatmap_p", "P.csv", matrix_csv(params.p()))?;
    run.write("heatmap_v", "V.csv", matrix_csv(params.v()))?;
    let config = json!({
        "checkpoint": args.checkpoint.display().to_string(),
        "samples": args.samples,
        "probe_steps": args.probe_steps,
        "probe_lr": args.probe_lr,
        "alpha": args.alpha,
        "beta": args.beta,
    });
    run.finish(config, BTreeMap::from([("verify".to_string(), args.seed)]), "ok")
}

/// Returns the MDP JSON; also writes files when `--out` is given.
pub fn cmd_sample_mdp(args: &SampleMdpArgs) -> Result<String> {
    let cfg = MdpConfig::new(args.states, args.actions, args.discount);
    let mut rng = SeedStreams::new(args.seed).stream("mdp", args.index);
    let mdp = sample_mdp(&mut rng, &cfg)?.with_seed(args.seed);
    let text = mdp.to_json()?;
    if let Some(dir) = &args.out {
        let mut run = Run::open(&OutArgs { out: Some(dir.clone()) }, "sample-mdp")?;
        run.write("mdp", "mdp.json", &text)?;
        let q = value_iteration(&mdp, 1e-12)?;
        let mut csv = String::from("state,action,q\n");
        for s in 0..args.states {
            for a in 0..args.actions {
                csv.push_str(&format!("{s},{a},{:?}\n", q.get(s, a)));
            }
        }
        run.write("q_star", "q_star.csv", csv)?;
        let seeds = BTreeMap::from([("master".to_string(), args.seed), ("index".to_string(), args.index)]);
        run.finish(serde_json::to_value(cfg)?, seeds, "ok")?;
    }
    Ok(text)
}

pub fn cmd_construct(args: &ConstructArgs) -> Result<PathBuf> {
    let star = match args.mode {
        Mode::Sarsa => construct_sarsa_optimal(args.d, args.alpha, args.c)?,
        Mode::ActorCritic => construct_ac_optimal(args.d, args.m, args.alpha, args.beta, args.c)?,
    };
    let mut run = Run::open(&args.out, "construct")?;
    run.checkpoint("checkpoint", "theta_star.bin", &star.params, 0, 0)?;
    let config = json!({ "mode": args.mode, "d": args.d, "m": args.m, "alpha": args.alpha, "beta": args.beta, "c": args.c });
    run.finish(config, BTreeMap::new(), "ok")
}

/// Runs one subcommand and prints the path of its main artifact (or the MDP JSON).
pub fn run(cli: Cli) -> Result<()> {
    let shown = match cli.command {
        Command::Train(a) => cmd_train(&a)?.join("manifest.json").display().to_string(),
        Command::Eval(a) => cmd_eval(&a)?.join("summary.json").display().to_string(),
        Command::Verify(a) => cmd_verify(&a)?.join("diagnostics.json").display().to_string(),
        Command::SampleMdp(a) => cmd_sample_mdp(&a)?,
        Command::Construct(a) => cmd_construct(&a)?.join("theta_star.bin").display().to_string(),
    };
    // a closed pipe (e.g. `| head`) is not an error
    let _ = writeln!(std::io::stdout().lock(), "{shown}");
    Ok(())
}
