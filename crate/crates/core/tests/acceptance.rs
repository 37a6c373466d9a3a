//! Acceptance gate. Each test prints one `PASS`/`FAIL` line straight to
//! stdout (bypassing the test harness capture) and then asserts.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use icrl_core::attention::{grad_parts, readout};
use icrl_core::EffectiveParams;
use icrl_core::eval::{closed_loop_eval, mc_return_with_error, Agent, EvalConfig, EvalCurves};
use icrl_core::mdp::{exact_policy_return, rollout, sample_mdp, value_iteration};
use icrl_core::task::Task;
use icrl_core::theory::{
    check_inert_blocks, construct_ac_optimal, construct_sarsa_optimal, fit_exponential_rate, pl_trajectory_check,
    project_to_manifold, quadratic_blocks_zero, structure_recovery_metrics, PlLogEntry,
};
use icrl_core::training::{train, FrozenBatch, RunReport, TrainConfig};
use icrl_core::{loss, FeatureKind, Matrix, MdpConfig, Mode, PolicySpec, Prompt, Rng, SeedStreams};
use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;

fn report(id: u32, title: &str, pass: bool, detail: String, took: Duration) {
    let line = format!(
        "[acceptance] criterion {id:>2} {:<4} {title}: {detail} ({:.2}s)\n",
        if pass { "PASS" } else { "FAIL" },
        took.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn random_w(rng: &mut Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Shared desk runs; the wall-clock time of the run itself is kept for reporting.
fn timed_run(mode: Mode) -> (RunReport, Duration) {
    let t0 = Instant::now();
    let run = train(&TrainConfig::desk(mode), None).expect("desk training");
    (run, t0.elapsed())
}

fn desk_sarsa() -> &'static (RunReport, Duration) {
    static RUN: OnceLock<(RunReport, Duration)> = OnceLock::new();
    RUN.get_or_init(|| timed_run(Mode::Sarsa))
}

fn desk_ac() -> &'static (RunReport, Duration) {
    static RUN: OnceLock<(RunReport, Duration)> = OnceLock::new();
    RUN.get_or_init(|| timed_run(Mode::ActorCritic))
}

fn desk_sarsa_run() -> &'static RunReport {
    &desk_sarsa().0
}

fn desk_ac_run() -> &'static RunReport {
    &desk_ac().0
}

/// Random desk-scale task, learner state and window, drawn from one stream.
fn desk_window(mode: Mode, streams: &SeedStreams, i: u64) -> (Task, icrl_core::task::LearnerState, icrl_core::Trajectory) {
    let cfg = TrainConfig::desk(mode);
    let mut rng = streams.stream("tuple", i);
    let mut frng = streams.stream("tuple-features", i);
    let task = Task::sample(&cfg.task_spec(), &mut rng, &mut frng).unwrap();
    let (mut state, s0) = task.initial_state(&mut rng);
    // spread w beyond the training range so the check is not tied to Unif(−1, 1)
    let scale = rng.random_range(0.1..5.0);
    state.w.iter_mut().chain(state.lambda.iter_mut()).for_each(|x| *x *= scale);
    let traj = rollout(&task.mdp, &task.policy(&state, cfg.epsilon), s0, cfg.window, &mut rng).unwrap();
    (task, state, traj)
}

#[test]
fn criterion_01_sarsa_construction_is_exact() {
    let t0 = Instant::now();
    let cfg = TrainConfig::desk(Mode::Sarsa);
    let star = construct_sarsa_optimal(cfg.d, cfg.alpha, 1.0).unwrap();
    let streams = SeedStreams::new(101);
    let mut worst = 0f64;
    for i in 0..1000 {
        let (task, state, traj) = desk_window(Mode::Sarsa, &streams, i);
        let prompt = task.prompt(&traj, &state).unwrap();
        let out = icrl_core::readout_sarsa(&star.params, &prompt).unwrap();
        let teacher = task.teacher(&traj, &state, &cfg.teacher()).unwrap();
        for (a, b) in out.iter().zip(&teacher.w) {
            worst = worst.max((a - b).abs());
        }
    }
    let took = t0.elapsed();
    let pass = worst <= 1e-10 && took < Duration::from_secs(10);
    report(1, "SARSA construction matches the teacher", pass, format!("max |readout − teacher| = {worst:.2e} over 1000 tuples"), took);
    assert!(pass);
}

#[test]
fn criterion_02_actor_critic_construction_is_exact() {
    let t0 = Instant::now();
    let cfg = TrainConfig::desk(Mode::ActorCritic);
    let star = construct_ac_optimal(cfg.d, cfg.m, cfg.alpha, cfg.beta, 1.0).unwrap();
    let streams = SeedStreams::new(202);
    let mut worst = 0f64;
    for i in 0..1000 {
        let (task, state, traj) = desk_window(Mode::ActorCritic, &streams, i);
        let prompt = task.prompt(&traj, &state).unwrap();
        let (lam, w) = icrl_core::readout_ac(&star.params, &prompt).unwrap();
        let teacher = task.teacher(&traj, &state, &cfg.teacher()).unwrap();
        for (a, b) in lam.iter().chain(&w).zip(teacher.lambda.iter().chain(&teacher.w)) {
            worst = worst.max((a - b).abs());
        }
    }
    let took = t0.elapsed();
    let pass = worst <= 1e-10 && took < Duration::from_secs(10);
    report(2, "actor-critic construction matches the teacher", pass, format!("max |readout − teacher| = {worst:.2e} over 1000 tuples"), took);
    assert!(pass);
}

#[test]
fn criterion_03_scaling_family_is_a_level_set() {
    let t0 = Instant::now();
    let cfg = TrainConfig::desk(Mode::Sarsa);
    let streams = SeedStreams::new(303);
    let windows: Vec<_> = (0..100).map(|i| desk_window(Mode::Sarsa, &streams, i)).collect();
    let mut worst = 0f64;
    for c in [0.25, 0.5, 1.0, 2.0, 4.0, -1.0] {
        let star = construct_sarsa_optimal(cfg.d, cfg.alpha, c).unwrap();
        for (task, state, traj) in &windows {
            let prompt = task.prompt(traj, state).unwrap();
            let out = readout(&star.params, &prompt).unwrap();
            let target = task.teacher(traj, state, &cfg.teacher()).unwrap().w;
            worst = worst.max(loss(&out, &target));
        }
    }
    let took = t0.elapsed();
    let pass = worst < 1e-20;
    report(3, "scaled constructions have zero loss", pass, format!("max loss = {worst:.2e} over 6 scales × 100 prompts"), took);
    assert!(pass);
}

#[test]
fn criterion_04_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let mut rng = Rng::seed_from_u64(404);
    let d = 2;
    let layout = icrl_core::BlockLayout::sarsa(d);
    let h = 1e-6;
    let mut worst = 0f64;
    for _ in 0..100 {
        let mut randn = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
        let eff = EffectiveParams { p12: randn(layout.top(), layout.bottom()), v21_bar: randn(d, layout.top()) };
        let p22 = randn(layout.bottom(), layout.bottom());
        let v22 = randn(d, layout.bottom());
        let xs: Vec<Vec<f64>> = (0..3).map(|_| random_w(&mut rng, layout.top())).collect();
        let mut wt = vec![1.0];
        wt.extend(random_w(&mut rng, d));
        let prompt = Prompt::from_columns(layout, &xs, &wt).unwrap();
        let sigma = prompt.sigma_hat();
        let target = random_w(&mut rng, d);
        let f = |e: &EffectiveParams, p: &Matrix<f64>, v: &Matrix<f64>| grad_parts(e, &sigma, &wt, 3, Some(p), Some(v), &target).1;
        let (g, _) = grad_parts(&eff, &sigma, &wt, 3, Some(&p22), Some(&v22), &target);
        let mut an = Vec::new();
        let mut fd = Vec::new();
        for block in 0..4 {
            let len = match block {
                0 => eff.p12.as_slice().len(),
                1 => eff.v21_bar.as_slice().len(),
                2 => p22.as_slice().len(),
                _ => v22.as_slice().len(),
            };
            for k in 0..len {
                let eval = |delta: f64| {
                    let (mut e, mut p, mut v) = (eff.clone(), p22.clone(), v22.clone());
                    match block {
                        0 => e.p12.as_mut_slice()[k] += delta,
                        1 => e.v21_bar.as_mut_slice()[k] += delta,
                        2 => p.as_mut_slice()[k] += delta,
                        _ => v.as_mut_slice()[k] += delta,
                    }
                    f(&e, &p, &v)
                };
                fd.push((eval(h) - eval(-h)) / (2.0 * h));
                an.push(match block {
                    0 => g.d_p12.as_slice()[k],
                    1 => g.d_v21_bar.as_slice()[k],
                    2 => g.d_p22.as_ref().unwrap().as_slice()[k],
                    _ => g.d_v22_bar.as_ref().unwrap().as_slice()[k],
                });
            }
        }
        // relative to the largest gradient entry of the instance
        let scale = an.iter().fold(0f64, |m, x| m.max(x.abs())).max(1e-300);
        let err = an.iter().zip(&fd).fold(0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(err / scale);
    }
    let took = t0.elapsed();
    let pass = worst < 1e-5;
    report(4, "analytical gradients match central differences", pass, format!("max relative error = {worst:.2e} over 100 instances"), took);
    assert!(pass);
}

#[test]
fn criterion_05_inert_and_quadratic_blocks_stay_put() {
    let t0 = Instant::now();
    let cfg = TrainConfig { full_parameterization: true, ..TrainConfig::desk(Mode::Sarsa) };
    let run = train(&cfg, None).unwrap();
    let inert = check_inert_blocks(&run.initial_params, &run.final_params).unwrap();
    let quad = quadratic_blocks_zero(&run.final_params);
    let moved = run.final_params.effective() != run.initial_params.effective();
    let effective_only = check_inert_blocks(&desk_sarsa_run().initial_params, &desk_sarsa_run().final_params).unwrap();
    let took = t0.elapsed();
    let pass = inert.unchanged && quad && moved && effective_only.unchanged && took < Duration::from_secs(300);
    report(
        5,
        "inert blocks unchanged, P22 and V̄22 stay zero",
        pass,
        format!(
            "{} MDPs: inert violations {} (full) / {} (effective-only), quadratic blocks zero: {quad}",
            cfg.num_mdps, inert.violations, effective_only.violations
        ),
        took,
    );
    assert!(pass);
}

#[test]
fn criterion_06_sarsa_training_converges_to_the_structure() {
    let (run, train_time) = desk_sarsa();
    let t0 = Instant::now();
    let cfg = &run.config;
    let tail = run.tail_mean(100).unwrap();
    let star = construct_sarsa_optimal(cfg.d, cfg.alpha, 1.0).unwrap();
    let m = structure_recovery_metrics(&run.final_params.effective(), &star.canonical, (0.05, 20.0)).unwrap();
    let took = t0.elapsed() + *train_time;
    let pass = tail < 1e-3 && m.cos_p12 > 0.95 && m.cos_v21_bar > 0.95 && m.off_pattern_mass < 0.10 && took < Duration::from_secs(300);
    report(
        6,
        "desk SARSA training",
        pass,
        format!(
            "final-100 mean loss {tail:.2e}, cos(P12) {:.4}, cos(V̄21) {:.4}, off-pattern {:.3}, ĉ {:.3}",
            m.cos_p12, m.cos_v21_bar, m.off_pattern_mass, m.projection.c_hat
        ),
        took,
    );
    assert!(pass);
}

#[test]
fn criterion_07_actor_critic_training_converges() {
    let (run, train_time) = desk_ac();
    let tail = run.tail_mean(100).unwrap();
    let took = *train_time;
    let pass = tail < 1e-3 && took < Duration::from_secs(600);
    report(7, "desk actor-critic training", pass, format!("final-100 mean loss {tail:.2e}"), took);
    assert!(pass);
}

#[test]
fn criterion_08_local_convergence_near_the_manifold() {
    let t0 = Instant::now();
    let cfg = TrainConfig::desk(Mode::Sarsa);
    let batch = FrozenBatch::sample(&cfg.window_spec(), 256, 808).unwrap();
    let star = construct_sarsa_optimal(cfg.d, cfg.alpha, 1.0).unwrap().canonical;
    let mut rng = Rng::seed_from_u64(808);
    let mut randn = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let raw = EffectiveParams { p12: randn(star.p12.rows(), star.p12.cols()), v21_bar: randn(star.v21_bar.rows(), star.v21_bar.cols()) };
    // normal space at c = 1 is orthogonal to the tangent (P12*, −V̄21*)
    let tangent = EffectiveParams { p12: star.p12.clone(), v21_bar: star.v21_bar.scale(&-1.0) };
    let noise = raw.sub(&tangent.scale(&(raw.frob_dot(&tangent) / tangent.norm_sq())));
    let noise = noise.scale(&(0.05 / noise.norm_sq().sqrt()));
    let mut eff = star.add(&noise);
    let d0 = project_to_manifold(&eff, &star, (0.05, 20.0)).unwrap().distance;
    let (lr, steps) = (4.0, 8000);
    let mut log = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (l, g) = batch.loss_and_grad(&eff);
        log.push(PlLogEntry { loss: l, grad_norm: g.norm_sq().sqrt() });
        eff = eff.sub(&g.scale(&lr));
    }
    let d1 = project_to_manifold(&eff, &star, (0.05, 20.0)).unwrap().distance;
    let monotone = log.windows(2).all(|w| w[1].loss <= w[0].loss);
    let pl = pl_trajectory_check(&log, None);
    let min_ratio = pl.empirical_pl.unwrap_or(0.0);
    let losses: Vec<f64> = log.iter().map(|e| e.loss).collect();
    let (rate, r2) = fit_exponential_rate(&losses).unwrap_or((0.0, 0.0));
    let took = t0.elapsed();
    let pass = monotone && min_ratio > 0.0 && d1 < 0.1 * d0 && r2 > 0.9 && took < Duration::from_secs(120);
    report(
        8,
        "gradient descent from a perturbed optimum",
        pass,
        format!(
            "monotone {monotone}, min ½‖∇L‖²/L {min_ratio:.2e}, distance {d0:.3e} → {d1:.3e}, log-loss fit rate {rate:.2e} r² {r2:.3}"
        ),
        took,
    );
    assert!(pass);
}

fn closed_loop_verdict(curves: &EvalCurves) -> (bool, String) {
    let last = curves.steps.len() - 1;
    let get = |a: Agent| {
        let c = &curves.aggregate[&a];
        (c.mean[last], c.mc_std_err[last])
    };
    let (tf, tf_se) = get(Agent::Transformer);
    let (te, _) = get(Agent::Teacher);
    let (or, or_se) = get(Agent::Oracle);
    let (ra, ra_se) = get(Agent::Random);
    let rel = (tf - te).abs() / te.abs();
    let above_random = tf - ra > 3.0 * (tf_se * tf_se + ra_se * ra_se).sqrt();
    let below_oracle = tf <= or + 3.0 * (tf_se * tf_se + or_se * or_se).sqrt();
    (
        rel < 0.05 && above_random && below_oracle,
        format!("transformer {tf:.4} ± {tf_se:.4}, teacher {te:.4} (rel {rel:.3}), random {ra:.4}, oracle {or:.4}"),
    )
}

#[test]
fn criterion_09_closed_loop_control() {
    let t0 = Instant::now();
    // 256 rollouts rather than 32: at 32 the Monte-Carlo error alone exceeds the 5% band.
    let ecfg = EvalConfig { num_test_mdps: 20, mc_rollouts: 256, ..EvalConfig::default() };
    let sarsa = closed_loop_eval(&desk_sarsa_run().final_params, &ecfg).unwrap();
    let ac = closed_loop_eval(&desk_ac_run().final_params, &ecfg).unwrap();
    let (p1, s1) = closed_loop_verdict(&sarsa);
    let (p2, s2) = closed_loop_verdict(&ac);
    let took = t0.elapsed();
    let pass = p1 && p2 && took < Duration::from_secs(300);
    report(9, "closed-loop control on 20 held-out MDPs", pass, format!("SARSA: {s1}; AC: {s2}"), took);
    assert!(pass);
}

#[test]
fn criterion_10_monte_carlo_matches_exact_returns() {
    let t0 = Instant::now();
    let mut rng = Rng::seed_from_u64(1010);
    let mut worst = 0f64;
    let mut failures = 0;
    for i in 0..50 {
        let mdp = sample_mdp(&mut rng, &MdpConfig::new(5, 3, 0.5)).unwrap();
        let q_feat = icrl_core::features::sample_features(&mut rng, FeatureKind::StateAction, 5, 3, 15).unwrap();
        let p_feat = icrl_core::features::sample_features(&mut rng, FeatureKind::Policy, 5, 3, 8).unwrap();
        let w = random_w(&mut rng, 15);
        let lambda = random_w(&mut rng, 8);
        let q = value_iteration(&mdp, 1e-12).unwrap();
        let policy = match i % 4 {
            0 => PolicySpec::UniformRandom,
            1 => PolicySpec::EpsilonGreedyQ { features: &q_feat, w: &w, epsilon: 0.1 },
            2 => PolicySpec::SoftmaxActor { features: &p_feat, lambda: &lambda, epsilon: 0.1 },
            _ => PolicySpec::GreedyOracle { q: &q },
        };
        let exact = exact_policy_return(&mdp, &policy).unwrap();
        let est = mc_return_with_error(&mdp, &policy, 2000, 50, &mut rng).unwrap();
        let z = (est.mean - exact).abs() / est.std_err;
        worst = worst.max(z);
        if z > 3.0 {
            failures += 1;
        }
    }
    let took = t0.elapsed();
    let pass = failures == 0 && took < Duration::from_secs(60);
    report(10, "Monte-Carlo returns agree with exact returns", pass, format!("max |MC − exact| / SE = {worst:.2} over 50 pairs"), took);
    assert!(pass);
}
