use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use icrl_core::eval::EvalConfig;
use icrl_core::training::TrainConfig;
use icrl_core::{load_checkpoint, save_checkpoint, Mode};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_icrl-lab"));
    c.env("RUST_LOG", "warn").env_remove("ICRL_LAB_OUT");
    c
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn check_manifest(dir: &Path) -> Value {
    let m = json(&dir.join("manifest.json"));
    for (_, rel) in m["artifacts"].as_object().unwrap() {
        assert!(dir.join(rel.as_str().unwrap()).exists(), "missing artifact {rel}");
    }
    m
}

#[test]
fn zero_mdp_run_writes_an_empty_loss_log_and_the_init_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    run_ok(&["train", "--mode", "sarsa", "--mdps", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(std::fs::read_to_string(out.join("loss.csv")).unwrap(), "frame,mdp_index,loss\n");
    let (init, manifest) = load_checkpoint(&out.join("checkpoints/init.bin")).unwrap();
    let (fin, _) = load_checkpoint(&out.join("checkpoints/final.bin")).unwrap();
    assert_eq!(init, fin);
    assert_eq!(manifest.dim, 47);
    assert_eq!(check_manifest(&out)["status"], "ok");
}

#[test]
fn identical_invocations_differ_only_in_timestamps() {
    let tmp = tempfile::tempdir().unwrap();
    let mut manifests = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        run_ok(&["train", "--mode", "ac", "--mdps", "3", "--frames", "20", "--seed", "9", "--checkpoint-every", "2", "--out", out.to_str().unwrap()]);
        let mut m = check_manifest(&out);
        m.as_object_mut().unwrap().remove("timestamps");
        manifests.push((m, std::fs::read(out.join("loss.csv")).unwrap(), std::fs::read(out.join("checkpoints/final.bin")).unwrap()));
    }
    assert_eq!(manifests[0], manifests[1]);
    assert_eq!(String::from_utf8_lossy(&manifests[0].1).lines().count(), 1 + 60);
    assert!(manifests[0].0["artifacts"].as_object().unwrap().values().any(|v| v == "checkpoints/mdp_000002.bin"));
}

#[test]
fn bundled_configs_match_the_presets() {
    for (file, mode) in [("full_sarsa.json", Mode::Sarsa), ("full_ac.json", Mode::ActorCritic)] {
        let cfg: TrainConfig = serde_json::from_value(json(&configs().join(file))).unwrap();
        assert_eq!(cfg, TrainConfig { checkpoint_every: 1000, ..TrainConfig::full_scale(mode) });
    }
    for (file, mode) in [("desk_sarsa.json", Mode::Sarsa), ("desk_ac.json", Mode::ActorCritic)] {
        let cfg: TrainConfig = serde_json::from_value(json(&configs().join(file))).unwrap();
        assert_eq!(cfg, TrainConfig::desk(mode));
    }
    let eval: EvalConfig = serde_json::from_value(json(&configs().join("full_eval.json"))).unwrap();
    assert_eq!(eval, EvalConfig::full_scale());
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = configs().join("full_sarsa.json");
    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--mdps", "0", "--window", "4", "--out", out.to_str().unwrap()]);
    let echoed: TrainConfig = serde_json::from_value(json(&out.join("config.json"))).unwrap();
    assert_eq!(echoed, TrainConfig { num_mdps: 0, window: 4, checkpoint_every: 1000, ..TrainConfig::full_scale(Mode::Sarsa) });
}

#[test]
fn invalid_config_fails_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"learning_rat": 0.1}"#).unwrap();
    let out = bin().args(["train", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
    let out = bin().args(["train", "--window", "0", "--out", tmp.path().join("o").to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn divergence_exits_nonzero_and_keeps_the_last_finite_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("hot.json");
    std::fs::write(&cfg, r#"{"learning_rate": 10000.0, "divergence_threshold": 10.0, "num_mdps": 3, "frames_per_mdp": 20}"#).unwrap();
    let out_dir = tmp.path().join("run");
    let out = bin().args(["train", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
    let (last, _) = load_checkpoint(&out_dir.join("checkpoints/last_good.bin")).unwrap();
    assert!(last.is_finite());
    assert!(check_manifest(&out_dir)["status"].as_str().unwrap().starts_with("diverged"));
}

fn construct(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["construct", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    run_ok(&args);
    dir.join("theta_star.bin")
}

#[test]
fn eval_of_the_construction_tracks_the_teacher() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = construct(&tmp.path().join("star"), &["--c", "-2"]);
    let out = tmp.path().join("eval");
    run_ok(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--mdps", "3", "--steps", "20", "--rollouts", "8", "--jobs", "2", "--out", out.to_str().unwrap()]);
    let csv = std::fs::read_to_string(out.join("curves.csv")).unwrap();
    let pick = |agent: &str| -> Vec<f64> {
        csv.lines().skip(1).filter(|l| l.split(',').nth(2) == Some(agent)).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect()
    };
    let (tf, te) = (pick("transformer"), pick("teacher"));
    assert_eq!(tf.len(), 9);
    assert!(tf.iter().zip(&te).all(|(a, b)| (a - b).abs() < 1e-9));
    for agent in ["transformer", "teacher", "oracle", "random"] {
        assert!(out.join(format!("plot_{agent}.csv")).exists());
    }
    let summary = json(&out.join("summary.json"));
    assert!(summary["final"]["oracle"]["mean"].is_f64());
    check_manifest(&out);
}

#[test]
fn eval_with_two_agents_writes_two_agents() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = construct(&tmp.path().join("star"), &[]);
    let out = tmp.path().join("eval");
    run_ok(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--agents", "oracle,random", "--mdps", "2", "--steps", "10", "--rollouts", "4", "--out", out.to_str().unwrap()]);
    let csv = std::fs::read_to_string(out.join("curves.csv")).unwrap();
    let agents: std::collections::BTreeSet<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(agents.into_iter().collect::<Vec<_>>(), ["oracle", "random"]);
    assert!(!out.join("plot_transformer.csv").exists());
}

#[test]
fn eval_rejects_a_checkpoint_of_the_other_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = construct(&tmp.path().join("star"), &["--d", "4"]);
    let out = bin().args(["eval", "--checkpoint", ckpt.to_str().unwrap(), "--mode", "ac", "--out", tmp.path().join("e").to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("D=14"));
    let missing = bin().args(["eval", "--checkpoint", "/nonexistent/theta.bin"]).output().unwrap();
    assert!(!missing.status.success());
}

#[test]
fn verify_on_the_construction_reports_an_exact_fit() {
    let tmp = tempfile::tempdir().unwrap();
    for (name, extra) in [("sarsa", vec![]), ("ac", vec!["--mode", "ac", "--d", "5", "--m", "8", "--c", "0.5"])] {
        let ckpt = construct(&tmp.path().join(name), &extra);
        let out = tmp.path().join(format!("verify-{name}"));
        run_ok(&["verify", "--checkpoint", ckpt.to_str().unwrap(), "--samples", "100", "--probe-steps", "20", "--out", out.to_str().unwrap()]);
        let d = json(&out.join("diagnostics.json"));
        assert!(d["teacher_residual_max_abs"].as_f64().unwrap() < 1e-10);
        assert!(d["manifold_projection"]["distance"].as_f64().unwrap() < 1e-8);
        assert!(d["structure_recovery"]["cos_p12"].as_f64().unwrap() > 1.0 - 1e-12);
        assert!(d["structure_recovery"]["cos_v21_bar"].as_f64().unwrap() > 1.0 - 1e-12);
        assert!(d["trajectory_check"]["final_loss"].as_f64().unwrap() < 1e-20);
        assert_eq!(d["pl_constants"].is_null(), name == "ac");
        let dim = d["layout"]["D"].as_u64().unwrap() as usize;
        assert_eq!(std::fs::read_to_string(out.join("P.csv")).unwrap().lines().count(), dim);
        check_manifest(&out);
    }
}

#[test]
fn verify_on_an_untrained_checkpoint_passes_the_inert_check() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    run_ok(&["train", "--mdps", "0", "--out", run.to_str().unwrap()]);
    let out = tmp.path().join("verify");
    run_ok(&["verify", "--checkpoint", run.join("checkpoints/final.bin").to_str().unwrap(), "--samples", "100", "--probe-steps", "5", "--out", out.to_str().unwrap()]);
    let d = json(&out.join("diagnostics.json"));
    assert_eq!(d["inert_blocks"]["unchanged"], true);
    assert!(d["manifold_projection"]["distance"].as_f64().unwrap() > 0.1);
    assert!(d["teacher_residual_max_abs"].as_f64().unwrap() > 1e-3);
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().env("ICRL_LAB_OUT", tmp.path()).args(["construct", "--d", "2"]).output().unwrap();
    assert!(out.status.success());
    assert!(tmp.path().join("theta_star.bin").exists());
    assert!(tmp.path().join("manifest.json").exists());
}

#[test]
fn checkpoints_resave_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = construct(&tmp.path().join("star"), &["--mode", "ac", "--d", "2", "--m", "3"]);
    let (params, manifest) = load_checkpoint(&ckpt).unwrap();
    let again = tmp.path().join("again/theta.bin");
    save_checkpoint(&params, &again, manifest.step, manifest.seed).unwrap();
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(std::fs::read(ckpt.with_extension("json")).unwrap(), std::fs::read(again.with_extension("json")).unwrap());
}

#[test]
fn sample_mdp_is_seeded() {
    let a = run_ok(&["sample-mdp", "--seed", "4", "--index", "2"]).stdout;
    let b = run_ok(&["sample-mdp", "--seed", "4", "--index", "2"]).stdout;
    let c = run_ok(&["sample-mdp", "--seed", "4", "--index", "3"]).stdout;
    assert_eq!(a, b);
    assert_ne!(a, c);
    let mdp: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(mdp["n_states"], 5);
    let tmp = tempfile::tempdir().unwrap();
    run_ok(&["sample-mdp", "--states", "3", "--actions", "2", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(std::fs::read_to_string(tmp.path().join("q_star.csv")).unwrap().lines().count(), 1 + 6);
}

#[test]
fn full_scale_preset_is_selectable_by_flag() {
    let tmp = tempfile::tempdir().unwrap();
    for flag in ["--full-scale", "--paper-scale"] {
        let out = tmp.path().join(flag.trim_start_matches('-'));
        run_ok(&["train", flag, "--mode", "ac", "--mdps", "0", "--out", out.to_str().unwrap()]);
        let echoed: TrainConfig = serde_json::from_value(json(&out.join("config.json"))).unwrap();
        assert_eq!(echoed, TrainConfig { num_mdps: 0, ..TrainConfig::full_scale(Mode::ActorCritic) });
    }
}
