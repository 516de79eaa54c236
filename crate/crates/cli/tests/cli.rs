use std::path::Path;
use std::process::{Command, Output};

use flapsim::analysis::{reference_model, synthesize_io};

fn flapsim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flapsim"))
        .args(args)
        .current_dir(dir)
        .env_remove("FLAPSIM_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn json(dir: &Path, name: &str) -> serde_json::Value {
    serde_json::from_slice(&read(dir, name)).unwrap()
}

const FREE_FALL: &str =
    "seed = 3\n[environment]\naero_enabled = false\n[simulate]\nepisodes = 1\nrandomize_initial_state = false\n";
const TINY_TRAIN: &str =
    "seed = 5\n[ppo]\nhidden_sizes = [8]\nparallel = false\nhorizon = 32\n[train]\ntotal_steps = 1024\nreport_every = 0\n";

#[test]
fn unknown_command_prints_usage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = flapsim(tmp.path(), &["fly-to-the-moon"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn zero_policy_free_fall_ends_on_position() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "zero.toml", FREE_FALL);
    let out = flapsim(d, &["simulate", "--config", "zero.toml", "--out", "sim"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = json(&d.join("sim"), "summary.json");
    assert_eq!(summary[0]["termination"], "position");
    // A 3 m drop from rest takes sqrt(6 / g) s, about 40 policy steps.
    let steps = summary[0]["steps"].as_u64().unwrap();
    assert!((39..=41).contains(&steps), "{steps}");
    let log = String::from_utf8(read(&d.join("sim"), "rollout_000.csv")).unwrap();
    assert!(log.starts_with("# flapsim rollout schema 1\nstep,t_s,x_m"));
    assert_eq!(log.lines().count(), 2 + steps as usize);
    let meta = json(&d.join("sim"), "meta.json");
    assert_eq!(meta["seed"], 3);
    assert_eq!(meta["controller"], "zero");
}

#[test]
fn runs_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "zero.toml", FREE_FALL);
    write(d, "tiny.toml", TINY_TRAIN);
    for dir in ["a", "b"] {
        assert!(flapsim(d, &["simulate", "--config", "zero.toml", "--out", &format!("sim_{dir}")]).status.success());
        assert!(flapsim(d, &["train", "--config", "tiny.toml", "--out", &format!("train_{dir}")]).status.success());
    }
    for f in ["rollout_000.csv", "summary.json", "meta.json", "config.toml"] {
        assert_eq!(read(&d.join("sim_a"), f), read(&d.join("sim_b"), f), "{f}");
    }
    for f in ["policy.json", "training.csv", "episodes.csv", "meta.json"] {
        assert_eq!(read(&d.join("train_a"), f), read(&d.join("train_b"), f), "{f}");
    }
}

#[test]
fn trained_checkpoint_feeds_other_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "tiny.toml", TINY_TRAIN);
    assert!(flapsim(d, &["train", "--config", "tiny.toml", "--out", "t"]).status.success());
    let out = flapsim(d, &["evaluate", "--config", "tiny.toml", "--policy", "t/policy.json", "--episodes", "2", "--out", "e"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&d.join("e"), "evaluation.json")["episodes"].as_array().unwrap().len(), 2);
    let out = flapsim(d, &["sweep", "--policy", "t/policy.json", "--episodes", "0", "--out", "s"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(read(&d.join("s"), "sweep.csv")).unwrap().lines().count(), 1);
    let out = flapsim(d, &["simulate", "--policy", "t/policy.json", "--out", "p"]);
    assert!(out.status.success());
    assert_eq!(json(&d.join("p"), "meta.json")["controller"], "policy");
}

#[test]
fn sysid_on_reference_data_is_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let data = synthesize_io(&reference_model(), 60.0, 50.0, 1.0, 11);
    data.write_csv(std::fs::File::create(d.join("io.csv")).unwrap()).unwrap();
    let out = flapsim(d, &["sysid", "--data", "io.csv", "--out", "id"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&d.join("id"), "sysid.json");
    assert_eq!(report["pole_zero"]["bibo_stable"], true);
    assert_eq!(report["pole_zero"]["minimum_phase"], serde_json::json!([true, true, true]));
    assert_eq!(report["fit"]["poor_fit"], false);
    let den = report["fit"]["axes"][0]["denominator"].as_array().unwrap();
    assert!((den[1].as_f64().unwrap() - 3.554).abs() < 1e-3);
}

#[test]
fn error_codes_are_distinct() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "bad.toml", "seed = [\n");
    write(d, "typo.toml", "sede = 4\n");
    write(d, "missing.toml", "model_path = \"nowhere.toml\"\n");
    assert_eq!(flapsim(d, &["simulate", "--config", "bad.toml"]).status.code(), Some(3));
    assert_eq!(flapsim(d, &["simulate", "--config", "typo.toml"]).status.code(), Some(3));
    assert_eq!(flapsim(d, &["simulate", "--config", "missing.toml"]).status.code(), Some(3));
    assert_eq!(flapsim(d, &["simulate", "--config", "absent.toml"]).status.code(), Some(3));
    assert_eq!(flapsim(d, &["simulate", "--stage", "9"]).status.code(), Some(3));
    assert_eq!(flapsim(d, &["evaluate", "--policy", "none.json"]).status.code(), Some(4));
    assert_eq!(flapsim(d, &["evaluate"]).status.code(), Some(4));
    write(d, "corrupt.json", "{\"version\": 1}");
    assert_eq!(flapsim(d, &["evaluate", "--policy", "corrupt.json"]).status.code(), Some(4));
    assert_eq!(flapsim(d, &["export", "--input", "nothing.csv", "--format", "bin"]).status.code(), Some(5));
    assert_eq!(flapsim(d, &["sysid"]).status.code(), Some(2));
    let mut short = synthesize_io(&reference_model(), 5.0, 50.0, 1.0, 1);
    short.sample_rate_hz = 50.0;
    short.write_csv(std::fs::File::create(d.join("short.csv")).unwrap()).unwrap();
    assert_eq!(flapsim(d, &["sysid", "--data", "short.csv"]).status.code(), Some(6));
}

#[test]
fn output_dir_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "zero.toml", &format!("output_dir = \"from_config\"\n{FREE_FALL}"));
    let run = |env: Option<&str>, out: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_flapsim"));
        c.args(["simulate", "--config", "zero.toml"]).current_dir(d).env_remove("FLAPSIM_OUT_DIR");
        if let Some(e) = env {
            c.env("FLAPSIM_OUT_DIR", e);
        }
        if let Some(o) = out {
            c.args(["--out", o]);
        }
        assert!(c.output().unwrap().status.success());
    };
    run(None, None);
    assert!(d.join("from_config/summary.json").exists());
    run(Some("from_env"), None);
    assert!(d.join("from_env/summary.json").exists());
    run(Some("from_env2"), Some("from_flag"));
    assert!(d.join("from_flag/summary.json").exists());
    assert!(!d.join("from_env2").exists());
}

#[test]
fn export_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "zero.toml", FREE_FALL);
    assert!(flapsim(d, &["simulate", "--config", "zero.toml", "--out", "sim"]).status.success());
    assert!(flapsim(d, &["export", "--input", "sim/rollout_000.csv", "--format", "bin", "--out", "bin"]).status.success());
    assert!(flapsim(d, &["export", "--input", "bin/rollout_000.bin", "--format", "json", "--out", "json"]).status.success());
    assert!(flapsim(d, &["export", "--input", "json/rollout_000.json", "--format", "csv", "--out", "csv"]).status.success());
    assert_eq!(read(&d.join("sim"), "rollout_000.csv"), read(&d.join("csv"), "rollout_000.csv"));
}
