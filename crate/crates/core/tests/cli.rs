use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"

[system]
builtin = "example1"
epsilon = 0.01
sigma_slow = [1.0]
sigma_fast = [0.1]

[simulation]
dt = 0.001
n_steps = 10
n_traj = 60
init = [[-5.0, 5.0], [-6.0, 6.0]]
seed = 1

[identification]
degree = 2
threshold = 0.05
min_t_stat = 3.0

[training]
m = 11
l = 2
epochs = 5
batch_size = 16
lr = 1e-3
tau_dist = 0.05
max_generations = 3
min_generations = 3
seed = 7

[network]
encoder_widths = [8]
decoder_widths = [8]
lstm_hidden = 8

[manifold]
degree = 2

[evaluation]
dt = 0.001
time_indices = [5, 20]
n_samples = 50
x0 = [1.0]
sigma_sweep = [[0.5], [1.0]]
sweep_time_index = 20
track_steps = 20
seed = 9
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_autosde"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("tiny.cfg");
    fs::write(&p, text).unwrap();
    p
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_equals_stages_run_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let cfg = cfg.to_str().unwrap();
    let full = tmp.path().join("full");
    let staged = tmp.path().join("staged");

    let o = run(&["full", "--config", cfg, "--out", full.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for stage in ["simulate", "identify", "train", "reduce"] {
        let o = run(&[stage, "--config", cfg, "--out", staged.to_str().unwrap()]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    // the flag form selects the same stage as the subcommand
    let o = run(&["--stage", "evaluate", "--config", cfg, "--out", staged.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let (a, b) = (files(&full), files(&staged));
    assert_eq!(a, b);
    for f in [
        "ensemble.csv",
        "sde_table.csv",
        "snapshots/gen_000.csv",
        "model.json",
        "manifold.json",
        "comparison.json",
        "evaluation.json",
    ] {
        assert!(a.contains(&PathBuf::from(f)), "missing {f}");
    }
    for f in &a {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(staged.join(f)).unwrap(), "{} differs", f.display());
    }
}

#[test]
fn artifacts_embed_config_hash_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("o");
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "42"]);
    assert!(o.status.success());
    let csv = fs::read_to_string(out.join("ensemble.csv")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("ensemble.json")).unwrap()).unwrap();
    assert_eq!(json["seed"], 42);
    let hash = json["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(csv.starts_with(&format!("# config_hash={hash},seed=42\n")));

    // without the override the hash differs, and the next stage refuses
    // the foreign ensemble
    let o = run(&["identify", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rerun the earlier stages"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).to_lowercase().contains("usage"));
}

#[test]
fn missing_config_flag_is_a_usage_error() {
    let o = run(&["simulate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &TINY.replace("n_traj = 60", "n_traj = 60\nn_trajs = 5"));
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("n_trajs"), "{err}");
}

#[test]
fn inconsistent_config_gives_a_field_level_message() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &TINY.replace("m = 11", "m = 9"));
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("training.m"));
}

#[test]
fn partial_stage_without_inputs_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("o");
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing input artifact"));
}
