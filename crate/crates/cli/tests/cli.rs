use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/assets/configs/smoke.toml")
}

fn avmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avmc")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_eval_sweep_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let train = tmp.path().join("train");
    let out = avmc(&["train", "--config", path(&cfg), "--seed", "3", "--out", path(&train)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ck = train.join("seed_3/checkpoints/final.ckpt");
    assert!(ck.is_file());
    assert!(train.join("seed_3/metrics.csv").is_file());

    let eval = tmp.path().join("eval");
    let out = avmc(&["eval", "--config", path(&cfg), "--seed", "3", "--out", path(&eval), "--checkpoint", path(&ck)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(eval.join("eval_summary.csv").is_file());
    assert!(String::from_utf8_lossy(&out.stdout).contains("all"));

    let sweep = tmp.path().join("sweep");
    let out = avmc(&["sweep", "--config", path(&cfg), "--out", path(&sweep), "--checkpoint", path(&ck)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["sweep_reward.csv", "sweep_final_error.csv", "sweep_peak_f_rep.csv"] {
        assert!(sweep.join(f).is_file(), "{f}");
    }

    // Nothing lands outside the chosen output directories.
    let mut top: Vec<String> = std::fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    top.sort();
    assert_eq!(top, ["eval", "sweep", "train"]);
}

#[test]
fn ablation_flags_are_recorded_in_the_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let out = avmc(&[
        "train",
        "--config",
        path(&smoke_config()),
        "--out",
        path(tmp.path()),
        "--no-llm",
        "--no-lyapunov",
        "--vmc-config",
        "6-E",
        "--labeler",
        "rules",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let snap = std::fs::read_to_string(tmp.path().join("seed_0/resolved_config.toml")).unwrap();
    assert!(snap.contains("lyapunov = false"), "{snap}");
    assert!(snap.contains("vmc_configuration = \"6-E\""), "{snap}");
    let metrics = std::fs::read_to_string(tmp.path().join("seed_0/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
}

#[test]
fn config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    let text = std::fs::read_to_string(smoke_config()).unwrap().replace("minibatch = 100", "minibatch = 7");
    std::fs::write(&bad, text).unwrap();
    let out = avmc(&["train", "--config", path(&bad), "--out", path(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ppo.minibatch"));

    let out = avmc(&["train", "--config", path(&smoke_config()), "--vmc-config", "5-E"]);
    assert_eq!(out.status.code(), Some(1));
    let out = avmc(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_inputs_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = avmc(&[
        "eval",
        "--config",
        path(&smoke_config()),
        "--out",
        path(tmp.path()),
        "--checkpoint",
        path(&tmp.path().join("missing.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = avmc(&["train", "--config", path(&tmp.path().join("missing.toml"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    assert!(avmc(&["--help"]).status.success());
}
