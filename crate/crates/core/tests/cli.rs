use std::path::Path;
use std::process::{Command, Output};

fn choose(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_choose"))
        .args(args)
        .current_dir(dir)
        .env_remove("CHOOSE_THREADS")
        .output()
        .unwrap()
}

fn config(dir: &Path, steps: usize) -> std::path::PathBuf {
    let path = dir.join("c.json");
    let text = format!(
        r#"{{
  "name": "tiny",
  "model": {{"n_layers": 1, "embed_dim": 32, "n_heads": 4, "n_thoughts": 2, "max_positions": 24, "mlp_ratio": 4}},
  "modulation": 16,
  "optim": {{"steps": {steps}, "batch_size": 8, "warmup_steps": 2}},
  "log_every": 5
}}"#
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn eval_requires_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = choose(&["eval"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--ckpt"));
}

#[test]
fn dry_run_prints_parameter_count() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), 10);
    let out = choose(&["train", "--config", "c.json", "--dry-run"], dir.path());
    assert!(out.status.success());
    let count = choose::model::ModelConfig {
        max_positions: 24,
        ..choose::model::ModelConfig::for_block(1, 2, 11)
    }
    .count_params();
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), format!("tiny: {count} parameters"));
    assert!(!dir.path().join("tiny").exists());
}

#[test]
fn malformed_config_fails_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"name": "x", "unknown": 1}"#).unwrap();
    let out = choose(&["train", "--config", "bad.json", "--dry-run"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("Error:"));
    let missing = choose(&["eval", "--ckpt", "nowhere", "--tasks", "5"], dir.path());
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nowhere"));
}

#[test]
fn unknown_flag_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!choose(&["oracle", "--bogus"], dir.path()).status.success());
}

#[test]
fn oracle_writes_one_row_per_metric_and_pilot_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = choose(
        &["oracle", "--mod", "16", "--snr-db", "30", "--pilots", "0..10", "--tasks", "10000", "--out", "o.csv"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = choose::experiment::read_csv(&dir.path().join("o.csv")).unwrap();
    assert_eq!(rows.len(), 22);
    assert_eq!(rows.iter().filter(|r| r.metric == "mse").count(), 11);
    assert_eq!(rows.iter().filter(|r| r.metric == "ser").count(), 11);
    assert!(rows.iter().all(|r| r.n == 10000 && r.model_id == "oracle"));
}

#[test]
fn train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), 10);
    let out = choose(&["train", "--config", "c.json", "--out", "ck", "--seed", "3"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("ck/manifest.json").exists());
    assert!(dir.path().join("ck/train_log.csv").exists());

    let out = choose(&["eval", "--ckpt", "ck", "--tasks", "50", "--pilots", "2,5", "--threads", "2"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with(choose::experiment::CSV_HEADER));

    let out = choose(&["unfold", "--ckpt", "ck", "--tasks", "20", "--pilots", "3..4", "--out", "u.csv"], dir.path());
    assert!(out.status.success());
    let rows = choose::experiment::read_csv(&dir.path().join("u.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 2);

    let out = choose(&["bench", "--ckpt", "ck", "--tasks", "5", "--reps", "1"], dir.path());
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 4);
}
