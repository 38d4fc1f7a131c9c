//! End-to-end runs of the `difscil` binary on the mock backbone.

use std::path::Path;
use std::process::{Command, Output};

fn difscil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_difscil"))
        .args(args)
        .output()
        .expect("binary runs")
}

const MOCK: [&str; 10] = [
    "--set",
    "dataset=mock",
    "--set",
    "backbone=mock",
    "--set",
    "protocol.optim.base_epochs=2",
    "--set",
    "protocol.optim.inc_epochs=2",
    "--set",
    "protocol.prompt.iters=3",
];

fn with_out<'a>(cmd: &'a str, out: &'a str) -> Vec<&'a str> {
    let mut v = vec![cmd, "--out", out];
    v.extend(MOCK);
    v
}

#[test]
fn single_point_grid_is_rejected_with_exit_2() {
    let o = difscil(&["run", "--set", "protocol.m=1"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("protocol.m"), "{err}");
    assert!(err.contains("m > 1"), "{err}");
}

#[test]
fn malformed_config_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "[protocol]\nbeta_init = 3.0\nunknown_key = 1\n").unwrap();
    let o = difscil(&["run", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

fn assert_outputs(dir: &Path, sessions: usize) {
    for f in [
        "results.jsonl",
        "summary.csv",
        "summary.json",
        "curve.svg",
        "config.toml",
    ] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let jsonl = std::fs::read_to_string(dir.join("results.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), sessions);
    let csv = std::fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert!(csv.starts_with("run_id,session,acc,aa,base,inc,fi\n"));
    assert!(std::fs::read_to_string(dir.join("curve.svg"))
        .unwrap()
        .starts_with("<svg"));
}

#[test]
fn run_then_eval_reproduces_session_results() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = difscil(&with_out("run", out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("AA "));
    assert!(String::from_utf8_lossy(&o.stderr).contains("[protocol]"));
    assert_outputs(dir.path(), 3);
    for s in 0..3 {
        assert!(dir.path().join(format!("session{s}.ck")).is_file());
    }
    assert!(dir.path().join("prompts.pe").is_file());
    let first = std::fs::read(dir.path().join("results.jsonl")).unwrap();

    let eval_dir = tempfile::tempdir().unwrap();
    let eval_out = eval_dir.path().to_str().unwrap();
    let mut args = with_out("eval", eval_out);
    args.extend(["--checkpoints", out]);
    let o = difscil(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(eval_dir.path().join("results.jsonl")).unwrap(),
        first
    );
}

#[test]
fn ablate_writes_into_preset_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec!["ablate", "ablation_a", "--out", out];
    args.extend(MOCK);
    let o = difscil(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sub = dir.path().join("ablation_a");
    assert_outputs(&sub, 3);
    let csv = std::fs::read_to_string(sub.join("summary.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("run_ablation_a,2,"));
    assert!(!difscil(&["ablate", "no_such_preset"]).status.success());
}

#[test]
fn learn_prompts_writes_a_store_for_every_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = difscil(&with_out("learn-prompts", out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let store = difscil::PromptStore::load(&dir.path().join("prompts.pe")).unwrap();
    assert_eq!(store.entries.len(), 14);
    assert!(store.entries.values().all(|e| e.frozen));
}
