mod common;

use std::path::Path;
use std::process::{Command, Output};

fn metagate(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metagate")).args(args).current_dir(cwd).output().unwrap()
}

#[test]
fn unknown_subcommand_exits_with_usage_status() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(metagate(&["frobnicate"], dir.path()).status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_with_config_status() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.conf"), "protocol.bogus = 1\n").unwrap();
    let out = metagate(&["ablate", "--config", "bad.conf"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("protocol.bogus"));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = metagate(&["selftest"], dir.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 4);
}

#[test]
fn pipeline_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("run.conf"), common::SMALL_RUN).unwrap();
    let ok = |args: &[&str]| {
        let out = metagate(args, p);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    ok(&["gen-tasks", "--config", "run.conf", "--seed", "1", "--out", "fam"]);
    ok(&["meta-train", "--config", "run.conf", "--seed", "1", "--family", "fam/family-seed1.txt", "--out", "meta"]);
    ok(&["finetune", "--config", "run.conf", "--seed", "1", "--family", "fam/family-seed1.txt", "--gates", "meta/phi.ckpt", "--out", "ft"]);
    ok(&["eval", "--config", "run.conf", "--seed", "1", "--family", "fam/family-seed1.txt", "--model", "ft/model.ckpt", "--out", "ev"]);
    let episodes = std::fs::read_to_string(p.join("meta/episodes.jsonl")).unwrap();
    assert_eq!(episodes.lines().count(), 3);
    let eval = std::fs::read_to_string(p.join("ev/eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 3);
    assert!(eval.starts_with("target_task,accuracy\n3,"));
}

#[test]
fn report_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("run.conf"), common::SMALL_RUN).unwrap();
    let out = metagate(&["ablate", "--config", "run.conf", "--out", "runs", "--method", "meta"], p);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first = std::fs::read(p.join("runs/summary.csv")).unwrap();
    assert!(metagate(&["report", "--config", "run.conf", "--out", "runs"], p).status.success());
    let second = std::fs::read(p.join("runs/summary.csv")).unwrap();
    assert!(metagate(&["report", "--config", "run.conf", "--out", "runs"], p).status.success());
    assert_eq!(first, second);
    assert_eq!(second, std::fs::read(p.join("runs/summary.csv")).unwrap());
}
