//! Harness-level invariants, shared by the test harness and the acceptance report.

use std::path::{Path, PathBuf};

use metagate::checkpoint::{self, Checkpoint, ModelPayload};
use metagate::report::{self, parse_results, summarize};
use metagate::runner::run_experiment;
use metagate_core::learner::init_model;
use metagate_core::rng::seeded;
use metagate_core::{ArchConfig, GateLayout, GateParams, MetaState};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::Rng;

use super::small_config;

pub type Invariant = (&'static str, fn() -> Result<(), String>);

pub const ALL: &[Invariant] = &[
    ("identical ablate runs write identical bytes", ablate_deterministic),
    ("reports are written inside the output directory", writes_inside_out_dir),
    ("checkpoints round-trip bit-exactly", checkpoint_round_trip),
    ("summaries are recomputable from results", summary_recomputable),
];

const REPORT_FILES: [&str; 3] = ["results.csv", "summary.csv", "gates.jsonl"];

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files_under(&path));
        } else {
            out.push(path);
        }
    }
    out.sort();
    out
}

/// Runs the small experiment into `dir` and returns the written files.
pub fn ablate_into(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut cfg = small_config();
    cfg.out_dir = dir.to_path_buf();
    let cells = run_experiment(&cfg).map_err(err)?;
    report::emit_report(&cfg.out_dir, &cfg, &cells).map_err(err)?;
    REPORT_FILES.iter().map(|f| Ok((f.to_string(), std::fs::read(dir.join(f)).map_err(err)?))).collect()
}

pub fn ablate_deterministic() -> Result<(), String> {
    let tmp = tempfile::tempdir().map_err(err)?;
    let a = ablate_into(&tmp.path().join("a"))?;
    let b = ablate_into(&tmp.path().join("b"))?;
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        if x != y {
            return Err(format!("{name} differs between runs"));
        }
    }
    Ok(())
}

pub fn writes_inside_out_dir() -> Result<(), String> {
    let tmp = tempfile::tempdir().map_err(err)?;
    let out = tmp.path().join("nested").join("out");
    ablate_into(&out)?;
    let files = files_under(tmp.path());
    let expected: Vec<PathBuf> = {
        let mut v: Vec<PathBuf> = REPORT_FILES.iter().map(|f| out.join(f)).collect();
        v.sort();
        v
    };
    if files != expected {
        return Err(format!("unexpected files {files:?}"));
    }
    Ok(())
}

fn tiny_arch(rng: &mut impl Rng) -> ArchConfig {
    ArchConfig {
        vocab_size: rng.gen_range(2..12),
        embed_dim: rng.gen_range(1..6),
        num_blocks: rng.gen_range(1..5),
        hidden_dim: rng.gen_range(1..6),
        num_classes: rng.gen_range(2..5),
        seq_len: rng.gen_range(1..6),
        dropout_rate: rng.gen_range(0.0..0.5),
    }
}

pub fn checkpoint_round_trip() -> Result<(), String> {
    let mut runner = TestRunner::new_with_rng(
        Config { cases: 64, failure_persistence: None, ..Config::default() },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    );
    runner
        .run(&(any::<u64>(), 0u8..4), |(seed, kind)| {
            let mut rng = seeded(seed);
            let arch = tiny_arch(&mut rng);
            let ckpt = match kind {
                0 => Checkpoint::Model(ModelPayload::Single(init_model(&arch, seed, None).unwrap())),
                1 => Checkpoint::Model(ModelPayload::Double(init_model(&arch, seed, None).unwrap())),
                2 => {
                    let layout = if rng.gen_bool(0.5) { GateLayout::Shared } else { GateLayout::LayerWise };
                    let phi = (0..layout.num_gates(arch.num_groups())).map(|_| rng.gen_range(-1e3..1e3)).collect();
                    Checkpoint::Gates(GateParams::new(layout, arch.num_groups(), phi).unwrap())
                }
                _ => {
                    let n = rng.gen_range(1..6);
                    let mut state = MetaState::new(n, rng.gen_range(1e-4..1.0));
                    state.step = rng.gen();
                    state.m = (0..n).map(|_| rng.gen_range(-1.0..1.0) * 1e-7).collect();
                    state.v = (0..n).map(|_| rng.gen::<f64>() / 3.0).collect();
                    Checkpoint::MetaState(state)
                }
            };
            let text = checkpoint::to_text(&ckpt);
            let back = checkpoint::from_text(&text).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(&back, &ckpt);
            prop_assert_eq!(checkpoint::to_text(&back), text);
            Ok(())
        })
        .map_err(err)
}

pub fn summary_recomputable() -> Result<(), String> {
    let tmp = tempfile::tempdir().map_err(err)?;
    let files = ablate_into(tmp.path())?;
    let results = String::from_utf8(files[0].1.clone()).map_err(err)?;
    let summary_text = String::from_utf8(files[1].1.clone()).map_err(err)?;
    let rows = parse_results(&results).map_err(err)?;
    let recomputed = summarize(&rows).map_err(err)?;
    let written: Vec<Vec<String>> = summary_text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    if written.len() != recomputed.len() {
        return Err(format!("{} summary rows, {} recomputed", written.len(), recomputed.len()));
    }
    for (w, r) in written.iter().zip(&recomputed) {
        let num = |i: usize| w[i].parse::<f64>().unwrap_or(f64::NAN);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        if w[0] != r.method || w[1] != r.rows.to_string() || !close(num(2), r.mean_accuracy) || !close(num(3), r.std_accuracy) || !close(num(4), r.mean_inner_loss) {
            return Err(format!("summary row {w:?} disagrees with {r:?}"));
        }
    }
    Ok(())
}
