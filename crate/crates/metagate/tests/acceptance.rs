//! Acceptance report: one PASS/FAIL line per criterion. Exits nonzero if any fails.

mod common;
#[path = "../../core/tests/common/invariants.rs"]
mod invariants;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use metagate::report;
use metagate::runner::{run_experiment, CellResult};
use metagate::selftest::{gate_semantics_suite, gradient_suite, replay_suite};
use metagate::RunConfig;
use metagate_core::Method;

const SEED: u64 = 20240;

struct Line {
    id: u32,
    passed: bool,
    text: String,
    elapsed: Duration,
}

impl Line {
    fn print(&self) {
        println!(
            "{} criterion {}: {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.text,
            self.elapsed.as_secs_f64()
        );
    }
}

fn timed(id: u32, limit: Option<Duration>, f: impl FnOnce() -> Result<(bool, String), String>) -> Line {
    let start = Instant::now();
    let (passed, mut text) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    let elapsed = start.elapsed();
    let in_time = limit.is_none_or(|l| elapsed <= l);
    if let Some(l) = limit {
        text.push_str(&format!(" limit={}s", l.as_secs()));
    }
    let line = Line { id, passed: passed && in_time, text, elapsed };
    line.print();
    line
}

fn acceptance_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/acceptance.conf");
    let mut cfg = RunConfig::default();
    cfg.apply_text(&std::fs::read_to_string(path).expect("acceptance config")).expect("acceptance config parses");
    cfg.validate().expect("acceptance config is valid");
    cfg
}

fn per_seed_means(cells: &[CellResult], method: Method) -> Vec<f64> {
    cells.iter().filter(|c| c.method == method).map(CellResult::mean_accuracy).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn ablate(cfg: &RunConfig, dir: &Path) -> Result<(Vec<CellResult>, Vec<Vec<u8>>), String> {
    let cells = run_experiment(cfg).map_err(|e| format!("{e:#}"))?;
    report::emit_report(dir, cfg, &cells).map_err(|e| format!("{e:#}"))?;
    let bytes = ["results.csv", "summary.csv", "gates.jsonl"]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    Ok((cells, bytes))
}

fn main() -> ExitCode {
    let minutes = |m: u64| Some(Duration::from_secs(60 * m));
    let mut lines = Vec::new();

    lines.push(timed(1, minutes(1), || {
        let s = gradient_suite(100, SEED).map_err(|e| e.to_string())?;
        Ok((s.passed, format!("learner gradient vs central differences, {} models, max rel err {:.2e} < 1e-6", s.cases, s.worst)))
    }));

    lines.push(timed(2, minutes(5), || {
        let s = replay_suite(100, SEED).map_err(|e| e.to_string())?;
        Ok((s.passed, format!("meta-gradient vs replay oracle, {} episodes, max rel err {:.2e} < 1e-4", s.cases, s.worst)))
    }));

    lines.push(timed(3, None, || {
        let s = gate_semantics_suite(10, SEED).map_err(|e| e.to_string())?;
        Ok((s.passed, format!("gate semantics bit-exact, {} checks, {}", s.cases, s.detail)))
    }));

    let cfg = acceptance_config();
    let tmp = tempfile::tempdir().expect("temp dir");
    let start = Instant::now();
    let first = ablate(&cfg, &tmp.path().join("first"));
    let first_elapsed = start.elapsed();

    lines.push(timed(4, minutes(15), || {
        let (cells, _) = first.as_ref().map_err(Clone::clone)?;
        let meta = per_seed_means(cells, Method::Meta);
        let ft = per_seed_means(cells, Method::FullFinetune);
        let wins = meta.iter().zip(&ft).filter(|(m, f)| m > f).count();
        let passed = mean(&meta) >= mean(&ft) && wins >= 6 && first_elapsed <= Duration::from_secs(15 * 60);
        Ok((
            passed,
            format!(
                "transfer trend, meta {:.4} vs full_finetune {:.4}, meta ahead on {wins}/{} seeds (need 6), experiment {:.1}s",
                mean(&meta),
                mean(&ft),
                meta.len(),
                first_elapsed.as_secs_f64()
            ),
        ))
    }));

    lines.push(timed(5, None, || {
        let (cells, _) = first.as_ref().map_err(Clone::clone)?;
        let meta = mean(&per_seed_means(cells, Method::Meta));
        let shared = mean(&per_seed_means(cells, Method::SharedGate));
        let joint = mean(&per_seed_means(cells, Method::JointTrain));
        Ok((meta >= shared && meta >= joint, format!("layer-wise meta {meta:.4} vs shared_gate {shared:.4} and joint_train {joint:.4}")))
    }));

    lines.push(timed(6, None, || {
        let (_, a) = first.as_ref().map_err(Clone::clone)?;
        let (_, b) = ablate(&cfg, &tmp.path().join("second"))?;
        let same = a == &b;
        Ok((same, format!("two ablate runs, results.csv/summary.csv/gates.jsonl {}", if same { "byte-identical" } else { "differ" })))
    }));

    lines.push(timed(7, minutes(10), || {
        let mut failed = Vec::new();
        let all = invariants::ALL.iter().chain(common::harness_invariants::ALL);
        let mut count = 0;
        for (name, check) in all {
            count += 1;
            if let Err(e) = check() {
                failed.push(format!("{name}: {e}"));
            }
        }
        let text = if failed.is_empty() { format!("{count} invariants green") } else { format!("{} of {count} failed: {}", failed.len(), failed.join("; ")) };
        Ok((failed.is_empty(), text))
    }));

    let passed = lines.iter().filter(|l| l.passed).count();
    println!("acceptance: {passed}/{} criteria passed", lines.len());
    if passed == lines.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
