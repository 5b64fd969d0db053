//! Experiment orchestration: one cell per (method, seed), cells run in
//! parallel and are collected in configuration order.

use std::time::Instant;

use anyhow::{Context, Result};
use metagate_core::protocol::{run_method, stage_one, zero_shot_eval, MethodRun};
use metagate_core::rng::derive_seed;
use metagate_core::tasks::make_family;
use metagate_core::{FamilyConfig, Method, Model, Precision, Real, TaskFamily};
use rayon::prelude::*;

use crate::config::RunConfig;

/// Family configuration used for run seed `seed`.
pub fn family_config(cfg: &RunConfig, seed: u64) -> FamilyConfig {
    FamilyConfig { seed: derive_seed(cfg.family.seed, seed), ..cfg.family }
}

/// The full family for `seed` and its source-only subset.
pub fn build_family(cfg: &RunConfig, seed: u64) -> Result<(TaskFamily, TaskFamily)> {
    let family = make_family(&family_config(cfg, seed))?;
    let sources = family.subset(&cfg.sources)?;
    Ok((family, sources))
}

/// One point of a gate trajectory.
#[derive(Debug, Clone, PartialEq)]
pub enum GatePoint {
    Episode { index: usize, held_out: usize, test_loss: f64, lambda: Vec<f64> },
    Step { index: usize, lambda: Vec<f64> },
    Final { lambda: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub method: Method,
    pub seed: u64,
    /// Zero-shot accuracy per target task, in configuration order.
    pub accuracy: Vec<(usize, f64)>,
    pub mean_inner_loss: f64,
    pub wallclock_s: Option<f64>,
    pub gates: Vec<GatePoint>,
}

impl CellResult {
    pub fn mean_accuracy(&self) -> f64 {
        self.accuracy.iter().map(|(_, a)| a).sum::<f64>() / self.accuracy.len() as f64
    }
}

fn trajectory<T>(run: &MethodRun<T>) -> Vec<GatePoint> {
    let mut points: Vec<GatePoint> = run
        .history
        .iter()
        .map(|e| GatePoint::Episode { index: e.episode, held_out: e.held_out, test_loss: e.test_loss, lambda: e.gates.clone() })
        .collect();
    points.extend(run.gate_trace.iter().enumerate().map(|(i, l)| GatePoint::Step { index: i, lambda: l.clone() }));
    points.push(GatePoint::Final { lambda: run.final_gates.clone() });
    points
}

fn run_seed<T: Real>(cfg: &RunConfig, seed: u64) -> Result<Vec<CellResult>> {
    let (family, sources) = build_family(cfg, seed)?;
    let start = Instant::now();
    let stage1: Model<T> = stage_one(&sources, &cfg.arch, &cfg.protocol, seed).context("stage 1")?;
    let stage1_secs = start.elapsed().as_secs_f64();
    cfg.methods
        .par_iter()
        .map(|&method| {
            let start = Instant::now();
            let run = run_method(&sources, &stage1, method, &cfg.protocol, seed)
                .with_context(|| format!("method {} seed {seed}", method.name()))?;
            let accuracy = cfg
                .targets
                .iter()
                .map(|&t| {
                    let target = family.task(t).expect("targets are validated");
                    Ok((t, zero_shot_eval(&run.tuned, target)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let secs = stage1_secs + start.elapsed().as_secs_f64();
            Ok(CellResult {
                method,
                seed,
                accuracy,
                mean_inner_loss: run.mean_inner_loss,
                wallclock_s: cfg.record_wallclock.then_some(secs),
                gates: trajectory(&run),
            })
        })
        .collect()
}

/// Runs every configured (method, seed) cell. Results are ordered by seed,
/// then by method, independent of scheduling.
pub fn run_experiment(cfg: &RunConfig) -> Result<Vec<CellResult>> {
    cfg.validate()?;
    let per_seed: Vec<Vec<CellResult>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| match cfg.precision {
            Precision::Single => run_seed::<f32>(cfg, seed),
            Precision::Double => run_seed::<f64>(cfg, seed),
        })
        .collect::<Result<_>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}
