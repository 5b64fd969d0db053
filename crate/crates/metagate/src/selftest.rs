//! Oracle suites shared by the `selftest` command and the acceptance tests.

use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use metagate_core::learner::{init_model, loss_and_grads};
use metagate_core::meta::GateValues;
use metagate_core::oracle::{check_gradient, relative_error, replay_meta_gradient, GRAD_STEP, REPLAY_STEP};
use metagate_core::protocol::{auxiliary_stage, finetune, run_episode, run_episode_recorded, stage_one, StepRule};
use metagate_core::rng::{derive_seed, seeded};
use metagate_core::tasks::make_family;
use metagate_core::{
    ArchConfig, Batch, FamilyConfig, GateLayout, GateParams, Mode, Model, OptimizerConfig, ProtocolConfig, TokenMatrix,
};
use rand::Rng;

/// Relative errors are measured against `max(|analytic|, |numeric|, floor)`;
/// the floor keeps components at finite-difference noise level from dominating.
pub const GRAD_FLOOR: f64 = 1e-4;
pub const GRAD_TOLERANCE: f64 = 1e-6;
pub const REPLAY_FLOOR: f64 = 1e-8;
pub const REPLAY_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    pub worst: f64,
    pub detail: String,
    pub elapsed: Duration,
}

impl SuiteOutcome {
    pub fn line(&self) -> String {
        format!(
            "{} {:<16} cases={:<4} worst={:.3e} {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

fn tiny_arch(rng: &mut impl Rng) -> ArchConfig {
    ArchConfig {
        vocab_size: rng.gen_range(4..10),
        embed_dim: rng.gen_range(2..6),
        num_blocks: rng.gen_range(1..4),
        hidden_dim: rng.gen_range(2..6),
        num_classes: rng.gen_range(2..5),
        seq_len: rng.gen_range(1..5),
        dropout_rate: 0.1,
    }
}

fn random_batch(arch: &ArchConfig, n: usize, rng: &mut impl Rng) -> Result<Batch> {
    let tokens = (0..n * arch.seq_len).map(|_| rng.gen_range(0..arch.vocab_size as u32)).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..arch.num_classes)).collect();
    Ok(Batch::new(TokenMatrix::new(n, arch.seq_len, tokens)?, labels)?)
}

/// Analytic learner gradients against central differences on random tiny models.
pub fn gradient_suite(cases: usize, seed: u64) -> Result<SuiteOutcome> {
    let start = Instant::now();
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    let mut params = 0;
    for case in 0..cases {
        let arch = tiny_arch(&mut rng);
        let model = init_model::<f64>(&arch, derive_seed(seed, case as u64), None)?;
        let batch = random_batch(&arch, rng.gen_range(1..8), &mut rng)?;
        let (_, grads) = loss_and_grads(&model, &batch, Mode::Eval)?;
        let check = check_gradient(&model, &batch, &grads, GRAD_STEP, GRAD_FLOOR)?;
        worst = worst.max(check.max_rel);
        params += check.checked;
    }
    Ok(SuiteOutcome {
        name: "learner-gradient",
        passed: worst < GRAD_TOLERANCE,
        cases,
        worst,
        detail: format!("params={params} tol={GRAD_TOLERANCE:e}"),
        elapsed: start.elapsed(),
    })
}

/// A small source family and architecture used by the protocol-level suites.
pub fn small_setup(seed: u64) -> Result<(metagate_core::TaskFamily, ArchConfig)> {
    let fcfg = FamilyConfig {
        num_tasks: 3,
        vocab_size: 24,
        latent_vocab: 8,
        seq_len: 4,
        train_size: 30,
        dev_size: 6,
        test_size: 12,
        anchor_multiplier: 2,
        seed,
        ..FamilyConfig::default()
    };
    let arch = ArchConfig { vocab_size: 24, embed_dim: 4, num_blocks: 2, hidden_dim: 4, num_classes: 3, seq_len: 4, dropout_rate: 0.1 };
    Ok((make_family(&fcfg)?, arch))
}

/// Analytic meta-gradients against central differences of the replay oracle
/// over random episodes with random gates and inner-loop lengths.
pub fn replay_suite(cases: usize, seed: u64) -> Result<SuiteOutcome> {
    let start = Instant::now();
    let mut rng = seeded(seed);
    let (family, arch) = small_setup(seed)?;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let case_seed = derive_seed(seed, case as u64);
        let cfg = ProtocolConfig {
            inner_steps: rng.gen_range(1..=15),
            batch_size: rng.gen_range(4..=12),
            optimizer: OptimizerConfig::adam(rng.gen_range(1e-3..3e-2)),
            seed: case_seed,
            ..ProtocolConfig::default()
        };
        let init = stage_one::<f64>(&family, &arch, &cfg, case_seed)?;
        let layout = if rng.gen_bool(0.25) { GateLayout::Shared } else { GateLayout::LayerWise };
        let phi: Vec<f64> = (0..layout.num_gates(arch.num_groups())).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let phi = GateParams::new(layout, arch.num_groups(), phi)?;
        let (result, record) = run_episode_recorded(&family, &init, &phi, &cfg, &mut seeded(case_seed))?;
        let numeric = replay_meta_gradient(&record, &phi, REPLAY_STEP)?;
        for (a, n) in result.meta_grad.iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *n, REPLAY_FLOOR));
        }
    }
    Ok(SuiteOutcome {
        name: "meta-replay",
        passed: worst < REPLAY_TOLERANCE,
        cases,
        worst,
        detail: format!("tol={REPLAY_TOLERANCE:e}"),
        elapsed: start.elapsed(),
    })
}

fn bits(model: &Model<f64>) -> Vec<u64> {
    model.params().values().map(|v| v.to_bits()).collect()
}

/// Exact gate semantics: all-ones gates reproduce the ungated pipeline and
/// zero gates leave their groups untouched through stage 2.
pub fn gate_semantics_suite(seeds: usize, seed: u64) -> Result<SuiteOutcome> {
    let start = Instant::now();
    let mut mismatches = 0usize;
    let mut checks = 0usize;
    for s in 0..seeds as u64 {
        let run_seed = derive_seed(seed, s);
        let (family, arch) = small_setup(run_seed)?;
        let cfg = ProtocolConfig { optimizer: OptimizerConfig::adam(1e-2), batch_size: 8, ..ProtocolConfig::default() };
        let groups = arch.num_groups();

        let plain = finetune::<f64>(&family, &arch, None, &cfg, run_seed)?;
        let ones = finetune::<f64>(&family, &arch, Some(&GateValues::uniform(groups, 1.0)?), &cfg, run_seed)?;
        checks += 1;
        mismatches += usize::from(bits(&plain.model) != bits(&ones.model) || plain.model.embedding() != ones.model.embedding());

        let stage1 = stage_one::<f64>(&family, &arch, &cfg, run_seed)?;
        let mut rng = seeded(run_seed);
        let lambda: Vec<f64> = (0..groups).map(|g| if g % 2 == 0 { 0.0 } else { rng.gen_range(0.05..1.0) }).collect();
        let out = auxiliary_stage(&family, &stage1, StepRule::Gated(GateValues::per_group(lambda.clone())?), &cfg, run_seed)?;
        for (g, &l) in lambda.iter().enumerate() {
            let before = stage1.params().group(g);
            let after = out.model.params().group(g);
            if l == 0.0 {
                checks += 1;
                let same = before.weight.data().iter().zip(after.weight.data()).all(|(a, b)| a.to_bits() == b.to_bits())
                    && before.bias.data().iter().zip(after.bias.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                mismatches += usize::from(!same);
            }
        }
        checks += 1;
        mismatches += usize::from(out.model.embedding() != stage1.embedding());
    }
    Ok(SuiteOutcome {
        name: "gate-semantics",
        passed: mismatches == 0,
        cases: checks,
        worst: mismatches as f64,
        detail: format!("mismatches={mismatches}"),
        elapsed: start.elapsed(),
    })
}

/// Identical seeds give bit-identical episodes.
pub fn determinism_suite(cases: usize, seed: u64) -> Result<SuiteOutcome> {
    let start = Instant::now();
    let (family, arch) = small_setup(seed)?;
    let mut differing = 0usize;
    for case in 0..cases as u64 {
        let cfg = ProtocolConfig { optimizer: OptimizerConfig::adam(1e-2), batch_size: 8, seed: case, ..ProtocolConfig::default() };
        let init = stage_one::<f32>(&family, &arch, &cfg, case)?;
        let phi = GateParams::random(GateLayout::LayerWise, arch.num_groups(), &mut seeded(case))?;
        let a = run_episode(&family, &init, &phi, &cfg, &mut seeded(case))?;
        let b = run_episode(&family, &init, &phi, &cfg, &mut seeded(case))?;
        differing += usize::from(a != b);
    }
    ensure!(cases > 0, "determinism suite needs at least one case");
    Ok(SuiteOutcome {
        name: "determinism",
        passed: differing == 0,
        cases,
        worst: differing as f64,
        detail: format!("differing={differing}"),
        elapsed: start.elapsed(),
    })
}

/// Every suite at the size used by the `selftest` command.
pub fn run_all(seed: u64) -> Result<Vec<SuiteOutcome>> {
    Ok(vec![
        gradient_suite(25, seed)?,
        replay_suite(25, seed)?,
        gate_semantics_suite(3, seed)?,
        determinism_suite(5, seed)?,
    ])
}
