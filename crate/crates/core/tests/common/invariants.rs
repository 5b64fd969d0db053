//! Invariant catalogue. Each entry is a plain function so that both the test
//! harness and the acceptance report can run it.

use metagate_core::learner::{evaluate, init_model, loss_and_grads};
use metagate_core::meta::{gate_values, gated_step, UpdateAccumulator};
use metagate_core::numerics::{affine_tanh, affine_tanh_backward, softmax_cross_entropy, softmax_rows};
use metagate_core::optim::apply_delta;
use metagate_core::oracle::{relative_error, GRAD_STEP};
use metagate_core::protocol::{meta_train, run_episode, stage_one};
use metagate_core::rng::seeded;
use metagate_core::tasks::{epoch_batches, leave_one_out, make_family};
use metagate_core::{
    ArchConfig, BaseOptimizer, Batch, FamilyConfig, GateLayout, GateParams, GateValues, Mode, OptimizerConfig,
    ProtocolConfig, Tensor, TokenMatrix,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::Rng;

/// Finite-difference checks use the learner oracle's step and tolerance.
const FD_FLOOR: f64 = 1e-4;
const FD_TOLERANCE: f64 = 1e-6;

pub type Invariant = (&'static str, fn() -> Result<(), String>);

pub const ALL: &[Invariant] = &[
    ("affine_tanh matches finite differences", affine_tanh_gradient),
    ("softmax rows sum to one and cross-entropy is non-negative", softmax_properties),
    ("cross-entropy gradient matches finite differences", cross_entropy_gradient),
    ("kernels are deterministic", kernel_determinism),
    ("training never moves the embedding", embedding_constant),
    ("evaluation ignores example order", evaluate_permutation),
    ("first Adam step is bounded by the learning rate", adam_first_step),
    ("deltas follow the gradient sign", delta_sign),
    ("identical optimizers stay identical", optimizer_lockstep),
    ("optimizer step counts every call", optimizer_step_count),
    ("gates lie in (0, 1) and grow with phi", gate_range),
    ("unit gates equal the plain step", unit_gate_step),
    ("zero gates leave their group untouched", zero_gate_step),
    ("accumulation order changes sums by under 1e-6", accumulation_order),
    ("tasks share latent content", shared_latents),
    ("labels are balanced", balanced_labels),
    ("splits are disjoint", disjoint_splits),
    ("leave-one-out partitions the family", leave_one_out_partition),
    ("held-out tasks are drawn uniformly", held_out_uniform),
    ("epoch batches cover every example once", epoch_cover),
    ("meta-training only sees source tasks", sources_only),
    ("meta-training is reproducible", meta_reproducible),
];

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config { cases, failure_persistence: None, ..Config::default() },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    )
}

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), TestCaseError> {
    if cond {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg()))
    }
}

fn fail(e: impl std::fmt::Display) -> TestCaseError {
    TestCaseError::fail(e.to_string())
}

fn tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
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

fn random_batch(arch: &ArchConfig, n: usize, rng: &mut impl Rng) -> Batch {
    let tokens = (0..n * arch.seq_len).map(|_| rng.gen_range(0..arch.vocab_size as u32)).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..arch.num_classes)).collect();
    Batch::new(TokenMatrix::new(n, arch.seq_len, tokens).unwrap(), labels).unwrap()
}

fn small_family(seed: u64) -> metagate_core::TaskFamily {
    make_family(&FamilyConfig {
        num_tasks: 4,
        vocab_size: 40,
        latent_vocab: 10,
        seq_len: 5,
        train_size: 30,
        dev_size: 9,
        test_size: 30,
        anchor_multiplier: 2,
        seed,
        ..FamilyConfig::default()
    })
    .unwrap()
}

fn small_arch() -> ArchConfig {
    ArchConfig { vocab_size: 40, embed_dim: 4, num_blocks: 2, hidden_dim: 4, num_classes: 3, seq_len: 5, dropout_rate: 0.1 }
}

fn small_cfg(seed: u64) -> ProtocolConfig {
    ProtocolConfig { optimizer: OptimizerConfig::adam(1e-2), batch_size: 8, inner_steps: 4, meta_epochs: 3, seed, ..ProtocolConfig::default() }
}

pub fn affine_tanh_gradient() -> Result<(), String> {
    run(100, (any::<u64>(), 1usize..5, 1usize..5, 1usize..5), |(seed, n, d, h)| {
        let mut rng = seeded(seed);
        let (x, w, b) = (tensor(&mut rng, &[n, d], 1.0), tensor(&mut rng, &[d, h], 1.0), tensor(&mut rng, &[h], 1.0));
        let r = tensor(&mut rng, &[n, h], 1.0);
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| affine_tanh(x, w, b).unwrap().dot(&r);
        let out = affine_tanh(&x, &w, &b).map_err(fail)?;
        let g = affine_tanh_backward(&x, &w, &out, &r).map_err(fail)?;
        let eps = GRAD_STEP;
        for (which, analytic) in [(0, &g.input), (1, &g.weight), (2, &g.bias)] {
            for i in 0..analytic.len() {
                let (mut xp, mut wp, mut bp) = (x.clone(), w.clone(), b.clone());
                let (mut xm, mut wm, mut bm) = (x.clone(), w.clone(), b.clone());
                let (p, m) = match which {
                    0 => (&mut xp.data_mut()[i], &mut xm.data_mut()[i]),
                    1 => (&mut wp.data_mut()[i], &mut wm.data_mut()[i]),
                    _ => (&mut bp.data_mut()[i], &mut bm.data_mut()[i]),
                };
                *p += eps;
                *m -= eps;
                let numeric = (loss(&xp, &wp, &bp) - loss(&xm, &wm, &bm)) / (2.0 * eps);
                let a = analytic.data()[i];
                let rel = relative_error(a, numeric, FD_FLOOR);
                check(rel < FD_TOLERANCE, || format!("operand {which}[{i}]: {a} vs {numeric}"))?;
            }
        }
        Ok(())
    })
}

pub fn softmax_properties() -> Result<(), String> {
    run(128, (any::<u64>(), 1usize..6, 2usize..6, 0.1f64..50.0), |(seed, n, c, scale)| {
        let mut rng = seeded(seed);
        let logits = tensor(&mut rng, &[n, c], scale);
        let p = softmax_rows(&logits).map_err(fail)?;
        for i in 0..n {
            let s: f64 = p.row(i).iter().sum();
            check((s - 1.0).abs() < 1e-12, || format!("row {i} sums to {s}"))?;
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let (loss, _) = softmax_cross_entropy(&logits, &labels).map_err(fail)?;
        check(loss >= 0.0, || format!("negative loss {loss}"))
    })
}

pub fn cross_entropy_gradient() -> Result<(), String> {
    run(100, (any::<u64>(), 1usize..6, 2usize..6), |(seed, n, c)| {
        let mut rng = seeded(seed);
        let logits = tensor(&mut rng, &[n, c], 3.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let (_, grad) = softmax_cross_entropy(&logits, &labels).map_err(fail)?;
        let eps = GRAD_STEP;
        for i in 0..logits.len() {
            let (mut up, mut down) = (logits.clone(), logits.clone());
            up.data_mut()[i] += eps;
            down.data_mut()[i] -= eps;
            let numeric = (softmax_cross_entropy(&up, &labels).unwrap().0 - softmax_cross_entropy(&down, &labels).unwrap().0) / (2.0 * eps);
            let a = grad.data()[i];
            let rel = relative_error(a, numeric, FD_FLOOR);
            check(rel < FD_TOLERANCE, || format!("logit {i}: {a} vs {numeric}"))?;
        }
        Ok(())
    })
}

pub fn kernel_determinism() -> Result<(), String> {
    run(32, any::<u64>(), |seed| {
        let mut rng = seeded(seed);
        let arch = tiny_arch(&mut rng);
        let model = init_model::<f32>(&arch, seed, None).map_err(fail)?;
        let batch = random_batch(&arch, 5, &mut rng);
        let a = loss_and_grads(&model, &batch, Mode::Train(&mut seeded(seed))).map_err(fail)?;
        let b = loss_and_grads(&model, &batch, Mode::Train(&mut seeded(seed))).map_err(fail)?;
        check(a.0.to_bits() == b.0.to_bits() && a.1 == b.1, || "repeated pass differs".into())
    })
}

pub fn embedding_constant() -> Result<(), String> {
    run(16, any::<u64>(), |seed| {
        let mut rng = seeded(seed);
        let arch = tiny_arch(&mut rng);
        let mut model = init_model::<f64>(&arch, seed, None).map_err(fail)?;
        let before = model.embedding().clone();
        let mut opt = BaseOptimizer::new(OptimizerConfig::adam(0.1), model.params()).map_err(fail)?;
        for _ in 0..5 {
            let batch = random_batch(&arch, 4, &mut rng);
            let (_, grads) = loss_and_grads(&model, &batch, Mode::Train(&mut rng)).map_err(fail)?;
            let delta = opt.delta(&grads).map_err(fail)?;
            apply_delta(model.params_mut(), &delta).map_err(fail)?;
        }
        check(model.embedding() == &before, || "embedding changed".into())
    })
}

pub fn evaluate_permutation() -> Result<(), String> {
    run(32, any::<u64>(), |seed| {
        let mut rng = seeded(seed);
        let arch = tiny_arch(&mut rng);
        let model = init_model::<f32>(&arch, seed, None).map_err(fail)?;
        let batch = random_batch(&arch, 12, &mut rng);
        let mut order: Vec<usize> = (0..12).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let a = evaluate(&model, &batch).map_err(fail)?;
        let b = evaluate(&model, &batch.select(&order)).map_err(fail)?;
        check(a == b, || format!("{a} vs {b}"))
    })
}

fn random_grads(arch: &ArchConfig, rng: &mut impl Rng) -> metagate_core::ParamSet<f64> {
    let mut g = metagate_core::ParamSet::<f64>::zeros_for(arch);
    for v in g.values_mut() {
        *v = rng.gen_range(-10.0..10.0);
    }
    g
}

pub fn adam_first_step() -> Result<(), String> {
    run(64, (any::<u64>(), 1e-4f64..1.0), |(seed, lr)| {
        let mut rng = seeded(seed);
        let arch = tiny_arch(&mut rng);
        let grads = random_grads(&arch, &mut rng);
        let mut opt = BaseOptimizer::new(OptimizerConfig::adam(lr), &grads).map_err(fail)?;
        let delta = opt.delta(&grads).map_err(fail)?;
        let ok = delta.values().all(|d| d.abs() < lr * (1.0 + 1e-12));
        check(ok, || "first Adam step exceeds the learning rate".into())
    })
}

pub fn delta_sign() -> Result<(), String> {
    run(64, (any::<u64>(), prop::bool::ANY), |(seed, adam)| {
        let mut rng = seeded(seed);
        let arch = tiny_arch(&mut rng);
        let grads = random_grads(&arch, &mut rng);
        let cfg = if adam { OptimizerConfig::adam(1e-3) } else { OptimizerConfig::sgd(1e-3) };
        let mut opt = BaseOptimizer::new(cfg, &grads).map_err(fail)?;
        let delta = opt.delta(&grads).map_err(fail)?;
        let ok = delta.values().zip(grads.values()).all(|(d, g)| d * g >= 0.0);
        check(ok, || "delta opposes gradient".into())
    })
}

pub fn optimizer_lockstep() -> Result<(), String> {
    run(32, any::<u64>(), |seed| {
        let mut rng = seeded(seed);
        let arch = tiny_arch(&mut rng);
        let template = metagate_core::ParamSet::<f32>::zeros_for(&arch);
        let mut a = BaseOptimizer::new(OptimizerConfig::adam(1e-2), &template).map_err(fail)?;
        let mut b = a.clone();
        for _ in 0..4 {
            let g = random_grads(&arch, &mut rng);
            let mut g32 = template.clone();
            for (t, v) in g32.values_mut().zip(g.values()) {
                *t = *v as f32;
            }
            let (da, db) = (a.delta(&g32).map_err(fail)?, b.delta(&g32).map_err(fail)?);
            check(da == db && a.state() == b.state(), || "optimizers diverged".into())?;
        }
        Ok(())
    })
}

pub fn optimizer_step_count() -> Result<(), String> {
    run(32, (any::<u64>(), 1usize..8), |(seed, steps)| {
        let mut rng = seeded(seed);
        let arch = tiny_arch(&mut rng);
        let g = random_grads(&arch, &mut rng);
        let mut opt = BaseOptimizer::new(OptimizerConfig::sgd(1e-2), &g).map_err(fail)?;
        for s in 0..steps {
            opt.delta(&g).map_err(fail)?;
            check(opt.state().step() == s as u64 + 1, || format!("step {} after {} calls", opt.state().step(), s + 1))?;
        }
        Ok(())
    })
}

pub fn gate_range() -> Result<(), String> {
    run(256, (-30.0f64..30.0, 1e-3f64..5.0), |(phi, dphi)| {
        let g = |p: f64| gate_values(&GateParams::new(GateLayout::Shared, 1, vec![p]).unwrap()).values()[0];
        let (lo, hi) = (g(phi), g(phi + dphi));
        check(lo > 0.0 && lo < 1.0 && hi < 1.0, || format!("gate {lo} outside (0, 1)"))?;
        check(hi > lo, || format!("gate not increasing at {phi}"))
    })
}

pub fn unit_gate_step() -> Result<(), String> {
    run(32, any::<u64>(), |seed| {
        let mut rng = seeded(seed);
        let arch = tiny_arch(&mut rng);
        let params = random_grads(&arch, &mut rng);
        let delta = random_grads(&arch, &mut rng);
        let (mut a, mut b) = (params.clone(), params);
        apply_delta(&mut a, &delta).map_err(fail)?;
        gated_step(&mut b, &delta, &GateValues::uniform(arch.num_groups(), 1.0).map_err(fail)?).map_err(fail)?;
        let ok = a.values().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits());
        check(ok, || "unit gates differ from the plain step".into())
    })
}

pub fn zero_gate_step() -> Result<(), String> {
    run(32, any::<u64>(), |seed| {
        let mut rng = seeded(seed);
        let arch = tiny_arch(&mut rng);
        let params = random_grads(&arch, &mut rng);
        let delta = random_grads(&arch, &mut rng);
        let lambda: Vec<f64> = (0..arch.num_groups()).map(|_| if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.01..1.0) }).collect();
        let mut after = params.clone();
        gated_step(&mut after, &delta, &GateValues::per_group(lambda.clone()).map_err(fail)?).map_err(fail)?;
        for (g, &l) in lambda.iter().enumerate() {
            if l == 0.0 {
                check(after.group(g) == params.group(g), || format!("group {g} moved under a zero gate"))?;
            }
        }
        Ok(())
    })
}

pub fn accumulation_order() -> Result<(), String> {
    run(32, (any::<u64>(), 2usize..16), |(seed, steps)| {
        let mut rng = seeded(seed);
        let arch = tiny_arch(&mut rng);
        let deltas: Vec<_> = (0..steps).map(|_| random_grads(&arch, &mut rng)).collect();
        let template = &deltas[0];
        let (mut fwd, mut rev) = (UpdateAccumulator::zeros_like(template), UpdateAccumulator::zeros_like(template));
        for d in &deltas {
            fwd.accumulate(d).map_err(fail)?;
        }
        for d in deltas.iter().rev() {
            rev.accumulate(d).map_err(fail)?;
        }
        let ok = fwd.sum().values().zip(rev.sum().values()).all(|(a, b)| (a - b).abs() < 1e-6);
        check(ok, || "order-dependent sum".into())
    })
}

pub fn shared_latents() -> Result<(), String> {
    run(8, (any::<u64>(), 0.0f64..=1.0), |(seed, difficulty)| {
        let family = make_family(&FamilyConfig { difficulty, seed, ..FamilyConfig::default() }).map_err(fail)?;
        let base = &family.tasks()[1];
        for t in &family.tasks()[2..] {
            check(t.test.labels == base.test.labels, || format!("task {} test labels differ", t.id))?;
            for i in 0..t.test.len() {
                let a = base.transform.decode(base.test.inputs.row(i));
                let b = t.transform.decode(t.test.inputs.row(i));
                check(a.is_some() && a == b, || format!("task {} test row {i} has other latent content", t.id))?;
            }
        }
        Ok(())
    })
}

pub fn balanced_labels() -> Result<(), String> {
    run(16, any::<u64>(), |seed| {
        let family = small_family(seed);
        let classes = family.config().num_classes;
        for t in family.tasks() {
            for data in [&t.train, &t.dev, &t.test] {
                let mut counts = vec![0usize; classes];
                for &l in &data.labels {
                    counts[l] += 1;
                }
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                check(hi - lo <= 1, || format!("task {} counts {counts:?}", t.id))?;
            }
        }
        Ok(())
    })
}

pub fn disjoint_splits() -> Result<(), String> {
    run(16, any::<u64>(), |seed| {
        let family = small_family(seed);
        for t in family.tasks() {
            let rows = |b: &Batch| (0..b.len()).map(|i| b.inputs.row(i).to_vec()).collect::<std::collections::HashSet<_>>();
            let (tr, dv, te) = (rows(&t.train), rows(&t.dev), rows(&t.test));
            check(tr.is_disjoint(&dv) && tr.is_disjoint(&te) && dv.is_disjoint(&te), || format!("task {} splits overlap", t.id))?;
        }
        Ok(())
    })
}

pub fn leave_one_out_partition() -> Result<(), String> {
    run(16, (any::<u64>(), 0usize..4), |(seed, k)| {
        let family = small_family(seed);
        let (train, test) = leave_one_out(&family, k).map_err(fail)?;
        let mut ids: Vec<usize> = train.iter().map(|t| t.id).collect();
        check(!ids.contains(&test.id) && test.id == k, || "held-out task among training tasks".into())?;
        ids.push(test.id);
        ids.sort_unstable();
        check(ids == family.task_ids(), || format!("partition {ids:?}"))
    })
}

pub fn held_out_uniform() -> Result<(), String> {
    let family = small_family(5);
    let arch = small_arch();
    let cfg = ProtocolConfig { inner_steps: 0, ..small_cfg(5) };
    let init = stage_one::<f32>(&family, &arch, &cfg, 5).map_err(|e| e.to_string())?;
    let phi = GateParams::constant(GateLayout::LayerWise, arch.num_groups(), 0.0).map_err(|e| e.to_string())?;
    let mut rng = seeded(99);
    let mut counts = [0usize; 4];
    let draws = 10_000;
    for _ in 0..draws {
        counts[run_episode(&family, &init, &phi, &cfg, &mut rng).map_err(|e| e.to_string())?.held_out] += 1;
    }
    let expect = draws as f64 / 4.0;
    match counts.iter().find(|&&c| (c as f64 - expect).abs() > 0.05 * expect) {
        Some(_) => Err(format!("held-out counts {counts:?}")),
        None => Ok(()),
    }
}

pub fn epoch_cover() -> Result<(), String> {
    run(64, (any::<u64>(), 1usize..200, 1usize..40), |(seed, len, batch)| {
        let batches = epoch_batches(len, batch, &mut seeded(seed)).map_err(fail)?;
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        check(batches.iter().all(|b| b.len() <= batch && !b.is_empty()), || "oversized batch".into())?;
        all.sort_unstable();
        check(all == (0..len).collect::<Vec<_>>(), || "batches do not cover the split exactly once".into())
    })
}

pub fn sources_only() -> Result<(), String> {
    run(4, any::<u64>(), |seed| {
        let family = small_family(seed);
        let sources = family.subset(&[0, 2]).map_err(fail)?;
        let cfg = ProtocolConfig { meta_epochs: 20, ..small_cfg(seed) };
        let init = stage_one::<f32>(&sources, &small_arch(), &cfg, seed).map_err(fail)?;
        let out = meta_train(&sources, &init, &cfg).map_err(fail)?;
        check(out.history.iter().all(|e| e.held_out == 0 || e.held_out == 2), || "episode held out a non-source task".into())
    })
}

pub fn meta_reproducible() -> Result<(), String> {
    run(4, any::<u64>(), |seed| {
        let family = small_family(seed);
        let cfg = small_cfg(seed);
        let init = stage_one::<f32>(&family, &small_arch(), &cfg, seed).map_err(fail)?;
        let a = meta_train(&family, &init, &cfg).map_err(fail)?;
        let b = meta_train(&family, &init, &cfg).map_err(fail)?;
        check(a == b, || "meta-training differs between identical runs".into())
    })
}
