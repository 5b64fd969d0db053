use metagate_core::learner::{init_model, loss_and_grads};
use metagate_core::oracle::{check_gradient, relative_error, replay_meta_gradient, GRAD_STEP, REPLAY_STEP};
use metagate_core::protocol::{run_episode_recorded, stage_one};
use metagate_core::rng::seeded;
use metagate_core::tasks::make_family;
use metagate_core::{ArchConfig, Batch, FamilyConfig, GateLayout, GateParams, Mode, OptimizerConfig, ProtocolConfig, TokenMatrix};
use rand::Rng;

fn tiny_arch(rng: &mut impl Rng) -> ArchConfig {
    ArchConfig {
        vocab_size: rng.gen_range(4..10),
        embed_dim: rng.gen_range(2..5),
        num_blocks: rng.gen_range(1..4),
        hidden_dim: rng.gen_range(2..5),
        num_classes: rng.gen_range(2..4),
        seq_len: rng.gen_range(1..5),
        dropout_rate: 0.1,
    }
}

fn random_batch(arch: &ArchConfig, n: usize, rng: &mut impl Rng) -> Batch {
    let tokens = (0..n * arch.seq_len).map(|_| rng.gen_range(0..arch.vocab_size as u32)).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..arch.num_classes)).collect();
    Batch::new(TokenMatrix::new(n, arch.seq_len, tokens).unwrap(), labels).unwrap()
}

#[test]
fn learner_gradient_matches_finite_differences() {
    let mut rng = seeded(1);
    let mut worst: f64 = 0.0;
    for case in 0..100u64 {
        let arch = tiny_arch(&mut rng);
        let model = init_model::<f64>(&arch, case, None).unwrap();
        let batch = random_batch(&arch, rng.gen_range(1..6), &mut rng);
        let (_, grads) = loss_and_grads(&model, &batch, Mode::Eval).unwrap();
        let check = check_gradient(&model, &batch, &grads, GRAD_STEP, 1e-4).unwrap();
        worst = worst.max(check.max_rel);
    }
    eprintln!("worst {worst:e}");
    assert!(worst < 1e-6, "max relative error {worst:e}");
}

#[test]
fn meta_gradient_matches_replay() {
    let fcfg = FamilyConfig { num_tasks: 3, vocab_size: 24, latent_vocab: 8, seq_len: 4, train_size: 30, dev_size: 6, test_size: 6, anchor_multiplier: 1, ..Default::default() };
    let family = make_family(&fcfg).unwrap();
    let arch = ArchConfig { vocab_size: 24, embed_dim: 4, num_blocks: 2, hidden_dim: 4, num_classes: 3, seq_len: 4, dropout_rate: 0.1 };
    let mut rng = seeded(2);
    let mut worst: f64 = 0.0;
    for case in 0..100u64 {
        let cfg = ProtocolConfig { inner_steps: rng.gen_range(1..=15), batch_size: 8, optimizer: OptimizerConfig::adam(1e-2), anchor_epochs: 0, seed: case, ..Default::default() };
        let init = stage_one::<f64>(&family, &arch, &cfg, case).unwrap();
        let layout = if case % 4 == 3 { GateLayout::Shared } else { GateLayout::LayerWise };
        let phi = GateParams::new(layout, arch.num_groups(), (0..layout.num_gates(arch.num_groups())).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let (result, record) = run_episode_recorded(&family, &init, &phi, &cfg, &mut seeded(case)).unwrap();
        let numeric = replay_meta_gradient(&record, &phi, REPLAY_STEP).unwrap();
        for (a, n) in result.meta_grad.iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *n, 1e-8));
        }
    }
    eprintln!("worst {worst:e}");
    assert!(worst < 1e-4, "max relative error {worst:e}");
}
