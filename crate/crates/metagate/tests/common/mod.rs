#![allow(dead_code)]

pub mod harness_invariants;

use metagate::RunConfig;

/// A run small enough for unit-scale tests.
pub const SMALL_RUN: &str = "\
family.num_tasks = 5
family.vocab_size = 60
family.latent_vocab = 10
family.seq_len = 5
family.train_size = 30
family.dev_size = 9
family.test_size = 30
family.anchor_multiplier = 2
arch.embed_dim = 4
arch.num_blocks = 2
arch.hidden_dim = 4
protocol.meta_epochs = 3
protocol.inner_steps = 3
protocol.batch_size = 8
protocol.learning_rate = 0.01
sources = 0,1,2
targets = 3,4
methods = meta,full_finetune,shared_gate,joint_train,freeze_bottom_1
seeds = 0..2
";

pub fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(SMALL_RUN).unwrap();
    cfg.validate().unwrap();
    cfg
}
