//! Training procedures: episodic leave-one-out meta-training of the gates,
//! two-stage fine-tuning (anchor task first, then the auxiliary sources under
//! a chosen update rule), zero-shot evaluation, and the baselines and
//! ablations compared against the learned gates.
//!
//! Everything here receives a family that contains only *source* tasks; the
//! zero-shot targets are kept out by the caller.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::learner::{self, init_model, loss_and_grads, loss_and_grads_chunked, ArchConfig, Batch, Mode, Model};
use crate::meta::{gate_values, gated_step, meta_gradient, meta_update, GateLayout, GateParams, GateValues, MetaState, UpdateAccumulator};
use crate::numerics::Real;
use crate::optim::{apply_delta, BaseOptimizer, OptimizerConfig, UpdateDelta};
use crate::rng::{derive_seed, seeded, Rng as StreamRng};
use crate::tasks::{epoch_batches, leave_one_out, BatchStream, TaskFamily, TaskInstance};

const STREAM_INIT: u64 = 11;
const STREAM_ANCHOR: u64 = 12;
const STREAM_META: u64 = 13;
const STREAM_PHI: u64 = 14;
const STREAM_AUX: u64 = 15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolConfig {
    /// Outer meta-training iterations (episodes, or epochs in epochs mode).
    pub meta_epochs: usize,
    /// Gated inner steps per episode.
    pub inner_steps: usize,
    pub batch_size: usize,
    pub anchor_epochs: usize,
    pub auxiliary_epochs: usize,
    pub optimizer: OptimizerConfig,
    pub meta_lr: f64,
    /// Gate granularity used by meta-training.
    pub gate_layout: GateLayout,
    /// Read `meta_epochs` as passes over the source data instead of episodes.
    pub epochs_mode: bool,
    /// Rows per forward pass when computing the held-out loss.
    pub eval_chunk: usize,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            meta_epochs: 10,
            inner_steps: 15,
            batch_size: 32,
            anchor_epochs: 1,
            auxiliary_epochs: 2,
            optimizer: OptimizerConfig::default(),
            meta_lr: 0.05,
            gate_layout: GateLayout::LayerWise,
            epochs_mode: false,
            eval_chunk: 256,
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.meta_epochs == 0 {
            return Err(Error::Config("meta_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.meta_lr > 0.0 && self.meta_lr.is_finite()) {
            return Err(Error::Config(format!("meta_lr must be positive, got {}", self.meta_lr)));
        }
        self.optimizer.validate()
    }

    /// Number of meta-training episodes over `sources`.
    pub fn num_episodes(&self, sources: &TaskFamily) -> usize {
        if !self.epochs_mode {
            return self.meta_epochs;
        }
        let total: usize = sources.tasks().iter().map(|t| t.train.len()).sum();
        let per_episode = (self.inner_steps * self.batch_size).max(1);
        self.meta_epochs * total.div_ceil(per_episode).max(1)
    }
}

/// Methods compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Layer-wise gates meta-trained by leave-one-out episodes.
    Meta,
    /// Plain fine-tuning (all gates 1).
    FullFinetune,
    /// Gate 0 on the bottom `k` blocks, 1 elsewhere.
    FreezeBottom(usize),
    /// A single meta-trained gate shared by all layers.
    SharedGate,
    /// Layer-wise gates trained jointly with the parameters during stage 2,
    /// using the one-step hypergradient on the current batch.
    JointTrain,
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Meta => "meta".into(),
            Method::FullFinetune => "full_finetune".into(),
            Method::FreezeBottom(k) => format!("freeze_bottom_{k}"),
            Method::SharedGate => "shared_gate".into(),
            Method::JointTrain => "joint_train".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "meta" => Some(Method::Meta),
            "full_finetune" => Some(Method::FullFinetune),
            "shared_gate" => Some(Method::SharedGate),
            "joint_train" => Some(Method::JointTrain),
            other => other.strip_prefix("freeze_bottom_").and_then(|k| k.parse().ok()).map(Method::FreezeBottom),
        }
    }
}

/// What one episode produced.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub episode: usize,
    pub held_out: usize,
    /// Held-out loss after the inner loop.
    pub test_loss: f64,
    pub meta_grad: Vec<f64>,
    /// Training-batch loss of every inner step.
    pub inner_losses: Vec<f64>,
    /// Gate values `λ` the episode ran with.
    pub gates: Vec<f64>,
}

/// Everything needed to replay an episode: the starting parameters, the raw
/// base-optimizer deltas in order, and the held-out data.
#[derive(Debug, Clone)]
pub struct EpisodeRecord<T> {
    pub theta0: Model<T>,
    pub deltas: Vec<UpdateDelta<T>>,
    pub test_data: Batch,
}

fn check_compatible(family: &TaskFamily, arch: &ArchConfig) -> Result<()> {
    let f = family.config();
    if f.vocab_size != arch.vocab_size || f.seq_len != arch.seq_len || f.num_classes != arch.num_classes {
        return Err(Error::Config(format!(
            "family (vocab {}, seq_len {}, classes {}) does not fit architecture (vocab {}, seq_len {}, classes {})",
            f.vocab_size, f.seq_len, f.num_classes, arch.vocab_size, arch.seq_len, arch.num_classes
        )));
    }
    Ok(())
}

/// Randomly initialized blocks and head on top of the family's aligned
/// embedding; the starting point of every run.
pub fn pretrained_model<T: Real>(family: &TaskFamily, arch: &ArchConfig, seed: u64) -> Result<Model<T>> {
    check_compatible(family, arch)?;
    let model = init_model(arch, derive_seed(seed, STREAM_INIT), None)?;
    model.with_embedding(family.aligned_embedding(arch.embed_dim)?)
}

/// Stage 1: plain fine-tuning on the anchor task.
pub fn anchor_stage<T: Real>(family: &TaskFamily, start: &Model<T>, cfg: &ProtocolConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let anchor = family.anchor().ok_or_else(|| Error::Protocol("source tasks contain no anchor task".into()))?;
    let mut rng = seeded(derive_seed(seed, STREAM_ANCHOR));
    let mut model = start.clone();
    let mut opt = BaseOptimizer::new(cfg.optimizer, model.params())?;
    for _ in 0..cfg.anchor_epochs {
        for rows in epoch_batches(anchor.train.len(), cfg.batch_size, &mut rng)? {
            let batch = anchor.train.select(&rows);
            let (_, grads) = loss_and_grads(&model, &batch, Mode::Train(&mut rng))?;
            let delta = opt.delta(&grads)?;
            apply_delta(model.params_mut(), &delta)?;
        }
    }
    Ok(model)
}

/// Pretrained initialization followed by the anchor stage.
pub fn stage_one<T: Real>(family: &TaskFamily, arch: &ArchConfig, cfg: &ProtocolConfig, seed: u64) -> Result<Model<T>> {
    let start = pretrained_model(family, arch, seed)?;
    anchor_stage(family, &start, cfg, seed)
}

fn source_pool<'a>(tasks: impl IntoIterator<Item = &'a TaskInstance>) -> Result<Batch> {
    Batch::concat(tasks.into_iter().map(|t| &t.train))
}

fn episode_inner<T: Real>(
    family: &TaskFamily,
    init: &Model<T>,
    phi: &GateParams,
    cfg: &ProtocolConfig,
    rng: &mut StreamRng,
    record: bool,
) -> Result<(EpisodeResult, Option<EpisodeRecord<T>>)> {
    if family.len() < 2 {
        return Err(Error::Protocol("an episode needs at least 2 source tasks".into()));
    }
    let arch = *init.arch();
    if phi.num_groups() != arch.num_groups() {
        return Err(Error::shape(
            "run_episode",
            format!("gates cover {} groups, model has {}", phi.num_groups(), arch.num_groups()),
        ));
    }
    let ids = family.task_ids();
    let held_out = ids[rng.gen_range(0..ids.len())];
    let head_seed: u64 = rng.gen();
    let mut theta = init_model(&arch, head_seed, Some(init))?;
    let theta0 = record.then(|| theta.clone());

    let (train_tasks, test_task) = leave_one_out(family, held_out)?;
    let pool = source_pool(train_tasks)?;
    let mut stream = BatchStream::new(pool.len(), cfg.batch_size.min(pool.len()))?;
    let mut opt = BaseOptimizer::new(cfg.optimizer, theta.params())?;
    let mut acc = UpdateAccumulator::zeros_like(theta.params());
    let lambda = gate_values(phi);
    let mut inner_losses = Vec::with_capacity(cfg.inner_steps);
    let mut deltas = Vec::new();

    for _ in 0..cfg.inner_steps {
        let batch = stream.next_batch(&pool, rng);
        let (loss, grads) = loss_and_grads(&theta, &batch, Mode::Train(rng))?;
        let delta = opt.delta(&grads)?;
        acc.accumulate(&delta)?;
        gated_step(theta.params_mut(), &delta, &lambda)?;
        inner_losses.push(loss.as_f64());
        if record {
            deltas.push(delta);
        }
    }

    let (test_loss, test_grads) = loss_and_grads_chunked(&theta, &test_task.train, cfg.eval_chunk)?;
    let meta_grad = meta_gradient(phi, &acc, &test_grads)?;
    let result = EpisodeResult {
        episode: 0,
        held_out,
        test_loss: test_loss.as_f64(),
        meta_grad,
        inner_losses,
        gates: lambda.values().to_vec(),
    };
    let record = theta0.map(|theta0| EpisodeRecord { theta0, deltas, test_data: test_task.train.clone() });
    Ok((result, record))
}

/// One leave-one-out episode: pick a held-out source task, re-draw the head of
/// `init`, take `inner_steps` gated steps on the remaining sources, and return
/// the truncated meta-gradient of the held-out loss. `phi` is not modified.
pub fn run_episode<T: Real>(
    family: &TaskFamily,
    init: &Model<T>,
    phi: &GateParams,
    cfg: &ProtocolConfig,
    rng: &mut StreamRng,
) -> Result<EpisodeResult> {
    episode_inner(family, init, phi, cfg, rng, false).map(|(r, _)| r)
}

/// [`run_episode`] that also returns what is needed to replay it.
pub fn run_episode_recorded<T: Real>(
    family: &TaskFamily,
    init: &Model<T>,
    phi: &GateParams,
    cfg: &ProtocolConfig,
    rng: &mut StreamRng,
) -> Result<(EpisodeResult, EpisodeRecord<T>)> {
    let (result, record) = episode_inner(family, init, phi, cfg, rng, true)?;
    Ok((result, record.expect("recording was requested")))
}

/// Starting gates `φ⁰` for a run.
pub fn initial_gates(cfg: &ProtocolConfig, num_groups: usize) -> Result<GateParams> {
    GateParams::random(cfg.gate_layout, num_groups, &mut seeded(derive_seed(cfg.seed, STREAM_PHI)))
}

/// The random stream that drives meta-training episodes.
pub fn episode_rng(cfg: &ProtocolConfig) -> StreamRng {
    seeded(derive_seed(cfg.seed, STREAM_META))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaOutcome {
    pub phi: GateParams,
    pub state: MetaState,
    pub history: Vec<EpisodeResult>,
}

/// Outer loop: one episode and one meta update per iteration.
pub fn meta_train<T: Real>(family: &TaskFamily, init: &Model<T>, cfg: &ProtocolConfig) -> Result<MetaOutcome> {
    cfg.validate()?;
    let mut phi = initial_gates(cfg, init.arch().num_groups())?;
    let mut state = MetaState::new(phi.len(), cfg.meta_lr);
    let mut rng = episode_rng(cfg);
    let episodes = cfg.num_episodes(family);
    let mut history = Vec::with_capacity(episodes);
    for s in 0..episodes {
        let mut result = run_episode(family, init, &phi, cfg, &mut rng)?;
        result.episode = s;
        phi = meta_update(&mut state, &phi, &result.meta_grad)?;
        history.push(result);
    }
    Ok(MetaOutcome { phi, state, history })
}

/// How stage 2 applies base-optimizer deltas.
#[derive(Debug, Clone, PartialEq)]
pub enum StepRule {
    /// `θ ← θ − Δθ`, with no gate involved at all.
    Plain,
    /// `θ ← θ − λ ⊙ Δθ` with fixed `λ`.
    Gated(GateValues),
    /// Gated, and after every step `φ` takes one meta step on the one-step
    /// hypergradient of the current batch's loss.
    Joint { phi: GateParams, meta_lr: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome<T> {
    pub model: Model<T>,
    /// Training-batch loss of every step.
    pub losses: Vec<f64>,
    /// Gate values after every step (joint training only).
    pub gate_trace: Vec<Vec<f64>>,
}

/// Stage 2: fine-tune on the union of the non-anchor source tasks.
pub fn auxiliary_stage<T: Real>(
    family: &TaskFamily,
    start: &Model<T>,
    rule: StepRule,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<StageOutcome<T>> {
    cfg.validate()?;
    let aux: Vec<&TaskInstance> = family.tasks().iter().filter(|t| !t.anchor).collect();
    if aux.is_empty() {
        return Err(Error::Protocol("no auxiliary source tasks for stage 2".into()));
    }
    let num_groups = start.arch().num_groups();
    match &rule {
        StepRule::Gated(l) if l.num_groups() != num_groups => {
            return Err(Error::shape("auxiliary_stage", format!("{} gates for {num_groups} groups", l.num_groups())))
        }
        StepRule::Joint { phi, .. } if phi.num_groups() != num_groups => {
            return Err(Error::shape("auxiliary_stage", format!("{} gates for {num_groups} groups", phi.num_groups())))
        }
        _ => {}
    }
    let pool = source_pool(aux)?;
    let mut rng = seeded(derive_seed(seed, STREAM_AUX));
    let mut model = start.clone();
    let mut opt = BaseOptimizer::new(cfg.optimizer, model.params())?;
    let mut losses = Vec::new();
    let mut gate_trace = Vec::new();
    let mut joint = match &rule {
        StepRule::Joint { phi, meta_lr } => Some((phi.clone(), MetaState::new(phi.len(), *meta_lr))),
        _ => None,
    };

    for _ in 0..cfg.auxiliary_epochs {
        for rows in epoch_batches(pool.len(), cfg.batch_size, &mut rng)? {
            let batch = pool.select(&rows);
            let (loss, grads) = loss_and_grads(&model, &batch, Mode::Train(&mut rng))?;
            let delta = opt.delta(&grads)?;
            match (&rule, joint.as_mut()) {
                (StepRule::Plain, _) => apply_delta(model.params_mut(), &delta)?,
                (StepRule::Gated(lambda), _) => gated_step(model.params_mut(), &delta, lambda)?,
                (StepRule::Joint { .. }, Some((phi, state))) => {
                    gated_step(model.params_mut(), &delta, &gate_values(phi))?;
                    let mut acc = UpdateAccumulator::zeros_like(model.params());
                    acc.accumulate(&delta)?;
                    let (_, after) = loss_and_grads(&model, &batch, Mode::Eval)?;
                    let grad = meta_gradient(phi, &acc, &after)?;
                    *phi = meta_update(state, phi, &grad)?;
                    gate_trace.push(gate_values(phi).values().to_vec());
                }
                (StepRule::Joint { .. }, None) => unreachable!("joint state is created with the rule"),
            }
            losses.push(loss.as_f64());
        }
    }
    Ok(StageOutcome { model, losses, gate_trace })
}

/// A fine-tuned model together with the source tasks it has seen.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTuned<T> {
    pub model: Model<T>,
    pub sources: Vec<usize>,
}

/// Both fine-tuning stages from scratch. `lambda = None` runs stage 2 with the
/// plain optimizer; `Some(λ)` runs it gated with fixed `λ`.
pub fn finetune<T: Real>(
    family: &TaskFamily,
    arch: &ArchConfig,
    lambda: Option<&GateValues>,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<FineTuned<T>> {
    let stage1 = stage_one(family, arch, cfg, seed)?;
    let rule = lambda.map_or(StepRule::Plain, |l| StepRule::Gated(l.clone()));
    let out = auxiliary_stage(family, &stage1, rule, cfg, seed)?;
    Ok(FineTuned { model: out.model, sources: family.task_ids() })
}

/// Accuracy on the target's test split. Refuses targets that were fine-tuning sources.
pub fn zero_shot_eval<T: Real>(tuned: &FineTuned<T>, target: &TaskInstance) -> Result<f64> {
    if tuned.sources.contains(&target.id) {
        return Err(Error::Protocol(format!("task {} was a fine-tuning source; not a zero-shot target", target.id)));
    }
    learner::evaluate(&tuned.model, &target.test)
}

/// Result of running one method end to end from a shared stage-1 model.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun<T> {
    pub method: Method,
    pub tuned: FineTuned<T>,
    /// Gate values in effect at the end of stage 2, one per layer group.
    pub final_gates: Vec<f64>,
    /// Meta-training episodes (meta-trained methods only).
    pub history: Vec<EpisodeResult>,
    /// Gate values after every joint-training step (joint training only).
    pub gate_trace: Vec<Vec<f64>>,
    /// Mean training-batch loss over stage 2.
    pub mean_inner_loss: f64,
}

/// Gates of the hard-freezing baseline: 0 on the bottom `k` blocks, 1 elsewhere.
pub fn freeze_bottom_gates(arch: &ArchConfig, k: usize) -> Result<GateValues> {
    if k > arch.num_blocks {
        return Err(Error::Config(format!("cannot freeze {k} of {} blocks", arch.num_blocks)));
    }
    GateValues::per_group((0..arch.num_groups()).map(|g| if g < k { 0.0 } else { 1.0 }).collect())
}

/// Runs `method` on the source family, starting stage 2 from `stage1`.
pub fn run_method<T: Real>(
    family: &TaskFamily,
    stage1: &Model<T>,
    method: Method,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<MethodRun<T>> {
    cfg.validate()?;
    let arch = *stage1.arch();
    let num_groups = arch.num_groups();
    let mut history = Vec::new();
    let rule = match method {
        Method::FullFinetune => StepRule::Plain,
        Method::FreezeBottom(k) => StepRule::Gated(freeze_bottom_gates(&arch, k)?),
        Method::Meta | Method::SharedGate => {
            let layout = if method == Method::Meta { GateLayout::LayerWise } else { GateLayout::Shared };
            let meta_cfg = ProtocolConfig { gate_layout: layout, seed, ..*cfg };
            let outcome = meta_train(family, stage1, &meta_cfg)?;
            history = outcome.history;
            StepRule::Gated(gate_values(&outcome.phi))
        }
        Method::JointTrain => {
            let phi = GateParams::random(GateLayout::LayerWise, num_groups, &mut seeded(derive_seed(seed, STREAM_PHI)))?;
            StepRule::Joint { phi, meta_lr: cfg.meta_lr }
        }
    };
    let fixed_gates = match &rule {
        StepRule::Plain => vec![1.0; num_groups],
        StepRule::Gated(l) => l.per_group_rates(),
        StepRule::Joint { .. } => Vec::new(),
    };
    let out = auxiliary_stage(family, stage1, rule, cfg, seed)?;
    let final_gates = match out.gate_trace.last() {
        Some(last) => last.clone(),
        None if fixed_gates.is_empty() => vec![0.5; num_groups],
        None => fixed_gates,
    };
    let mean_inner_loss = if out.losses.is_empty() { 0.0 } else { out.losses.iter().sum::<f64>() / out.losses.len() as f64 };
    Ok(MethodRun {
        method,
        tuned: FineTuned { model: out.model, sources: family.task_ids() },
        final_gates,
        history,
        gate_trace: out.gate_trace,
        mean_inner_loss,
    })
}

/// Baseline and ablation entry point; `kind` must not be [`Method::Meta`].
pub fn run_baseline<T: Real>(
    family: &TaskFamily,
    arch: &ArchConfig,
    kind: Method,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<MethodRun<T>> {
    if kind == Method::Meta {
        return Err(Error::Config("meta is not a baseline".into()));
    }
    if let Method::FreezeBottom(k) = kind {
        freeze_bottom_gates(arch, k)?;
    }
    let stage1 = stage_one(family, arch, cfg, seed)?;
    run_method(family, &stage1, kind, cfg, seed)
}
