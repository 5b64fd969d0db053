//! Synthetic task families standing in for a set of languages.
//!
//! All tasks of a family share one latent labeling rule over a small latent
//! vocabulary: some latent symbols vote for a class, and an example's label is
//! the class with strictly the most votes. Tasks differ only in surface form.
//! Task `k` renders a fraction `difficulty` of the latent symbols with its own
//! private tokens, cyclically shifts token positions, and its private tokens
//! are embedded as a rotated copy of the shared symbol embedding (rotation
//! angle also scaled by `difficulty`). At difficulty 0 every task is rendered
//! identically.
//!
//! Task 0 is the anchor: its train split is `anchor_multiplier` times larger.
//! Dev and test content is parallel across all tasks, and every non-anchor
//! train split is parallel to the first `train_size` anchor examples.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
pub use crate::learner::Batch;
use crate::learner::TokenMatrix;
use crate::numerics::{Real, Tensor};
use crate::rng::{derive_seed, seeded};

const STREAM_CONCEPT: u64 = 1;
const STREAM_CONTENT: u64 = 2;
const STREAM_EMBEDDING: u64 = 3;
const STREAM_TRANSFORM: u64 = 0x100;
const STREAM_PLANES: u64 = 0x200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamilyConfig {
    pub num_tasks: usize,
    pub vocab_size: usize,
    /// Number of latent symbols shared by all tasks.
    pub latent_vocab: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    /// Anchor train split size as a multiple of `train_size`.
    pub anchor_multiplier: usize,
    pub difficulty: f64,
    /// Largest embedding rotation (radians) a task can receive at difficulty 1.
    pub max_rotation: f64,
    /// Fraction of latent symbols that vote for a class.
    pub signal_fraction: f64,
    pub seed: u64,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig {
            num_tasks: 7,
            vocab_size: 168,
            latent_vocab: 24,
            seq_len: 12,
            num_classes: 3,
            train_size: 240,
            dev_size: 120,
            test_size: 600,
            anchor_multiplier: 4,
            difficulty: 0.7,
            max_rotation: core::f64::consts::FRAC_PI_3,
            signal_fraction: 0.5,
            seed: 17,
        }
    }
}

impl FamilyConfig {
    fn moved_symbols(&self) -> usize {
        libm::round(self.difficulty * self.latent_vocab as f64) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks < 2 {
            return Err(Error::Config("a family needs at least 2 tasks".into()));
        }
        for (name, v) in [
            ("latent_vocab", self.latent_vocab),
            ("seq_len", self.seq_len),
            ("train_size", self.train_size),
            ("dev_size", self.dev_size),
            ("test_size", self.test_size),
            ("anchor_multiplier", self.anchor_multiplier),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(Error::Config(format!("difficulty {} outside [0, 1]", self.difficulty)));
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction <= 1.0) {
            return Err(Error::Config(format!("signal_fraction {} outside (0, 1]", self.signal_fraction)));
        }
        if !self.max_rotation.is_finite() {
            return Err(Error::Config("max_rotation must be finite".into()));
        }
        if self.signal_symbols() < self.num_classes {
            return Err(Error::Config(format!(
                "{} voting symbols cannot cover {} classes",
                self.signal_symbols(),
                self.num_classes
            )));
        }
        let needed = if self.moved_symbols() > 0 { self.num_tasks * self.latent_vocab } else { self.latent_vocab };
        if self.vocab_size < needed {
            return Err(Error::Config(format!(
                "vocabulary of {} is too small: {} tasks over {} latent symbols at difficulty {} need {needed}",
                self.vocab_size, self.num_tasks, self.latent_vocab, self.difficulty
            )));
        }
        if self.latent_vocab > u16::MAX as usize || self.vocab_size > u32::MAX as usize {
            return Err(Error::Config("vocabulary too large".into()));
        }
        Ok(())
    }

    fn signal_symbols(&self) -> usize {
        (libm::round(self.signal_fraction * self.latent_vocab as f64) as usize).min(self.latent_vocab)
    }
}

/// The labeling rule shared by every task of a family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concept {
    votes: Vec<Option<usize>>,
    num_classes: usize,
}

impl Concept {
    fn generate(cfg: &FamilyConfig) -> Self {
        let mut rng = seeded(derive_seed(cfg.seed, STREAM_CONCEPT));
        let mut symbols: Vec<usize> = (0..cfg.latent_vocab).collect();
        symbols.shuffle(&mut rng);
        let mut votes = vec![None; cfg.latent_vocab];
        for (i, &s) in symbols.iter().take(cfg.signal_symbols()).enumerate() {
            votes[s] = Some(i % cfg.num_classes);
        }
        Concept { votes, num_classes: cfg.num_classes }
    }

    /// Class with strictly the most votes, if any.
    pub fn label(&self, latent: &[u16]) -> Option<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &s in latent {
            if let Some(c) = self.votes.get(s as usize).copied().flatten() {
                counts[c] += 1;
            }
        }
        let best = (0..self.num_classes).max_by_key(|&c| (counts[c], core::cmp::Reverse(c)))?;
        let top = counts[best];
        (top > 0 && counts.iter().filter(|&&n| n == top).count() == 1).then_some(best)
    }

    pub fn votes(&self) -> &[Option<usize>] {
        &self.votes
    }
}

/// How a task renders latent content as tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceTransform {
    /// Token id used for every latent symbol.
    pub token_of: Vec<u32>,
    /// Cyclic position shift applied to every sequence.
    pub shift: usize,
    /// Rotation angle of this task's private embeddings, in radians.
    pub angle: f64,
}

impl SurfaceTransform {
    fn identity(latent_vocab: usize) -> Self {
        SurfaceTransform { token_of: (0..latent_vocab as u32).collect(), shift: 0, angle: 0.0 }
    }

    fn generate(cfg: &FamilyConfig, task: usize) -> Self {
        if task == 0 {
            return Self::identity(cfg.latent_vocab);
        }
        let v = cfg.latent_vocab;
        let mut rng = seeded(derive_seed(cfg.seed, STREAM_TRANSFORM + task as u64));
        let mut symbols: Vec<usize> = (0..v).collect();
        symbols.shuffle(&mut rng);
        let mut slots: Vec<usize> = (0..v).collect();
        slots.shuffle(&mut rng);
        let mut token_of: Vec<u32> = (0..v as u32).collect();
        for &s in symbols.iter().take(cfg.moved_symbols()) {
            token_of[s] = (task * v + slots[s]) as u32;
        }
        let raw_shift = rng.gen_range(0..cfg.seq_len) as f64;
        let shift = (libm::round(cfg.difficulty * raw_shift) as usize) % cfg.seq_len;
        let angle = cfg.difficulty * cfg.max_rotation * rng.gen_range(0.5..=1.0);
        SurfaceTransform { token_of, shift, angle }
    }

    pub fn render(&self, latent: &[u16], out: &mut Vec<u32>) {
        let n = latent.len();
        let start = out.len();
        out.resize(start + n, 0);
        for (i, &s) in latent.iter().enumerate() {
            out[start + (i + self.shift) % n] = self.token_of[s as usize];
        }
    }

    /// Inverts [`SurfaceTransform::render`]; `None` if a token is foreign to this task.
    pub fn decode(&self, tokens: &[u32]) -> Option<Vec<u16>> {
        let n = tokens.len();
        let mut latent = vec![0u16; n];
        for (i, slot) in latent.iter_mut().enumerate() {
            let tok = tokens[(i + self.shift) % n];
            *slot = self.token_of.iter().position(|&t| t == tok)? as u16;
        }
        Some(latent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Split::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub id: usize,
    pub anchor: bool,
    pub transform: SurfaceTransform,
    pub train: Batch,
    pub dev: Batch,
    pub test: Batch,
}

impl TaskInstance {
    pub fn split(&self, split: Split) -> &Batch {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskFamily {
    cfg: FamilyConfig,
    concept: Concept,
    tasks: Vec<TaskInstance>,
}

struct LatentPool {
    seqs: Vec<Vec<u16>>,
    labels: Vec<usize>,
}

fn draw_pool(
    concept: &Concept,
    cfg: &FamilyConfig,
    n: usize,
    seen: &mut BTreeSet<Vec<u16>>,
    rng: &mut impl Rng,
) -> Result<LatentPool> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.num_classes).collect();
    labels.shuffle(rng);
    let max_tries = 10_000 + 1_000 * n;
    let mut tries = 0;
    let mut seqs = Vec::with_capacity(n);
    for &y in &labels {
        loop {
            tries += 1;
            if tries > max_tries {
                return Err(Error::Config(format!(
                    "could not draw {n} distinct examples; latent space too small for the requested split sizes"
                )));
            }
            let seq: Vec<u16> = (0..cfg.seq_len).map(|_| rng.gen_range(0..cfg.latent_vocab) as u16).collect();
            if concept.label(&seq) == Some(y) && seen.insert(seq.clone()) {
                seqs.push(seq);
                break;
            }
        }
    }
    Ok(LatentPool { seqs, labels })
}

fn render_pool(transform: &SurfaceTransform, seqs: &[Vec<u16>], labels: &[usize], seq_len: usize) -> Result<Batch> {
    let mut tokens = Vec::with_capacity(seqs.len() * seq_len);
    for s in seqs {
        transform.render(s, &mut tokens);
    }
    Batch::new(TokenMatrix::new(seqs.len(), seq_len, tokens)?, labels.to_vec())
}

/// Generates a family fully determined by `cfg` (including its seed).
pub fn make_family(cfg: &FamilyConfig) -> Result<TaskFamily> {
    cfg.validate()?;
    let concept = Concept::generate(cfg);
    let mut rng = seeded(derive_seed(cfg.seed, STREAM_CONTENT));
    let mut seen = BTreeSet::new();
    let shared_train = draw_pool(&concept, cfg, cfg.train_size, &mut seen, &mut rng)?;
    let extra = draw_pool(&concept, cfg, cfg.train_size * (cfg.anchor_multiplier - 1), &mut seen, &mut rng)?;
    let dev = draw_pool(&concept, cfg, cfg.dev_size, &mut seen, &mut rng)?;
    let test = draw_pool(&concept, cfg, cfg.test_size, &mut seen, &mut rng)?;

    let mut anchor_seqs = shared_train.seqs.clone();
    anchor_seqs.extend(extra.seqs.iter().cloned());
    let mut anchor_labels = shared_train.labels.clone();
    anchor_labels.extend(extra.labels.iter().copied());

    let tasks = (0..cfg.num_tasks)
        .map(|k| {
            let transform = SurfaceTransform::generate(cfg, k);
            let train = if k == 0 {
                render_pool(&transform, &anchor_seqs, &anchor_labels, cfg.seq_len)?
            } else {
                render_pool(&transform, &shared_train.seqs, &shared_train.labels, cfg.seq_len)?
            };
            Ok(TaskInstance {
                id: k,
                anchor: k == 0,
                train,
                dev: render_pool(&transform, &dev.seqs, &dev.labels, cfg.seq_len)?,
                test: render_pool(&transform, &test.seqs, &test.labels, cfg.seq_len)?,
                transform,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskFamily { cfg: *cfg, concept, tasks })
}

impl TaskFamily {
    /// Reassembles a family from stored tasks, e.g. after import. The concept
    /// is regenerated from the seed and every stored label is checked against it.
    pub fn from_tasks(cfg: FamilyConfig, tasks: Vec<TaskInstance>) -> Result<Self> {
        cfg.validate()?;
        let concept = Concept::generate(&cfg);
        for task in &tasks {
            if task.transform.token_of.len() != cfg.latent_vocab {
                return Err(Error::Input(format!("task {} transform covers {} symbols", task.id, task.transform.token_of.len())));
            }
            for split in Split::ALL {
                let data = task.split(split);
                for i in 0..data.len() {
                    let latent = task.transform.decode(data.inputs.row(i)).ok_or_else(|| {
                        Error::Input(format!("task {} {} example {i} uses tokens outside the task", task.id, split.name()))
                    })?;
                    if concept.label(&latent) != Some(data.labels[i]) {
                        return Err(Error::Input(format!(
                            "task {} {} example {i}: label {} disagrees with the family concept",
                            task.id,
                            split.name(),
                            data.labels[i]
                        )));
                    }
                }
            }
        }
        Ok(TaskFamily { cfg, concept, tasks })
    }

    pub fn config(&self) -> &FamilyConfig {
        &self.cfg
    }

    pub fn concept(&self) -> &Concept {
        &self.concept
    }

    pub fn tasks(&self) -> &[TaskInstance] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task_ids(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.id).collect()
    }

    pub fn task(&self, id: usize) -> Option<&TaskInstance> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn anchor(&self) -> Option<&TaskInstance> {
        self.tasks.iter().find(|t| t.anchor)
    }

    /// The family restricted to `ids`, in the given order.
    pub fn subset(&self, ids: &[usize]) -> Result<TaskFamily> {
        let mut tasks = Vec::with_capacity(ids.len());
        for &id in ids {
            if tasks.iter().any(|t: &TaskInstance| t.id == id) {
                return Err(Error::Config(format!("task {id} listed twice")));
            }
            tasks.push(self.task(id).ok_or_else(|| Error::Config(format!("no task with id {id}")))?.clone());
        }
        Ok(TaskFamily { cfg: self.cfg, concept: self.concept.clone(), tasks })
    }

    /// Embedding table in which a task's private tokens are a rotated copy of
    /// the shared symbol embeddings. Plays the role of a pretrained multilingual
    /// embedding: aligned across tasks up to a task-specific distortion.
    pub fn aligned_embedding<T: Real>(&self, embed_dim: usize) -> Result<Tensor<T>> {
        if embed_dim == 0 {
            return Err(Error::Config("embed_dim must be at least 1".into()));
        }
        let cfg = &self.cfg;
        let mut rng = seeded(derive_seed(cfg.seed, STREAM_EMBEDDING));
        let mut table: Vec<f64> = (0..cfg.vocab_size * embed_dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        // Built from every task of the configuration, so subsets share one table.
        for id in 0..cfg.num_tasks {
            let transform = SurfaceTransform::generate(cfg, id);
            let mut coords: Vec<usize> = (0..embed_dim).collect();
            coords.shuffle(&mut seeded(derive_seed(cfg.seed, STREAM_PLANES + id as u64)));
            let (sin, cos) = (libm::sin(transform.angle), libm::cos(transform.angle));
            for (s, &tok) in transform.token_of.iter().enumerate() {
                let tok = tok as usize;
                if tok == s {
                    continue;
                }
                let base = table[s * embed_dim..(s + 1) * embed_dim].to_vec();
                let row = &mut table[tok * embed_dim..(tok + 1) * embed_dim];
                row.copy_from_slice(&base);
                for pair in coords.chunks_exact(2) {
                    let (i, j) = (pair[0], pair[1]);
                    row[i] = cos * base[i] - sin * base[j];
                    row[j] = sin * base[i] + cos * base[j];
                }
            }
        }
        Tensor::new(vec![cfg.vocab_size, embed_dim], table.into_iter().map(T::of).collect())
    }
}

/// Splits a family into the surrogate training tasks and the held-out task `k`.
pub fn leave_one_out(family: &TaskFamily, k: usize) -> Result<(Vec<&TaskInstance>, &TaskInstance)> {
    let test = family.task(k).ok_or_else(|| Error::Input(format!("no task with id {k}")))?;
    let train = family.tasks.iter().filter(|t| t.id != k).collect();
    Ok((train, test))
}

/// `n` examples drawn uniformly without replacement.
pub fn sample_batch(data: &Batch, n: usize, rng: &mut impl Rng) -> Result<Batch> {
    if n == 0 || n > data.len() {
        return Err(Error::Input(format!("cannot draw {n} examples from a split of {}", data.len())));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let (chosen, _) = idx.partial_shuffle(rng, n);
    Ok(data.select(chosen))
}

/// Index batches covering `len` examples once, in random order; the last may be short.
pub fn epoch_batches(len: usize, batch: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if len == 0 || batch == 0 {
        return Err(Error::Input("epoch over an empty split or with batch size 0".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch).map(<[usize]>::to_vec).collect())
}

/// Endless stream of full batches, without replacement inside each pass over
/// the data. A new shuffled pass starts when fewer than `batch` examples remain.
#[derive(Debug, Clone)]
pub struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl BatchStream {
    pub fn new(len: usize, batch: usize) -> Result<Self> {
        if batch == 0 || batch > len {
            return Err(Error::Input(format!("batch size {batch} does not fit a split of {len}")));
        }
        Ok(BatchStream { order: (0..len).collect(), cursor: len, batch })
    }

    pub fn next_indices(&mut self, rng: &mut impl Rng) -> &[usize] {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let out = &self.order[self.cursor..self.cursor + self.batch];
        self.cursor += self.batch;
        out
    }

    pub fn next_batch(&mut self, data: &Batch, rng: &mut impl Rng) -> Batch {
        let idx = self.next_indices(rng).to_vec();
        data.select(&idx)
    }
}
