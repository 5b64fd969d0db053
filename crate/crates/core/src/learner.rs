//! The layered classifier being fine-tuned.
//!
//! Token ids are looked up in a frozen embedding table and mean-pooled, then
//! passed through `B` tanh blocks (residual whenever input and output widths
//! agree), inverted dropout, and a linear classification head. Parameters are
//! grouped by layer so that a gate can scale each group's update separately:
//! groups `0..B` are the blocks, group `B` is the head. The embedding is not a
//! gated group and no gradient is ever computed for it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::numerics::{affine, affine_backward, affine_tanh, affine_tanh_backward, softmax_cross_entropy, Real, Tensor};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub seq_len: usize,
    /// Applied to the output of the last block in training mode only.
    pub dropout_rate: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            vocab_size: 168,
            embed_dim: 16,
            num_blocks: 4,
            hidden_dim: 16,
            num_classes: 3,
            seq_len: 12,
            dropout_rate: 0.1,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("num_blocks", self.num_blocks),
            ("hidden_dim", self.hidden_dim),
            ("num_classes", self.num_classes),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1]", self.dropout_rate)));
        }
        Ok(())
    }

    /// Number of gated parameter groups: every block plus the head.
    pub fn num_groups(&self) -> usize {
        self.num_blocks + 1
    }

    pub fn head_index(&self) -> usize {
        self.num_blocks
    }

    fn block_dims(&self, i: usize) -> (usize, usize) {
        let fan_in = if i == 0 { self.embed_dim } else { self.hidden_dim };
        (fan_in, self.hidden_dim)
    }

    /// `(weight, bias)` shapes of every gated group, bottom to top.
    pub fn group_shapes(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut shapes: Vec<_> = (0..self.num_blocks)
            .map(|i| {
                let (fi, fo) = self.block_dims(i);
                (vec![fi, fo], vec![fo])
            })
            .collect();
        shapes.push((vec![self.hidden_dim, self.num_classes], vec![self.num_classes]));
        shapes
    }
}

/// Weight and bias of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ParamGroup<T> {
    pub fn zeros_like(&self) -> Self {
        ParamGroup { weight: Tensor::zeros(self.weight.shape()), bias: Tensor::zeros(self.bias.shape()) }
    }

    pub fn tensors(&self) -> [&Tensor<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.weight.dot(&other.weight) + self.bias.dot(&other.bias)
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.weight.same_shape(&other.weight) && self.bias.same_shape(&other.bias)
    }
}

/// A list of per-layer tensors laid out like the model's gated groups.
///
/// Used for the parameters themselves as well as for gradients, optimizer
/// deltas, moment estimates and the episode accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    groups: Vec<ParamGroup<T>>,
}

/// Gradient of the loss with respect to every gated group.
pub type LayerGrads<T> = ParamSet<T>;

impl<T: Real> ParamSet<T> {
    pub fn new(groups: Vec<ParamGroup<T>>) -> Self {
        ParamSet { groups }
    }

    pub fn zeros_for(arch: &ArchConfig) -> Self {
        let groups = arch
            .group_shapes()
            .into_iter()
            .map(|(w, b)| ParamGroup { weight: Tensor::zeros(&w), bias: Tensor::zeros(&b) })
            .collect();
        ParamSet { groups }
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet { groups: self.groups.iter().map(ParamGroup::zeros_like).collect() }
    }

    pub fn groups(&self) -> &[ParamGroup<T>] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup<T>] {
        &mut self.groups
    }

    pub fn group(&self, i: usize) -> &ParamGroup<T> {
        &self.groups[i]
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_params(&self) -> usize {
        self.groups.iter().map(ParamGroup::len).sum()
    }

    pub fn shapes(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        self.groups.iter().map(|g| (g.weight.shape().to_vec(), g.bias.shape().to_vec())).collect()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.groups.len() == other.groups.len() && self.groups.iter().zip(&other.groups).all(|(a, b)| a.same_shape(b))
    }

    pub fn check_layout(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::shape(op, format!("layouts differ: {:?} vs {:?}", self.shapes(), other.shapes())))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().all(|g| g.weight.is_finite() && g.bias.is_finite())
    }

    /// `self += scale · other`, elementwise.
    pub fn add_scaled(&mut self, other: &Self, scale: T) -> Result<()> {
        self.check_layout(other, "add_scaled")?;
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            for (ta, tb) in a.tensors_mut().into_iter().zip(b.tensors()) {
                for (x, &y) in ta.data_mut().iter_mut().zip(tb.data()) {
                    *x += scale * y;
                }
            }
        }
        Ok(())
    }

    /// Per-group inner products `⟨self_l, other_l⟩`, in double precision.
    pub fn group_dots(&self, other: &Self) -> Result<Vec<f64>> {
        self.check_layout(other, "group_dots")?;
        Ok(self.groups.iter().zip(&other.groups).map(|(a, b)| a.dot(b)).collect())
    }

    /// Flat view of every value, group by group, weight before bias.
    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.groups.iter().flat_map(|g| g.weight.data().iter().chain(g.bias.data()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.groups.iter_mut().flat_map(|g| {
            let ParamGroup { weight, bias } = g;
            weight.data_mut().iter_mut().chain(bias.data_mut().iter_mut())
        })
    }
}

/// Token ids, one row per example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMatrix {
    rows: usize,
    seq_len: usize,
    tokens: Vec<u32>,
}

impl TokenMatrix {
    pub fn new(rows: usize, seq_len: usize, tokens: Vec<u32>) -> Result<Self> {
        if seq_len == 0 || tokens.len() != rows * seq_len {
            return Err(Error::shape(
                "token_matrix",
                format!("{rows}×{seq_len} needs {} tokens, got {}", rows * seq_len, tokens.len()),
            ));
        }
        Ok(TokenMatrix { rows, seq_len, tokens })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn select(&self, rows: &[usize]) -> TokenMatrix {
        let mut tokens = Vec::with_capacity(rows.len() * self.seq_len);
        for &r in rows {
            tokens.extend_from_slice(self.row(r));
        }
        TokenMatrix { rows: rows.len(), seq_len: self.seq_len, tokens }
    }
}

/// Inputs with their class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: TokenMatrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: TokenMatrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::shape("batch", format!("{} inputs but {} labels", inputs.rows(), labels.len())));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch { inputs: self.inputs.select(rows), labels: rows.iter().map(|&r| self.labels[r]).collect() }
    }

    /// Row-wise concatenation of several batches with a common sequence length.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Batch>) -> Result<Batch> {
        let mut tokens = Vec::new();
        let mut labels = Vec::new();
        let mut seq_len = None;
        for part in parts {
            match seq_len {
                None => seq_len = Some(part.inputs.seq_len()),
                Some(s) if s != part.inputs.seq_len() => {
                    return Err(Error::shape("batch_concat", format!("sequence lengths {s} and {}", part.inputs.seq_len())))
                }
                _ => {}
            }
            tokens.extend_from_slice(part.inputs.tokens());
            labels.extend_from_slice(&part.labels);
        }
        let seq_len = seq_len.ok_or_else(|| Error::Input("nothing to concatenate".into()))?;
        Batch::new(TokenMatrix::new(labels.len(), seq_len, tokens)?, labels)
    }
}

/// Forward-pass mode. Dropout draws from the supplied generator in training mode.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    arch: ArchConfig,
    embedding: Tensor<T>,
    params: ParamSet<T>,
}

impl<T: Real> Model<T> {
    /// Assembles a model from existing tensors, checking every shape against `arch`.
    pub fn from_parts(arch: ArchConfig, embedding: Tensor<T>, params: ParamSet<T>) -> Result<Self> {
        arch.validate()?;
        if embedding.shape() != [arch.vocab_size, arch.embed_dim] {
            return Err(Error::shape(
                "model",
                format!("embedding {:?}, expected [{}, {}]", embedding.shape(), arch.vocab_size, arch.embed_dim),
            ));
        }
        if params.shapes() != arch.group_shapes() {
            return Err(Error::shape(
                "model",
                format!("parameter groups {:?}, expected {:?}", params.shapes(), arch.group_shapes()),
            ));
        }
        Ok(Model { arch, embedding, params })
    }

    /// Replaces the embedding table, e.g. with a pretrained one. Only meant for
    /// model construction; training never touches the embedding.
    pub fn with_embedding(self, embedding: Tensor<T>) -> Result<Self> {
        Model::from_parts(self.arch, embedding, self.params)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn embedding(&self) -> &Tensor<T> {
        &self.embedding
    }

    /// Gated parameter groups: the blocks followed by the head.
    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn head(&self) -> &ParamGroup<T> {
        self.params.group(self.arch.head_index())
    }

    pub fn head_mut(&mut self) -> &mut ParamGroup<T> {
        let h = self.arch.head_index();
        &mut self.params.groups_mut()[h]
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let groups = self
            .params
            .groups()
            .iter()
            .map(|g| ParamGroup { weight: g.weight.cast(), bias: g.bias.cast() })
            .collect();
        Model { arch: self.arch, embedding: self.embedding.cast(), params: ParamSet::new(groups) }
    }
}

fn uniform_tensor<T: Real>(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-scale..=scale)))
}

fn random_group<T: Real>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamGroup<T> {
    let s = 1.0 / libm::sqrt(fan_in as f64);
    ParamGroup { weight: uniform_tensor(&[fan_in, fan_out], s, rng), bias: uniform_tensor(&[fan_out], s, rng) }
}

/// Creates a model fully determined by `seed`.
///
/// With `base`, the embedding and blocks are copied from it and only the head is
/// drawn fresh. Without it every group is drawn uniformly from `[−s, s]` with
/// `s = 1/√fan_in` (the embedding, a one-hot lookup, uses `s = 1`).
pub fn init_model<T: Real>(arch: &ArchConfig, seed: u64, base: Option<&Model<T>>) -> Result<Model<T>> {
    arch.validate()?;
    let mut rng = seeded(seed);
    match base {
        Some(base) => {
            if base.arch != *arch {
                return Err(Error::Config(format!("base model architecture {:?} differs from {arch:?}", base.arch)));
            }
            let mut model = base.clone();
            *model.head_mut() = random_group(arch.hidden_dim, arch.num_classes, &mut rng);
            Ok(model)
        }
        None => {
            let embedding = uniform_tensor(&[arch.vocab_size, arch.embed_dim], 1.0, &mut rng);
            let mut groups: Vec<_> = (0..arch.num_blocks)
                .map(|i| {
                    let (fi, fo) = arch.block_dims(i);
                    random_group(fi, fo, &mut rng)
                })
                .collect();
            groups.push(random_group(arch.hidden_dim, arch.num_classes, &mut rng));
            Ok(Model { arch: *arch, embedding, params: ParamSet::new(groups) })
        }
    }
}

struct Trace<T> {
    /// Input to every block, plus the final hidden state as the last entry.
    hidden: Vec<Tensor<T>>,
    /// tanh output of every block.
    activations: Vec<Tensor<T>>,
    /// Inverted-dropout multipliers, if dropout was applied.
    mask: Option<Vec<T>>,
    head_input: Tensor<T>,
    logits: Tensor<T>,
}

fn mean_pool<T: Real>(model: &Model<T>, inputs: &TokenMatrix) -> Result<Tensor<T>> {
    let arch = &model.arch;
    if inputs.seq_len() != arch.seq_len {
        return Err(Error::shape("forward", format!("sequence length {}, expected {}", inputs.seq_len(), arch.seq_len)));
    }
    if inputs.rows() == 0 {
        return Err(Error::Input("empty input".into()));
    }
    if let Some(&bad) = inputs.tokens().iter().find(|&&t| t as usize >= arch.vocab_size) {
        return Err(Error::Input(format!("token {bad} out of range for vocabulary of {}", arch.vocab_size)));
    }
    let d = arch.embed_dim;
    let scale = T::one() / T::of(arch.seq_len as f64);
    let mut pooled = vec![T::zero(); inputs.rows() * d];
    for (i, out) in pooled.chunks_mut(d).enumerate() {
        for &tok in inputs.row(i) {
            let e = model.embedding.row(tok as usize);
            for (o, &v) in out.iter_mut().zip(e) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o *= scale;
        }
    }
    Tensor::matrix(inputs.rows(), d, pooled)
}

fn forward_trace<T: Real>(model: &Model<T>, inputs: &TokenMatrix, mode: Mode<'_>) -> Result<Trace<T>> {
    let arch = &model.arch;
    let mut h = mean_pool(model, inputs)?;
    let mut hidden = Vec::with_capacity(arch.num_blocks + 1);
    let mut activations = Vec::with_capacity(arch.num_blocks);
    for group in &model.params.groups()[..arch.num_blocks] {
        let a = affine_tanh(&h, &group.weight, &group.bias)?;
        let next = if h.same_shape(&a) {
            let mut sum = h.clone();
            for (x, &y) in sum.data_mut().iter_mut().zip(a.data()) {
                *x += y;
            }
            sum
        } else {
            a.clone()
        };
        hidden.push(h);
        activations.push(a);
        h = next;
    }
    let p = arch.dropout_rate;
    let (head_input, mask) = match mode {
        Mode::Train(rng) if p > 0.0 => {
            let keep = if p < 1.0 { T::of(1.0 / (1.0 - p)) } else { T::zero() };
            let mask: Vec<T> = (0..h.len()).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
            let mut dropped = h.clone();
            for (x, &m) in dropped.data_mut().iter_mut().zip(&mask) {
                *x *= m;
            }
            (dropped, Some(mask))
        }
        _ => (h.clone(), None),
    };
    hidden.push(h);
    let head = model.head();
    let logits = affine(&head_input, &head.weight, &head.bias)?;
    Ok(Trace { hidden, activations, mask, head_input, logits })
}

/// Class logits for every row of `inputs`. Deterministic in [`Mode::Eval`].
pub fn forward<T: Real>(model: &Model<T>, inputs: &TokenMatrix, mode: Mode<'_>) -> Result<Tensor<T>> {
    forward_trace(model, inputs, mode).map(|t| t.logits)
}

/// Mean cross-entropy over `batch` and its gradient for every gated group.
pub fn loss_and_grads<T: Real>(model: &Model<T>, batch: &Batch, mode: Mode<'_>) -> Result<(T, LayerGrads<T>)> {
    let trace = forward_trace(model, &batch.inputs, mode)?;
    let (loss, grad_logits) = softmax_cross_entropy(&trace.logits, &batch.labels)?;
    let arch = &model.arch;
    let head = model.head();
    let head_grads = affine_backward(&trace.head_input, &head.weight, &grad_logits)?;
    let mut grad_h = head_grads.input;
    if let Some(mask) = &trace.mask {
        for (g, &m) in grad_h.data_mut().iter_mut().zip(mask) {
            *g *= m;
        }
    }
    let mut groups = Vec::with_capacity(arch.num_groups());
    for i in (0..arch.num_blocks).rev() {
        let w = &model.params.group(i).weight;
        let x = &trace.hidden[i];
        let a = &trace.activations[i];
        let g = affine_tanh_backward(x, w, a, &grad_h)?;
        let mut grad_in = g.input;
        if x.same_shape(a) {
            for (gi, &go) in grad_in.data_mut().iter_mut().zip(grad_h.data()) {
                *gi += go;
            }
        }
        groups.push(ParamGroup { weight: g.weight, bias: g.bias });
        grad_h = grad_in;
    }
    groups.reverse();
    groups.push(ParamGroup { weight: head_grads.weight, bias: head_grads.bias });
    Ok((loss, ParamSet::new(groups)))
}

/// Mean loss and gradient over a whole dataset, computed in fixed-size chunks.
/// Chunk results are weighted by chunk size, so the result is the exact mean.
pub fn loss_and_grads_chunked<T: Real>(model: &Model<T>, data: &Batch, chunk: usize) -> Result<(T, LayerGrads<T>)> {
    if data.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let chunk = chunk.max(1);
    let n = data.len();
    if n <= chunk {
        return loss_and_grads(model, data, Mode::Eval);
    }
    let mut total_loss = T::zero();
    let mut total = model.params.zeros_like();
    let idx: Vec<usize> = (0..n).collect();
    for rows in idx.chunks(chunk) {
        let part = data.select(rows);
        let (loss, grads) = loss_and_grads(model, &part, Mode::Eval)?;
        let w = T::of(rows.len() as f64 / n as f64);
        total_loss += loss * w;
        total.add_scaled(&grads, w)?;
    }
    Ok((total_loss, total))
}

/// Mean loss over a dataset in evaluation mode, chunked like [`loss_and_grads_chunked`].
pub fn mean_loss<T: Real>(model: &Model<T>, data: &Batch, chunk: usize) -> Result<T> {
    if data.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let n = data.len();
    let idx: Vec<usize> = (0..n).collect();
    let mut total = T::zero();
    for rows in idx.chunks(chunk.max(1)) {
        let part = data.select(rows);
        let logits = forward(model, &part.inputs, Mode::Eval)?;
        let (loss, _) = softmax_cross_entropy(&logits, &part.labels)?;
        total += loss * T::of(rows.len() as f64 / n as f64);
    }
    Ok(total)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of rows whose arg-max logit is the label.
pub fn evaluate<T: Real>(model: &Model<T>, data: &Batch) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    const CHUNK: usize = 512;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for rows in idx.chunks(CHUNK) {
        let part = data.select(rows);
        let logits = forward(model, &part.inputs, Mode::Eval)?;
        correct += part.labels.iter().enumerate().filter(|&(i, &y)| argmax(logits.row(i)) == y).count();
    }
    Ok(correct as f64 / data.len() as f64)
}
