//! Run configuration: a flat `key = value` text file with dotted keys.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default (see [`KEYS`]); unknown keys are rejected. Each key can also be set
//! from the environment as `METAGATE_` followed by the key in upper case with
//! `.` replaced by `__`, e.g. `METAGATE_PROTOCOL__INNER_STEPS=5`. Precedence is
//! defaults, then file, then environment, then command-line flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use metagate_core::{ArchConfig, FamilyConfig, GateLayout, Method, OptimizerKind, Precision, ProtocolConfig};
use thiserror::Error;

pub const ENV_PREFIX: &str = "METAGATE_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {msg}")]
    Invalid { key: String, value: String, msg: String },
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("family.num_tasks", "tasks in the generated family"),
    ("family.vocab_size", "surface vocabulary size"),
    ("family.latent_vocab", "latent symbols shared by all tasks"),
    ("family.seq_len", "tokens per example"),
    ("family.num_classes", "label classes"),
    ("family.train_size", "train examples per non-anchor task"),
    ("family.dev_size", "dev examples per task"),
    ("family.test_size", "test examples per task"),
    ("family.anchor_multiplier", "anchor train size as a multiple of train_size"),
    ("family.difficulty", "surface distance between tasks, 0 to 1"),
    ("family.max_rotation", "largest embedding rotation in radians"),
    ("family.signal_fraction", "fraction of latent symbols that vote for a class"),
    ("family.seed", "base seed of the family; mixed with each run seed"),
    ("arch.embed_dim", "embedding width"),
    ("arch.num_blocks", "gated tanh blocks"),
    ("arch.hidden_dim", "block width"),
    ("arch.dropout_rate", "dropout on the final block output"),
    ("protocol.meta_epochs", "meta-training iterations"),
    ("protocol.inner_steps", "gated steps per episode"),
    ("protocol.batch_size", "examples per batch"),
    ("protocol.anchor_epochs", "epochs over the anchor task in stage 1"),
    ("protocol.auxiliary_epochs", "epochs over the auxiliary tasks in stage 2"),
    ("protocol.optimizer", "base optimizer: adam or sgd"),
    ("protocol.learning_rate", "base optimizer learning rate"),
    ("protocol.beta1", "Adam first-moment decay"),
    ("protocol.beta2", "Adam second-moment decay"),
    ("protocol.epsilon", "Adam stabilizer"),
    ("protocol.meta_lr", "meta-optimizer learning rate"),
    ("protocol.gate_layout", "gate granularity for meta-training: layer_wise or shared"),
    ("protocol.epochs_mode", "read meta_epochs as passes over the source data"),
    ("protocol.eval_chunk", "rows per forward pass for the held-out loss"),
    ("sources", "source task ids; must include the anchor task 0"),
    ("targets", "zero-shot target task ids"),
    ("methods", "methods to run"),
    ("seeds", "run seeds, as a list or a range A..B"),
    ("out_dir", "output directory"),
    ("precision", "training precision: single or double"),
    ("record_wallclock", "write wall-clock seconds into reports"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub family: FamilyConfig,
    pub arch: ArchConfig,
    pub protocol: ProtocolConfig,
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub precision: Precision,
    /// Wall-clock time makes reports machine-dependent, so it is off by default.
    pub record_wallclock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let family = FamilyConfig::default();
        RunConfig {
            family,
            arch: ArchConfig {
                vocab_size: family.vocab_size,
                seq_len: family.seq_len,
                num_classes: family.num_classes,
                ..ArchConfig::default()
            },
            protocol: ProtocolConfig::default(),
            sources: vec![0, 1, 2],
            targets: (3..family.num_tasks).collect(),
            methods: vec![Method::Meta, Method::FullFinetune, Method::SharedGate, Method::JointTrain],
            seeds: (0..5).collect(),
            out_dir: PathBuf::from("runs"),
            precision: Precision::Single,
            record_wallclock: false,
        }
    }
}

fn invalid(key: &str, value: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.into(), value: value.into(), msg: msg.into() }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| invalid(key, value, e.to_string()))
}

fn boolean(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(invalid(key, value, "expected true or false")),
    }
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| num(key, s)).collect()
}

/// Parses `A..B` (half-open) or a comma-separated list.
pub fn parse_seeds(value: &str) -> Result<Vec<u64>, ConfigError> {
    if let Some((a, b)) = value.split_once("..") {
        let (a, b): (u64, u64) = (num("seeds", a.trim())?, num("seeds", b.trim())?);
        if a >= b {
            return Err(invalid("seeds", value, "empty range"));
        }
        return Ok((a..b).collect());
    }
    let seeds = list("seeds", value)?;
    if seeds.is_empty() {
        return Err(invalid("seeds", value, "no seeds given"));
    }
    Ok(seeds)
}

fn f64_text(v: f64) -> String {
    format!("{v:?}")
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Defaults, then `path` if given, then environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
            cfg.apply_text(&text)?;
        }
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, msg: format!("expected `key = value`, got `{line}`") })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        for (key, _) in KEYS {
            if let Some(value) = lookup(&env_name(key)) {
                self.set(key, value.trim())?;
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let f = &mut self.family;
        let a = &mut self.arch;
        let p = &mut self.protocol;
        match key {
            "family.num_tasks" => f.num_tasks = num(key, value)?,
            "family.vocab_size" => {
                f.vocab_size = num(key, value)?;
                a.vocab_size = f.vocab_size;
            }
            "family.latent_vocab" => f.latent_vocab = num(key, value)?,
            "family.seq_len" => {
                f.seq_len = num(key, value)?;
                a.seq_len = f.seq_len;
            }
            "family.num_classes" => {
                f.num_classes = num(key, value)?;
                a.num_classes = f.num_classes;
            }
            "family.train_size" => f.train_size = num(key, value)?,
            "family.dev_size" => f.dev_size = num(key, value)?,
            "family.test_size" => f.test_size = num(key, value)?,
            "family.anchor_multiplier" => f.anchor_multiplier = num(key, value)?,
            "family.difficulty" => f.difficulty = num(key, value)?,
            "family.max_rotation" => f.max_rotation = num(key, value)?,
            "family.signal_fraction" => f.signal_fraction = num(key, value)?,
            "family.seed" => f.seed = num(key, value)?,
            "arch.embed_dim" => a.embed_dim = num(key, value)?,
            "arch.num_blocks" => a.num_blocks = num(key, value)?,
            "arch.hidden_dim" => a.hidden_dim = num(key, value)?,
            "arch.dropout_rate" => a.dropout_rate = num(key, value)?,
            "protocol.meta_epochs" => p.meta_epochs = num(key, value)?,
            "protocol.inner_steps" => p.inner_steps = num(key, value)?,
            "protocol.batch_size" => p.batch_size = num(key, value)?,
            "protocol.anchor_epochs" => p.anchor_epochs = num(key, value)?,
            "protocol.auxiliary_epochs" => p.auxiliary_epochs = num(key, value)?,
            "protocol.optimizer" => {
                p.optimizer.kind = OptimizerKind::parse(value).ok_or_else(|| invalid(key, value, "expected adam or sgd"))?
            }
            "protocol.learning_rate" => p.optimizer.learning_rate = num(key, value)?,
            "protocol.beta1" => p.optimizer.beta1 = num(key, value)?,
            "protocol.beta2" => p.optimizer.beta2 = num(key, value)?,
            "protocol.epsilon" => p.optimizer.epsilon = num(key, value)?,
            "protocol.meta_lr" => p.meta_lr = num(key, value)?,
            "protocol.gate_layout" => {
                p.gate_layout =
                    GateLayout::parse(value).ok_or_else(|| invalid(key, value, "expected layer_wise or shared"))?
            }
            "protocol.epochs_mode" => p.epochs_mode = boolean(key, value)?,
            "protocol.eval_chunk" => p.eval_chunk = num(key, value)?,
            "sources" => self.sources = list(key, value)?,
            "targets" => self.targets = list(key, value)?,
            "methods" => {
                self.methods = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| Method::parse(s).ok_or_else(|| invalid(key, s, "unknown method")))
                    .collect::<Result<_, _>>()?
            }
            "seeds" => self.seeds = parse_seeds(value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "precision" => {
                self.precision = Precision::parse(value).ok_or_else(|| invalid(key, value, "expected single or double"))?
            }
            "record_wallclock" => self.record_wallclock = boolean(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Current value of every key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let f = &self.family;
        let a = &self.arch;
        let p = &self.protocol;
        let o = &p.optimizer;
        let values = [
            f.num_tasks.to_string(),
            f.vocab_size.to_string(),
            f.latent_vocab.to_string(),
            f.seq_len.to_string(),
            f.num_classes.to_string(),
            f.train_size.to_string(),
            f.dev_size.to_string(),
            f.test_size.to_string(),
            f.anchor_multiplier.to_string(),
            f64_text(f.difficulty),
            f64_text(f.max_rotation),
            f64_text(f.signal_fraction),
            f.seed.to_string(),
            a.embed_dim.to_string(),
            a.num_blocks.to_string(),
            a.hidden_dim.to_string(),
            f64_text(a.dropout_rate),
            p.meta_epochs.to_string(),
            p.inner_steps.to_string(),
            p.batch_size.to_string(),
            p.anchor_epochs.to_string(),
            p.auxiliary_epochs.to_string(),
            o.kind.name().to_string(),
            f64_text(o.learning_rate),
            f64_text(o.beta1),
            f64_text(o.beta2),
            f64_text(o.epsilon),
            f64_text(p.meta_lr),
            p.gate_layout.name().to_string(),
            p.epochs_mode.to_string(),
            p.eval_chunk.to_string(),
            join(&self.sources),
            join(&self.targets),
            self.methods.iter().map(Method::name).collect::<Vec<_>>().join(","),
            join(&self.seeds),
            self.out_dir.display().to_string(),
            self.precision.name().to_string(),
            self.record_wallclock.to_string(),
        ];
        KEYS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    /// The configuration as a file that [`RunConfig::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, msg: String| Err(invalid(key, "", msg));
        if let Err(e) = self.family.validate() {
            return bad("family", e.to_string());
        }
        if let Err(e) = self.arch.validate() {
            return bad("arch", e.to_string());
        }
        if let Err(e) = self.protocol.validate() {
            return bad("protocol", e.to_string());
        }
        let k = self.family.num_tasks;
        if !self.sources.contains(&0) {
            return bad("sources", "the anchor task 0 must be a source".into());
        }
        if self.sources.len() < 2 {
            return bad("sources", "need the anchor and at least one auxiliary task".into());
        }
        for (key, ids) in [("sources", &self.sources), ("targets", &self.targets)] {
            if let Some(id) = ids.iter().find(|&&id| id >= k) {
                return bad(key, format!("task {id} does not exist in a family of {k}"));
            }
            let mut sorted = ids.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != ids.len() {
                return bad(key, "duplicate task id".into());
            }
        }
        if let Some(id) = self.targets.iter().find(|id| self.sources.contains(id)) {
            return bad("targets", format!("task {id} is also a source"));
        }
        if self.targets.is_empty() {
            return bad("targets", "no zero-shot targets".into());
        }
        if self.methods.is_empty() {
            return bad("methods", "no methods".into());
        }
        for m in &self.methods {
            if let Method::FreezeBottom(n) = m {
                if *n > self.arch.num_blocks {
                    return bad("methods", format!("cannot freeze {n} of {} blocks", self.arch.num_blocks));
                }
            }
        }
        if self.seeds.is_empty() {
            return bad("seeds", "no seeds".into());
        }
        Ok(())
    }
}

/// Environment variable that overrides `key`.
pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_uppercase().replace('.', "__"))
}
