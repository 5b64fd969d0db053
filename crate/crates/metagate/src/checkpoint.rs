//! Checkpoint text container.
//!
//! ```text
//! metagate-checkpoint 1
//! kind model|gates|meta_state
//! precision single|double
//! <kind-specific header lines>
//! tensor <name> <dim> <dim> ...
//! <one value per line>
//! ...
//! end
//! ```
//!
//! Values are written in scientific notation with 17 significant digits for
//! double and 9 for single, which reads back bit-exactly. Gates and meta state
//! are always double. A file without the closing `end` line is rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::Lines;

use metagate_core::{ArchConfig, GateLayout, GateParams, MetaState, Model, ParamGroup, ParamSet, Precision, Real, Tensor};
use thiserror::Error;

pub const MAGIC: &str = "metagate-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: String },
    #[error("checkpoint field `{field}`: {msg}")]
    Field { field: String, msg: String },
    #[error("checkpoint ends early while reading `{field}`")]
    Truncated { field: String },
    #[error("checkpoint field `{field}` has shape {found:?}, expected {expected:?}")]
    Shape { field: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint holds {found}, expected {expected}")]
    Kind { expected: &'static str, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn field_err(field: &str, msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Field { field: field.into(), msg: msg.into() }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelPayload {
    Single(Model<f32>),
    Double(Model<f64>),
}

impl ModelPayload {
    pub fn precision(&self) -> Precision {
        match self {
            ModelPayload::Single(_) => Precision::Single,
            ModelPayload::Double(_) => Precision::Double,
        }
    }

    pub fn arch(&self) -> &ArchConfig {
        match self {
            ModelPayload::Single(m) => m.arch(),
            ModelPayload::Double(m) => m.arch(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Model(ModelPayload),
    Gates(GateParams),
    MetaState(MetaState),
}

impl Checkpoint {
    pub fn kind(&self) -> &'static str {
        match self {
            Checkpoint::Model(_) => "model",
            Checkpoint::Gates(_) => "gates",
            Checkpoint::MetaState(_) => "meta_state",
        }
    }
}

trait Value: Real {
    fn text(self) -> String;
}

impl Value for f32 {
    fn text(self) -> String {
        format!("{self:.8e}")
    }
}

impl Value for f64 {
    fn text(self) -> String {
        format!("{self:.16e}")
    }
}

fn write_values<T: Value>(out: &mut String, name: &str, shape: &[usize], values: impl IntoIterator<Item = T>) {
    let dims: Vec<String> = shape.iter().map(ToString::to_string).collect();
    let _ = writeln!(out, "tensor {name} {}", dims.join(" "));
    for v in values {
        out.push_str(&v.text());
        out.push('\n');
    }
}

fn write_model<T: Value>(out: &mut String, model: &Model<T>) {
    let a = model.arch();
    let _ = writeln!(
        out,
        "arch vocab_size={} embed_dim={} num_blocks={} hidden_dim={} num_classes={} seq_len={} dropout_rate={:?}",
        a.vocab_size, a.embed_dim, a.num_blocks, a.hidden_dim, a.num_classes, a.seq_len, a.dropout_rate
    );
    let e = model.embedding();
    write_values(out, "embedding", e.shape(), e.data().iter().copied());
    for (i, g) in model.params().groups().iter().enumerate() {
        write_values(out, &format!("group{i}.weight"), g.weight.shape(), g.weight.data().iter().copied());
        write_values(out, &format!("group{i}.bias"), g.bias.shape(), g.bias.data().iter().copied());
    }
}

pub fn to_text(ckpt: &Checkpoint) -> String {
    let mut out = format!("{MAGIC} {VERSION}\nkind {}\n", ckpt.kind());
    match ckpt {
        Checkpoint::Model(ModelPayload::Single(m)) => {
            out.push_str("precision single\n");
            write_model(&mut out, m);
        }
        Checkpoint::Model(ModelPayload::Double(m)) => {
            out.push_str("precision double\n");
            write_model(&mut out, m);
        }
        Checkpoint::Gates(phi) => {
            out.push_str("precision double\n");
            let _ = writeln!(out, "layout {}", phi.layout().name());
            let _ = writeln!(out, "groups {}", phi.num_groups());
            write_values(&mut out, "phi", &[phi.len()], phi.values().iter().copied());
        }
        Checkpoint::MetaState(s) => {
            out.push_str("precision double\n");
            let _ = writeln!(out, "step {}", s.step);
            let _ = writeln!(out, "gates {}", s.m.len());
            for (name, v) in [("learning_rate", s.learning_rate), ("beta1", s.beta1), ("beta2", s.beta2), ("epsilon", s.epsilon)] {
                let _ = writeln!(out, "{name} {}", v.text());
            }
            write_values(&mut out, "m", &[s.m.len()], s.m.iter().copied());
            write_values(&mut out, "v", &[s.v.len()], s.v.iter().copied());
        }
    }
    out.push_str("end\n");
    out
}

struct Reader<'a> {
    lines: Lines<'a>,
}

impl<'a> Reader<'a> {
    fn line(&mut self, field: &str) -> Result<&'a str, CheckpointError> {
        self.lines.next().map(str::trim_end).ok_or_else(|| CheckpointError::Truncated { field: field.into() })
    }

    /// Reads `<key> <rest>` and returns `rest`.
    fn keyed(&mut self, key: &str) -> Result<&'a str, CheckpointError> {
        let line = self.line(key)?;
        match line.split_once(' ') {
            Some((k, rest)) if k == key => Ok(rest),
            _ => Err(field_err(key, format!("expected `{key} ...`, found `{line}`"))),
        }
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, CheckpointError> {
        let v = self.keyed(key)?;
        v.parse().map_err(|_| field_err(key, format!("cannot parse `{v}`")))
    }

    fn tensor<T: Real + std::str::FromStr>(&mut self, name: &str, expected: &[usize]) -> Result<Vec<T>, CheckpointError> {
        let header = self.keyed("tensor").map_err(|e| match e {
            CheckpointError::Truncated { .. } => CheckpointError::Truncated { field: name.into() },
            _ => field_err(name, "missing tensor header"),
        })?;
        let mut parts = header.split_whitespace();
        let found_name = parts.next().unwrap_or("");
        if found_name != name {
            return Err(field_err(name, format!("found tensor `{found_name}` instead")));
        }
        let shape: Vec<usize> = parts
            .map(|d| d.parse().map_err(|_| field_err(name, format!("bad dimension `{d}`"))))
            .collect::<Result<_, _>>()?;
        if shape != expected {
            return Err(CheckpointError::Shape { field: name.into(), expected: expected.to_vec(), found: shape });
        }
        let n: usize = shape.iter().product();
        (0..n)
            .map(|i| {
                let line = self.line(name)?;
                let v: T = line.trim().parse().map_err(|_| field_err(name, format!("value {i}: cannot parse `{line}`")))?;
                if !v.is_finite() {
                    return Err(field_err(name, format!("value {i} is not finite")));
                }
                Ok(v)
            })
            .collect()
    }

    fn end(&mut self) -> Result<(), CheckpointError> {
        match self.lines.next() {
            Some("end") => Ok(()),
            Some(other) => Err(field_err("end", format!("expected `end`, found `{other}`"))),
            None => Err(CheckpointError::Truncated { field: "end".into() }),
        }
    }
}

fn parse_arch(text: &str) -> Result<ArchConfig, CheckpointError> {
    let mut arch = ArchConfig::default();
    let mut seen = 0;
    for kv in text.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| field_err("arch", format!("bad entry `{kv}`")))?;
        let bad = || field_err(&format!("arch.{k}"), format!("cannot parse `{v}`"));
        match k {
            "vocab_size" => arch.vocab_size = v.parse().map_err(|_| bad())?,
            "embed_dim" => arch.embed_dim = v.parse().map_err(|_| bad())?,
            "num_blocks" => arch.num_blocks = v.parse().map_err(|_| bad())?,
            "hidden_dim" => arch.hidden_dim = v.parse().map_err(|_| bad())?,
            "num_classes" => arch.num_classes = v.parse().map_err(|_| bad())?,
            "seq_len" => arch.seq_len = v.parse().map_err(|_| bad())?,
            "dropout_rate" => arch.dropout_rate = v.parse().map_err(|_| bad())?,
            _ => return Err(field_err("arch", format!("unknown entry `{k}`"))),
        }
        seen += 1;
    }
    if seen != 7 {
        return Err(field_err("arch", "expected 7 entries"));
    }
    arch.validate().map_err(|e| field_err("arch", e.to_string()))?;
    Ok(arch)
}

fn read_model<T: Real + std::str::FromStr>(r: &mut Reader<'_>) -> Result<Model<T>, CheckpointError> {
    let arch = parse_arch(r.keyed("arch")?)?;
    let emb = r.tensor::<T>("embedding", &[arch.vocab_size, arch.embed_dim])?;
    let embedding = Tensor::new(vec![arch.vocab_size, arch.embed_dim], emb).map_err(|e| field_err("embedding", e.to_string()))?;
    let mut groups = Vec::with_capacity(arch.num_groups());
    for (i, (ws, bs)) in arch.group_shapes().into_iter().enumerate() {
        let (wn, bn) = (format!("group{i}.weight"), format!("group{i}.bias"));
        let w = r.tensor::<T>(&wn, &ws)?;
        let b = r.tensor::<T>(&bn, &bs)?;
        groups.push(ParamGroup {
            weight: Tensor::new(ws, w).map_err(|e| field_err(&wn, e.to_string()))?,
            bias: Tensor::new(bs, b).map_err(|e| field_err(&bn, e.to_string()))?,
        });
    }
    Model::from_parts(arch, embedding, ParamSet::new(groups)).map_err(|e| field_err("model", e.to_string()))
}

pub fn from_text(text: &str) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { lines: text.lines() };
    let magic = r.line("header")?;
    match magic.split_once(' ') {
        Some((MAGIC, v)) if v == VERSION.to_string() => {}
        Some((MAGIC, v)) => return Err(CheckpointError::Version { found: v.into() }),
        _ => return Err(field_err("header", format!("not a checkpoint: `{magic}`"))),
    }
    let kind = r.keyed("kind")?;
    let precision = r.keyed("precision")?;
    let precision = Precision::parse(precision).ok_or_else(|| field_err("precision", format!("unknown `{precision}`")))?;
    let ckpt = match (kind, precision) {
        ("model", Precision::Single) => Checkpoint::Model(ModelPayload::Single(read_model(&mut r)?)),
        ("model", Precision::Double) => Checkpoint::Model(ModelPayload::Double(read_model(&mut r)?)),
        ("gates", Precision::Double) => {
            let layout = r.keyed("layout")?;
            let layout = GateLayout::parse(layout).ok_or_else(|| field_err("layout", format!("unknown `{layout}`")))?;
            let groups: usize = r.parse("groups")?;
            let phi = r.tensor::<f64>("phi", &[layout.num_gates(groups)])?;
            Checkpoint::Gates(GateParams::new(layout, groups, phi).map_err(|e| field_err("phi", e.to_string()))?)
        }
        ("meta_state", Precision::Double) => {
            let step = r.parse("step")?;
            let n: usize = r.parse("gates")?;
            let learning_rate = r.parse("learning_rate")?;
            let beta1 = r.parse("beta1")?;
            let beta2 = r.parse("beta2")?;
            let epsilon = r.parse("epsilon")?;
            let m = r.tensor::<f64>("m", &[n])?;
            let v = r.tensor::<f64>("v", &[n])?;
            Checkpoint::MetaState(MetaState { step, learning_rate, beta1, beta2, epsilon, m, v })
        }
        ("gates" | "meta_state", Precision::Single) => return Err(field_err("precision", format!("{kind} is stored in double"))),
        (other, _) => return Err(field_err("kind", format!("unknown payload `{other}`"))),
    };
    r.end()?;
    Ok(ckpt)
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    std::fs::write(path, to_text(ckpt))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    from_text(&std::fs::read_to_string(path)?)
}

pub fn load_gates(path: &Path) -> Result<GateParams, CheckpointError> {
    match load(path)? {
        Checkpoint::Gates(g) => Ok(g),
        other => Err(CheckpointError::Kind { expected: "gates", found: other.kind().into() }),
    }
}

/// Loads a model and checks it against the architecture of the current run.
pub fn load_model(path: &Path, arch: &ArchConfig) -> Result<ModelPayload, CheckpointError> {
    let payload = match load(path)? {
        Checkpoint::Model(m) => m,
        other => return Err(CheckpointError::Kind { expected: "model", found: other.kind().into() }),
    };
    let found = payload.arch();
    if found.num_groups() != arch.num_groups() {
        return Err(CheckpointError::Shape {
            field: "arch.num_blocks".into(),
            expected: vec![arch.num_blocks],
            found: vec![found.num_blocks],
        });
    }
    if found != arch {
        return Err(field_err("arch", format!("checkpoint architecture {found:?} differs from run architecture {arch:?}")));
    }
    Ok(payload)
}
