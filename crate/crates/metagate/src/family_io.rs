//! Line-oriented family export.
//!
//! ```text
//! metagate-family 1
//! config num_tasks=7 vocab_size=168 ... seed=17
//! task <id> anchor=<bool> shift=<n> angle=<radians> tokens=<t0>,<t1>,...
//! ...
//! example <task_id> <split> <label> <tok> <tok> ...
//! ...
//! end
//! ```
//!
//! `tokens` lists the surface token of every latent symbol. Examples appear in
//! task order, then split order (train, dev, test), then row order. Import
//! regenerates the labeling concept from the seed and rejects any example whose
//! label disagrees with it.

use std::fmt::Write as _;

use anyhow::{anyhow, bail, ensure, Context, Result};
use metagate_core::tasks::SurfaceTransform;
use metagate_core::{Batch, FamilyConfig, Split, TaskFamily, TaskInstance, TokenMatrix};

pub const MAGIC: &str = "metagate-family";
pub const VERSION: u32 = 1;

pub fn to_text(family: &TaskFamily) -> String {
    let c = family.config();
    let mut out = format!("{MAGIC} {VERSION}\n");
    let _ = writeln!(
        out,
        "config num_tasks={} vocab_size={} latent_vocab={} seq_len={} num_classes={} train_size={} dev_size={} test_size={} \
         anchor_multiplier={} difficulty={:?} max_rotation={:?} signal_fraction={:?} seed={}",
        c.num_tasks,
        c.vocab_size,
        c.latent_vocab,
        c.seq_len,
        c.num_classes,
        c.train_size,
        c.dev_size,
        c.test_size,
        c.anchor_multiplier,
        c.difficulty,
        c.max_rotation,
        c.signal_fraction,
        c.seed
    );
    for t in family.tasks() {
        let tokens: Vec<String> = t.transform.token_of.iter().map(ToString::to_string).collect();
        let _ = writeln!(
            out,
            "task {} anchor={} shift={} angle={:?} tokens={}",
            t.id,
            t.anchor,
            t.transform.shift,
            t.transform.angle,
            tokens.join(",")
        );
    }
    for t in family.tasks() {
        for split in Split::ALL {
            let data = t.split(split);
            for i in 0..data.len() {
                let _ = write!(out, "example {} {} {}", t.id, split.name(), data.labels[i]);
                for tok in data.inputs.row(i) {
                    let _ = write!(out, " {tok}");
                }
                out.push('\n');
            }
        }
    }
    out.push_str("end\n");
    out
}

fn kv<'a>(line: usize, item: &'a str, key: &str) -> Result<&'a str> {
    match item.split_once('=') {
        Some((k, v)) if k == key => Ok(v),
        _ => bail!("line {line}: expected `{key}=...`, found `{item}`"),
    }
}

fn parse_config(line: usize, rest: &str) -> Result<FamilyConfig> {
    let mut c = FamilyConfig::default();
    let items: Vec<&str> = rest.split_whitespace().collect();
    ensure!(items.len() == 13, "line {line}: config needs 13 entries, found {}", items.len());
    let get = |i: usize, key: &str| kv(line, items[i], key);
    let bad = |key: &str| format!("line {line}: bad {key}");
    c.num_tasks = get(0, "num_tasks")?.parse().with_context(|| bad("num_tasks"))?;
    c.vocab_size = get(1, "vocab_size")?.parse().with_context(|| bad("vocab_size"))?;
    c.latent_vocab = get(2, "latent_vocab")?.parse().with_context(|| bad("latent_vocab"))?;
    c.seq_len = get(3, "seq_len")?.parse().with_context(|| bad("seq_len"))?;
    c.num_classes = get(4, "num_classes")?.parse().with_context(|| bad("num_classes"))?;
    c.train_size = get(5, "train_size")?.parse().with_context(|| bad("train_size"))?;
    c.dev_size = get(6, "dev_size")?.parse().with_context(|| bad("dev_size"))?;
    c.test_size = get(7, "test_size")?.parse().with_context(|| bad("test_size"))?;
    c.anchor_multiplier = get(8, "anchor_multiplier")?.parse().with_context(|| bad("anchor_multiplier"))?;
    c.difficulty = get(9, "difficulty")?.parse().with_context(|| bad("difficulty"))?;
    c.max_rotation = get(10, "max_rotation")?.parse().with_context(|| bad("max_rotation"))?;
    c.signal_fraction = get(11, "signal_fraction")?.parse().with_context(|| bad("signal_fraction"))?;
    c.seed = get(12, "seed")?.parse().with_context(|| bad("seed"))?;
    Ok(c)
}

struct PendingTask {
    id: usize,
    anchor: bool,
    transform: SurfaceTransform,
    splits: [(Vec<u32>, Vec<usize>); 3],
}

pub fn from_text(text: &str) -> Result<TaskFamily> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
    let (_, header) = lines.next().ok_or_else(|| anyhow!("empty family file"))?;
    ensure!(header == format!("{MAGIC} {VERSION}"), "line 1: expected `{MAGIC} {VERSION}`, found `{header}`");
    let (n, config_line) = lines.next().ok_or_else(|| anyhow!("family file ends before the config line"))?;
    let rest = config_line.strip_prefix("config ").ok_or_else(|| anyhow!("line {n}: expected config line"))?;
    let cfg = parse_config(n, rest)?;
    let mut tasks: Vec<PendingTask> = Vec::new();
    let mut ended = false;
    for (n, line) in lines.by_ref() {
        if line == "end" {
            ended = true;
            break;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("task") => {
                let items: Vec<&str> = parts.collect();
                ensure!(items.len() == 5, "line {n}: task line needs 5 fields");
                let id: usize = items[0].parse().with_context(|| format!("line {n}: bad task id"))?;
                ensure!(!tasks.iter().any(|t| t.id == id), "line {n}: task {id} declared twice");
                let anchor: bool = kv(n, items[1], "anchor")?.parse().with_context(|| format!("line {n}: bad anchor"))?;
                let shift: usize = kv(n, items[2], "shift")?.parse().with_context(|| format!("line {n}: bad shift"))?;
                let angle: f64 = kv(n, items[3], "angle")?.parse().with_context(|| format!("line {n}: bad angle"))?;
                let token_of = kv(n, items[4], "tokens")?
                    .split(',')
                    .map(|t| t.parse::<u32>().with_context(|| format!("line {n}: bad token `{t}`")))
                    .collect::<Result<Vec<_>>>()?;
                ensure!(shift < cfg.seq_len, "line {n}: shift {shift} out of range");
                ensure!(token_of.iter().all(|&t| (t as usize) < cfg.vocab_size), "line {n}: token out of vocabulary");
                tasks.push(PendingTask { id, anchor, transform: SurfaceTransform { token_of, shift, angle }, splits: Default::default() });
            }
            Some("example") => {
                let id: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| anyhow!("line {n}: bad task id"))?;
                let split = parts.next().and_then(Split::parse).ok_or_else(|| anyhow!("line {n}: bad split"))?;
                let label: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| anyhow!("line {n}: bad label"))?;
                let tokens = parts
                    .map(|t| t.parse::<u32>().with_context(|| format!("line {n}: bad token `{t}`")))
                    .collect::<Result<Vec<_>>>()?;
                ensure!(tokens.len() == cfg.seq_len, "line {n}: expected {} tokens, found {}", cfg.seq_len, tokens.len());
                let task = tasks.iter_mut().find(|t| t.id == id).ok_or_else(|| anyhow!("line {n}: undeclared task {id}"))?;
                let slot = &mut task.splits[Split::ALL.iter().position(|&s| s == split).expect("split listed in ALL")];
                slot.0.extend(tokens);
                slot.1.push(label);
            }
            _ => bail!("line {n}: unrecognized line `{line}`"),
        }
    }
    ensure!(ended, "family file is truncated (missing `end`)");
    if let Some((n, _)) = lines.next() {
        bail!("line {n}: content after `end`");
    }
    let tasks = tasks
        .into_iter()
        .map(|t| {
            let [train, dev, test] = t.splits.map(|(tokens, labels)| {
                let rows = labels.len();
                TokenMatrix::new(rows, cfg.seq_len, tokens).and_then(|m| Batch::new(m, labels))
            });
            Ok(TaskInstance {
                id: t.id,
                anchor: t.anchor,
                transform: t.transform,
                train: train.with_context(|| format!("task {} train split", t.id))?,
                dev: dev.with_context(|| format!("task {} dev split", t.id))?,
                test: test.with_context(|| format!("task {} test split", t.id))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskFamily::from_tasks(cfg, tasks)?)
}
