//! Command-line interface.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use metagate_core::learner::evaluate;
use metagate_core::meta::gate_values;
use metagate_core::protocol::{finetune, meta_train, run_method, stage_one, zero_shot_eval, FineTuned};
use metagate_core::{Error as CoreError, Method, Model, Precision, Real, TaskFamily};
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint, ModelPayload};
use crate::config::{parse_seeds, ConfigError, RunConfig};
use crate::{family_io, report, runner, selftest};

#[derive(Debug, Parser)]
#[command(name = "metagate", version, about = "Layer-gated meta-optimizer experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Single run seed.
    #[arg(long, global = true, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Run seeds as a range `A..B` or a list `1,2,3`.
    #[arg(long, global = true)]
    pub seeds: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Method to run (meta, full_finetune, freeze_bottom_K, shared_gate, joint_train).
    #[arg(long, global = true)]
    pub method: Option<String>,
    /// Training precision.
    #[arg(long, global = true, value_parser = ["single", "double"])]
    pub precision: Option<String>,
    /// Read meta_epochs as passes over the source data.
    #[arg(long, global = true)]
    pub epochs_mode: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a task family and write it as a family file.
    GenTasks {
        #[command(flatten)]
        common: Common,
    },
    /// Meta-train the gates; writes phi.ckpt, meta_state.ckpt and episodes.jsonl.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        /// Use this family file instead of generating one.
        #[arg(long)]
        family: Option<PathBuf>,
    },
    /// Two-stage fine-tuning; writes model.ckpt.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        family: Option<PathBuf>,
        /// Fixed gates for stage 2 from a gates checkpoint.
        #[arg(long, conflicts_with = "method")]
        gates: Option<PathBuf>,
    },
    /// Zero-shot evaluation of a model checkpoint; writes eval.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        family: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
    },
    /// Run every configured method over every seed; writes results.csv,
    /// summary.csv and gates.jsonl.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Recompute summary.csv from a results.csv.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory holding results.csv (defaults to the output directory).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run the oracle suites and print one line per suite.
    Selftest {
        #[command(flatten)]
        common: Common,
    },
}

/// Process exit status for an error.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        match cause.downcast_ref::<CoreError>() {
            Some(CoreError::NumericFault { .. }) => return 3,
            Some(CoreError::Config(_)) => return 2,
            _ => {}
        }
    }
    1
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(s) = &common.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(m) = &common.method {
        let method = Method::parse(m).ok_or_else(|| ConfigError::Invalid {
            key: "--method".into(),
            value: m.clone(),
            msg: "unknown method".into(),
        })?;
        cfg.methods = vec![method];
    }
    if let Some(p) = &common.precision {
        cfg.precision = Precision::parse(p).expect("restricted by clap");
    }
    if common.epochs_mode {
        cfg.protocol.epochs_mode = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    Ok(&cfg.out_dir)
}

fn first_seed(cfg: &RunConfig) -> u64 {
    cfg.seeds[0]
}

/// Full family and source subset, from a file or generated for `seed`.
fn families(cfg: &RunConfig, file: Option<&Path>, seed: u64) -> Result<(TaskFamily, TaskFamily)> {
    match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let family = family_io::from_text(&text).with_context(|| format!("parsing {}", path.display()))?;
            let f = family.config();
            if f.vocab_size != cfg.arch.vocab_size || f.seq_len != cfg.arch.seq_len || f.num_classes != cfg.arch.num_classes {
                bail!(ConfigError::Invalid {
                    key: "--family".into(),
                    value: path.display().to_string(),
                    msg: "family dimensions do not match the configured architecture".into(),
                });
            }
            let sources = family.subset(&cfg.sources)?;
            Ok((family, sources))
        }
        None => runner::build_family(cfg, seed),
    }
}

#[derive(Serialize)]
struct EpisodeLine<'a> {
    episode: usize,
    held_out: usize,
    test_loss: f64,
    lambda: &'a [f64],
    meta_grad: &'a [f64],
}

fn cmd_meta_train<T: Real>(cfg: &RunConfig, family: Option<&Path>) -> Result<()> {
    let seed = first_seed(cfg);
    let (_, sources) = families(cfg, family, seed)?;
    let stage1: Model<T> = stage_one(&sources, &cfg.arch, &cfg.protocol, seed)?;
    let outcome = meta_train(&sources, &stage1, &metagate_core::ProtocolConfig { seed, ..cfg.protocol })?;
    let dir = out_dir(cfg)?;
    checkpoint::save(&dir.join("phi.ckpt"), &Checkpoint::Gates(outcome.phi.clone()))?;
    checkpoint::save(&dir.join("meta_state.ckpt"), &Checkpoint::MetaState(outcome.state.clone()))?;
    let mut jsonl = String::new();
    for e in &outcome.history {
        let line = EpisodeLine {
            episode: e.episode,
            held_out: e.held_out,
            test_loss: e.test_loss,
            lambda: &e.gates,
            meta_grad: &e.meta_grad,
        };
        jsonl.push_str(&serde_json::to_string(&line)?);
        jsonl.push('\n');
    }
    std::fs::write(dir.join("episodes.jsonl"), jsonl)?;
    let lambda = gate_values(&outcome.phi).per_group_rates();
    println!("episodes={} lambda={lambda:?}", outcome.history.len());
    Ok(())
}

fn wrap<T: Real>(model: Model<T>) -> ModelPayload {
    match T::PRECISION {
        Precision::Single => ModelPayload::Single(model.cast()),
        Precision::Double => ModelPayload::Double(model.cast()),
    }
}

fn cmd_finetune<T: Real>(cfg: &RunConfig, family: Option<&Path>, gates: Option<&Path>) -> Result<()> {
    let seed = first_seed(cfg);
    let (_, sources) = families(cfg, family, seed)?;
    let model: Model<T> = match gates {
        Some(path) => {
            let phi = checkpoint::load_gates(path)?;
            if phi.num_groups() != cfg.arch.num_groups() {
                bail!(CoreError::Shape {
                    op: "finetune",
                    detail: format!("gates cover {} groups, architecture has {}", phi.num_groups(), cfg.arch.num_groups()),
                });
            }
            finetune(&sources, &cfg.arch, Some(&gate_values(&phi)), &cfg.protocol, seed)?.model
        }
        None => {
            let method = cfg.methods.first().copied().unwrap_or(Method::FullFinetune);
            let stage1 = stage_one(&sources, &cfg.arch, &cfg.protocol, seed)?;
            run_method(&sources, &stage1, method, &cfg.protocol, seed)?.tuned.model
        }
    };
    let dir = out_dir(cfg)?;
    checkpoint::save(&dir.join("model.ckpt"), &Checkpoint::Model(wrap(model)))?;
    println!("wrote {}", dir.join("model.ckpt").display());
    Ok(())
}

fn eval_rows<T: Real>(cfg: &RunConfig, family: &TaskFamily, model: Model<T>) -> Result<String> {
    let tuned = FineTuned { model, sources: cfg.sources.clone() };
    let mut out = String::from("target_task,accuracy\n");
    for &t in &cfg.targets {
        let task = family.task(t).with_context(|| format!("family has no task {t}"))?;
        out.push_str(&format!("{t},{}\n", zero_shot_eval(&tuned, task)?));
    }
    for &s in &cfg.sources {
        let task = family.task(s).with_context(|| format!("family has no task {s}"))?;
        eprintln!("source task {s}: test accuracy {}", evaluate(&tuned.model, &task.test)?);
    }
    Ok(out)
}

fn cmd_eval(cfg: &RunConfig, family: Option<&Path>, model: &Path) -> Result<()> {
    let (full, _) = families(cfg, family, first_seed(cfg))?;
    let csv = match checkpoint::load_model(model, &cfg.arch)? {
        ModelPayload::Single(m) => eval_rows(cfg, &full, m)?,
        ModelPayload::Double(m) => eval_rows(cfg, &full, m)?,
    };
    let dir = out_dir(cfg)?;
    std::fs::write(dir.join("eval.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_report(cfg: &RunConfig, input: Option<&Path>) -> Result<()> {
    let input = input.unwrap_or(&cfg.out_dir).join("results.csv");
    let text = std::fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
    let rows = report::parse_results(&text)?;
    let summary = report::summarize(&rows)?;
    let csv = report::summary_csv(&summary);
    let dir = out_dir(cfg)?;
    std::fs::write(dir.join("summary.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenTasks { common } => {
            let cfg = resolve(&common)?;
            let seed = first_seed(&cfg);
            let family = metagate_core::tasks::make_family(&runner::family_config(&cfg, seed))?;
            let dir = out_dir(&cfg)?;
            let path = dir.join(format!("family-seed{seed}.txt"));
            std::fs::write(&path, family_io::to_text(&family))?;
            println!("wrote {}", path.display());
        }
        Command::MetaTrain { common, family } => {
            let cfg = resolve(&common)?;
            match cfg.precision {
                Precision::Single => cmd_meta_train::<f32>(&cfg, family.as_deref())?,
                Precision::Double => cmd_meta_train::<f64>(&cfg, family.as_deref())?,
            }
        }
        Command::Finetune { common, family, gates } => {
            let cfg = resolve(&common)?;
            match cfg.precision {
                Precision::Single => cmd_finetune::<f32>(&cfg, family.as_deref(), gates.as_deref())?,
                Precision::Double => cmd_finetune::<f64>(&cfg, family.as_deref(), gates.as_deref())?,
            }
        }
        Command::Eval { common, family, model } => {
            let cfg = resolve(&common)?;
            cmd_eval(&cfg, family.as_deref(), &model)?;
        }
        Command::Ablate { common } => {
            let cfg = resolve(&common)?;
            let cells = runner::run_experiment(&cfg)?;
            let summary = report::emit_report(out_dir(&cfg)?, &cfg, &cells)?;
            print!("{}", report::summary_csv(&summary));
        }
        Command::Report { common, input } => {
            let cfg = resolve(&common)?;
            cmd_report(&cfg, input.as_deref())?;
        }
        Command::Selftest { common } => {
            let seed = common.seed.unwrap_or(0);
            let suites = selftest::run_all(seed)?;
            for s in &suites {
                println!("{}", s.line());
            }
            if suites.iter().any(|s| !s.passed) {
                bail!("selftest failed");
            }
        }
    }
    Ok(())
}
