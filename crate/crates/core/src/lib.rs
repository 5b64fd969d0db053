//! Layer-gated meta-optimizer for zero-shot cross-task transfer.
//!
//! A base optimizer proposes an update `Δθ` for every layer group of a small
//! layered classifier; learned per-layer rates `λ = σ(φ)` scale the update that
//! is actually applied. The rates are meta-trained by repeatedly holding out one
//! source task, fine-tuning on the rest, and descending the held-out loss with a
//! first-order (truncated) hypergradient.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! experiment orchestration live in the `metagate` crate.

#![no_std]

extern crate alloc;

pub mod error;
pub mod learner;
pub mod meta;
pub mod numerics;
pub mod optim;
#[cfg(any(test, feature = "oracle"))]
pub mod oracle;
pub mod protocol;
pub mod rng;
pub mod tasks;

pub use error::{Error, Result};
pub use learner::{ArchConfig, Batch, LayerGrads, Mode, Model, ParamGroup, ParamSet, TokenMatrix};
pub use meta::{GateLayout, GateParams, GateValues, MetaState, UpdateAccumulator};
pub use numerics::{Precision, Real, Tensor};
pub use optim::{BaseOptimizer, OptimizerConfig, OptimizerKind, OptimizerState, UpdateDelta};
pub use protocol::{EpisodeResult, Method, ProtocolConfig};
pub use tasks::{FamilyConfig, Split, TaskFamily, TaskInstance};
