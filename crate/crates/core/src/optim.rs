//! Base optimizers: map the gradient history to the update `Δθ` that a plain
//! step would subtract. Gating happens afterwards, so the moment estimates
//! always see raw gradients regardless of how much of `Δθ` is applied.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::learner::{LayerGrads, ParamSet};
use crate::numerics::Real;

/// Update proposed by the base optimizer, laid out like the gated groups.
pub type UpdateDelta<T> = ParamSet<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(OptimizerKind::Sgd),
            "adam" => Some(OptimizerKind::Adam),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { kind: OptimizerKind::Adam, learning_rate: 2e-5, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::Sgd, learning_rate, ..Default::default() }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::Adam, learning_rate, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Sufficient statistics of the gradient history.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    step: u64,
    shapes: Vec<(Vec<usize>, Vec<usize>)>,
    moments: Option<(ParamSet<T>, ParamSet<T>)>,
}

impl<T: Real> OptimizerState<T> {
    /// Fresh state for parameters laid out like `template`.
    pub fn new(kind: OptimizerKind, template: &ParamSet<T>) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd => None,
            OptimizerKind::Adam => Some((template.zeros_like(), template.zeros_like())),
        };
        OptimizerState { step: 0, shapes: template.shapes(), moments }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// First and second moment estimates (Adam only).
    pub fn moments(&self) -> Option<(&ParamSet<T>, &ParamSet<T>)> {
        self.moments.as_ref().map(|(m, v)| (m, v))
    }

    fn check(&self, grads: &LayerGrads<T>) -> Result<()> {
        if grads.shapes() != self.shapes {
            return Err(Error::State(format!(
                "gradient layout {:?} does not match optimizer state {:?}",
                grads.shapes(),
                self.shapes
            )));
        }
        Ok(())
    }
}

/// `Δθ = α g`. Ignores history apart from the step counter.
pub fn sgd_delta<T: Real>(
    state: &mut OptimizerState<T>,
    grads: &LayerGrads<T>,
    cfg: &OptimizerConfig,
) -> Result<UpdateDelta<T>> {
    if cfg.kind != OptimizerKind::Sgd {
        return Err(Error::Config("sgd_delta called with a non-sgd configuration".into()));
    }
    state.check(grads)?;
    let alpha = T::of(cfg.learning_rate);
    let mut delta = grads.clone();
    for v in delta.values_mut() {
        *v = alpha * *v;
    }
    state.step += 1;
    Ok(delta)
}

/// Adam with bias correction: `Δθ = α m̂ / (√v̂ + ε)`. Mutates the moments.
pub fn adam_delta<T: Real>(
    state: &mut OptimizerState<T>,
    grads: &LayerGrads<T>,
    cfg: &OptimizerConfig,
) -> Result<UpdateDelta<T>> {
    if cfg.kind != OptimizerKind::Adam {
        return Err(Error::Config("adam_delta called with a non-adam configuration".into()));
    }
    state.check(grads)?;
    let (m, v) = state
        .moments
        .as_mut()
        .ok_or_else(|| Error::State("optimizer state was created without Adam moments".into()))?;
    let t = state.step + 1;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let one = T::one();
    let correction1 = one - b1.powi(t as i32);
    let correction2 = one - b2.powi(t as i32);
    let (alpha, eps) = (T::of(cfg.learning_rate), T::of(cfg.epsilon));

    let mut delta = grads.zeros_like();
    for (((d, &g), mi), vi) in delta.values_mut().zip(grads.values()).zip(m.values_mut()).zip(v.values_mut()) {
        *mi = b1 * *mi + (one - b1) * g;
        *vi = b2 * *vi + (one - b2) * g * g;
        let m_hat = *mi / correction1;
        let v_hat = *vi / correction2;
        *d = alpha * m_hat / (v_hat.sqrt() + eps);
    }
    state.step = t;
    if !delta.is_finite() {
        return Err(Error::NumericFault { op: "adam_delta" });
    }
    Ok(delta)
}

/// A configured base optimizer together with its state.
#[derive(Debug, Clone)]
pub struct BaseOptimizer<T> {
    cfg: OptimizerConfig,
    state: OptimizerState<T>,
}

impl<T: Real> BaseOptimizer<T> {
    pub fn new(cfg: OptimizerConfig, template: &ParamSet<T>) -> Result<Self> {
        cfg.validate()?;
        Ok(BaseOptimizer { cfg, state: OptimizerState::new(cfg.kind, template) })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn state(&self) -> &OptimizerState<T> {
        &self.state
    }

    pub fn delta(&mut self, grads: &LayerGrads<T>) -> Result<UpdateDelta<T>> {
        match self.cfg.kind {
            OptimizerKind::Sgd => sgd_delta(&mut self.state, grads, &self.cfg),
            OptimizerKind::Adam => adam_delta(&mut self.state, grads, &self.cfg),
        }
    }
}

/// The ungated step `θ ← θ − Δθ`.
pub fn apply_delta<T: Real>(params: &mut ParamSet<T>, delta: &UpdateDelta<T>) -> Result<()> {
    params.check_layout(delta, "apply_delta")?;
    for (p, &d) in params.values_mut().zip(delta.values()) {
        *p -= d;
    }
    Ok(())
}
