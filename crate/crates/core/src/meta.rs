//! The meta-optimizer: per-layer gates `λ = σ(φ)`, the gated step
//! `θ ← θ − λ ⊙ Δθ`, and the first-order meta-gradient.
//!
//! The meta-gradient ignores how the losses and gradients inside an episode
//! depend on `φ`; only the direct path from `φ` to the final parameters is
//! kept. Under that truncation `θ^L = θ⁰ − σ(φ) ⊙ Σ_t Δθ^t`, so
//!
//! ```text
//! ∂L_test/∂φ_l = −σ(φ_l)(1 − σ(φ_l)) · ⟨Σ_t Δθ^t_l, ∇_{θ_l} L_test⟩
//! ```
//!
//! and the only thing an episode has to keep is the running sum of the raw
//! (pre-gate) deltas.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::learner::{LayerGrads, ParamSet};
use crate::numerics::Real;
use crate::optim::UpdateDelta;

/// How meta-parameters map onto layer groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GateLayout {
    /// One gate per layer group.
    LayerWise,
    /// A single gate broadcast to every group.
    Shared,
}

impl GateLayout {
    pub fn name(self) -> &'static str {
        match self {
            GateLayout::LayerWise => "layer_wise",
            GateLayout::Shared => "shared",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "layer_wise" => Some(GateLayout::LayerWise),
            "shared" => Some(GateLayout::Shared),
            _ => None,
        }
    }

    pub fn num_gates(self, num_groups: usize) -> usize {
        match self {
            GateLayout::LayerWise => num_groups,
            GateLayout::Shared => 1,
        }
    }

    pub fn gate_of(self, group: usize) -> usize {
        match self {
            GateLayout::LayerWise => group,
            GateLayout::Shared => 0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Pre-sigmoid gate parameters `φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    layout: GateLayout,
    num_groups: usize,
    phi: Vec<f64>,
}

impl GateParams {
    pub fn new(layout: GateLayout, num_groups: usize, phi: Vec<f64>) -> Result<Self> {
        if num_groups == 0 {
            return Err(Error::Config("gates need at least one layer group".into()));
        }
        let n = layout.num_gates(num_groups);
        if phi.len() != n {
            return Err(Error::shape("gate_params", format!("{} layout over {num_groups} groups needs {n} values, got {}", layout.name(), phi.len())));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("gate parameters must be finite".into()));
        }
        Ok(GateParams { layout, num_groups, phi })
    }

    pub fn constant(layout: GateLayout, num_groups: usize, value: f64) -> Result<Self> {
        Self::new(layout, num_groups, vec![value; layout.num_gates(num_groups)])
    }

    /// Initial gates drawn uniformly from `[−0.1, 0.1]`, i.e. `λ ≈ 0.5`.
    pub fn random(layout: GateLayout, num_groups: usize, rng: &mut impl Rng) -> Result<Self> {
        let phi = (0..layout.num_gates(num_groups)).map(|_| rng.gen_range(-0.1..=0.1)).collect();
        Self::new(layout, num_groups, phi)
    }

    pub fn layout(&self) -> GateLayout {
        self.layout
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn values(&self) -> &[f64] {
        &self.phi
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }
}

/// Update rates `λ`, one per gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GateValues {
    layout: GateLayout,
    num_groups: usize,
    lambda: Vec<f64>,
}

impl GateValues {
    /// Explicit per-group rates, e.g. `1` everywhere (plain fine-tuning) or
    /// `0` on frozen groups.
    pub fn per_group(lambda: Vec<f64>) -> Result<Self> {
        if lambda.is_empty() {
            return Err(Error::Config("gates need at least one layer group".into()));
        }
        if lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("gate values must be finite".into()));
        }
        Ok(GateValues { layout: GateLayout::LayerWise, num_groups: lambda.len(), lambda })
    }

    pub fn uniform(num_groups: usize, value: f64) -> Result<Self> {
        Self::per_group(vec![value; num_groups])
    }

    pub fn layout(&self) -> GateLayout {
        self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.lambda
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    /// Rate applied to layer group `group`.
    pub fn rate(&self, group: usize) -> f64 {
        self.lambda[self.layout.gate_of(group)]
    }

    /// Rates expanded to one entry per layer group.
    pub fn per_group_rates(&self) -> Vec<f64> {
        (0..self.num_groups).map(|g| self.rate(g)).collect()
    }
}

/// `λ = σ(φ)`, elementwise.
pub fn gate_values(phi: &GateParams) -> GateValues {
    GateValues { layout: phi.layout, num_groups: phi.num_groups, lambda: phi.phi.iter().map(|&p| sigmoid(p)).collect() }
}

/// `θ ← θ − λ ⊙ Δθ`, with `λ_l` broadcast over every parameter of group `l`.
/// Groups with `λ_l = 0` are left untouched.
pub fn gated_step<T: Real>(params: &mut ParamSet<T>, delta: &UpdateDelta<T>, lambda: &GateValues) -> Result<()> {
    params.check_layout(delta, "gated_step")?;
    if lambda.num_groups != params.num_groups() {
        return Err(Error::shape(
            "gated_step",
            format!("{} gated groups but {} parameter groups", lambda.num_groups, params.num_groups()),
        ));
    }
    for (l, (p, d)) in params.groups_mut().iter_mut().zip(delta.groups()).enumerate() {
        let rate = lambda.rate(l);
        if rate == 0.0 {
            continue;
        }
        let rate = T::of(rate);
        for (tp, td) in p.tensors_mut().into_iter().zip(d.tensors()) {
            for (x, &dx) in tp.data_mut().iter_mut().zip(td.data()) {
                *x -= rate * dx;
            }
        }
    }
    Ok(())
}

/// Episode-long running sum `Σ_t Δθ^t` of raw base-optimizer deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateAccumulator<T> {
    sum: ParamSet<T>,
    steps: usize,
}

impl<T: Real> UpdateAccumulator<T> {
    pub fn zeros_like(template: &ParamSet<T>) -> Self {
        UpdateAccumulator { sum: template.zeros_like(), steps: 0 }
    }

    pub fn sum(&self) -> &ParamSet<T> {
        &self.sum
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn accumulate(&mut self, delta: &UpdateDelta<T>) -> Result<()> {
        self.sum.add_scaled(delta, T::one())?;
        self.steps += 1;
        Ok(())
    }
}

/// Truncated gradient of the held-out loss with respect to `φ`.
pub fn meta_gradient<T: Real>(
    phi: &GateParams,
    acc: &UpdateAccumulator<T>,
    test_grads: &LayerGrads<T>,
) -> Result<Vec<f64>> {
    if acc.sum.num_groups() != phi.num_groups {
        return Err(Error::shape(
            "meta_gradient",
            format!("{} accumulated groups but gates cover {}", acc.sum.num_groups(), phi.num_groups),
        ));
    }
    let dots = acc.sum.group_dots(test_grads)?;
    let mut inner = vec![0.0; phi.len()];
    for (l, d) in dots.into_iter().enumerate() {
        inner[phi.layout.gate_of(l)] += d;
    }
    Ok(phi
        .phi
        .iter()
        .zip(inner)
        .map(|(&p, d)| {
            let s = sigmoid(p);
            -s * (1.0 - s) * d
        })
        .collect())
}

/// Adam over the meta-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaState {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl MetaState {
    pub fn new(num_gates: usize, learning_rate: f64) -> Self {
        MetaState {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; num_gates],
            v: vec![0.0; num_gates],
        }
    }
}

/// One Adam step on `φ`. Increments the outer step counter.
pub fn meta_update(state: &mut MetaState, phi: &GateParams, grad: &[f64]) -> Result<GateParams> {
    if grad.len() != phi.len() || state.m.len() != phi.len() || state.v.len() != phi.len() {
        return Err(Error::State(format!(
            "meta update over {} gates with gradient of length {} and moments of length {}",
            phi.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericFault { op: "meta_update" });
    }
    let t = state.step + 1;
    let c1 = 1.0 - libm::pow(state.beta1, t as f64);
    let c2 = 1.0 - libm::pow(state.beta2, t as f64);
    let mut next = phi.phi.clone();
    for (i, p) in next.iter_mut().enumerate() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        *p -= state.learning_rate * m_hat / (libm::sqrt(v_hat) + state.epsilon);
    }
    state.step = t;
    GateParams::new(phi.layout, phi.num_groups, next)
}
