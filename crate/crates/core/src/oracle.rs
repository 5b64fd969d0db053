//! Independent verification procedures in double precision.
//!
//! Nothing here reuses the analytic paths it checks: losses come from a
//! separate reference forward pass, and replayed updates are applied by hand.

use alloc::vec::Vec;

use libm::{exp, log, tanh};

use crate::error::{Error, Result};
use crate::learner::{Batch, LayerGrads, Model};
use crate::meta::{sigmoid, GateParams};
use crate::protocol::EpisodeRecord;

/// Finite-difference step of the gradient oracle.
pub const GRAD_STEP: f64 = 1e-5;
/// Perturbation of `φ` used by the replay oracle.
pub const REPLAY_STEP: f64 = 1e-4;

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(floor);
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Mean cross-entropy of `model` on `batch` in evaluation mode, computed
/// directly from the parameter arrays.
pub fn reference_loss(model: &Model<f64>, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let arch = model.arch();
    let emb = model.embedding().data();
    let d = arch.embed_dim;
    let mut total = 0.0;
    for r in 0..batch.len() {
        let row = batch.inputs.row(r);
        let mut h = alloc::vec![0.0; d];
        for &tok in row {
            let t = tok as usize;
            if t >= arch.vocab_size {
                return Err(Error::Input("token out of range".into()));
            }
            for (hj, &e) in h.iter_mut().zip(&emb[t * d..(t + 1) * d]) {
                *hj += e;
            }
        }
        for hj in h.iter_mut() {
            *hj /= row.len() as f64;
        }
        for b in 0..arch.num_blocks {
            let g = model.params().group(b);
            let out = g.bias.len();
            let w = g.weight.data();
            let mut next: Vec<f64> = (0..out)
                .map(|j| tanh(g.bias.data()[j] + h.iter().enumerate().map(|(i, &x)| x * w[i * out + j]).sum::<f64>()))
                .collect();
            if next.len() == h.len() {
                for (n, &x) in next.iter_mut().zip(&h) {
                    *n += x;
                }
            }
            h = next;
        }
        let head = model.head();
        let c = arch.num_classes;
        let w = head.weight.data();
        let logits: Vec<f64> =
            (0..c).map(|j| head.bias.data()[j] + h.iter().enumerate().map(|(i, &x)| x * w[i * c + j]).sum::<f64>()).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + log(logits.iter().map(|&z| exp(z - m)).sum::<f64>());
        total += lse - logits[batch.labels[r]];
    }
    Ok(total / batch.len() as f64)
}

/// Result of comparing an analytic gradient with finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_abs: f64,
    pub max_rel: f64,
    pub checked: usize,
}

/// Compares `grads` against central differences of [`reference_loss`] over
/// every parameter of every gated group.
pub fn check_gradient(model: &Model<f64>, batch: &Batch, grads: &LayerGrads<f64>, step: f64, floor: f64) -> Result<GradCheck> {
    model.params().check_layout(grads, "check_gradient")?;
    let mut probe = model.clone();
    let analytic: Vec<f64> = grads.values().copied().collect();
    let mut out = GradCheck { max_abs: 0.0, max_rel: 0.0, checked: 0 };
    for (i, &a) in analytic.iter().enumerate() {
        let orig = *probe.params().values().nth(i).expect("index within layout");
        let set = |m: &mut Model<f64>, v: f64| {
            *m.params_mut().values_mut().nth(i).expect("index within layout") = v;
        };
        set(&mut probe, orig + step);
        let plus = reference_loss(&probe, batch)?;
        set(&mut probe, orig - step);
        let minus = reference_loss(&probe, batch)?;
        set(&mut probe, orig);
        let numeric = (plus - minus) / (2.0 * step);
        out.max_abs = out.max_abs.max((a - numeric).abs());
        out.max_rel = out.max_rel.max(relative_error(a, numeric, floor));
        out.checked += 1;
    }
    Ok(out)
}

/// Held-out loss after replaying the recorded deltas from `theta0` under
/// gates `λ = σ(phi)`.
pub fn replay_loss(record: &EpisodeRecord<f64>, phi: &GateParams) -> Result<f64> {
    let mut theta = record.theta0.clone();
    let num_groups = theta.params().num_groups();
    if phi.num_groups() != num_groups {
        return Err(Error::shape("replay_loss", alloc::format!("{} groups vs {num_groups}", phi.num_groups())));
    }
    let rates: Vec<f64> = (0..num_groups).map(|g| sigmoid(phi.values()[phi.layout().gate_of(g)])).collect();
    for delta in &record.deltas {
        theta.params().check_layout(delta, "replay_loss")?;
        for (g, rate) in rates.iter().enumerate() {
            let target = &mut theta.params_mut().groups_mut()[g];
            let src = delta.group(g);
            for (p, &d) in target.weight.data_mut().iter_mut().zip(src.weight.data()) {
                *p -= rate * d;
            }
            for (p, &d) in target.bias.data_mut().iter_mut().zip(src.bias.data()) {
                *p -= rate * d;
            }
        }
    }
    reference_loss(&theta, &record.test_data)
}

/// Central differences of [`replay_loss`] with respect to every entry of `phi`.
pub fn replay_meta_gradient(record: &EpisodeRecord<f64>, phi: &GateParams, step: f64) -> Result<Vec<f64>> {
    let mut grad = Vec::with_capacity(phi.len());
    for j in 0..phi.len() {
        let shifted = |s: f64| {
            let mut v = phi.values().to_vec();
            v[j] += s;
            GateParams::new(phi.layout(), phi.num_groups(), v)
        };
        let plus = replay_loss(record, &shifted(step)?)?;
        let minus = replay_loss(record, &shifted(-step)?)?;
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}
