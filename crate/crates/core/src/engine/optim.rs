use std::collections::BTreeMap;
use std::f64::consts::PI;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Result, SemcError};
use crate::nn::{ops, Entry, Kind, ParamStore};

/// `lr₀ · ½ · (1 + cos(π·t/T))`, clamped to `t ∈ [0, T]`.
pub fn cosine_lr(lr0: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = (t.min(total)) as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (PI * frac).cos())
}

/// Gradients of every trainable parameter that took part in the graph.
pub fn collect_grads(store: &ParamStore, grads: &GradStore) -> Vec<(Entry, Tensor)> {
    store
        .params()
        .into_iter()
        .filter_map(|e| grads.get(e.var.as_tensor()).cloned().map(|g| (e, g)))
        .collect()
}

pub fn global_grad_norm(grads: &[(Entry, Tensor)]) -> Result<f64> {
    let mut sq = 0.0;
    for (_, g) in grads {
        sq += ops::scalar(&g.sqr()?.sum_all()?)?;
    }
    Ok(sq.sqrt())
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight
/// decay on the tensors registered with `decay`:
///
/// `g ← ∇ + wd·w` (decayed tensors only), `v ← μ·v + g`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self) -> &BTreeMap<String, Tensor> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: BTreeMap<String, Tensor>) {
        self.velocity = velocity;
    }

    /// Applies one update. `clip` rescales all gradients so their joint L2
    /// norm does not exceed it. Returns the pre-clip norm.
    pub fn step(&mut self, grads: &[(Entry, Tensor)], lr: f64, clip: Option<f64>) -> Result<f64> {
        let norm = global_grad_norm(grads)?;
        if !norm.is_finite() {
            return Err(SemcError::Numerical("gradient norm is not finite".into()));
        }
        let scale = match clip {
            Some(max) if norm > max => max / (norm + 1e-6),
            _ => 1.0,
        };
        for (entry, g) in grads {
            let w = entry.var.as_tensor();
            let mut g = if scale != 1.0 {
                (g * scale)?
            } else {
                g.clone()
            }
            .detach();
            if let Kind::Param { decay: true } = entry.kind {
                if self.weight_decay > 0.0 {
                    g = (g + (w * self.weight_decay)?)?;
                }
            }
            let v = match self.velocity.get(&entry.name) {
                Some(prev) if self.momentum > 0.0 => ((prev * self.momentum)? + g)?,
                _ => g,
            };
            entry.var.set(&(w - (&v * lr)?)?)?;
            self.velocity.insert(entry.name.clone(), v.detach());
        }
        Ok(norm)
    }
}
