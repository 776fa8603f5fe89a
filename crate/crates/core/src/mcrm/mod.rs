//! Contrastive recognition head: gate, per-expert classifiers, projection,
//! memory queue and the combined objective.

mod heads;
mod loss;
mod queue;

pub use heads::{
    ema_projection, gumbel_noise, gumbel_softmax, AlphaNet, ExpertHeads, GateNet, GateState,
    ProjectionHead,
};
pub use loss::{
    build_contrastive_batch, cross_entropy, expert_ce_loss, fuse_logits, moe_ce_loss, selfcon_loss,
    supcon_loss, ContrastiveBatch, SupConOutput,
};
pub use queue::{ContrastiveQueue, QueueEntry};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SemcError};
use crate::nn::ops;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McrmConfig {
    pub embed_dim: usize,
    pub queue_capacity: usize,
    pub lambda: f64,
    pub temperature: f64,
    pub gate_tau: f64,
    /// Final gate temperature for a linear anneal over training; `None` keeps
    /// `gate_tau` fixed.
    pub gate_tau_final: Option<f64>,
    pub gate_hard: bool,
    pub aux_expert_ce: f64,
    pub ema_head: bool,
    pub ema_momentum: f64,
}

impl Default for McrmConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            queue_capacity: 4096,
            lambda: 0.5,
            temperature: 0.07,
            gate_tau: 1.0,
            gate_tau_final: None,
            gate_hard: false,
            aux_expert_ce: 0.0,
            ema_head: false,
            ema_momentum: 0.999,
        }
    }
}

impl McrmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SemcError::Config(m));
        if self.embed_dim == 0 {
            return bad("mcrm.embed_dim must be positive".into());
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("mcrm.lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!(
                "mcrm.temperature must be > 0, got {}",
                self.temperature
            ));
        }
        for tau in std::iter::once(self.gate_tau).chain(self.gate_tau_final) {
            if !(tau.is_finite() && tau > 0.0) {
                return bad(format!("gate temperature must be > 0, got {tau}"));
            }
        }
        if !(self.aux_expert_ce.is_finite() && self.aux_expert_ce >= 0.0) {
            return bad(format!(
                "mcrm.aux_expert_ce must be >= 0, got {}",
                self.aux_expert_ce
            ));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return bad(format!(
                "mcrm.ema_momentum must be in [0,1), got {}",
                self.ema_momentum
            ));
        }
        Ok(())
    }

    /// Gate temperature at `progress ∈ [0,1]` of training.
    pub fn gate_tau_at(&self, progress: f64) -> f64 {
        match self.gate_tau_final {
            Some(end) => self.gate_tau + (end - self.gate_tau) * progress.clamp(0.0, 1.0),
            None => self.gate_tau,
        }
    }
}

/// Source of the recognition/contrast balance. Serialized as `adaptive` or
/// `fixed:<value>`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum AlphaMode {
    Adaptive,
    Fixed(f64),
}

impl AlphaMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AlphaMode::Fixed(a) if !(a > 0.0 && a <= 1.0) => Err(SemcError::Config(format!(
                "fixed alpha must be in (0,1], got {a}"
            ))),
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for AlphaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AlphaMode::Adaptive => write!(f, "adaptive"),
            AlphaMode::Fixed(a) => write!(f, "fixed:{a}"),
        }
    }
}

impl std::str::FromStr for AlphaMode {
    type Err = SemcError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "adaptive" {
            return Ok(AlphaMode::Adaptive);
        }
        let v = s.strip_prefix("fixed:").unwrap_or(s);
        let a: f64 = v.parse().map_err(|_| {
            SemcError::Config(format!(
                "alpha mode must be `adaptive` or `fixed:<v>`, got `{s}`"
            ))
        })?;
        let mode = AlphaMode::Fixed(a);
        mode.validate()?;
        Ok(mode)
    }
}

impl From<AlphaMode> for String {
    fn from(m: AlphaMode) -> Self {
        m.to_string()
    }
}

impl TryFrom<String> for AlphaMode {
    type Error = SemcError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Graph-carrying loss terms for one step.
#[derive(Debug, Clone)]
pub struct LossTensors {
    pub l_sup: Tensor,
    pub l_self: Tensor,
    pub l_moe: Tensor,
    pub alpha: Tensor,
    pub l_aux: Option<Tensor>,
}

/// Scalar summary of one step's objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_self: f64,
    pub l_mc: f64,
    pub l_moe: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub l_total: f64,
}

/// Combines the loss terms:
///
/// `L_mc = L_sup + λ·L_self`, `L_total = α·L_moe + (1−α)·L_mc (+ aux)`.
///
/// Returns the differentiable total and its scalar breakdown.
pub fn total_loss(
    parts: &LossTensors,
    lambda: f64,
    aux_weight: f64,
) -> Result<(Tensor, LossBreakdown)> {
    let named = [
        ("L_sup", &parts.l_sup),
        ("L_self", &parts.l_self),
        ("L_moe", &parts.l_moe),
        ("alpha", &parts.alpha),
    ];
    for (name, t) in named {
        if !ops::scalar(t)?.is_finite() {
            return Err(SemcError::Numerical(format!("{name} is not finite")));
        }
    }
    let l_mc = (&parts.l_sup + (&parts.l_self * lambda)?)?;
    let one_minus = parts.alpha.affine(-1.0, 1.0)?;
    let mut total = ((&parts.alpha * &parts.l_moe)? + (one_minus * &l_mc)?)?;
    if let Some(aux) = &parts.l_aux {
        if !ops::scalar(aux)?.is_finite() {
            return Err(SemcError::Numerical("L_aux is not finite".into()));
        }
        if aux_weight > 0.0 {
            total = (total + (aux * aux_weight)?)?;
        }
    }
    let breakdown = LossBreakdown {
        l_sup: ops::scalar(&parts.l_sup)?,
        l_self: ops::scalar(&parts.l_self)?,
        l_mc: ops::scalar(&l_mc)?,
        l_moe: ops::scalar(&parts.l_moe)?,
        alpha: ops::scalar(&parts.alpha)?,
        lambda,
        l_total: ops::scalar(&total)?,
    };
    Ok((total, breakdown))
}
