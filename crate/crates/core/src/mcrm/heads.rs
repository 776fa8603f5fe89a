use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SemcError};
use crate::nn::{l2_normalize, ops, Builder, Linear};
use crate::ssfm::pooled_expert_mean;

/// Pool → Linear → ReLU → Linear → L2 normalize.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    fc1: Linear,
    fc2: Linear,
}

impl ProjectionHead {
    pub fn new(b: &Builder<'_>, channels: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&b.pp("fc1"), channels, dim)?,
            fc2: Linear::new(&b.pp("fc2"), dim, dim)?,
        })
    }

    /// Same layout, registered as non-trainable buffers.
    pub fn frozen(b: &Builder<'_>, channels: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::frozen(&b.pp("fc1"), channels, dim)?,
            fc2: Linear::frozen(&b.pp("fc2"), dim, dim)?,
        })
    }

    /// Embeds a (B, C, H, W) map into unit-norm (B, d) rows.
    pub fn forward(&self, map: &Tensor) -> Result<Tensor> {
        self.embed_pooled(&ops::global_avg_pool(map)?)
    }

    pub fn embed_pooled(&self, pooled: &Tensor) -> Result<Tensor> {
        let h = ops::relu(&self.fc1.forward(pooled)?)?;
        l2_normalize(&self.fc2.forward(&h)?)
    }

    fn tensors(&self) -> [&candle_core::Var; 4] {
        [
            self.fc1.weight(),
            self.fc1.bias(),
            self.fc2.weight(),
            self.fc2.bias(),
        ]
    }

    /// `self ← m·self + (1−m)·online`.
    pub fn ema_update(&self, online: &ProjectionHead, momentum: f64) -> Result<()> {
        for (dst, src) in self.tensors().into_iter().zip(online.tensors()) {
            let next =
                ((dst.as_tensor() * momentum)? + (src.as_tensor().detach() * (1.0 - momentum))?)?;
            dst.set(&next)?;
        }
        Ok(())
    }

    pub fn copy_from(&self, online: &ProjectionHead) -> Result<()> {
        self.ema_update(online, 0.0)
    }
}

/// One linear classifier per expert on the pooled refined map.
#[derive(Debug, Clone)]
pub struct ExpertHeads {
    heads: Vec<Linear>,
}

impl ExpertHeads {
    pub fn new(b: &Builder<'_>, experts: usize, channels: usize, classes: usize) -> Result<Self> {
        let heads = (0..experts)
            .map(|n| Linear::new(&b.pp(format!("expert{n}")), channels, classes))
            .collect::<Result<_>>()?;
        Ok(Self { heads })
    }

    /// Returns (B, N, C) logits.
    pub fn forward(&self, out: &[Tensor]) -> Result<Tensor> {
        if out.len() != self.heads.len() {
            return Err(SemcError::Shape(format!(
                "{} expert maps for {} heads",
                out.len(),
                self.heads.len()
            )));
        }
        let logits = self
            .heads
            .iter()
            .zip(out)
            .map(|(h, o)| h.forward(&ops::global_avg_pool(o)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&logits, 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct GateState {
    /// (B, N)
    pub logits: Tensor,
    /// (B, N), rows sum to one.
    pub weights: Tensor,
    pub tau: f64,
}

/// Standard Gumbel(0, 1) samples, (rows × cols), from a seeded stream.
pub fn gumbel_noise(
    rows: usize,
    cols: usize,
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect();
    Ok(Tensor::from_vec(values, (rows, cols), device)?.to_dtype(dtype)?)
}

/// `softmax((logits + noise) / tau)`. Without noise this is the plain
/// tempered softmax used at evaluation. In `hard` mode the forward value is
/// the one-hot argmax while gradients follow the soft weights.
pub fn gumbel_softmax(
    logits: &Tensor,
    noise: Option<&Tensor>,
    tau: f64,
    hard: bool,
) -> Result<Tensor> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(SemcError::Config(format!(
            "gate temperature must be positive, got {tau}"
        )));
    }
    let perturbed = match noise {
        Some(g) => (logits + g)?,
        None => logits.clone(),
    };
    let soft = ops::softmax(&(perturbed / tau)?)?;
    if !hard {
        return Ok(soft);
    }
    let (b, n) = soft.dims2()?;
    let idx = soft.argmax(1)?.to_vec1::<u32>()?;
    let mut onehot = vec![0.0; b * n];
    for (row, &i) in idx.iter().enumerate() {
        onehot[row * n + i as usize] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (b, n), soft.device())?.to_dtype(soft.dtype())?;
    Ok(((onehot - soft.detach())? + soft)?)
}

/// Pool → mean over experts → linear → N gate logits.
#[derive(Debug, Clone)]
pub struct GateNet {
    fc: Linear,
}

impl GateNet {
    pub fn new(b: &Builder<'_>, channels: usize, experts: usize) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(b, channels, experts)?,
        })
    }

    pub fn logits(&self, out: &[Tensor]) -> Result<Tensor> {
        self.fc.forward(&pooled_expert_mean(out)?)
    }

    pub fn forward(
        &self,
        out: &[Tensor],
        noise: Option<&Tensor>,
        tau: f64,
        hard: bool,
    ) -> Result<GateState> {
        let logits = self.logits(out)?;
        let weights = gumbel_softmax(&logits, noise, tau, hard)?;
        Ok(GateState {
            logits,
            weights,
            tau,
        })
    }
}

/// Predicts the recognition/contrast balance `α ∈ (0,1)`, averaged over the
/// batch to a scalar.
#[derive(Debug, Clone)]
pub struct AlphaNet {
    fc: Linear,
}

impl AlphaNet {
    /// Zero-initialized, so training starts from `α = 0.5`.
    pub fn new(b: &Builder<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            fc: Linear::zeros(b, channels, 1)?,
        })
    }

    pub fn per_sample(&self, out: &[Tensor]) -> Result<Tensor> {
        ops::sigmoid(&self.fc.forward(&pooled_expert_mean(out)?)?.flatten_all()?)
    }

    pub fn forward(&self, out: &[Tensor]) -> Result<Tensor> {
        Ok(self.per_sample(out)?.mean_all()?)
    }
}

/// Registers the EMA twin of a projection head and seeds it from `online`.
pub fn ema_projection(
    b: &Builder<'_>,
    online: &ProjectionHead,
    channels: usize,
    dim: usize,
) -> Result<ProjectionHead> {
    let twin = ProjectionHead::frozen(b, channels, dim)?;
    twin.copy_from(online)?;
    Ok(twin)
}
