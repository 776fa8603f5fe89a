//! The full network: backbone, fusion, gate, heads and objective.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Result, SemcError};
use crate::mcrm::{
    self, build_contrastive_batch, ema_projection, expert_ce_loss, fuse_logits, gumbel_noise,
    moe_ce_loss, selfcon_loss, supcon_loss, AlphaMode, AlphaNet, ContrastiveQueue, ExpertHeads,
    GateNet, GateState, LossBreakdown, LossTensors, McrmConfig, ProjectionHead,
};
use crate::nn::{ops, ParamStore};
use crate::ssfm::{FusedFeatureSet, FusionFlags, Ssfm, SsfmConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    pub ssfm: SsfmConfig,
    pub mcrm: McrmConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 7,
            backbone: BackboneConfig::default(),
            ssfm: SsfmConfig::default(),
            mcrm: McrmConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(SemcError::Config(format!(
                "need at least two classes, got {}",
                self.num_classes
            )));
        }
        self.backbone.validate()?;
        self.ssfm.validate(self.backbone.deep_channels())?;
        self.mcrm.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub train: bool,
    pub flags: FusionFlags,
    /// Seed of the gate's Gumbel noise; `None` disables the noise.
    pub gumbel_seed: Option<u64>,
    pub gate_tau: f64,
}

impl ForwardOptions {
    pub fn eval(flags: FusionFlags, gate_tau: f64) -> Self {
        Self {
            train: false,
            flags,
            gumbel_seed: None,
            gate_tau,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    pub lmc_on: bool,
    pub alpha_mode: AlphaMode,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            lmc_on: true,
            alpha_mode: AlphaMode::Adaptive,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SemcOutput {
    pub features: FusedFeatureSet,
    pub gate: GateState,
    /// (B, N, C)
    pub expert_logits: Tensor,
    /// (B, C)
    pub fused_logits: Tensor,
    /// One (B, d) unit-norm batch per expert.
    pub embeddings: Vec<Tensor>,
    /// Detached embeddings of experts `1..N`, destined for the queue.
    pub queue_keys: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct StepLoss {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
    pub anchors_without_positives: usize,
}

/// Owns the parameter store and every sub-module.
pub struct Semc {
    cfg: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    ssfm: Ssfm,
    gate: GateNet,
    experts: ExpertHeads,
    projection: ProjectionHead,
    ema: Option<ProjectionHead>,
    alpha: AlphaNet,
}

impl std::fmt::Debug for Semc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Semc")
            .field("cfg", &self.cfg)
            .field("num_params", &self.store.num_params())
            .finish()
    }
}

impl Semc {
    pub fn new(cfg: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(dtype, seed);
        let root = store.root();
        let c = cfg.backbone.deep_channels();
        let n = cfg.backbone.num_experts;
        let d = cfg.mcrm.embed_dim;
        let backbone = Backbone::new(&root, &cfg.backbone)?;
        let ssfm = Ssfm::new(&root, &cfg.backbone, &cfg.ssfm)?;
        let gate = GateNet::new(&root.pp("mcrm.gate"), c, n)?;
        let experts = ExpertHeads::new(&root.pp("mcrm.cls"), n, c, cfg.num_classes)?;
        let projection = ProjectionHead::new(&root.pp("mcrm.proj"), c, d)?;
        let ema = if cfg.mcrm.ema_head {
            Some(ema_projection(
                &root.pp("mcrm.proj_ema"),
                &projection,
                c,
                d,
            )?)
        } else {
            None
        };
        let alpha = AlphaNet::new(&root.pp("mcrm.alpha"), c)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            ssfm,
            gate,
            experts,
            projection,
            ema,
            alpha,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn ssfm(&self) -> &Ssfm {
        &self.ssfm
    }

    pub fn new_queue(&self) -> ContrastiveQueue {
        ContrastiveQueue::new(self.cfg.mcrm.queue_capacity, self.cfg.mcrm.embed_dim)
    }

    pub fn forward(&self, x: &Tensor, opts: &ForwardOptions) -> Result<SemcOutput> {
        let pyramid = self.backbone.forward(x, opts.train)?;
        let features =
            self.ssfm
                .forward(&pyramid.shallow, &pyramid.deep, opts.flags, opts.train)?;
        let out = &features.out;
        let batch = x.dims()[0];
        let noise = match opts.gumbel_seed {
            Some(seed) => Some(gumbel_noise(batch, out.len(), seed, x.dtype(), x.device())?),
            None => None,
        };
        let gate =
            self.gate
                .forward(out, noise.as_ref(), opts.gate_tau, self.cfg.mcrm.gate_hard)?;
        let expert_logits = self.experts.forward(out)?;
        let fused_logits = fuse_logits(&expert_logits, &gate.weights)?;
        let embeddings = out
            .iter()
            .map(|o| self.projection.forward(o))
            .collect::<Result<Vec<_>>>()?;
        let key_head = self.ema.as_ref().unwrap_or(&self.projection);
        let queue_keys = out[1..]
            .iter()
            .map(|o| Ok(key_head.forward(&o.detach())?.detach()))
            .collect::<Result<Vec<_>>>()?;
        Ok(SemcOutput {
            features,
            gate,
            expert_logits,
            fused_logits,
            embeddings,
            queue_keys,
        })
    }

    /// Builds the step objective. With `lmc_on` off, `α` is pinned to one
    /// so the total reduces to the mixture cross-entropy.
    pub fn losses(
        &self,
        out: &SemcOutput,
        labels: &[usize],
        queue: &ContrastiveQueue,
        opts: &LossOptions,
    ) -> Result<StepLoss> {
        let m = &self.cfg.mcrm;
        let l_moe = moe_ce_loss(&out.fused_logits, labels)?;
        let batch = build_contrastive_batch(&out.embeddings, labels, queue)?;
        let sup = supcon_loss(
            &batch.embeddings,
            &batch.labels,
            batch.num_anchors(),
            m.temperature,
        )?;
        let l_self = selfcon_loss(&batch, m.temperature, None)?;
        let like = &l_moe;
        let constant = |v: f64| -> Result<Tensor> {
            Ok(Tensor::new(v, like.device())?.to_dtype(like.dtype())?)
        };
        let alpha = if !opts.lmc_on {
            constant(1.0)?
        } else {
            match opts.alpha_mode {
                AlphaMode::Adaptive => self.alpha.forward(&out.features.out)?,
                AlphaMode::Fixed(a) => constant(a)?,
            }
        };
        let l_aux = if m.aux_expert_ce > 0.0 {
            Some(expert_ce_loss(&out.expert_logits, labels)?)
        } else {
            None
        };
        let parts = LossTensors {
            l_sup: sup.loss,
            l_self,
            l_moe,
            alpha,
            l_aux,
        };
        let (total, breakdown) = mcrm::total_loss(&parts, m.lambda, m.aux_expert_ce)?;
        Ok(StepLoss {
            total,
            breakdown,
            anchors_without_positives: sup.anchors_without_positives,
        })
    }

    /// Moves the EMA projection head towards the online one, if enabled.
    pub fn update_ema(&self) -> Result<()> {
        if let Some(ema) = &self.ema {
            ema.ema_update(&self.projection, self.cfg.mcrm.ema_momentum)?;
        }
        Ok(())
    }

    /// Class probabilities in evaluation mode: (B, C).
    pub fn predict(&self, x: &Tensor, flags: FusionFlags) -> Result<Tensor> {
        let out = self.forward(x, &ForwardOptions::eval(flags, self.cfg.mcrm.gate_tau))?;
        ops::softmax(&out.fused_logits)
    }
}

/// A small configuration for tests and quick runs.
pub fn tiny_config(input_size: usize, num_classes: usize) -> ModelConfig {
    ModelConfig {
        num_classes,
        backbone: BackboneConfig {
            input_size,
            in_channels: 1,
            stage_channels: [4, 8, 16, 32],
            blocks_per_stage: [1, 1, 1, 1],
            num_experts: 3,
            stem_kernel: 3,
            clone_init_experts: false,
        },
        ssfm: SsfmConfig {
            reduction: 4,
            scale_kernels: vec![1, 3],
            shuffle_groups: 2,
            ..SsfmConfig::default()
        },
        mcrm: McrmConfig {
            embed_dim: 16,
            queue_capacity: 64,
            ..McrmConfig::default()
        },
    }
}
