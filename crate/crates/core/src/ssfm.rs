//! Semantic-structure fusion: ACE aligns a shallow map to an expert's deep
//! map, the two are added, and SAMC refines the sum with channel/spatial
//! attention and a multi-scale convolution bank.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Result, SemcError};
use crate::nn::{ops, BatchNorm2d, Builder, Conv2d, Conv2dSpec, Linear};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsfmConfig {
    /// Apply normalization both after the depthwise conv and after the
    /// pointwise conv of every ACE stage. When off only the latter remains.
    pub ace_double_norm: bool,
    pub reduction: usize,
    pub spatial_kernel: usize,
    pub scale_kernels: Vec<usize>,
    pub shuffle_groups: usize,
}

impl Default for SsfmConfig {
    fn default() -> Self {
        Self {
            ace_double_norm: true,
            reduction: 16,
            spatial_kernel: 7,
            scale_kernels: vec![1, 3, 5, 7],
            shuffle_groups: 4,
        }
    }
}

impl SsfmConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.reduction == 0 || !channels.is_multiple_of(self.reduction) {
            return Err(SemcError::Config(format!(
                "{channels} channels not divisible by reduction ratio {}",
                self.reduction
            )));
        }
        if self.spatial_kernel.is_multiple_of(2) {
            return Err(SemcError::Config("spatial_kernel must be odd".into()));
        }
        if self.scale_kernels.is_empty() || self.scale_kernels.iter().any(|k| k % 2 == 0) {
            return Err(SemcError::Config(format!(
                "scale_kernels must be a non-empty list of odd sizes, got {:?}",
                self.scale_kernels
            )));
        }
        let concat = channels * self.scale_kernels.len();
        if self.shuffle_groups == 0 || !concat.is_multiple_of(self.shuffle_groups) {
            return Err(SemcError::Config(format!(
                "{concat} concatenated channels not divisible by shuffle_groups {}",
                self.shuffle_groups
            )));
        }
        Ok(())
    }
}

/// Number of stride-2 stages that bring `shallow_side` down to `deep_side`.
pub fn ace_num_stages(shallow_side: usize, deep_side: usize) -> Result<usize> {
    if deep_side == 0
        || !shallow_side.is_multiple_of(deep_side)
        || !(shallow_side / deep_side).is_power_of_two()
    {
        return Err(SemcError::Shape(format!(
            "shallow side {shallow_side} is not a power-of-two multiple of deep side {deep_side}"
        )));
    }
    Ok((shallow_side / deep_side).trailing_zeros() as usize)
}

#[derive(Debug, Clone)]
struct AceStage {
    depthwise: Conv2d,
    inner_bn: Option<BatchNorm2d>,
    pointwise: Conv2d,
    outer_bn: BatchNorm2d,
}

/// Adaptive compression-expansion block.
#[derive(Debug, Clone)]
pub struct AceBlock {
    stages: Vec<AceStage>,
    project: Conv2d,
    project_bn: BatchNorm2d,
    c_in: usize,
}

impl AceBlock {
    pub fn new(
        b: &Builder<'_>,
        c_in: usize,
        c_out: usize,
        num_stages: usize,
        double_norm: bool,
    ) -> Result<Self> {
        let mut stages = Vec::with_capacity(num_stages);
        let mut c = c_in;
        for i in 0..num_stages {
            let sb = b.pp(format!("stage{i}"));
            let dw = Conv2dSpec::same(c, c, 3).stride(2).groups(c);
            stages.push(AceStage {
                depthwise: Conv2d::new(&sb.pp("dw"), dw)?,
                inner_bn: if double_norm {
                    Some(BatchNorm2d::new(&sb.pp("bn_inner"), c)?)
                } else {
                    None
                },
                pointwise: Conv2d::new(&sb.pp("pw"), Conv2dSpec::same(c, 2 * c, 1))?,
                outer_bn: BatchNorm2d::new(&sb.pp("bn_outer"), 2 * c)?,
            });
            c *= 2;
        }
        Ok(Self {
            stages,
            project: Conv2d::new(&b.pp("project"), Conv2dSpec::same(c, c_out, 1))?,
            project_bn: BatchNorm2d::new(&b.pp("project_bn"), c_out)?,
            c_in,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Channel widths after each stage.
    pub fn stage_channels(&self) -> Vec<usize> {
        (1..=self.stages.len()).map(|i| self.c_in << i).collect()
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let factor = 1usize << self.stages.len();
        if c != self.c_in || h % factor != 0 || w % factor != 0 {
            return Err(SemcError::Shape(format!(
                "ACE input {c}×{h}×{w} incompatible with {} channels and {} stride-2 stages",
                self.c_in,
                self.stages.len()
            )));
        }
        let stages = self.forward_stages(x, train)?;
        let h = stages.last().unwrap_or(x);
        ops::relu(&self.project_bn.forward(&self.project.forward(h)?, train)?)
    }

    /// Output of every stride-2 stage, before the final projection.
    pub fn forward_stages(&self, x: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let mut out: Vec<Tensor> = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let h = out.last().unwrap_or(x);
            let mut y = s.depthwise.forward(h)?;
            if let Some(bn) = &s.inner_bn {
                y = bn.forward(&y, train)?;
            }
            let y = ops::relu(&y)?;
            out.push(s.outer_bn.forward(&s.pointwise.forward(&y)?, train)?);
        }
        Ok(out)
    }
}

/// Element-wise fusion of an aligned shallow map with a deep map.
pub fn fuse_add(aligned: &Tensor, deep: &Tensor) -> Result<Tensor> {
    if aligned.dims() != deep.dims() {
        return Err(SemcError::Shape(format!(
            "cannot fuse {:?} with {:?}",
            aligned.dims(),
            deep.dims()
        )));
    }
    Ok((aligned + deep)?)
}

/// Test hooks for [`SamcBlock::forward_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct SamcHooks {
    /// Replace both attention maps with ones.
    pub unit_attention: bool,
}

#[derive(Debug, Clone)]
pub struct SamcOutput {
    /// (B, C), values in (0, 1).
    pub channel_attn: Tensor,
    /// (B, 1, H, W), values in (0, 1).
    pub spatial_attn: Tensor,
    /// S ⊙ C ⊙ M.
    pub enhanced: Tensor,
    pub out: Tensor,
}

/// Structure-aware multi-context block.
#[derive(Debug, Clone)]
pub struct SamcBlock {
    fc1: Linear,
    fc2: Linear,
    spatial: Conv2d,
    scales: Vec<Conv2d>,
    compress: Conv2d,
    shuffle_groups: usize,
    channels: usize,
}

impl SamcBlock {
    pub fn new(b: &Builder<'_>, channels: usize, cfg: &SsfmConfig) -> Result<Self> {
        cfg.validate(channels)?;
        let hidden = channels / cfg.reduction;
        let scales = cfg
            .scale_kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                Conv2d::new(
                    &b.pp(format!("scale{i}")),
                    Conv2dSpec::same(channels, channels, k).with_bias(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let k = cfg.scale_kernels.len();
        Ok(Self {
            fc1: Linear::new(&b.pp("fc1"), channels, hidden)?,
            fc2: Linear::new(&b.pp("fc2"), hidden, channels)?,
            spatial: Conv2d::new(
                &b.pp("spatial"),
                Conv2dSpec::same(2, 1, cfg.spatial_kernel).with_bias(),
            )?,
            scales,
            compress: Conv2d::new(
                &b.pp("compress"),
                Conv2dSpec::same(k * channels, channels, 1).with_bias(),
            )?,
            shuffle_groups: cfg.shuffle_groups,
            channels,
        })
    }

    fn excite(&self, pooled: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&ops::relu(&self.fc1.forward(pooled)?)?)
    }

    /// Channel weights in (0,1) from shared-FC avg- and max-pool branches.
    pub fn channel_attention(&self, m: &Tensor) -> Result<Tensor> {
        let avg = self.excite(&ops::global_avg_pool(m)?)?;
        let max = self.excite(&ops::global_max_pool(m)?)?;
        ops::sigmoid(&(avg + max)?)
    }

    /// Spatial map in (0,1) from channel-mean and channel-max descriptors.
    pub fn spatial_attention(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(1)?;
        let max = x.max_keepdim(1)?;
        let desc = Tensor::cat(&[mean, max], 1)?;
        ops::sigmoid(&self.spatial.forward(&desc)?)
    }

    pub fn forward(&self, m: &Tensor) -> Result<SamcOutput> {
        self.forward_with(m, SamcHooks::default())
    }

    pub fn forward_with(&self, m: &Tensor, hooks: SamcHooks) -> Result<SamcOutput> {
        let (b, c, h, w) = m.dims4()?;
        if c != self.channels {
            return Err(SemcError::Shape(format!(
                "SAMC expects {} channels, got {c}",
                self.channels
            )));
        }
        let (channel_attn, spatial_attn) = if hooks.unit_attention {
            (
                Tensor::ones((b, c), m.dtype(), m.device())?,
                Tensor::ones((b, 1, h, w), m.dtype(), m.device())?,
            )
        } else {
            let ca = self.channel_attention(m)?;
            let refined = m.broadcast_mul(&ca.reshape((b, c, 1, 1))?)?;
            let sa = self.spatial_attention(&refined)?;
            (ca, sa)
        };
        let enhanced = m
            .broadcast_mul(&channel_attn.reshape((b, c, 1, 1))?)?
            .broadcast_mul(&spatial_attn)?;
        let scales = self
            .scales
            .iter()
            .map(|conv| conv.forward(&enhanced))
            .collect::<Result<Vec<_>>>()?;
        let concat = Tensor::cat(&scales, 1)?;
        let shuffled = ops::channel_shuffle(&concat, self.shuffle_groups)?;
        let out = self.compress.forward(&shuffled)?;
        Ok(SamcOutput {
            channel_attn,
            spatial_attn,
            enhanced,
            out,
        })
    }
}

/// Which shallow level (0-based F1..F3) feeds expert branch `expert`.
pub fn shallow_level_for(expert: usize) -> usize {
    expert % 3
}

/// Ablation switches that reroute the fusion path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionFlags {
    pub ace_on: bool,
    pub samc_on: bool,
}

impl Default for FusionFlags {
    fn default() -> Self {
        Self {
            ace_on: true,
            samc_on: true,
        }
    }
}

/// Per-expert fused maps and refinements.
#[derive(Debug, Clone)]
pub struct FusedFeatureSet {
    pub fused: Vec<Tensor>,
    pub channel_attn: Vec<Tensor>,
    pub spatial_attn: Vec<Tensor>,
    pub out: Vec<Tensor>,
}

#[derive(Debug, Clone)]
struct Branch {
    ace: AceBlock,
    samc: SamcBlock,
}

/// One independent ACE + SAMC branch per expert.
#[derive(Debug, Clone)]
pub struct Ssfm {
    branches: Vec<Branch>,
}

impl Ssfm {
    pub fn new(b: &Builder<'_>, backbone: &BackboneConfig, cfg: &SsfmConfig) -> Result<Self> {
        let (c_out, deep_side) = backbone.level_shape(3);
        cfg.validate(c_out)?;
        let branches = (0..backbone.num_experts)
            .map(|n| {
                let bb = b.pp(format!("ssfm.branch{n}"));
                let level = shallow_level_for(n);
                let (c_in, side) = backbone.level_shape(level);
                let stages = ace_num_stages(side, deep_side)?;
                Ok(Branch {
                    ace: AceBlock::new(&bb.pp("ace"), c_in, c_out, stages, cfg.ace_double_norm)?,
                    samc: SamcBlock::new(&bb.pp("samc"), c_out, cfg)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { branches })
    }

    pub fn ace(&self, n: usize) -> &AceBlock {
        &self.branches[n].ace
    }

    pub fn samc(&self, n: usize) -> &SamcBlock {
        &self.branches[n].samc
    }

    pub fn forward(
        &self,
        shallow: &[Tensor; 3],
        deep: &[Tensor],
        flags: FusionFlags,
        train: bool,
    ) -> Result<FusedFeatureSet> {
        if deep.len() != self.branches.len() {
            return Err(SemcError::Shape(format!(
                "{} deep maps for {} branches",
                deep.len(),
                self.branches.len()
            )));
        }
        let mut set = FusedFeatureSet {
            fused: Vec::new(),
            channel_attn: Vec::new(),
            spatial_attn: Vec::new(),
            out: Vec::new(),
        };
        for (n, (branch, d)) in self.branches.iter().zip(deep).enumerate() {
            let m = if flags.ace_on {
                let aligned = branch.ace.forward(&shallow[shallow_level_for(n)], train)?;
                fuse_add(&aligned, d)?
            } else {
                d.clone()
            };
            if flags.samc_on {
                let s = branch.samc.forward(&m)?;
                set.channel_attn.push(s.channel_attn);
                set.spatial_attn.push(s.spatial_attn);
                set.out.push(s.out);
            } else {
                set.out.push(m.clone());
            }
            set.fused.push(m);
        }
        Ok(set)
    }
}

/// Mean over experts of the globally average-pooled refined maps: (B, C).
pub fn pooled_expert_mean(out: &[Tensor]) -> Result<Tensor> {
    let pooled = out
        .iter()
        .map(ops::global_avg_pool)
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&pooled, 0)?.mean(0)?)
}
