//! Shared residual encoder (stages 1-3) with parameter-independent
//! fourth-stage expert branches.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SemcError};
use crate::nn::{ops, BatchNorm2d, Builder, Conv2d, Conv2dSpec, ParamStore};

/// Output strides of F1, F2, F3 and the expert maps.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    /// Residual basic blocks per stage; `[2, 2, 2, 2]` is the 18-layer layout.
    pub blocks_per_stage: [usize; 4],
    pub num_experts: usize,
    pub stem_kernel: usize,
    /// Start every expert from a copy of expert 0 instead of independent draws.
    pub clone_init_experts: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: 512,
            in_channels: 1,
            stage_channels: [64, 128, 256, 512],
            blocks_per_stage: [2, 2, 2, 2],
            num_experts: 3,
            stem_kernel: 7,
            clone_init_experts: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.stage_channels;
        if c[0] == 0 || c.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(SemcError::Config(format!(
                "stage_channels must double at every stage, got {c:?}"
            )));
        }
        if self.num_experts < 2 {
            return Err(SemcError::Config(format!(
                "num_experts must be at least 2, got {}",
                self.num_experts
            )));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(SemcError::Config(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if !matches!(self.in_channels, 1 | 3) {
            return Err(SemcError::Config(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(SemcError::Config(
                "every stage needs at least one block".into(),
            ));
        }
        if self.stem_kernel.is_multiple_of(2) {
            return Err(SemcError::Config("stem_kernel must be odd".into()));
        }
        Ok(())
    }

    /// (channels, side) of F1, F2, F3 and of each expert map.
    pub fn level_shape(&self, level: usize) -> (usize, usize) {
        (
            self.stage_channels[level],
            self.input_size / STAGE_STRIDES[level],
        )
    }

    pub fn deep_channels(&self) -> usize {
        self.stage_channels[3]
    }
}

/// Shallow features F1..F3 and one deep map per expert.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub shallow: [Tensor; 3],
    pub deep: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn validate(&self, cfg: &BackboneConfig) -> Result<()> {
        let batch = self.shallow[0].dims4()?.0;
        for (level, f) in self.shallow.iter().enumerate() {
            let (c, s) = cfg.level_shape(level);
            if f.dims() != [batch, c, s, s] {
                return Err(SemcError::Shape(format!(
                    "F{} has shape {:?}, expected {:?}",
                    level + 1,
                    f.dims(),
                    [batch, c, s, s]
                )));
            }
        }
        let (c, s) = cfg.level_shape(3);
        for (n, d) in self.deep.iter().enumerate() {
            if d.dims() != [batch, c, s, s] {
                return Err(SemcError::Shape(format!(
                    "D{} has shape {:?}, expected {:?}",
                    n + 1,
                    d.dims(),
                    [batch, c, s, s]
                )));
            }
        }
        for t in self.shallow.iter().chain(&self.deep) {
            if !ops::all_finite(t)? {
                return Err(SemcError::Numerical("non-finite feature map".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(b: &Builder<'_>, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || c_in != c_out {
            let spec = Conv2dSpec::same(c_in, c_out, 1).stride(stride);
            Some((
                Conv2d::new(&b.pp("downsample.conv"), spec)?,
                BatchNorm2d::new(&b.pp("downsample.bn"), c_out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(
                &b.pp("conv1"),
                Conv2dSpec::same(c_in, c_out, 3).stride(stride),
            )?,
            bn1: BatchNorm2d::new(&b.pp("bn1"), c_out)?,
            conv2: Conv2d::new(&b.pp("conv2"), Conv2dSpec::same(c_out, c_out, 3))?,
            bn2: BatchNorm2d::new(&b.pp("bn2"), c_out)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = ops::relu(&self.bn1.forward(&self.conv1.forward(x)?, train)?)?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        ops::relu(&(y + skip)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<BasicBlock>,
}

impl Stage {
    fn new(
        b: &Builder<'_>,
        c_in: usize,
        c_out: usize,
        stride: usize,
        depth: usize,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| {
                let (ci, s) = if i == 0 { (c_in, stride) } else { (c_out, 1) };
                BasicBlock::new(&b.pp(i.to_string()), ci, c_out, s)
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.blocks
            .iter()
            .try_fold(x.clone(), |h, blk| blk.forward(&h, train))
    }
}

/// Name prefix of expert `n`'s stage-4 parameters.
pub fn expert_prefix(n: usize) -> String {
    format!("backbone.expert{n}.")
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    shared: Vec<Stage>,
    experts: Vec<Stage>,
}

impl Backbone {
    pub fn new(b: &Builder<'_>, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let b = b.pp("backbone");
        let c = cfg.stage_channels;
        let d = cfg.blocks_per_stage;
        let stem_spec = Conv2dSpec::same(cfg.in_channels, c[0], cfg.stem_kernel).stride(2);
        let stem_conv = Conv2d::new(&b.pp("stem.conv"), stem_spec)?;
        let stem_bn = BatchNorm2d::new(&b.pp("stem.bn"), c[0])?;
        let shared = vec![
            Stage::new(&b.pp("stage1"), c[0], c[0], 1, d[0])?,
            Stage::new(&b.pp("stage2"), c[0], c[1], 2, d[1])?,
            Stage::new(&b.pp("stage3"), c[1], c[2], 2, d[2])?,
        ];
        let experts = (0..cfg.num_experts)
            .map(|n| Stage::new(&b.pp(format!("expert{n}")), c[2], c[3], 2, d[3]))
            .collect::<Result<Vec<_>>>()?;
        let backbone = Self {
            cfg: cfg.clone(),
            stem_conv,
            stem_bn,
            shared,
            experts,
        };
        if cfg.clone_init_experts {
            backbone.clone_experts(b.store())?;
        }
        Ok(backbone)
    }

    /// Copies expert 0's stage-4 tensors into every other expert.
    fn clone_experts(&self, store: &ParamStore) -> Result<()> {
        let entries = store.entries();
        let src = expert_prefix(0);
        for e in entries.iter().filter(|e| e.name.starts_with(&src)) {
            let suffix = &e.name[src.len()..];
            for n in 1..self.cfg.num_experts {
                let dst = format!("{}{suffix}", expert_prefix(n));
                let var = store
                    .get(&dst)
                    .ok_or_else(|| SemcError::State(format!("missing expert tensor {dst}")))?;
                var.set(&e.var.as_tensor().copy()?)?;
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<FeaturePyramid> {
        let cfg = &self.cfg;
        let (_, c, h, w) = x.dims4().map_err(|_| {
            SemcError::Shape(format!("expected a B×C×H×W batch, got {:?}", x.dims()))
        })?;
        if c != cfg.in_channels || h != cfg.input_size || w != cfg.input_size {
            return Err(SemcError::Shape(format!(
                "input is {c}×{h}×{w}, expected {}×{s}×{s}",
                cfg.in_channels,
                s = cfg.input_size
            )));
        }
        if !ops::all_finite(x)? {
            return Err(SemcError::Numerical(
                "input batch contains non-finite values".into(),
            ));
        }
        let stem = ops::relu(&self.stem_bn.forward(&self.stem_conv.forward(x)?, train)?)?;
        let stem = stem.max_pool2d(2)?;
        let f1 = self.shared[0].forward(&stem, train)?;
        let f2 = self.shared[1].forward(&f1, train)?;
        let f3 = self.shared[2].forward(&f2, train)?;
        let deep = self
            .experts
            .iter()
            .map(|e| e.forward(&f3, train))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeaturePyramid {
            shallow: [f1, f2, f3],
            deep,
        })
    }
}

/// Parameter names split into one set per expert branch plus the shared rest.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGroups {
    pub shared: Vec<String>,
    pub experts: Vec<Vec<String>>,
}

impl ParameterGroups {
    pub fn len(&self) -> usize {
        1 + self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Partitions the trainable parameters of `store`. Expert `n`'s set holds
/// exactly its fourth-stage tensors; everything else is shared.
pub fn expert_parameter_groups(store: &ParamStore, num_experts: usize) -> ParameterGroups {
    let mut groups = ParameterGroups {
        shared: Vec::new(),
        experts: vec![Vec::new(); num_experts],
    };
    for e in store.params() {
        match (0..num_experts).find(|&n| e.name.starts_with(&expert_prefix(n))) {
            Some(n) => groups.experts[n].push(e.name),
            None => groups.shared.push(e.name),
        }
    }
    groups
}
