use std::fmt;
use std::path::Path;

use anyhow::Result;
use candle_core::{DType, Tensor};
use serde::Serialize;

use semc::backbone::expert_parameter_groups;
use semc::data::{render, to_batch, SynthSpec};
use semc::engine::checkpoint;
use semc::mcrm::ContrastiveQueue;
use semc::model::{ForwardOptions, ModelConfig, Semc};
use semc::ssfm::FusionFlags;

pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct GroupCount {
    pub name: String,
    pub tensors: usize,
    pub values: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct InspectReport {
    pub num_experts: usize,
    pub num_classes: usize,
    pub input_size: usize,
    pub total_params: usize,
    pub groups: Vec<GroupCount>,
    pub queue_len: usize,
    pub queue_capacity: usize,
    pub shapes: Vec<(String, Vec<usize>)>,
    /// Noise-free gate weights, one row per sample.
    pub gate_weights: Vec<Vec<f64>>,
    pub row_sums: Vec<f64>,
    /// Per expert, counts of weights in `HISTOGRAM_BINS` equal bins over [0,1].
    pub histogram: Vec<Vec<usize>>,
}

fn count(model: &Semc, name: &str, names: &[String]) -> GroupCount {
    let values = names
        .iter()
        .filter_map(|n| model.store().get(n))
        .map(|v| v.elem_count())
        .sum();
    GroupCount {
        name: name.to_string(),
        tensors: names.len(),
        values,
    }
}

/// Sample images from the synthetic renderer, one class per row in turn.
fn sample_batch(cfg: &ModelConfig, batch: usize) -> Result<Tensor> {
    let spec = SynthSpec {
        classes: cfg.num_classes,
        size: cfg.backbone.input_size,
        ..SynthSpec::default()
    };
    let images: Vec<_> = (0..batch)
        .map(|i| render(&spec, i % cfg.num_classes, i as u64).image)
        .collect();
    Ok(to_batch(&images, DType::F32, &candle_core::Device::Cpu)?)
}

/// Builds the report for `checkpoint`, or for a fresh model from `cfg`.
pub fn inspect(
    cfg: &ModelConfig,
    flags: FusionFlags,
    checkpoint_path: Option<&Path>,
    batch: usize,
    seed: u64,
) -> Result<InspectReport> {
    let (model, queue) = match checkpoint_path {
        Some(path) => {
            let ckpt = checkpoint::read(path)?;
            let model = Semc::new(&ckpt.header.model, DType::F32, seed)?;
            model.store().restore(&ckpt.params)?;
            (model, ckpt.header.queue)
        }
        None => {
            let model = Semc::new(cfg, DType::F32, seed)?;
            let queue: ContrastiveQueue = model.new_queue();
            (model, queue)
        }
    };
    let cfg = model.config().clone();
    let n = cfg.backbone.num_experts;
    let groups = expert_parameter_groups(model.store(), n);
    let mut counts = vec![count(&model, "shared", &groups.shared)];
    for (i, names) in groups.experts.iter().enumerate() {
        counts.push(count(&model, &format!("expert{i}"), names));
    }

    let x = sample_batch(&cfg, batch.max(1))?;
    let mut shapes = vec![("input".to_string(), x.dims().to_vec())];
    let pyramid = model.backbone().forward(&x, false)?;
    for (i, f) in pyramid.shallow.iter().enumerate() {
        shapes.push((format!("F{}", i + 1), f.dims().to_vec()));
    }
    for (i, d) in pyramid.deep.iter().enumerate() {
        shapes.push((format!("D{}", i + 1), d.dims().to_vec()));
    }
    let out = model.forward(&x, &ForwardOptions::eval(flags, cfg.mcrm.gate_tau))?;
    for (i, o) in out.features.out.iter().enumerate() {
        shapes.push((format!("O{}", i + 1), o.dims().to_vec()));
    }
    shapes.push(("gate".into(), out.gate.weights.dims().to_vec()));
    shapes.push(("expert_logits".into(), out.expert_logits.dims().to_vec()));
    shapes.push(("fused_logits".into(), out.fused_logits.dims().to_vec()));
    if let Some(e) = out.embeddings.first() {
        shapes.push(("embedding".into(), e.dims().to_vec()));
    }

    let weights: Vec<Vec<f64>> = out.gate.weights.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let row_sums = weights.iter().map(|r| r.iter().sum()).collect();
    let mut histogram = vec![vec![0usize; HISTOGRAM_BINS]; n];
    for row in &weights {
        for (e, &w) in row.iter().enumerate() {
            let bin = ((w * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            histogram[e][bin] += 1;
        }
    }
    Ok(InspectReport {
        num_experts: n,
        num_classes: cfg.num_classes,
        input_size: cfg.backbone.input_size,
        total_params: model.store().num_params(),
        groups: counts,
        queue_len: queue.len(),
        queue_capacity: queue.capacity(),
        shapes,
        gate_weights: weights,
        row_sums,
        histogram,
    })
}

impl fmt::Display for InspectReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "model: {} experts, {} classes, {}px input, {} trainable values",
            self.num_experts, self.num_classes, self.input_size, self.total_params
        )?;
        writeln!(f, "parameter groups:")?;
        for g in &self.groups {
            writeln!(
                f,
                "  {:<8} {:>4} tensors {:>10} values",
                g.name, g.tensors, g.values
            )?;
        }
        writeln!(
            f,
            "queue occupancy: {} / {}",
            self.queue_len, self.queue_capacity
        )?;
        writeln!(f, "shapes:")?;
        for (name, dims) in &self.shapes {
            writeln!(f, "  {name:<14} {dims:?}")?;
        }
        writeln!(f, "gate weights (eval, no noise):")?;
        for (i, (row, sum)) in self.gate_weights.iter().zip(&self.row_sums).enumerate() {
            let cells: Vec<String> = row.iter().map(|w| format!("{w:.4}")).collect();
            writeln!(f, "  sample {i}: {}  sum {sum:.6}", cells.join(" "))?;
        }
        writeln!(
            f,
            "gate weight histogram ({HISTOGRAM_BINS} bins over [0,1]):"
        )?;
        for (e, bins) in self.histogram.iter().enumerate() {
            let cells: Vec<String> = bins.iter().map(usize::to_string).collect();
            writeln!(f, "  expert{e}: {}", cells.join(" "))?;
        }
        Ok(())
    }
}

/// Largest deviation of a gate row sum from one.
pub fn max_row_error(report: &InspectReport) -> f64 {
    report
        .row_sums
        .iter()
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max)
}
