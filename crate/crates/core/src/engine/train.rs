use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::metrics::MetricsReport;
use super::optim::{collect_grads, cosine_lr, global_grad_norm, Sgd};
use crate::data::{sample_seed, AugmentPolicy, ImageSet, Split};
use crate::error::{Result, SemcError};
use crate::mcrm::{AlphaMode, ContrastiveQueue, LossBreakdown};
use crate::model::{ForwardOptions, LossOptions, Semc};
use crate::nn::Entry;
use crate::ssfm::FusionFlags;

pub const METRICS_FILE: &str = "metrics.csv";
pub const STEPS_FILE: &str = "steps.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Consecutive non-finite steps tolerated before training aborts.
pub const MAX_BAD_STEPS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ace_on: bool,
    pub samc_on: bool,
    pub lmc_on: bool,
    pub alpha_mode: AlphaMode,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 16,
            epochs: 200,
            seed: 0,
            ace_on: true,
            samc_on: true,
            lmc_on: true,
            alpha_mode: AlphaMode::Adaptive,
            grad_clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SemcError::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("train.lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "train.momentum must be in [0,1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "train.weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.batch_size < 2 {
            return bad(format!(
                "train.batch_size must be at least 2 for contrastive losses, got {}",
                self.batch_size
            ));
        }
        if self.epochs == 0 {
            return bad("train.epochs must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("train.grad_clip must be positive, got {c}"));
            }
        }
        self.alpha_mode.validate()
    }

    pub fn flags(&self) -> FusionFlags {
        FusionFlags {
            ace_on: self.ace_on,
            samc_on: self.samc_on,
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            lmc_on: self.lmc_on,
            alpha_mode: self.alpha_mode,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub grad_norm: f64,
    pub anchors_without_positives: usize,
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub lr: f64,
    /// Means over the epoch's completed steps.
    pub losses: LossBreakdown,
    pub steps: usize,
    pub skipped: usize,
    pub val: MetricsReport,
}

/// Model plus everything that evolves during training.
pub struct Trainer {
    pub model: Semc,
    pub optimizer: Sgd,
    pub queue: ContrastiveQueue,
    pub cfg: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub best_f1: Option<f64>,
    bad_steps: usize,
}

/// Step record, parameter gradients and fresh queue keys.
type StepOutputs = (StepRecord, Vec<(Entry, Tensor)>, Vec<Tensor>);

impl Trainer {
    pub fn new(model: Semc, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let queue = model.new_queue();
        Ok(Self {
            optimizer: Sgd::new(cfg.momentum, cfg.weight_decay),
            model,
            queue,
            cfg,
            epoch: 0,
            step: 0,
            best_f1: None,
            bad_steps: 0,
        })
    }

    fn gate_tau(&self) -> f64 {
        let progress = self.epoch as f64 / self.cfg.epochs as f64;
        self.model.config().mcrm.gate_tau_at(progress)
    }

    fn forward_backward(
        &self,
        x: &Tensor,
        labels: &[usize],
        lr: f64,
    ) -> Result<StepOutputs> {
        let opts = ForwardOptions {
            train: true,
            flags: self.cfg.flags(),
            gumbel_seed: Some(sample_seed(
                self.cfg.seed ^ 0x6a7e_5eed,
                self.epoch as u64,
                self.step,
            )),
            gate_tau: self.gate_tau(),
        };
        let out = self.model.forward(x, &opts)?;
        let loss = self
            .model
            .losses(&out, labels, &self.queue, &self.cfg.loss_options())?;
        if !loss.breakdown.l_total.is_finite() {
            return Err(SemcError::Numerical("L_total is not finite".into()));
        }
        let grads = collect_grads(self.model.store(), &loss.total.backward()?);
        let grad_norm = global_grad_norm(&grads)?;
        if !grad_norm.is_finite() {
            return Err(SemcError::Numerical("gradient norm is not finite".into()));
        }
        let record = StepRecord {
            epoch: self.epoch + 1,
            step: self.step + 1,
            lr,
            losses: loss.breakdown,
            grad_norm,
            anchors_without_positives: loss.anchors_without_positives,
        };
        Ok((record, grads, out.queue_keys))
    }

    /// Forward, backward, update, then enqueue the detached expert keys.
    /// A step whose loss or gradients are not finite is skipped and `None`
    /// returned; the third consecutive such step is an error.
    pub fn train_step(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        lr: f64,
    ) -> Result<Option<StepRecord>> {
        match self.forward_backward(x, labels, lr) {
            Ok((record, grads, keys)) => {
                self.optimizer.step(&grads, lr, self.cfg.grad_clip)?;
                self.model.update_ema()?;
                self.queue.update(&keys, labels)?;
                self.step += 1;
                self.bad_steps = 0;
                Ok(Some(record))
            }
            Err(SemcError::Numerical(msg)) => {
                self.bad_steps += 1;
                log::warn!(
                    "skipping step {} ({msg}); {} consecutive",
                    self.step + 1,
                    self.bad_steps
                );
                if self.bad_steps >= MAX_BAD_STEPS {
                    return Err(SemcError::Numerical(format!(
                        "{MAX_BAD_STEPS} consecutive non-finite steps, last: {msg}"
                    )));
                }
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// Noise-free evaluation over `indices`; the queue is not touched.
    pub fn evaluate(&self, set: &ImageSet, indices: &[usize]) -> Result<MetricsReport> {
        evaluate(
            &self.model,
            self.cfg.flags(),
            set,
            indices,
            self.cfg.batch_size,
        )
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.model.store().snapshot()
    }

    pub fn restore(&self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        self.model.store().restore(state)
    }

    /// Runs one epoch over `indices` in a seeded shuffled order. Trailing
    /// batches smaller than two samples are dropped.
    pub fn train_epoch(
        &mut self,
        set: &ImageSet,
        indices: &[usize],
        policy: Option<&AugmentPolicy>,
        on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
    ) -> Result<(LossBreakdown, usize, usize)> {
        let lr = cosine_lr(self.cfg.lr, self.epoch, self.cfg.epochs);
        let mut order = indices.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(
            self.cfg.seed,
            self.epoch as u64,
            u64::MAX,
        )));
        let store = self.model.store();
        let (dtype, device) = (store.dtype(), store.device().clone());
        let mut sum = [0.0f64; 7];
        let (mut done, mut skipped) = (0usize, 0usize);
        for chunk in order.chunks(self.cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, y) = set.batch(
                chunk,
                policy,
                self.cfg.seed,
                self.epoch as u64,
                dtype,
                &device,
            )?;
            match self.train_step(&x, &y, lr)? {
                Some(rec) => {
                    let l = rec.losses;
                    for (acc, v) in sum.iter_mut().zip([
                        l.l_sup, l.l_self, l.l_mc, l.l_moe, l.alpha, l.lambda, l.l_total,
                    ]) {
                        *acc += v;
                    }
                    done += 1;
                    on_step(&rec)?;
                }
                None => skipped += 1,
            }
        }
        let n = done.max(1) as f64;
        let mean = LossBreakdown {
            l_sup: sum[0] / n,
            l_self: sum[1] / n,
            l_mc: sum[2] / n,
            l_moe: sum[3] / n,
            alpha: sum[4] / n,
            lambda: sum[5] / n,
            l_total: sum[6] / n,
        };
        self.epoch += 1;
        Ok((mean, done, skipped))
    }
}

/// Predicted class per sample (argmax of the fused logits, eval mode).
pub fn predict_labels(
    model: &Semc,
    flags: FusionFlags,
    set: &ImageSet,
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<usize>> {
    let store = model.store();
    let mut predicted = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, _) = set.batch(chunk, None, 0, 0, store.dtype(), store.device())?;
        let probs = model.predict(&x, flags)?;
        let ids = probs.argmax(1)?.to_vec1::<u32>()?;
        predicted.extend(ids.into_iter().map(|i| i as usize));
    }
    Ok(predicted)
}

pub fn evaluate(
    model: &Semc,
    flags: FusionFlags,
    set: &ImageSet,
    indices: &[usize],
    batch_size: usize,
) -> Result<MetricsReport> {
    if indices.is_empty() {
        return Err(SemcError::Data("cannot evaluate an empty split".into()));
    }
    let predicted = predict_labels(model, flags, set, indices, batch_size)?;
    let truth: Vec<usize> = indices.iter().map(|&i| set.labels()[i]).collect();
    MetricsReport::from_predictions(&predicted, &truth, model.config().num_classes)
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: MetricsReport,
    pub best_state: BTreeMap<String, Tensor>,
}

pub const METRICS_HEADER: [&str; 12] = [
    "epoch",
    "lr",
    "L_sup",
    "L_self",
    "L_mc",
    "L_moe",
    "alpha",
    "L_total",
    "val_acc",
    "val_precision",
    "val_recall",
    "val_f1",
];

const STEPS_HEADER: [&str; 12] = [
    "step",
    "epoch",
    "lr",
    "L_sup",
    "L_self",
    "L_mc",
    "L_moe",
    "alpha",
    "lambda",
    "L_total",
    "grad_norm",
    "anchors_without_positives",
];

fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| SemcError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    Ok(w)
}

fn csv_error(path: &Path, e: csv::Error) -> SemcError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SemcError::io(path, io),
        other => SemcError::Data(format!("{}: {other:?}", path.display())),
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// Trains until `cfg.epochs`, evaluating on the validation split after every
/// epoch. The best epoch by validation macro F1 is kept in memory and, when
/// `out_dir` is given, written to `best.ckpt` alongside `metrics.csv` and
/// `steps.csv`.
pub fn fit(
    trainer: &mut Trainer,
    set: &ImageSet,
    split: &Split,
    policy: Option<&AugmentPolicy>,
    out_dir: Option<&Path>,
) -> Result<FitSummary> {
    if split.train.len() < 2 {
        return Err(SemcError::Data(format!(
            "training split has {} samples, need at least 2",
            split.train.len()
        )));
    }
    let paths = out_dir.map(|d| {
        (
            d.join(METRICS_FILE),
            d.join(STEPS_FILE),
            d.join(BEST_CHECKPOINT),
        )
    });
    let mut writers = match &paths {
        Some((m, s, _)) => Some((
            csv_writer(m, &METRICS_HEADER)?,
            csv_writer(s, &STEPS_HEADER)?,
        )),
        None => None,
    };
    let mut history = Vec::new();
    let mut best: Option<(usize, MetricsReport, BTreeMap<String, Tensor>)> = None;
    while trainer.epoch < trainer.cfg.epochs {
        let lr = cosine_lr(trainer.cfg.lr, trainer.epoch, trainer.cfg.epochs);
        let mut step_rows: Vec<Vec<String>> = Vec::new();
        let (losses, steps, skipped) =
            trainer.train_epoch(set, &split.train, policy, &mut |r| {
                let l = r.losses;
                step_rows.push(vec![
                    r.step.to_string(),
                    r.epoch.to_string(),
                    format!("{:.6e}", r.lr),
                    fmt(l.l_sup),
                    fmt(l.l_self),
                    fmt(l.l_mc),
                    fmt(l.l_moe),
                    fmt(l.alpha),
                    fmt(l.lambda),
                    fmt(l.l_total),
                    fmt(r.grad_norm),
                    r.anchors_without_positives.to_string(),
                ]);
                Ok(())
            })?;
        let val = trainer.evaluate(set, &split.val)?;
        let record = EpochRecord {
            epoch: trainer.epoch,
            lr,
            losses,
            steps,
            skipped,
            val,
        };
        log::info!(
            "epoch {}/{} lr {:.2e} L_total {:.4} alpha {:.3} val acc {:.2} f1 {:.2}",
            record.epoch,
            trainer.cfg.epochs,
            lr,
            losses.l_total,
            losses.alpha,
            record.val.accuracy,
            record.val.f1
        );
        let improved = best.as_ref().is_none_or(|(_, b, _)| record.val.f1 > b.f1);
        if improved {
            trainer.best_f1 = Some(record.val.f1);
            best = Some((record.epoch, record.val.clone(), trainer.snapshot()?));
            if let Some((_, _, ckpt)) = &paths {
                checkpoint::save(ckpt, trainer)?;
            }
        }
        if let (Some((mw, sw)), Some((mpath, spath, _))) = (writers.as_mut(), paths.as_ref()) {
            for row in &step_rows {
                sw.write_record(row).map_err(|e| csv_error(spath, e))?;
            }
            let l = record.losses;
            let v = &record.val;
            mw.write_record([
                record.epoch.to_string(),
                format!("{lr:.6e}"),
                fmt(l.l_sup),
                fmt(l.l_self),
                fmt(l.l_mc),
                fmt(l.l_moe),
                fmt(l.alpha),
                fmt(l.l_total),
                format!("{:.4}", v.accuracy),
                format!("{:.4}", v.precision),
                format!("{:.4}", v.recall),
                format!("{:.4}", v.f1),
            ])
            .map_err(|e| csv_error(mpath, e))?;
            mw.flush().map_err(|e| SemcError::io(mpath, e))?;
            sw.flush().map_err(|e| SemcError::io(spath, e))?;
        }
        history.push(record);
    }
    let (best_epoch, best_val, best_state) = best
        .ok_or_else(|| SemcError::State("training finished without completing an epoch".into()))?;
    Ok(FitSummary {
        history,
        best_epoch,
        best_val,
        best_state,
    })
}
