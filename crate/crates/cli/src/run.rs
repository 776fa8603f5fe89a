use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use candle_core::DType;
use serde::{Deserialize, Serialize};

use semc::config::{split_assignment, ExperimentConfig};
use semc::data::{DatasetManifest, ImageSet, Split, SplitName};
use semc::engine::{checkpoint, evaluate, fit, MetricsReport, Trainer, BEST_CHECKPOINT};
use semc::model::Semc;

use crate::args::{ConfigArgs, EvalArgs};
use crate::UsageError;

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const SUMMARY_FILE: &str = "summary.json";

/// Loads the config file (or defaults) and applies `--seed` and overrides.
pub fn resolve_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let base = match &args.config {
        Some(path) => {
            if !path.exists() {
                return Err(
                    UsageError(format!("config file not found: {}", path.display())).into(),
                );
            }
            ExperimentConfig::load(path)?
        }
        None => ExperimentConfig::default(),
    };
    let mut pairs = Vec::new();
    for raw in args.set.iter().chain(&args.overrides) {
        pairs.push(split_assignment(raw)?);
    }
    let seed = args.seed.map(|s| s.to_string());
    if let Some(s) = &seed {
        pairs.push(("train.seed", s.as_str()));
    }
    Ok(base.with_overrides(pairs)?)
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.is_file() {
        return Err(UsageError(format!("output path {} is a file", dir.display())).into());
    }
    let occupied = dir.is_dir()
        && fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
    if occupied && !force {
        return Err(UsageError(format!(
            "output directory {} is not empty; pass --force to overwrite",
            dir.display()
        ))
        .into());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

/// Decoded images with their split, shared by every run on one manifest.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub split: Split,
    pub images: ImageSet,
}

impl Dataset {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let path = &cfg.data.manifest;
        if !path.is_file() {
            return Err(UsageError(format!("manifest not found: {}", path.display())).into());
        }
        let manifest = DatasetManifest::load(path)?;
        if manifest.num_classes() != cfg.model.num_classes {
            return Err(UsageError(format!(
                "manifest {} has {} classes but num_classes = {}",
                path.display(),
                manifest.num_classes(),
                cfg.model.num_classes
            ))
            .into());
        }
        let split = manifest.split(cfg.data.split_seed);
        let images = ImageSet::load(&manifest, cfg.model.backbone.input_size)?;
        log::info!(
            "loaded {} images ({} train / {} val / {} test) at {}px",
            images.len(),
            split.train.len(),
            split.val.len(),
            split.test.len(),
            images.size()
        );
        Ok(Self {
            manifest,
            split,
            images,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub best_epoch: usize,
    pub val: MetricsReport,
    pub test: MetricsReport,
    pub train_accuracy: f64,
    pub skipped_steps: usize,
}

/// Trains `cfg` into `out`, which must already exist. Writes the resolved
/// config, metrics, step log, best checkpoint and a summary.
pub fn train_into(cfg: &ExperimentConfig, data: &Dataset, out: &Path) -> Result<RunSummary> {
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_text())
        .with_context(|| format!("writing {}", out.join(RESOLVED_CONFIG).display()))?;
    let model = Semc::new(&cfg.model, DType::F32, cfg.train.seed)?;
    log::info!("model has {} trainable values", model.store().num_params());
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let policy = cfg.data.policy(cfg.model.backbone.input_size);
    let fitted = fit(
        &mut trainer,
        &data.images,
        &data.split,
        policy.as_ref(),
        Some(out),
    )?;
    trainer.restore(&fitted.best_state)?;
    let flags = cfg.train.flags();
    let batch = cfg.train.batch_size;
    let test = if data.split.test.is_empty() {
        fitted.best_val.clone()
    } else {
        evaluate(&trainer.model, flags, &data.images, &data.split.test, batch)?
    };
    let train = evaluate(
        &trainer.model,
        flags,
        &data.images,
        &data.split.train,
        batch,
    )?;
    let summary = RunSummary {
        seed: cfg.train.seed,
        best_epoch: fitted.best_epoch,
        val: fitted.best_val,
        test,
        train_accuracy: train.accuracy,
        skipped_steps: fitted.history.iter().map(|r| r.skipped).sum(),
    };
    let path = out.join(SUMMARY_FILE);
    fs::write(&path, serde_json::to_string_pretty(&summary)?)
        .with_context(|| format!("writing {}", path.display()))?;
    log::info!(
        "best epoch {}: val acc {:.2} f1 {:.2}; test acc {:.2} f1 {:.2}; train acc {:.2}",
        summary.best_epoch,
        summary.val.accuracy,
        summary.val.f1,
        summary.test.accuracy,
        summary.test.f1,
        summary.train_accuracy
    );
    Ok(summary)
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<RunSummary> {
    prepare_out_dir(out, force)?;
    let data = Dataset::load(cfg)?;
    train_into(cfg, &data, out)
}

pub fn read_summary(run: &Path) -> Result<RunSummary> {
    let path = run.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<MetricsReport> {
    let resolved = args.run.join(RESOLVED_CONFIG);
    if !resolved.is_file() {
        return Err(UsageError(format!("no {RESOLVED_CONFIG} in {}", args.run.display())).into());
    }
    let cfg = resolve_config(&ConfigArgs {
        config: Some(resolved),
        seed: None,
        set: args.set.clone(),
        overrides: Vec::new(),
    })?;
    let split: SplitName = args.split.parse()?;
    let ckpt: PathBuf = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| args.run.join(BEST_CHECKPOINT));
    let data = Dataset::load(&cfg)?;
    let model = Semc::new(&cfg.model, DType::F32, cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    checkpoint::load_into(&ckpt, &mut trainer)?;
    let indices = data.split.indices(split);
    Ok(trainer.evaluate(&data.images, indices)?)
}
