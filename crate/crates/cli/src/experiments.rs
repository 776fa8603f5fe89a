//! Multi-run protocols: the component ablation and the alpha sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use semc::config::ExperimentConfig;
use semc::mcrm::AlphaMode;

use crate::plot;
use crate::run::{prepare_out_dir, read_summary, train_into, Dataset, RunSummary, RESOLVED_CONFIG};

/// How the runs of a protocol are executed.
#[derive(Debug, Clone)]
pub enum Runner {
    InProcess,
    /// Up to `jobs` concurrent `train` subprocesses of `exe`.
    Processes {
        exe: PathBuf,
        jobs: usize,
    },
}

impl Runner {
    pub fn from_jobs(jobs: usize) -> Result<Self> {
        if jobs <= 1 {
            return Ok(Runner::InProcess);
        }
        let exe = std::env::current_exe().context("locating the semc executable")?;
        Ok(Runner::Processes { exe, jobs })
    }
}

/// One training run of a protocol.
#[derive(Debug, Clone)]
pub struct Variant {
    pub dir: PathBuf,
    pub cfg: ExperimentConfig,
}

fn spawn(exe: &Path, v: &Variant) -> Result<Child> {
    Command::new(exe)
        .arg("train")
        .arg("--config")
        .arg(v.dir.join(RESOLVED_CONFIG))
        .arg("--out")
        .arg(&v.dir)
        .arg("--force")
        .spawn()
        .with_context(|| format!("starting {}", exe.display()))
}

fn wait(mut child: Child, v: &Variant) -> Result<()> {
    let status = child.wait().context("waiting for a training process")?;
    if !status.success() {
        bail!("training run {} failed with {status}", v.dir.display());
    }
    Ok(())
}

/// Trains every variant into its own directory and returns their
/// summaries in order. All variants must share one dataset configuration.
pub fn run_variants(variants: &[Variant], runner: &Runner) -> Result<Vec<RunSummary>> {
    let Some(first) = variants.first() else {
        return Ok(Vec::new());
    };
    for v in variants {
        prepare_out_dir(&v.dir, true)?;
        fs::write(v.dir.join(RESOLVED_CONFIG), v.cfg.to_text())
            .with_context(|| format!("writing config into {}", v.dir.display()))?;
    }
    match runner {
        Runner::InProcess => {
            let data = Dataset::load(&first.cfg)?;
            variants
                .iter()
                .map(|v| {
                    log::info!("run {}", v.dir.display());
                    train_into(&v.cfg, &data, &v.dir)
                })
                .collect()
        }
        Runner::Processes { exe, jobs } => {
            // Fail fast on a missing manifest instead of inside every child.
            if !first.cfg.data.manifest.is_file() {
                return Err(crate::UsageError(format!(
                    "manifest not found: {}",
                    first.cfg.data.manifest.display()
                ))
                .into());
            }
            let mut running: Vec<(Child, &Variant)> = Vec::new();
            for v in variants {
                if running.len() >= *jobs {
                    let (child, done) = running.remove(0);
                    wait(child, done)?;
                }
                running.push((spawn(exe, v)?, v));
            }
            for (child, v) in running {
                wait(child, v)?;
            }
            variants.iter().map(|v| read_summary(&v.dir)).collect()
        }
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AblationRow {
    pub label: &'static str,
    pub slug: &'static str,
    pub ace_on: bool,
    pub samc_on: bool,
    pub lmc_on: bool,
}

const fn row(
    label: &'static str,
    slug: &'static str,
    ace_on: bool,
    samc_on: bool,
    lmc_on: bool,
) -> AblationRow {
    AblationRow {
        label,
        slug,
        ace_on,
        samc_on,
        lmc_on,
    }
}

pub const ABLATION_ROWS: [AblationRow; 5] = [
    row("baseline", "baseline", false, false, false),
    row("+ACE", "ace", true, false, false),
    row("+ACE+SAMC", "ace_samc", true, true, false),
    row("+ACE+L_mc", "ace_lmc", true, false, true),
    row("full", "full", true, true, true),
];

/// The ablation chain expected to be non-decreasing in validation F1.
pub const ABLATION_CHAIN: [&str; 4] = ["baseline", "+ACE", "+ACE+L_mc", "full"];

#[derive(Debug, Clone, Serialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub runs: Vec<RunSummary>,
    pub val_acc: f64,
    pub val_f1: f64,
    pub test_acc: f64,
    pub test_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    pub lower: String,
    pub higher: String,
    /// How far `higher` falls below `lower`, in F1 points.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderingReport {
    pub full_minus_baseline: f64,
    pub inversions: Vec<Inversion>,
}

/// Checks the mean validation F1 along [`ABLATION_CHAIN`].
pub fn ablation_ordering(results: &[AblationResult]) -> Result<OrderingReport> {
    let f1 = |label: &str| -> Result<f64> {
        results
            .iter()
            .find(|r| r.row.label == label)
            .map(|r| r.val_f1)
            .with_context(|| format!("ablation row {label} missing"))
    };
    let mut inversions = Vec::new();
    for pair in ABLATION_CHAIN.windows(2) {
        let (lo, hi) = (f1(pair[0])?, f1(pair[1])?);
        if hi < lo {
            inversions.push(Inversion {
                lower: pair[0].to_string(),
                higher: pair[1].to_string(),
                gap: lo - hi,
            });
        }
    }
    Ok(OrderingReport {
        full_minus_baseline: f1("full")? - f1("baseline")?,
        inversions,
    })
}

pub fn ablation_variants(base: &ExperimentConfig, seeds: &[u64], out: &Path) -> Vec<Variant> {
    let mut variants = Vec::new();
    for r in ABLATION_ROWS {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.train.ace_on = r.ace_on;
            cfg.train.samc_on = r.samc_on;
            cfg.train.lmc_on = r.lmc_on;
            cfg.train.seed = seed;
            variants.push(Variant {
                dir: out.join(r.slug).join(format!("seed{seed}")),
                cfg,
            });
        }
    }
    variants
}

fn csv_file(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

/// Runs the five ablation rows for every seed. Writes `ablation.csv` (one
/// row per configuration, means over seeds), `ablation_runs.csv` and
/// `ablation.md` into `out`.
pub fn cmd_ablate(
    base: &ExperimentConfig,
    seeds: &[u64],
    out: &Path,
    runner: &Runner,
) -> Result<Vec<AblationResult>> {
    if seeds.is_empty() {
        return Err(crate::UsageError("at least one seed is required".into()).into());
    }
    let variants = ablation_variants(base, seeds, out);
    let summaries = run_variants(&variants, runner)?;
    let results: Vec<AblationResult> = ABLATION_ROWS
        .iter()
        .zip(summaries.chunks(seeds.len()))
        .map(|(&row, runs)| AblationResult {
            row,
            val_acc: mean(runs.iter().map(|r| r.val.accuracy)),
            val_f1: mean(runs.iter().map(|r| r.val.f1)),
            test_acc: mean(runs.iter().map(|r| r.test.accuracy)),
            test_f1: mean(runs.iter().map(|r| r.test.f1)),
            runs: runs.to_vec(),
        })
        .collect();
    let ordering = ablation_ordering(&results)?;

    let path = out.join("ablation.csv");
    let mut w = csv_file(&path)?;
    w.write_record([
        "config", "ace_on", "samc_on", "lmc_on", "seeds", "val_acc", "val_f1", "test_acc",
        "test_f1",
    ])?;
    for r in &results {
        w.write_record([
            r.row.label.to_string(),
            r.row.ace_on.to_string(),
            r.row.samc_on.to_string(),
            r.row.lmc_on.to_string(),
            r.runs.len().to_string(),
            format!("{:.4}", r.val_acc),
            format!("{:.4}", r.val_f1),
            format!("{:.4}", r.test_acc),
            format!("{:.4}", r.test_f1),
        ])?;
    }
    w.flush()?;

    let path = out.join("ablation_runs.csv");
    let mut w = csv_file(&path)?;
    w.write_record([
        "config",
        "seed",
        "best_epoch",
        "val_acc",
        "val_f1",
        "test_acc",
        "test_f1",
        "train_acc",
    ])?;
    for r in &results {
        for s in &r.runs {
            w.write_record([
                r.row.label.to_string(),
                s.seed.to_string(),
                s.best_epoch.to_string(),
                format!("{:.4}", s.val.accuracy),
                format!("{:.4}", s.val.f1),
                format!("{:.4}", s.test.accuracy),
                format!("{:.4}", s.test.f1),
                format!("{:.4}", s.train_accuracy),
            ])?;
        }
    }
    w.flush()?;

    let mark = |on: bool| if on { "✓" } else { "" };
    let mut md =
        String::from("| Config | ACE | SAMC | L_mc | Val Acc | Val F1 | Test Acc | Test F1 |\n");
    md.push_str("|---|:-:|:-:|:-:|--:|--:|--:|--:|\n");
    for r in &results {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {:.2} | {:.2} | {:.2} | {:.2} |",
            r.row.label,
            mark(r.row.ace_on),
            mark(r.row.samc_on),
            mark(r.row.lmc_on),
            r.val_acc,
            r.val_f1,
            r.test_acc,
            r.test_f1
        );
    }
    let _ = writeln!(
        md,
        "\nSeeds: {}. Full minus baseline (val F1): {:+.2}.",
        seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(", "),
        ordering.full_minus_baseline
    );
    for inv in &ordering.inversions {
        log::warn!(
            "ablation inversion: {} is {:.2} F1 below {}",
            inv.higher,
            inv.gap,
            inv.lower
        );
        let _ = writeln!(
            md,
            "Inversion: {} is {:.2} F1 below {}.",
            inv.higher, inv.gap, inv.lower
        );
    }
    let path = out.join("ablation.md");
    fs::write(&path, md).with_context(|| format!("writing {}", path.display()))?;
    Ok(results)
}

pub const ALPHA_SWEEP: [AlphaMode; 6] = [
    AlphaMode::Fixed(0.01),
    AlphaMode::Fixed(0.05),
    AlphaMode::Fixed(0.1),
    AlphaMode::Fixed(0.2),
    AlphaMode::Fixed(0.5),
    AlphaMode::Adaptive,
];

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub alpha: AlphaMode,
    pub run: RunSummary,
}

fn alpha_slug(mode: AlphaMode) -> String {
    match mode {
        AlphaMode::Adaptive => "adaptive".into(),
        AlphaMode::Fixed(a) => format!("alpha_{a}"),
    }
}

/// One run per alpha mode and seed. Writes `sweep_alpha.csv` with one row
/// per run and the accuracy chart `sweep_alpha.png`.
pub fn cmd_sweep_alpha(
    base: &ExperimentConfig,
    seeds: &[u64],
    out: &Path,
    runner: &Runner,
) -> Result<Vec<SweepResult>> {
    if seeds.is_empty() {
        return Err(crate::UsageError("at least one seed is required".into()).into());
    }
    let mut variants = Vec::new();
    let mut modes = Vec::new();
    for mode in ALPHA_SWEEP {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.train.alpha_mode = mode;
            cfg.train.lmc_on = true;
            cfg.train.seed = seed;
            variants.push(Variant {
                dir: out.join(alpha_slug(mode)).join(format!("seed{seed}")),
                cfg,
            });
            modes.push(mode);
        }
    }
    let summaries = run_variants(&variants, runner)?;
    let results: Vec<SweepResult> = modes
        .into_iter()
        .zip(summaries)
        .map(|(alpha, run)| SweepResult { alpha, run })
        .collect();

    let path = out.join("sweep_alpha.csv");
    let mut w = csv_file(&path)?;
    w.write_record([
        "alpha",
        "seed",
        "best_epoch",
        "val_acc",
        "val_f1",
        "test_acc",
        "test_f1",
    ])?;
    for r in &results {
        let alpha = match r.alpha {
            AlphaMode::Adaptive => "adaptive".to_string(),
            AlphaMode::Fixed(a) => a.to_string(),
        };
        w.write_record([
            alpha,
            r.run.seed.to_string(),
            r.run.best_epoch.to_string(),
            format!("{:.4}", r.run.val.accuracy),
            format!("{:.4}", r.run.val.f1),
            format!("{:.4}", r.run.test.accuracy),
            format!("{:.4}", r.run.test.f1),
        ])?;
    }
    w.flush()?;

    let fixed: Vec<(f64, f64)> = ALPHA_SWEEP
        .iter()
        .filter_map(|m| match *m {
            AlphaMode::Fixed(a) => Some((
                a,
                mean(
                    results
                        .iter()
                        .filter(|r| r.alpha == *m)
                        .map(|r| r.run.test.accuracy),
                ),
            )),
            AlphaMode::Adaptive => None,
        })
        .collect();
    let adaptive = mean(
        results
            .iter()
            .filter(|r| r.alpha == AlphaMode::Adaptive)
            .map(|r| r.run.test.accuracy),
    );
    plot::alpha_chart(&fixed, adaptive, &out.join("sweep_alpha.png"))?;
    Ok(results)
}
