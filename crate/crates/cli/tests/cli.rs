use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semc_cli::{UsageError, EXIT_USAGE};
use tempfile::TempDir;

fn semc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semc"))
        .args(args)
        .env("SEMC_DETERMINISTIC", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn semc")
}

fn ok(args: &[&str]) -> Output {
    let out = semc(args);
    assert!(
        out.status.success(),
        "semc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn toy_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/toy.cfg")
        .display()
        .to_string()
}

struct Toy {
    dir: TempDir,
}

impl Toy {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data").display().to_string();
        ok(&[
            "gen-synth",
            "--out",
            &data,
            "--classes",
            "3",
            "--per-class",
            "8",
            "--size",
            "32",
        ]);
        Toy { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn manifest(&self) -> String {
        format!("data.manifest={}", self.path("data/manifest.csv").display())
    }

    fn run(&self, sub: &str, out: &str, extra: &[&str]) -> Output {
        let out = self.path(out).display().to_string();
        let cfg = toy_config();
        let manifest = self.manifest();
        let mut args = vec![sub, "--config", &cfg, "--set", &manifest, "--out", &out];
        args.extend_from_slice(extra);
        semc(&args)
    }
}

fn read_csv(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(Result::unwrap)
        .collect()
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records()
        .map(|rec| rec.unwrap()[idx].to_string())
        .collect()
}

#[test]
fn usage_error_maps_to_exit_two() {
    let err = anyhow::Error::new(UsageError("bad".into())).context("outer");
    assert_eq!(semc_cli::exit_code(&err), EXIT_USAGE);
    assert_eq!(
        semc_cli::exit_code(&anyhow::anyhow!("io")),
        semc_cli::EXIT_RUNTIME
    );
}

#[test]
fn missing_manifest_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere/manifest.csv");
    let set = format!("data.manifest={}", missing.display());
    let out_dir = dir.path().join("run").display().to_string();
    let out = semc(&[
        "train",
        "--config",
        &toy_config(),
        "--set",
        &set,
        "--out",
        &out_dir,
    ]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(&missing.display().to_string()), "{stderr}");
}

#[test]
fn unknown_override_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run").display().to_string();
    let out = semc(&[
        "train",
        "--config",
        &toy_config(),
        "--set",
        "mcrm.bogus=1",
        "--out",
        &out_dir,
    ]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mcrm.bogus"));
}

#[test]
fn train_then_eval_round_trip() {
    let toy = Toy::new();
    let out = toy.run("train", "run", &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "config.resolved",
        "summary.json",
        "metrics.csv",
        "steps.csv",
        "best.ckpt",
    ] {
        assert!(toy.path("run").join(f).is_file(), "missing {f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(toy.path("run/summary.json")).unwrap())
            .unwrap();
    assert_eq!(read_csv(&toy.path("run/metrics.csv")).len(), 3);

    let run = toy.path("run").display().to_string();
    let eval = ok(&["eval", "--run", &run, "--split", "test"]);
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    let close = |a: &serde_json::Value, b: &serde_json::Value| {
        (a.as_f64().unwrap() - b.as_f64().unwrap()).abs() < 1e-9
    };
    assert!(
        close(&report["accuracy"], &summary["test"]["accuracy"]),
        "{report} vs {summary}"
    );
    assert!(close(&report["f1"], &summary["test"]["f1"]));

    // A second train into the same directory needs --force.
    let again = toy.run("train", "run", &[]);
    assert_eq!(again.status.code(), Some(EXIT_USAGE));
    assert!(toy.run("train", "run", &["--force"]).status.success());
}

#[test]
fn zero_lambda_makes_mc_equal_sup() {
    let toy = Toy::new();
    let out = toy.run(
        "train",
        "run",
        &["--set", "mcrm.lambda=0.0", "--set", "train.epochs=1"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let steps = toy.path("run/steps.csv");
    let sup = column(&steps, "L_sup");
    assert!(!sup.is_empty());
    assert_eq!(sup, column(&steps, "L_mc"));
}

#[test]
fn inspect_fresh_model() {
    let toy = Toy::new();
    let cfg = toy_config();
    let out = ok(&[
        "inspect",
        "--config",
        &cfg,
        "--set",
        &toy.manifest(),
        "--json",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["queue_len"], 0);
    assert_eq!(report["num_experts"], 3);
    let groups: Vec<&str> = report["groups"]
        .as_array()
        .unwrap()
        .iter()
        .map(|g| g["name"].as_str().unwrap())
        .collect();
    assert_eq!(
        groups.iter().filter(|g| g.starts_with("expert")).count(),
        3,
        "{groups:?}"
    );
    for s in report["row_sums"].as_array().unwrap() {
        assert!((s.as_f64().unwrap() - 1.0).abs() <= 1e-6);
    }
    let text = ok(&["inspect", "--config", &cfg]);
    assert!(String::from_utf8_lossy(&text.stdout).contains("queue"));
}

#[test]
fn ablate_writes_five_rows_with_flags() {
    let toy = Toy::new();
    let out = toy.run("ablate", "abl", &["--set", "train.epochs=1"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = read_csv(&toy.path("abl/ablation.csv"));
    assert_eq!(rows.len(), 5);
    let flags = |r: &csv::StringRecord| (r[1].to_string(), r[2].to_string(), r[3].to_string());
    assert_eq!(&rows[0][0], "baseline");
    assert_eq!(
        flags(&rows[0]),
        ("false".into(), "false".into(), "false".into())
    );
    assert_eq!(&rows[4][0], "full");
    assert_eq!(
        flags(&rows[4]),
        ("true".into(), "true".into(), "true".into())
    );
    for slug in ["baseline", "ace", "ace_samc", "ace_lmc", "full"] {
        let resolved =
            std::fs::read_to_string(toy.path("abl").join(slug).join("seed0/config.resolved"))
                .unwrap();
        assert!(resolved.contains("train.ace_on"), "{slug}");
    }
    assert!(toy.path("abl/ablation.md").is_file());
}

#[test]
fn sweep_alpha_writes_one_row_per_run() {
    let toy = Toy::new();
    let out = toy.run("sweep-alpha", "sweep", &["--set", "train.epochs=1"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = read_csv(&toy.path("sweep/sweep_alpha.csv"));
    assert_eq!(rows.len(), 6);
    assert_eq!(&rows[5][0], "adaptive");
    let png = image::open(toy.path("sweep/sweep_alpha.png")).unwrap();
    assert_eq!((png.width(), png.height()), (640, 400));
}

#[test]
fn gen_synth_writes_a_manifest() {
    let toy = Toy::new();
    let rows = read_csv(&toy.path("data/manifest.csv"));
    assert_eq!(rows.len(), 24);
    for r in &rows {
        assert!(toy.path("data").join(&r[0]).is_file(), "{:?}", r);
    }
}
