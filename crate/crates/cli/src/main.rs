use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;

use semc::data::{gen_synth, SynthSpec};
use semc_cli::args::{Cli, Command};
use semc_cli::exit_code;
use semc_cli::experiments::{cmd_ablate, cmd_sweep_alpha, Runner};
use semc_cli::inspect::inspect;
use semc_cli::run::{cmd_eval, cmd_train, prepare_out_dir, resolve_config};

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let cfg = resolve_config(&a.config)?;
            let summary = cmd_train(&cfg, &a.out.out, a.out.force)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Eval(a) => {
            let report = cmd_eval(&a)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate(a) => {
            let cfg = resolve_config(&a.config)?;
            prepare_out_dir(&a.out.out, a.out.force)?;
            let runner = Runner::from_jobs(a.jobs)?;
            cmd_ablate(&cfg, &a.seeds, &a.out.out, &runner)?;
            print!(
                "{}",
                std::fs::read_to_string(a.out.out.join("ablation.md"))?
            );
        }
        Command::SweepAlpha(a) => {
            let cfg = resolve_config(&a.config)?;
            prepare_out_dir(&a.out.out, a.out.force)?;
            let runner = Runner::from_jobs(a.jobs)?;
            let results = cmd_sweep_alpha(&cfg, &a.seeds, &a.out.out, &runner)?;
            for r in results {
                println!(
                    "alpha {:<10} seed {} test acc {:.2} f1 {:.2}",
                    r.alpha.to_string(),
                    r.run.seed,
                    r.run.test.accuracy,
                    r.run.test.f1
                );
            }
        }
        Command::GenSynth(a) => {
            prepare_out_dir(&a.out.out, a.out.force)?;
            let spec = SynthSpec {
                classes: a.classes,
                per_class: a.per_class,
                size: a.size,
                seed: a.seed,
                contrast: a.contrast,
                ..SynthSpec::default()
            };
            let manifest = gen_synth(&a.out.out, &spec)?;
            println!(
                "wrote {} images in {} classes to {}",
                manifest.len(),
                manifest.num_classes(),
                a.out.out.display()
            );
        }
        Command::Inspect(a) => {
            let cfg = resolve_config(&a.config)?;
            let report = inspect(
                &cfg.model,
                cfg.train.flags(),
                a.checkpoint.as_deref(),
                a.batch,
                cfg.train.seed,
            )?;
            if a.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{report}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if std::env::var("SEMC_DETERMINISTIC").is_ok_and(|v| v == "1") {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
