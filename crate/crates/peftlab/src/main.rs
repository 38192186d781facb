//! Experiment runner CLI.
//!
//! Verbs: `train`, `sweep`, `ntk`, `budget`. Flags: `--config PATH`,
//! `--out DIR`, `--seed N`, `--jobs N`, `--precision {f32,f64}`.
//! Exit codes: 0 success, 2 config error, 3 data error, 4 divergence,
//! 5 resource limit.

use std::process::ExitCode;

use peftlab::budget::BudgetMethod;
use peftlab::cli::config::{CliError, ExperimentConfig};
use peftlab::cli::run::{cmd_budget, cmd_ntk, cmd_sweep, cmd_train};
use peftlab::graph::Precision;

struct Args {
    verb: String,
    config: Option<String>,
    out: Option<String>,
    seed: Option<u64>,
    jobs: usize,
    precision: Option<Precision>,
}

fn parse_args() -> Result<Args, String> {
    let mut argv = std::env::args().skip(1);
    let Some(verb) = argv.next() else {
        return Err(usage());
    };
    let mut args =
        Args { verb, config: None, out: None, seed: None, jobs: 1, precision: None };
    while let Some(flag) = argv.next() {
        let mut value = |name: &str| -> Result<String, String> {
            argv.next().ok_or_else(|| format!("{name} requires a value"))
        };
        match flag.as_str() {
            "--config" => args.config = Some(value("--config")?),
            "--out" => args.out = Some(value("--out")?),
            "--seed" => {
                args.seed =
                    Some(value("--seed")?.parse().map_err(|e| format!("--seed: {e}"))?)
            }
            "--jobs" => {
                args.jobs = value("--jobs")?.parse().map_err(|e| format!("--jobs: {e}"))?
            }
            "--precision" => {
                args.precision = Some(match value("--precision")?.as_str() {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    other => return Err(format!("--precision must be f32 or f64, got {other}")),
                })
            }
            "--help" | "-h" => return Err(usage()),
            other => return Err(format!("unknown flag '{other}'\n{}", usage())),
        }
    }
    Ok(args)
}

fn usage() -> String {
    "usage: peftlab <train|sweep|ntk|budget> --config PATH \
     [--out DIR] [--seed N] [--jobs N] [--precision f32|f64]"
        .to_string()
}

fn load_config(args: &Args) -> Result<ExperimentConfig, CliError> {
    let Some(path) = &args.config else {
        return Err(CliError::Config(format!("--config is required\n{}", usage())));
    };
    let mut cfg = ExperimentConfig::parse_file(std::path::Path::new(path))?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.normalize(args.seed);
    if let Some(p) = args.precision {
        cfg.train.precision = p;
    }
    Ok(cfg)
}

fn dispatch(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    match args.verb.as_str() {
        "train" => {
            let record = cmd_train(&cfg)?;
            println!(
                "train: {} epochs, {} trainable params, final {}",
                record.epochs, record.trainable_params, record.final_train
            );
            if let Some(steps) = record.steps_to_threshold {
                println!("train: reached threshold after {steps} steps");
            }
            println!("train: outputs in {}", record.out_dir.display());
            Ok(())
        }
        "sweep" => {
            let records = cmd_sweep(&cfg, args.jobs)?;
            println!("sweep: {} runs complete", records.len());
            println!("sweep: summary in {}/summary.csv", cfg.out_path().display());
            Ok(())
        }
        "ntk" => {
            let summary = cmd_ntk(&cfg)?;
            if let Some(k) = summary.get("kernel") {
                println!(
                    "ntk: normalized max |K_F - K_P| = {}",
                    k.get("normalized_max_distance").unwrap_or(&serde_json::Value::Null)
                );
            }
            println!("ntk: artifacts in {}", cfg.out_path().display());
            Ok(())
        }
        "budget" => {
            let budgets = cmd_budget(&cfg, &BudgetMethod::ALL)?;
            for b in &budgets {
                println!("{:<18} {:<12} {}", b.method.to_string(), b.formula, b.total);
            }
            println!("budget: table in {}/budget.csv", cfg.out_path().display());
            Ok(())
        }
        other => Err(CliError::Config(format!("unknown command '{other}'\n{}", usage()))),
    }
}

fn main() -> ExitCode {
    let args = match parse_args() {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("{msg}");
            return ExitCode::from(2);
        }
    };
    match dispatch(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
