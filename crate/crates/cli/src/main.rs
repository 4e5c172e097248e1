//! `ssvae`: train, benchmark, and verify the SSVAE variant family.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 verification failure,
//! 3 configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ssvae_core::harness::{
    dataset_stats, emit_sweep, run_matrix, run_ood, run_speed_bench, run_sweep, run_train,
    run_verify, ExperimentConfig,
};
use ssvae_core::training::RunReport;
use ssvae_core::{Error, Result};

const EXIT_RUNTIME: u8 = 1;
const EXIT_VERIFICATION: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser)]
#[command(name = "ssvae", version, about = "Semi-supervised sequence-VAE experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the first configured variant once and print its report.
    Train(RunArgs),
    /// Run the variant x fraction accuracy matrix; resumes from raw.csv.
    Matrix(RunArgs),
    /// Benchmark per-iteration wall clock across variants (single thread).
    Speed(RunArgs),
    /// Train on the source domain, evaluate on a shifted target domain.
    Ood(RunArgs),
    /// Print corpus statistics for the configured dataset.
    Stats(RunArgs),
    /// Run numerical verification suites (gradcheck | elbo | estimators | all).
    Verify {
        #[arg(default_value = "all")]
        suite: String,
    },
    /// Dev/test accuracy over the whole alpha grid.
    Sweep(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Plain-text experiment config (`key = value` lines, `#` comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides on top of the config: `--key value` or `key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let overrides = parse_overrides(&self.overrides)?;
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }
}

/// Accept `--key value`, `--key=value`, and bare `key=value` tokens.
fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = tokens.iter();
    while let Some(token) = it.next() {
        let body = token.strip_prefix("--").unwrap_or(token);
        if let Some((key, value)) = body.split_once('=') {
            out.push((key.to_string(), value.to_string()));
        } else if token.starts_with("--") {
            let value = it
                .next()
                .ok_or_else(|| Error::config(format!("{token} is missing its value")))?;
            out.push((body.to_string(), value.to_string()));
        } else {
            return Err(Error::config(format!(
                "override `{token}` is neither --key value nor key=value"
            )));
        }
    }
    Ok(out)
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::MalformedLine { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn print_report(report: &RunReport) {
    println!("{}", RunReport::CSV_HEADER);
    println!("{}", report.csv_row());
    println!(
        "best dev {:.4} at epoch {}, test {:.4} ({} parameters, {:.2} ms/step)",
        report.best_dev_accuracy(),
        report.best_epoch + 1,
        report.test_accuracy,
        report.parameter_count,
        report.mean_step_ms
    );
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.config()?;
            print_report(&run_train(&cfg)?);
        }
        Command::Matrix(args) => {
            let cfg = args.config()?;
            run_matrix(&cfg)?;
            println!("{}", std::fs::read_to_string(cfg.outdir.join("table.md"))?);
            println!("raw rows: {}", cfg.outdir.join("raw.csv").display());
        }
        Command::Speed(args) => {
            let cfg = args.config()?;
            let report = run_speed_bench(&cfg)?;
            report.emit(&cfg.outdir)?;
            println!("{}", std::fs::read_to_string(cfg.outdir.join("table.md"))?);
        }
        Command::Ood(args) => {
            let cfg = args.config()?;
            let report = run_ood(&cfg)?;
            report.emit(&cfg.outdir)?;
            println!("{}", std::fs::read_to_string(cfg.outdir.join("table.md"))?);
        }
        Command::Stats(args) => {
            let cfg = args.config()?;
            for (name, stats) in dataset_stats(&cfg)? {
                println!("{name}: {stats}");
            }
        }
        Command::Verify { suite } => {
            let report = run_verify(&suite)?;
            for line in report.lines() {
                println!("{line}");
            }
            if !report.passed() {
                eprintln!("verification failed: {} check(s)", report.failures().len());
                return Ok(EXIT_VERIFICATION);
            }
            println!("all {} checks passed", report.checks.len());
        }
        Command::Sweep(args) => {
            let cfg = args.config()?;
            let rows = run_sweep(&cfg)?;
            emit_sweep(&rows, &cfg.outdir)?;
            println!("{}", std::fs::read_to_string(cfg.outdir.join("table.md"))?);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
