//! `icarec`: generate data, train, evaluate, check the lemma, run baselines and plot.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage, 3 missing file,
//! 4 schema violation, 5 non-finite training or filtering. Failures print one
//! JSON line on stderr.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use icarec_core::baselines::Method;

use crate::commands::{EvalExports, PlotKind};
use crate::error::{CliError, CliResult, Kind};

#[derive(Parser, Debug)]
#[command(name = "icarec", version, about = "Recover a hidden independent component from an observed mixture")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Lms,
    Rls,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Scatter,
    PcaColor,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset CSV and its meta JSON from a config.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the model; writes checkpoint, metrics CSV, config and report into DIR.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluation settings; defaults to the config.json beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// PCA coloring table of the codes (sequence data).
        #[arg(long)]
        pca_csv: Option<PathBuf>,
        /// SVG plot of the codes.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Check the identifiability lemma on a finite system.
    Lemma {
        #[arg(long)]
        system: PathBuf,
        /// Report path; defaults to `<stem>.report.json` in the working directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adaptive-filter baseline; writes residuals CSV and presence JSON into DIR.
    Baseline {
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Render a static SVG scatter plot.
    Plot {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<serde_json::Value> {
    let env = commands::env_from(std::env::var("ICAREC_THREADS").ok())?;
    match cli.command {
        Command::Gen { config, out } => commands::gen(&config, &out, env),
        Command::Train { config, out } => commands::train(&config, out.as_deref(), env),
        Command::Eval {
            checkpoint,
            data,
            out,
            config,
            pca_csv,
            svg,
        } => commands::eval(&checkpoint, &data, &out, config.as_deref(), &EvalExports { pca_csv, svg }, env),
        Command::Lemma { system, out } => commands::lemma(&system, out.as_deref(), env),
        Command::Baseline {
            method,
            config,
            data,
            out,
        } => {
            let method = match method {
                MethodArg::Lms => Method::Lms,
                MethodArg::Rls => Method::Rls,
            };
            commands::baseline(method, &config, &data, &out, env)
        }
        Command::Plot { data, kind, out } => {
            let kind = match kind {
                KindArg::Scatter => PlotKind::Scatter,
                KindArg::PcaColor => PlotKind::PcaColor,
            };
            commands::plot(&data, kind, &out, env)
        }
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", e.to_json_line());
    ExitCode::from(e.kind.code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            return fail(&CliError::new(Kind::Usage, first));
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json value serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
