//! Command-line scenario runner.
//!
//! Exit codes: 0 success, 2 configuration or I/O error, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use homotomo::scenario::{list_presets, load_config, run_scenario, RunOptions, OUT_DIR_ENV};
use homotomo::Error;

#[derive(Parser)]
#[command(
    name = "homotomo",
    version,
    about = "Homodyne tomography scenarios with phase-sensitive pre-amplification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a preset id or a JSON scenario file.
    Run {
        /// Preset id (see `list-presets`) or path to a scenario JSON file.
        config: String,
        /// Output directory. Defaults to the config's `output_dir`, else
        /// `$HOMOTOMO_OUT_DIR/<id>`, else `out/<id>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Simulate homodyne data and reconstruct instead of using infinite statistics.
        #[arg(long)]
        sampled: bool,
        /// Override the config's random seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; defaults to the number of CPUs.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print the built-in presets.
    ListPresets,
    /// Check a preset or scenario file without running it.
    Validate { config: String },
}

fn exit_code(err: &Error) -> u8 {
    if err.is_config_error() || matches!(err, Error::Io(_)) {
        2
    } else {
        3
    }
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::ListPresets => {
            print!("{}", list_presets());
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            println!("{}: ok", cfg.id);
            Ok(())
        }
        Command::Run {
            config,
            out,
            sampled,
            seed,
            threads,
        } => {
            let cfg = load_config(&config)?;
            let opts = RunOptions {
                out_dir: out,
                sampled,
                seed,
            };
            let mut builder = rayon::ThreadPoolBuilder::new();
            if let Some(n) = threads {
                if n == 0 {
                    return Err(Error::Config {
                        key: "--threads".into(),
                        reason: "must be at least 1".into(),
                    });
                }
                builder = builder.num_threads(n);
            }
            let pool = builder.build().map_err(|e| Error::Config {
                key: "--threads".into(),
                reason: e.to_string(),
            })?;
            let summary = pool.install(|| run_scenario(&cfg, &opts))?;
            for w in &summary.manifest.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{}: wrote {} files to {}",
                cfg.id,
                summary.manifest.files.len() + 1,
                summary.out_dir.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Io(_)) {
                eprintln!("(output directories default to ${OUT_DIR_ENV}/<id> or out/<id>)");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
