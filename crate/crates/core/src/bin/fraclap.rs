use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fraclap::cli::{self, ExperimentConfig, RunOptions};

#[derive(Parser)]
#[command(name = "fraclap", version, about = "Fractional Laplacian experiments on finite metric measure spaces")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every experiment of a config and write the report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "FRACLAP_THREADS")]
        threads: Option<usize>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a config without running it and print its normalized form.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the config covering every experiment kind.
    DefaultConfig,
}

fn main() -> ExitCode {
    match Args::parse().command {
        Command::Run {
            config,
            out,
            threads,
            seed,
        } => {
            let cfg = match cli::load_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(2);
                }
            };
            let report = match cli::run(&cfg, &RunOptions { out, threads, seed }) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(2);
                }
            };
            for r in &report.experiments {
                let status = match r.pass {
                    Some(true) => "pass",
                    Some(false) => "FAIL",
                    None => "info",
                };
                println!("[{status}] {:02} {}", r.index, r.kind);
                if let Some(err) = &r.error {
                    println!("       {err}");
                }
            }
            match cli::failures(&report) {
                Some(e) => {
                    eprintln!("{e}");
                    ExitCode::FAILURE
                }
                None => ExitCode::SUCCESS,
            }
        }
        Command::Validate { config } => match cli::load_config(&config) {
            Ok(c) => {
                let _ = writeln!(std::io::stdout(), "OK\n{}", c.to_json_pretty());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(2)
            }
        },
        Command::DefaultConfig => {
            // a closed pipe (e.g. `| head`) is not an error here
            let _ = writeln!(std::io::stdout(), "{}", ExperimentConfig::default_suite().to_json_pretty());
            ExitCode::SUCCESS
        }
    }
}
