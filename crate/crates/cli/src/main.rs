use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use gplsiam::FitConfig;
use gplsiam_cli::archive::Archive;
use gplsiam_cli::commands;

#[derive(Parser)]
#[command(name = "gplsiam", version, about = "Fit partially linear single-index additive models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model described by a TOML configuration.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Model archive to write.
        #[arg(long)]
        out: PathBuf,
        /// Also write the text report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Overrides the seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a fitted model on new data.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Classification threshold for binary responses.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run a replication study on a built-in scenario.
    Simulate {
        /// poisson1, gamma1 or poisson2.
        scenario: String,
        #[arg(long = "n", value_delimiter = ',', default_values_t = [200usize, 800])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "study")]
        out: PathBuf,
    },
    /// Randomized quantile residuals of a fitted model.
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 40)]
        replicates: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert the hourly bike-sharing file for the bike example.
    PrepBike {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Counts above this are high demand.
        #[arg(long, default_value_t = 150.0)]
        threshold: f64,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Fit {
            config,
            data,
            out,
            report,
            seed,
        } => {
            let outcome = commands::fit_files(&config, &data, seed)?;
            outcome.archive.save(&out)?;
            print!("{}", outcome.report);
            if let Some(path) = report {
                std::fs::write(&path, &outcome.report).with_context(|| format!("writing {}", path.display()))?;
            }
            if outcome.archive.model.converged {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("warning: the fit did not converge; the archive holds the best iterate");
                Ok(ExitCode::from(2))
            }
        }
        Command::Predict {
            model,
            data,
            out,
            threshold,
        } => {
            let archive = Archive::load(&model)?;
            let outcome = commands::predict_files(&archive, &data, &out, threshold)?;
            if let Some(s) = outcome.summary {
                print!("{s}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate {
            scenario,
            sizes,
            reps,
            jobs,
            seed,
            out,
        } => {
            let study = commands::simulate(&scenario, &sizes, reps, jobs, seed, &FitConfig::default(), &out)?;
            println!("{:<10} {:>6} {:>6} {:>10} {:>12} {:>10}", "scenario", "n", "reps", "unstable", "mean error", "p90 secs");
            for s in &study.summaries {
                println!(
                    "{:<10} {:>6} {:>6} {:>9.1}% {:>12.4} {:>10.3}",
                    s.scenario,
                    s.n,
                    s.replicates,
                    100.0 * s.instability_rate,
                    s.mean_rel_error,
                    s.p90_seconds
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Diagnose {
            model,
            data,
            replicates,
            seed,
            out,
        } => {
            let archive = Archive::load(&model)?;
            commands::diagnose_files(&archive, &data, replicates, seed, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::PrepBike { input, out, threshold } => {
            let n = commands::prep_bike(&input, &out, threshold)?;
            println!("wrote {n} rows to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            if let Some(gplsiam::Error::NonConvergence { .. }) = e.downcast_ref::<gplsiam::Error>() {
                eprintln!("error: {e:#}");
                return ExitCode::from(2);
            }
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
