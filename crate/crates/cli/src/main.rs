use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use elas_cli::impute::{run_impute, ImputeArgs};
use elas_cli::run::{compare_policies, report, run_replications, RunPlan};
use elas_cli::stats::write_table;
use elas_cli::synth::{generate_bundle, generate_pool, write_bundle, write_pool, GenConfig};
use elas_core::params::ModelParameterSet;

#[derive(Parser)]
#[command(name = "elas", version, about = "Liver allocation policy simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run replicated simulations of one policy.
    Simulate {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Override the number of replications.
        #[arg(long)]
        runs: Option<usize>,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to the configuration's `output`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Paired comparison of two policies under common random numbers.
    Compare {
        /// Run configuration of the first policy.
        #[arg(long)]
        config: PathBuf,
        /// Run configuration of the second policy.
        #[arg(long)]
        against: PathBuf,
        /// Override the number of replications of both.
        #[arg(long)]
        runs: Option<usize>,
        /// Output directory for both policies and the comparison table.
        #[arg(long)]
        output: PathBuf,
    },
    /// Complete the status streams of transplanted registrations.
    Impute {
        /// Registrations, including the transplanted ones.
        #[arg(long)]
        registrations: PathBuf,
        /// Status streams to complete.
        #[arg(long)]
        statuses: PathBuf,
        /// Transplanted registrations and their matching attributes.
        #[arg(long)]
        cases: PathBuf,
        /// Waiting registrations' attributes at landmark times.
        #[arg(long)]
        landmarks: PathBuf,
        /// Exception catalog; the built-in one by default.
        #[arg(long)]
        exceptions: Option<PathBuf>,
        /// TOML file with matching calipers and targets.
        #[arg(long)]
        match_config: Option<PathBuf>,
        /// Number of completed stream sets to write.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Master seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        output: PathBuf,
    },
    /// Write a synthetic input bundle.
    Generate {
        /// Generator settings (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Generator seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write a re-registration pool of this many rows.
        #[arg(long)]
        pool: Option<usize>,
        /// Output directory.
        #[arg(long)]
        output: PathBuf,
    },
    /// Recompute the summary table from a simulate output directory.
    Report {
        /// Directory written by `simulate`.
        #[arg(long)]
        runs: PathBuf,
        /// Summary file; `summary.csv` in the runs directory by default.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn plan(config: &PathBuf, runs: Option<usize>, seed: Option<u64>) -> Result<RunPlan> {
    let mut plan = RunPlan::from_file(config)?;
    if let Some(r) = runs {
        anyhow::ensure!(r >= 1, "runs must be at least 1");
        plan.config.runs = r;
    }
    if let Some(s) = seed {
        plan.config.seed = s;
    }
    Ok(plan)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            config,
            runs,
            seed,
            output,
        } => {
            let plan = plan(&config, runs, seed)?;
            let out = output
                .or_else(|| plan.config.output.clone())
                .context("no output directory given")?;
            let reps = run_replications(&plan, Some(&out))?;
            for row in &reps.summary {
                println!("{:<40} {:>10.2} [{:.2}, {:.2}]", row.statistic, row.mean, row.p2_5, row.p97_5);
            }
        }
        Command::Compare {
            config,
            against,
            runs,
            output,
        } => {
            let a = plan(&config, runs, None)?;
            let b = plan(&against, runs, None)?;
            let rows = compare_policies(&a, &b, Some(&output))?;
            for r in &rows {
                println!(
                    "{:<40} {:>10.2} {:>10.2} {:>+9.2} {}",
                    r.statistic, r.mean_a, r.mean_b, r.mean_difference, r.stars
                );
            }
        }
        Command::Impute {
            registrations,
            statuses,
            cases,
            landmarks,
            exceptions,
            match_config,
            seeds,
            seed,
            output,
        } => run_impute(&ImputeArgs {
            registrations,
            statuses,
            cases,
            landmarks,
            exceptions,
            match_config,
            seeds,
            seed,
            output,
        })?,
        Command::Generate {
            config,
            seed,
            pool,
            output,
        } => {
            let cfg: GenConfig = match config {
                Some(p) => toml::from_str(&std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => GenConfig::default(),
            };
            let params = ModelParameterSet::defaults();
            let bundle = generate_bundle(&cfg, &params.centers, &params.exceptions, seed);
            write_bundle(&bundle, &output)?;
            if let Some(n) = pool {
                let (regs, statuses) = generate_pool(&cfg, &params.centers, &params.exceptions, n, seed);
                write_pool(&regs, &statuses, &output)?;
            }
            println!(
                "{} donors, {} registrations, {} status updates",
                bundle.donors.len(),
                bundle.registrations.len(),
                bundle.statuses.len()
            );
        }
        Command::Report { runs, output } => {
            let summary = report(&runs)?;
            let path = output.unwrap_or_else(|| runs.join("summary.csv"));
            write_table(&path, &summary)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
