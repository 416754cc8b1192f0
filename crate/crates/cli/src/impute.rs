//! The `impute` subcommand: one completed status file per seed.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use elas_core::io;
use elas_core::params::ModelParameterSet;
use elas_impute::{complete_stream, read_cases, read_landmarks, ImputationInput, MatchConfig};
use rayon::prelude::*;

pub struct ImputeArgs {
    pub registrations: PathBuf,
    pub statuses: PathBuf,
    pub cases: PathBuf,
    pub landmarks: PathBuf,
    pub exceptions: Option<PathBuf>,
    pub match_config: Option<PathBuf>,
    pub seeds: usize,
    pub seed: u64,
    pub output: PathBuf,
}

pub fn run_impute(args: &ImputeArgs) -> Result<()> {
    let regs = io::read_registrations(io::open(&args.registrations)?, &args.registrations)?
        .into_iter()
        .map(|(r, _)| r)
        .collect();
    let statuses = io::read_statuses(io::open(&args.statuses)?, &args.statuses)?;
    let cases = read_cases(io::open(&args.cases)?, &args.cases)?;
    let landmarks = read_landmarks(io::open(&args.landmarks)?, &args.landmarks)?;
    let params = ModelParameterSet::load(&elas_core::params::ParameterFiles {
        exceptions: args.exceptions.clone(),
        ..Default::default()
    })?;
    let cfg: MatchConfig = match &args.match_config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => MatchConfig::default(),
    };
    let input = ImputationInput::new(regs, statuses, cases, landmarks)?;
    std::fs::create_dir_all(&args.output)?;
    (0..args.seeds).into_par_iter().try_for_each(|k| -> Result<()> {
        let seed = elas_core::rng::derive_seed(args.seed, k as u64);
        let done = complete_stream(&input, &params.exceptions, &cfg, seed).with_context(|| format!("seed index {k}"))?;
        let path = args.output.join(format!("statuses_{k}.csv"));
        io::write_statuses(BufWriter::new(create(&path)?), &done.statuses)?;
        crate::stats::write_table(&args.output.join(format!("imputation_{k}.csv")), &done.cases)?;
        Ok(())
    })
}

fn create(path: &Path) -> Result<File> {
    File::create(path).with_context(|| format!("creating {}", path.display()))
}
