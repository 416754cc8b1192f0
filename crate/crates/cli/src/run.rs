//! Run configuration, replicated runs and paired policy comparison.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use elas_core::engine::{simulate, SimulationConfig, SimulationOutput};
use elas_core::exceptions::{apply_policy_variant, ExceptionPolicy};
use elas_core::ingest::{load_bundle, BundlePaths, InputBundle, Window};
use elas_core::model::Country;
use elas_core::params::{ModelParameterSet, ParameterFiles};
use elas_core::rng::derive_seed;
use elas_core::time::Timestamp;
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::stats::{self, PairedRow, RunStatistics, SummaryRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub start: Timestamp,
    pub end: Timestamp,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    /// Directory holding donors.csv, registrations.csv and statuses.csv.
    pub dir: Option<PathBuf>,
    pub donors: Option<PathBuf>,
    pub registrations: Option<PathBuf>,
    /// May contain `{run}`, replaced by the run index, to give each run
    /// its own completed status file.
    pub statuses: Option<String>,
    pub initial_ledger: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    /// Exception policy such as `capped(0.25)` or `slower(0.5)+lowered(0.15)`.
    pub exceptions: Option<String>,
    /// Restricts the exception policy to these countries.
    pub exception_countries: Option<Vec<Country>>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub window: WindowConfig,
    #[serde(default = "one")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    pub inputs: InputConfig,
    #[serde(default)]
    pub parameters: ParameterFiles,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    pub output: Option<PathBuf>,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).context("parsing run configuration")?;
        ensure!(cfg.runs >= 1, "runs must be at least 1");
        Window::new(cfg.window.start, cfg.window.end)?;
        cfg.parameters = cfg.parameters.relative_to(base);
        let i = &mut cfg.inputs;
        for p in [&mut i.dir, &mut i.donors, &mut i.registrations, &mut i.initial_ledger, &mut cfg.output] {
            resolve(base, p);
        }
        if let Some(s) = &mut i.statuses {
            if Path::new(s.as_str()).is_relative() {
                *s = base.join(s.as_str()).to_string_lossy().into_owned();
            }
        }
        if i.dir.is_none() && (i.donors.is_none() || i.registrations.is_none() || i.statuses.is_none()) {
            bail!("inputs need either dir or all of donors, registrations and statuses");
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = Self::parse(&text, base).with_context(|| format!("in {}", path.display()))?;
        Ok((cfg, hex_digest(text.as_bytes())))
    }

    pub fn window(&self) -> Window {
        Window {
            start: self.window.start,
            end: self.window.end,
        }
    }

    fn per_run_statuses(&self) -> bool {
        self.inputs.statuses.as_deref().is_some_and(|s| s.contains("{run}"))
    }

    pub fn bundle_paths(&self, run: usize) -> BundlePaths {
        let i = &self.inputs;
        let mut paths = match &i.dir {
            Some(d) => BundlePaths::in_dir(d),
            None => BundlePaths::in_dir(Path::new(".")),
        };
        if let Some(p) = &i.donors {
            paths.donors = p.clone();
        }
        if let Some(p) = &i.registrations {
            paths.registrations = p.clone();
        }
        if let Some(s) = &i.statuses {
            paths.statuses = PathBuf::from(s.replace("{run}", &run.to_string()));
        }
        paths.initial_ledger = i.initial_ledger.clone();
        paths
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// A configuration with its parameters loaded and policy applied.
pub struct RunPlan {
    pub config: RunConfig,
    pub params: ModelParameterSet,
    pub config_hash: String,
    pub policy: String,
}

impl RunPlan {
    pub fn new(config: RunConfig, config_hash: String) -> Result<Self> {
        let mut params = ModelParameterSet::load(&config.parameters)?;
        let policy = match &config.policy.exceptions {
            Some(spec) => {
                let policy = ExceptionPolicy::parse(spec, config.policy.exception_countries.clone())?;
                params.exceptions = apply_policy_variant(&params.exceptions, &policy)?;
                policy.describe()
            }
            None => "current".to_string(),
        };
        Ok(RunPlan {
            config,
            params,
            config_hash,
            policy,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let (cfg, hash) = RunConfig::load(path)?;
        Self::new(cfg, hash)
    }

    pub fn load_bundle(&self, run: usize) -> Result<InputBundle> {
        let paths = self.config.bundle_paths(run);
        Ok(load_bundle(&paths, self.config.window(), &self.params.exceptions)?)
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        derive_seed(self.config.seed, run as u64)
    }

    /// One replication.
    pub fn run_one(&self, run: usize, shared: Option<&InputBundle>) -> Result<SimulationOutput> {
        let owned;
        let bundle = match shared {
            Some(b) => b,
            None => {
                owned = self.load_bundle(run)?;
                &owned
            }
        };
        Ok(simulate(bundle, &self.params, self.config.simulation.clone(), self.run_seed(run))?)
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    version: &'static str,
    config_hash: &'a str,
    master_seed: u64,
    runs: usize,
    run_seeds: Vec<u64>,
    window_start: Timestamp,
    window_end: Timestamp,
    exception_policy: &'a str,
    meld_formula: &'a str,
    curve: &'a str,
}

pub fn write_manifest(plan: &RunPlan, dir: &Path) -> Result<()> {
    let m = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        config_hash: &plan.config_hash,
        master_seed: plan.config.seed,
        runs: plan.config.runs,
        run_seeds: (0..plan.config.runs).map(|r| plan.run_seed(r)).collect(),
        window_start: plan.config.window.start,
        window_end: plan.config.window.end,
        exception_policy: &plan.policy,
        meld_formula: &plan.params.meld.name,
        curve: &plan.params.curve.name,
    };
    let text = serde_json::to_string_pretty(&m)?;
    std::fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(())
}

pub fn run_dir(out: &Path, run: usize) -> PathBuf {
    out.join(format!("run_{run:03}"))
}

pub struct Replications {
    pub statistics: Vec<RunStatistics>,
    pub summary: Vec<SummaryRow>,
}

/// Runs every replication in parallel. With `out`, each run's raw files
/// go to `run_NNN/` and the summary and manifest next to them.
pub fn run_replications(plan: &RunPlan, out: Option<&Path>) -> Result<Replications> {
    let shared = if plan.config.per_run_statuses() {
        None
    } else {
        Some(plan.load_bundle(0)?)
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let statistics = (0..plan.config.runs)
        .into_par_iter()
        .map(|r| -> Result<RunStatistics> {
            let output = plan.run_one(r, shared.as_ref()).with_context(|| format!("run {r}"))?;
            if let Some(dir) = out {
                output.write_dir(&run_dir(dir, r)).with_context(|| format!("run {r}"))?;
            }
            info!("run {r}: {} transplants, {} discards", output.transplants.len(), output.discards.len());
            Ok(stats::run_statistics(&output.transplants, &output.discards, &output.candidates))
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = stats::summarize(&statistics);
    if let Some(dir) = out {
        stats::write_table(&dir.join("summary.csv"), &summary)?;
        write_manifest(plan, dir)?;
    }
    Ok(Replications { statistics, summary })
}

/// Recomputes the summary of a finished `simulate` output directory.
pub fn report(dir: &Path) -> Result<Vec<SummaryRow>> {
    let mut runs = Vec::new();
    for r in 0.. {
        let d = run_dir(dir, r);
        if !d.is_dir() {
            break;
        }
        runs.push(stats::statistics_from_dir(&d)?);
    }
    ensure!(!runs.is_empty(), "no run_000 directory under {}", dir.display());
    Ok(stats::summarize(&runs))
}

/// Simulates two policies with identical seeds and inputs, returning the
/// per-statistic paired differences (second minus first).
pub fn compare_policies(a: &RunPlan, b: &RunPlan, out: Option<&Path>) -> Result<Vec<PairedRow>> {
    let (ca, cb) = (&a.config, &b.config);
    ensure!(ca.window == cb.window, "policies must share the simulation window");
    ensure!(ca.runs == cb.runs, "policies must share the number of runs");
    ensure!(ca.seed == cb.seed, "policies must share the master seed");
    ensure!(ca.inputs == cb.inputs, "policies must share input files");
    let ra = run_replications(a, out.map(|d| d.join("a")).as_deref())?;
    let rb = run_replications(b, out.map(|d| d.join("b")).as_deref())?;
    let rows = stats::compare(&ra.statistics, &rb.statistics);
    if let Some(dir) = out {
        stats::write_table(&dir.join("comparison.csv"), &rows)?;
    }
    Ok(rows)
}
