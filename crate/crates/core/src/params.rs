//! Model parameters: scoring formulas, exception catalog, allocation
//! tables and the fitted coefficient files. Every file has a built-in
//! default; a path given in [`ParameterFiles`] replaces it.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::covariates::LinearPredictor;
use crate::error::{ConfigError, LoadError};
use crate::exceptions::ExceptionCatalog;
use crate::io;
use crate::matchlist::LayerRuleTable;
use crate::model::{BloodGroupRules, CenterDirectory, MeldFormula, StatusUpdate, SurvivalCurve90};
use crate::offering::{AcceptanceModels, RescueModel};
use crate::posttx::{PoolRelisting, RelistingCurves, WeibullModel};

macro_rules! default_file {
    ($name:literal) => {
        include_str!(concat!("../defaults/", $name))
    };
}

/// Optional replacements for the built-in parameter files.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterFiles {
    /// `unos`, `remeld_na`, or a TOML file with a `[formula]` table.
    pub meld_formula: Option<String>,
    /// `unos`, `remeld_na`, or a TOML file with a `[curve]` table.
    pub curve: Option<String>,
    pub exceptions: Option<PathBuf>,
    pub match_rules: Option<PathBuf>,
    pub blood_groups: Option<PathBuf>,
    pub centers: Option<PathBuf>,
    pub acceptance: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub rescue_hazard: Option<PathBuf>,
    pub rescue_coefficients: Option<PathBuf>,
    pub weibull_shape: Option<PathBuf>,
    pub weibull_scale: Option<PathBuf>,
    pub relisting: Option<PathBuf>,
    pub pool_registrations: Option<PathBuf>,
    pub pool_statuses: Option<PathBuf>,
}

impl ParameterFiles {
    /// Resolves relative paths against `base`.
    pub fn relative_to(mut self, base: &Path) -> Self {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        for p in [
            &mut self.exceptions,
            &mut self.match_rules,
            &mut self.blood_groups,
            &mut self.centers,
            &mut self.acceptance,
            &mut self.split,
            &mut self.rescue_hazard,
            &mut self.rescue_coefficients,
            &mut self.weibull_shape,
            &mut self.weibull_scale,
            &mut self.relisting,
            &mut self.pool_registrations,
            &mut self.pool_statuses,
        ] {
            fix(p);
        }
        for s in [&mut self.meld_formula, &mut self.curve] {
            if let Some(text) = s {
                if text.ends_with(".toml") && Path::new(text.as_str()).is_relative() {
                    *text = base.join(text.as_str()).to_string_lossy().into_owned();
                }
            }
        }
        self
    }
}

#[derive(Debug, Clone)]
pub struct ModelParameterSet {
    pub meld: MeldFormula,
    pub curve: SurvivalCurve90,
    pub exceptions: ExceptionCatalog,
    pub match_rules: LayerRuleTable,
    pub blood: BloodGroupRules,
    pub centers: CenterDirectory,
    pub acceptance: AcceptanceModels,
    pub split: LinearPredictor,
    pub rescue: RescueModel,
    pub weibull: WeibullModel,
    pub relisting: RelistingCurves,
    pub pool: Vec<PoolRelisting>,
}

/// Opens `path` if given, else the built-in text.
fn source(path: &Option<PathBuf>, builtin: &'static str) -> Result<(Box<dyn Read>, PathBuf), LoadError> {
    match path {
        Some(p) => Ok((Box::new(io::open(p)?), p.clone())),
        None => Ok((Box::new(builtin.as_bytes()), PathBuf::from("<built-in>"))),
    }
}

fn config<T>(path: &Path, r: Result<T, ConfigError>) -> Result<T, LoadError> {
    r.map_err(|e| LoadError::file(path, e.to_string()))
}

#[derive(Deserialize)]
struct MeldToml {
    formula: Option<MeldFormula>,
    curve: Option<SurvivalCurve90>,
}

fn read_toml(path: &Path) -> Result<MeldToml, LoadError> {
    let text = std::fs::read_to_string(path).map_err(|e| LoadError::file(path, e.to_string()))?;
    toml::from_str(&text).map_err(|e| LoadError::file(path, e.to_string()))
}

pub fn meld_formula(choice: Option<&str>) -> Result<MeldFormula, LoadError> {
    let f = match choice.unwrap_or("unos") {
        "unos" => MeldFormula::unos(),
        "remeld_na" => MeldFormula::remeld_na(),
        path => read_toml(Path::new(path))?
            .formula
            .ok_or_else(|| LoadError::file(path, "no [formula] table"))?,
    };
    config(Path::new(&f.name), f.validate())?;
    Ok(f)
}

pub fn survival_curve(choice: Option<&str>) -> Result<SurvivalCurve90, LoadError> {
    let c = match choice.unwrap_or("unos") {
        "unos" => SurvivalCurve90::unos(),
        "remeld_na" => SurvivalCurve90::remeld_na(),
        path => read_toml(Path::new(path))?
            .curve
            .ok_or_else(|| LoadError::file(path, "no [curve] table"))?,
    };
    config(Path::new(&c.name), c.validate())?;
    Ok(c)
}

impl ModelParameterSet {
    pub fn defaults() -> Self {
        Self::load(&ParameterFiles::default()).expect("built-in parameters are valid")
    }

    pub fn load(files: &ParameterFiles) -> Result<Self, LoadError> {
        let meld = meld_formula(files.meld_formula.as_deref())?;
        let curve = survival_curve(files.curve.as_deref())?;

        let (r, p) = source(&files.exceptions, default_file!("exceptions.csv"))?;
        let exceptions = config(&p, ExceptionCatalog::new(io::read_exceptions(r, &p)?))?;

        let (r, p) = source(&files.match_rules, default_file!("match_rules.csv"))?;
        let match_rules = config(&p, LayerRuleTable::from_csv(r))?;

        let (r, p) = source(&files.blood_groups, default_file!("blood_groups.csv"))?;
        let blood = BloodGroupRules::from_rows(io::read_blood_groups(r, &p)?);

        let (r, p) = source(&files.centers, default_file!("centers.csv"))?;
        let centers = CenterDirectory::new(io::read_centers(r, &p)?);

        let (r, p) = source(&files.acceptance, default_file!("acceptance.csv"))?;
        let acceptance = config(&p, AcceptanceModels::from_csv(r))?;

        let (r, p) = source(&files.split, default_file!("split.csv"))?;
        let split = config(&p, LinearPredictor::from_csv(r))?;

        let (r, p) = source(&files.rescue_hazard, default_file!("rescue_hazard.csv"))?;
        let hazards = config(&p, RescueModel::hazards_from_csv(r))?;
        let (r, p2) = source(&files.rescue_coefficients, default_file!("rescue_coefficients.csv"))?;
        let predictor = config(&p2, LinearPredictor::from_csv(r))?;
        let rescue = config(&p, RescueModel::new(hazards, predictor))?;

        let (r, p) = source(&files.weibull_shape, default_file!("weibull_shape.csv"))?;
        let shapes = config(&p, WeibullModel::shapes_from_csv(r))?;
        let (r, p2) = source(&files.weibull_scale, default_file!("weibull_scale.csv"))?;
        let scales = config(&p2, WeibullModel::scales_from_csv(r))?;
        let weibull = config(&p, WeibullModel::new(shapes, scales))?;

        let (r, p) = source(&files.relisting, default_file!("relisting.csv"))?;
        let relisting = config(&p, RelistingCurves::from_csv(r))?;

        let (r, p) = source(&files.pool_registrations, default_file!("pool_registrations.csv"))?;
        let regs = io::read_registrations(r, &p)?;
        let (r, p2) = source(&files.pool_statuses, default_file!("pool_statuses.csv"))?;
        let statuses = io::read_statuses(r, &p2)?;
        let pool = build_pool(regs, statuses, &p)?;

        Ok(ModelParameterSet {
            meld,
            curve,
            exceptions,
            match_rules,
            blood,
            centers,
            acceptance,
            split,
            rescue,
            weibull,
            relisting,
            pool,
        })
    }
}

fn build_pool(
    regs: Vec<(crate::model::CandidateRegistration, Option<f64>)>,
    statuses: Vec<StatusUpdate>,
    path: &Path,
) -> Result<Vec<PoolRelisting>, LoadError> {
    let mut by_reg: std::collections::BTreeMap<String, Vec<StatusUpdate>> = Default::default();
    for s in statuses {
        by_reg.entry(s.registration_id.clone()).or_default().push(s);
    }
    regs.into_iter()
        .enumerate()
        .map(|(i, (reg, relist))| {
            let relist = relist
                .filter(|d| *d >= 0.0)
                .ok_or_else(|| LoadError::row(path, i + 1, "pool registration needs relist_days >= 0"))?;
            let mut st = by_reg.remove(&reg.registration_id).unwrap_or_default();
            st.sort_by_key(|s| s.at);
            Ok(PoolRelisting::new(reg, st, relist))
        })
        .collect()
}
