//! Case and landmark files: each row describes one registration at one
//! time since listing, with its precomputed linear predictor.

use std::io::Read;
use std::path::Path;

use elas_core::error::LoadError;
use elas_core::model::{Country, Urgency};
use serde::{Deserialize, Serialize};

/// Characteristics compared when building a risk set.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchAttributes {
    /// Predicted expected log truncated residual survival.
    pub eta: f64,
    pub pediatric: bool,
    pub retransplant: bool,
    pub urgency: Urgency,
    pub exception_group: String,
    pub disease_group: String,
    pub urgency_reason: String,
    pub dialysis: bool,
    pub country: Country,
    pub lab_meld: f64,
    pub age: f64,
    pub exception_meld: Option<f64>,
}

impl MatchAttributes {
    pub fn is_hu(&self) -> bool {
        matches!(self.urgency, Urgency::HighUrgency | Urgency::CombinedOrgan)
    }
}

/// A transplanted registration whose stream needs completing.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationCase {
    pub registration_id: String,
    /// Days from listing to transplantation.
    pub censor_days: f64,
    pub attributes: MatchAttributes,
}

/// A registration's characteristics from `days` after listing onward.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub registration_id: String,
    pub days: f64,
    pub attributes: MatchAttributes,
    pub ipcw_weight: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CaseRow {
    registration_id: String,
    censor_days: f64,
    eta: f64,
    pediatric: bool,
    retransplant: bool,
    urgency: Urgency,
    exception_group: String,
    disease_group: String,
    urgency_reason: String,
    dialysis: bool,
    country: Country,
    lab_meld: f64,
    age: f64,
    exception_meld: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LandmarkRow {
    registration_id: String,
    days: f64,
    eta: f64,
    pediatric: bool,
    retransplant: bool,
    urgency: Urgency,
    exception_group: String,
    disease_group: String,
    urgency_reason: String,
    dialysis: bool,
    country: Country,
    lab_meld: f64,
    age: f64,
    exception_meld: Option<f64>,
    ipcw_weight: f64,
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r)
}

fn check(path: &Path, row: usize, days: f64, eta: f64) -> Result<(), LoadError> {
    if !(days >= 0.0) || !days.is_finite() {
        return Err(LoadError::row(path, row, format!("time since listing must be nonnegative, got {days}")));
    }
    if !eta.is_finite() {
        return Err(LoadError::row(path, row, "eta must be finite"));
    }
    Ok(())
}

pub fn read_cases(r: impl Read, path: &Path) -> Result<Vec<ImputationCase>, LoadError> {
    let mut out = Vec::new();
    for (i, row) in reader(r).deserialize::<CaseRow>().enumerate() {
        let row: CaseRow = row.map_err(|e| LoadError::row(path, i + 1, e.to_string()))?;
        check(path, i + 1, row.censor_days, row.eta)?;
        out.push(ImputationCase {
            registration_id: row.registration_id,
            censor_days: row.censor_days,
            attributes: MatchAttributes {
                eta: row.eta,
                pediatric: row.pediatric,
                retransplant: row.retransplant,
                urgency: row.urgency,
                exception_group: row.exception_group,
                disease_group: row.disease_group,
                urgency_reason: row.urgency_reason,
                dialysis: row.dialysis,
                country: row.country,
                lab_meld: row.lab_meld,
                age: row.age,
                exception_meld: row.exception_meld,
            },
        });
    }
    Ok(out)
}

pub fn read_landmarks(r: impl Read, path: &Path) -> Result<Vec<Landmark>, LoadError> {
    let mut out = Vec::new();
    for (i, row) in reader(r).deserialize::<LandmarkRow>().enumerate() {
        let row: LandmarkRow = row.map_err(|e| LoadError::row(path, i + 1, e.to_string()))?;
        check(path, i + 1, row.days, row.eta)?;
        if !(row.ipcw_weight > 0.0) || !row.ipcw_weight.is_finite() {
            return Err(LoadError::row(path, i + 1, "ipcw_weight must be positive"));
        }
        out.push(Landmark {
            registration_id: row.registration_id,
            days: row.days,
            ipcw_weight: row.ipcw_weight,
            attributes: MatchAttributes {
                eta: row.eta,
                pediatric: row.pediatric,
                retransplant: row.retransplant,
                urgency: row.urgency,
                exception_group: row.exception_group,
                disease_group: row.disease_group,
                urgency_reason: row.urgency_reason,
                dialysis: row.dialysis,
                country: row.country,
                lab_meld: row.lab_meld,
                age: row.age,
                exception_meld: row.exception_meld,
            },
        });
    }
    Ok(out)
}

pub fn write_cases<'a>(w: impl std::io::Write, cases: impl IntoIterator<Item = &'a ImputationCase>) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for c in cases {
        let a = &c.attributes;
        wtr.serialize(CaseRow {
            registration_id: c.registration_id.clone(),
            censor_days: c.censor_days,
            eta: a.eta,
            pediatric: a.pediatric,
            retransplant: a.retransplant,
            urgency: a.urgency,
            exception_group: a.exception_group.clone(),
            disease_group: a.disease_group.clone(),
            urgency_reason: a.urgency_reason.clone(),
            dialysis: a.dialysis,
            country: a.country,
            lab_meld: a.lab_meld,
            age: a.age,
            exception_meld: a.exception_meld,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_landmarks<'a>(w: impl std::io::Write, rows: impl IntoIterator<Item = &'a Landmark>) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for l in rows {
        let a = &l.attributes;
        wtr.serialize(LandmarkRow {
            registration_id: l.registration_id.clone(),
            days: l.days,
            eta: a.eta,
            pediatric: a.pediatric,
            retransplant: a.retransplant,
            urgency: a.urgency,
            exception_group: a.exception_group.clone(),
            disease_group: a.disease_group.clone(),
            urgency_reason: a.urgency_reason.clone(),
            dialysis: a.dialysis,
            country: a.country,
            lab_meld: a.lab_meld,
            age: a.age,
            exception_meld: a.exception_meld,
            ipcw_weight: l.ipcw_weight,
        })?;
    }
    wtr.flush()?;
    Ok(())
}
