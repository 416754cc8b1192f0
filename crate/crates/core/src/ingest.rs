//! Loading the input streams and building the initial system state.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{LoadError, SimError};
use crate::exceptions::ExceptionCatalog;
use crate::io::{self, LedgerRow};
use crate::model::{CandidateRegistration, DonorRecord, StatusPayload, StatusUpdate};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl Window {
    pub fn new(start: Timestamp, end: Timestamp) -> Result<Self, LoadError> {
        if start >= end {
            return Err(LoadError::file("<window>", format!("empty window {start} .. {end}")));
        }
        Ok(Window { start, end })
    }

    pub fn contains(&self, at: Timestamp) -> bool {
        self.start <= at && at <= self.end
    }

    pub fn days(&self) -> f64 {
        self.end.days_since(self.start)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundlePaths {
    pub donors: PathBuf,
    pub registrations: PathBuf,
    pub statuses: PathBuf,
    #[serde(default)]
    pub initial_ledger: Option<PathBuf>,
}

impl BundlePaths {
    /// The conventional file names inside one directory.
    pub fn in_dir(dir: &Path) -> Self {
        BundlePaths {
            donors: dir.join("donors.csv"),
            registrations: dir.join("registrations.csv"),
            statuses: dir.join("statuses.csv"),
            initial_ledger: None,
        }
    }

    pub fn relative_to(mut self, base: &Path) -> Self {
        for p in [&mut self.donors, &mut self.registrations, &mut self.statuses] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = &mut self.initial_ledger {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputBundle {
    pub window: Window,
    /// Ordered by reporting time, then id.
    pub donors: Vec<DonorRecord>,
    pub registrations: Vec<CandidateRegistration>,
    pub statuses: BTreeMap<String, Vec<StatusUpdate>>,
    pub initial_ledger: Vec<LedgerRow>,
}

pub fn load_bundle(
    paths: &BundlePaths,
    window: Window,
    catalog: &ExceptionCatalog,
) -> Result<InputBundle, LoadError> {
    let donors = io::read_donors(io::open(&paths.donors)?, &paths.donors)?;
    let registrations: Vec<CandidateRegistration> =
        io::read_registrations(io::open(&paths.registrations)?, &paths.registrations)?
            .into_iter()
            .map(|(r, _)| r)
            .collect();
    let statuses = io::read_statuses(io::open(&paths.statuses)?, &paths.statuses)?;
    let ledger = match &paths.initial_ledger {
        Some(p) => io::read_ledger(io::open(p)?, p)?,
        None => Vec::new(),
    };
    assemble_bundle(
        window,
        donors,
        registrations,
        statuses,
        ledger,
        catalog,
        &paths.registrations,
        &paths.statuses,
    )
}

/// Validates and filters already-parsed streams. Status errors name
/// `status_path` and the 1-based position of the offending row.
#[allow(clippy::too_many_arguments)]
pub fn assemble_bundle(
    window: Window,
    donors: Vec<DonorRecord>,
    registrations: Vec<CandidateRegistration>,
    statuses: Vec<StatusUpdate>,
    initial_ledger: Vec<LedgerRow>,
    catalog: &ExceptionCatalog,
    registration_path: &Path,
    status_path: &Path,
) -> Result<InputBundle, LoadError> {
    let known: BTreeSet<&str> = registrations.iter().map(|r| r.registration_id.as_str()).collect();
    let mut by_reg: BTreeMap<String, Vec<StatusUpdate>> = BTreeMap::new();
    for (i, s) in statuses.into_iter().enumerate() {
        let row = i + 1;
        if !known.contains(s.registration_id.as_str()) {
            return Err(LoadError::row(
                status_path,
                row,
                format!("unknown registration {}", s.registration_id),
            ));
        }
        if let StatusPayload::Exception { exception_id, .. } = &s.payload {
            if catalog.get(exception_id).is_none() {
                return Err(LoadError::row(status_path, row, format!("unknown exception {exception_id}")));
            }
        }
        let stream = by_reg.entry(s.registration_id.clone()).or_default();
        if let Some(last) = stream.last() {
            if last.is_exit() {
                return Err(LoadError::row(status_path, row, "status after EXIT"));
            }
            if s.at < last.at {
                return Err(LoadError::row(status_path, row, "statuses out of time order"));
            }
        }
        stream.push(s);
    }
    for (i, r) in registrations.iter().enumerate() {
        if !by_reg.contains_key(&r.registration_id) {
            return Err(LoadError::row(
                registration_path,
                i + 1,
                format!("registration without statuses: {}", r.registration_id),
            ));
        }
    }

    let mut donors: Vec<DonorRecord> = donors.into_iter().filter(|d| window.contains(d.reported_at)).collect();
    donors.sort_by(|a, b| (a.reported_at, &a.donor_id).cmp(&(b.reported_at, &b.donor_id)));

    let registrations: Vec<CandidateRegistration> = registrations
        .into_iter()
        .filter(|r| {
            let stream = &by_reg[&r.registration_id];
            let exited_before = stream.last().is_some_and(|s| s.is_exit() && s.at <= window.start);
            r.listed_at <= window.end && !exited_before
        })
        .collect();
    let kept: BTreeSet<&str> = registrations.iter().map(|r| r.registration_id.as_str()).collect();
    by_reg.retain(|id, _| kept.contains(id.as_str()));

    Ok(InputBundle {
        window,
        donors,
        registrations,
        statuses: by_reg,
        initial_ledger,
    })
}

/// Registrations used for the run: one per patient, the earliest listing.
/// Returns the kept registrations and the number of re-listings dropped.
pub fn drop_relistings(regs: &[CandidateRegistration]) -> (Vec<&CandidateRegistration>, usize) {
    let mut first: BTreeMap<&str, &CandidateRegistration> = BTreeMap::new();
    for r in regs {
        first
            .entry(r.patient_id.as_str())
            .and_modify(|cur| {
                if (r.listed_at, &r.registration_id) < (cur.listed_at, &cur.registration_id) {
                    *cur = r;
                }
            })
            .or_insert(r);
    }
    let keep: BTreeSet<&str> = first.values().map(|r| r.registration_id.as_str()).collect();
    let kept: Vec<&CandidateRegistration> = regs
        .iter()
        .filter(|r| keep.contains(r.registration_id.as_str()))
        .collect();
    let dropped = regs.len() - kept.len();
    if dropped > 0 {
        info!("dropped {dropped} re-listing registrations of already included patients");
    }
    (kept, dropped)
}

/// Statistics on how the bundle was turned into an initial state.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InitReport {
    pub dropped_relistings: usize,
    pub exited_during_preprocessing: usize,
    pub scheduled_patient_events: usize,
    pub scheduled_donor_events: usize,
}

pub(crate) fn ledger_rows_to_seed(
    rows: &[LedgerRow],
) -> impl Iterator<Item = (crate::obligations::Party, crate::obligations::Party, crate::model::BloodGroup, Timestamp)> + '_ {
    rows.iter()
        .map(|r| (r.debtor.clone(), r.creditor.clone(), r.blood_group, r.created_at))
}

pub(crate) fn fault(msg: impl Into<String>) -> SimError {
    SimError::Fault(msg.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BloodGroup, Biomarkers, Country, ExitReason, Sex};

    fn day(n: f64) -> Timestamp {
        Timestamp::from_date(2016, 1, 1).plus_days(n)
    }

    fn reg(id: &str, patient: &str, listed: f64) -> CandidateRegistration {
        CandidateRegistration {
            patient_id: patient.into(),
            registration_id: id.into(),
            listed_at: day(listed),
            country: Country::Netherlands,
            center: "NLGTP".into(),
            blood_group: BloodGroup::A,
            age_at_listing: 40.0,
            weight_kg: 70.0,
            sex: Sex::Male,
            disease_group: "other".into(),
            is_retransplant: false,
        }
    }

    fn lab(id: &str, at: f64) -> StatusUpdate {
        StatusUpdate {
            registration_id: id.into(),
            at: day(at),
            payload: StatusPayload::Biomarker(Biomarkers {
                creatinine: 1.0,
                bilirubin: 1.0,
                inr: 1.0,
                dialysis: false,
                sodium: None,
            }),
        }
    }

    fn exit(id: &str, at: f64) -> StatusUpdate {
        StatusUpdate {
            registration_id: id.into(),
            at: day(at),
            payload: StatusPayload::Exit(ExitReason::Removed),
        }
    }

    fn donor(id: &str, at: Timestamp) -> DonorRecord {
        DonorRecord {
            donor_id: id.into(),
            reported_at: at,
            country: Country::Netherlands,
            center: "NLGTP".into(),
            hospital: "h".into(),
            blood_group: BloodGroup::A,
            age: 40.0,
            weight_kg: 70.0,
            height_cm: 175.0,
            death_cause: "trauma".into(),
            dcd: false,
            profile_covariates: Default::default(),
        }
    }

    fn window() -> Window {
        Window::new(day(10.0), day(100.0)).unwrap()
    }

    fn assemble(
        donors: Vec<DonorRecord>,
        regs: Vec<CandidateRegistration>,
        statuses: Vec<StatusUpdate>,
    ) -> Result<InputBundle, LoadError> {
        assemble_bundle(
            window(),
            donors,
            regs,
            statuses,
            Vec::new(),
            &ExceptionCatalog::default(),
            Path::new("r.csv"),
            Path::new("s.csv"),
        )
    }

    #[test]
    fn registration_without_statuses_rejected() {
        let err = assemble(vec![], vec![reg("r1", "p1", 0.0)], vec![]).unwrap_err();
        assert!(err.to_string().contains("registration without statuses"));
    }

    #[test]
    fn donor_before_window_excluded() {
        let b = assemble(
            vec![donor("early", day(10.0) - 1), donor("on", day(10.0))],
            vec![],
            vec![],
        )
        .unwrap();
        let ids: Vec<&str> = b.donors.iter().map(|d| d.donor_id.as_str()).collect();
        assert_eq!(ids, vec!["on"]);
    }

    #[test]
    fn unordered_statuses_rejected_with_row() {
        let err = assemble(vec![], vec![reg("r1", "p1", 0.0)], vec![lab("r1", 5.0), lab("r1", 4.0)])
            .unwrap_err()
            .to_string();
        assert!(err.contains("s.csv") && err.contains("row 2"), "{err}");
    }

    #[test]
    fn status_after_exit_rejected() {
        assert!(assemble(vec![], vec![reg("r1", "p1", 0.0)], vec![exit("r1", 5.0), lab("r1", 6.0)]).is_err());
    }

    #[test]
    fn exited_before_window_excluded() {
        let b = assemble(
            vec![],
            vec![reg("r1", "p1", 0.0), reg("r2", "p2", 0.0)],
            vec![lab("r1", 0.0), exit("r1", 5.0), lab("r2", 0.0)],
        )
        .unwrap();
        assert_eq!(b.registrations.len(), 1);
        assert!(!b.statuses.contains_key("r1"));
    }

    #[test]
    fn relistings_dropped() {
        let regs = vec![reg("a2", "p1", 50.0), reg("a1", "p1", 20.0), reg("b", "p2", 30.0)];
        let (kept, dropped) = drop_relistings(&regs);
        assert_eq!(dropped, 1);
        let ids: Vec<&str> = kept.iter().map(|r| r.registration_id.as_str()).collect();
        assert_eq!(ids, vec!["a1", "b"]);
    }
}
