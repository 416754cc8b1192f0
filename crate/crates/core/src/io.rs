//! Delimited-file schemas for the input streams and reference tables.
//!
//! All files are comma separated with a header row. Timestamps are
//! ISO-8601 (`2016-01-01T00:00:00` or a bare date), decimals use a dot.
//! Readers report the 1-based data row of the first malformed record.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::LoadError;
use crate::exceptions::ExceptionDefinition;
use crate::model::{
    AllocationProfile, Biomarkers, BloodGroup, CandidateRegistration, Center, CovariateValue,
    Country, DonorRecord, ExceptionAction, ExitReason, Sex, StatusKind, StatusPayload,
    StatusUpdate, TierClass, Urgency,
};
use crate::obligations::Party;
use crate::time::Timestamp;

pub const DONOR_COLUMNS: [&str; 11] = [
    "donor_id",
    "reported_at",
    "country",
    "center",
    "hospital",
    "blood_group",
    "age",
    "weight_kg",
    "height_cm",
    "death_cause",
    "dcd",
];

pub fn open(path: &Path) -> Result<File, LoadError> {
    File::open(path).map_err(|e| LoadError::file(path, e.to_string()))
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r)
}

fn row_err(path: &Path, i: usize, e: impl ToString) -> LoadError {
    LoadError::row(path, i + 1, e.to_string())
}

fn parse_field<T: std::str::FromStr>(path: &Path, i: usize, name: &str, text: &str) -> Result<T, LoadError>
where
    T::Err: ToString,
{
    text.parse::<T>()
        .map_err(|e| row_err(path, i, format!("{name}: {}", e.to_string())))
}

/// Donors; columns beyond the fixed ones become profile covariates.
pub fn read_donors(r: impl Read, path: &Path) -> Result<Vec<DonorRecord>, LoadError> {
    let mut rdr = reader(r);
    let headers = rdr
        .headers()
        .map_err(|e| LoadError::file(path, e.to_string()))?
        .clone();
    let mut index = BTreeMap::new();
    for name in DONOR_COLUMNS {
        let pos = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| LoadError::file(path, format!("missing column {name}")))?;
        index.insert(name, pos);
    }
    let extra: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !DONOR_COLUMNS.contains(h))
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| row_err(path, i, e))?;
        let get = |name: &str| rec.get(index[name]).unwrap_or("");
        let donor = DonorRecord {
            donor_id: get("donor_id").to_string(),
            reported_at: parse_field(path, i, "reported_at", get("reported_at"))?,
            country: parse_field(path, i, "country", get("country"))?,
            center: get("center").to_string(),
            hospital: get("hospital").to_string(),
            blood_group: parse_field(path, i, "blood_group", get("blood_group"))?,
            age: parse_field(path, i, "age", get("age"))?,
            weight_kg: parse_field(path, i, "weight_kg", get("weight_kg"))?,
            height_cm: parse_field(path, i, "height_cm", get("height_cm"))?,
            death_cause: get("death_cause").to_string(),
            dcd: parse_field(path, i, "dcd", get("dcd"))?,
            profile_covariates: extra
                .iter()
                .filter(|(pos, _)| !rec.get(*pos).unwrap_or("").is_empty())
                .map(|(pos, name)| (name.clone(), CovariateValue::parse(&rec[*pos])))
                .collect(),
        };
        if donor.donor_id.is_empty() {
            return Err(row_err(path, i, "empty donor_id"));
        }
        if !(donor.age >= 0.0) {
            return Err(row_err(path, i, "age must be nonnegative"));
        }
        out.push(donor);
    }
    Ok(out)
}

pub fn write_donors(w: impl Write, donors: &[DonorRecord]) -> csv::Result<()> {
    let extra: Vec<String> = donors
        .iter()
        .flat_map(|d| d.profile_covariates.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<&str> = DONOR_COLUMNS.to_vec();
    header.extend(extra.iter().map(String::as_str));
    wtr.write_record(&header)?;
    for d in donors {
        let mut row = vec![
            d.donor_id.clone(),
            d.reported_at.to_string(),
            d.country.to_string(),
            d.center.clone(),
            d.hospital.clone(),
            d.blood_group.to_string(),
            d.age.to_string(),
            d.weight_kg.to_string(),
            d.height_cm.to_string(),
            d.death_cause.clone(),
            d.dcd.to_string(),
        ];
        for name in &extra {
            row.push(match d.profile_covariates.get(name) {
                Some(CovariateValue::Num(v)) => v.to_string(),
                Some(CovariateValue::Cat(s)) => s.clone(),
                None => String::new(),
            });
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct RegistrationRow {
    patient_id: String,
    registration_id: String,
    listed_at: Timestamp,
    country: Country,
    center: String,
    blood_group: BloodGroup,
    age_at_listing: f64,
    weight_kg: f64,
    sex: Sex,
    disease_group: String,
    is_retransplant: bool,
    /// Only in re-registration pool files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    relist_days: Option<f64>,
}

fn to_registration(row: RegistrationRow) -> (CandidateRegistration, Option<f64>) {
    (
        CandidateRegistration {
            patient_id: row.patient_id,
            registration_id: row.registration_id,
            listed_at: row.listed_at,
            country: row.country,
            center: row.center,
            blood_group: row.blood_group,
            age_at_listing: row.age_at_listing,
            weight_kg: row.weight_kg,
            sex: row.sex,
            disease_group: row.disease_group,
            is_retransplant: row.is_retransplant,
        },
        row.relist_days,
    )
}

/// Registrations, with the optional relisting delay of pool files.
pub fn read_registrations(
    r: impl Read,
    path: &Path,
) -> Result<Vec<(CandidateRegistration, Option<f64>)>, LoadError> {
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, row) in reader(r).deserialize::<RegistrationRow>().enumerate() {
        let row = row.map_err(|e| row_err(path, i, e))?;
        if !seen.insert(row.registration_id.clone()) {
            return Err(row_err(path, i, format!("duplicate registration {}", row.registration_id)));
        }
        if !(row.age_at_listing >= 0.0) {
            return Err(row_err(path, i, "age_at_listing must be nonnegative"));
        }
        out.push(to_registration(row));
    }
    Ok(out)
}

pub fn write_registrations<'a>(
    w: impl Write,
    regs: impl IntoIterator<Item = (&'a CandidateRegistration, Option<f64>)>,
) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for (r, relist_days) in regs {
        wtr.serialize(RegistrationRow {
            patient_id: r.patient_id.clone(),
            registration_id: r.registration_id.clone(),
            listed_at: r.listed_at,
            country: r.country,
            center: r.center.clone(),
            blood_group: r.blood_group,
            age_at_listing: r.age_at_listing,
            weight_kg: r.weight_kg,
            sex: r.sex,
            disease_group: r.disease_group.clone(),
            is_retransplant: r.is_retransplant,
            relist_days,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct StatusRow {
    registration_id: String,
    at: Timestamp,
    kind: String,
    creatinine: Option<f64>,
    bilirubin: Option<f64>,
    inr: Option<f64>,
    dialysis: Option<bool>,
    sodium: Option<f64>,
    exception_id: Option<String>,
    action: Option<String>,
    urgency: Option<Urgency>,
    max_donor_age: Option<f64>,
    accept_dcd: Option<bool>,
    accept_split: Option<bool>,
    accept_rescue_offer: Option<bool>,
    min_donor_weight: Option<f64>,
    max_donor_weight: Option<f64>,
    exit_reason: Option<ExitReason>,
}

fn required<T>(v: Option<T>, name: &str) -> Result<T, String> {
    v.ok_or_else(|| format!("missing {name}"))
}

fn payload(row: StatusRow) -> Result<StatusPayload, String> {
    let kind: StatusKind = row.kind.parse().map_err(|e| format!("{e}"))?;
    Ok(match kind {
        StatusKind::Biomarker => {
            let b = Biomarkers {
                creatinine: required(row.creatinine, "creatinine")?,
                bilirubin: required(row.bilirubin, "bilirubin")?,
                inr: required(row.inr, "inr")?,
                dialysis: row.dialysis.unwrap_or(false),
                sodium: row.sodium,
            };
            for (name, v) in [("creatinine", b.creatinine), ("bilirubin", b.bilirubin), ("inr", b.inr)] {
                if !(v > 0.0) {
                    return Err(format!("{name} must be positive, got {v}"));
                }
            }
            StatusPayload::Biomarker(b)
        }
        StatusKind::Exception => StatusPayload::Exception {
            exception_id: required(row.exception_id.filter(|s| !s.is_empty()), "exception_id")?,
            action: required(row.action, "action")?
                .parse::<ExceptionAction>()
                .map_err(|e| format!("{e}"))?,
        },
        StatusKind::Urgency => StatusPayload::Urgency(required(row.urgency, "urgency")?),
        StatusKind::Profile => {
            let p = AllocationProfile {
                max_donor_age: row.max_donor_age,
                accept_dcd: row.accept_dcd.unwrap_or(true),
                accept_split: row.accept_split.unwrap_or(true),
                accept_rescue_offer: row.accept_rescue_offer.unwrap_or(true),
                min_donor_weight: row.min_donor_weight,
                max_donor_weight: row.max_donor_weight,
            };
            if !p.is_consistent() {
                return Err("min_donor_weight exceeds max_donor_weight".into());
            }
            StatusPayload::Profile(p)
        }
        StatusKind::Exit => StatusPayload::Exit(required(row.exit_reason, "exit_reason")?),
    })
}

/// Status updates in file order.
pub fn read_statuses(r: impl Read, path: &Path) -> Result<Vec<StatusUpdate>, LoadError> {
    let mut out = Vec::new();
    for (i, row) in reader(r).deserialize::<StatusRow>().enumerate() {
        let row = row.map_err(|e| row_err(path, i, e))?;
        let registration_id = row.registration_id.clone();
        let at = row.at;
        let payload = payload(row).map_err(|e| row_err(path, i, e))?;
        out.push(StatusUpdate {
            registration_id,
            at,
            payload,
        });
    }
    Ok(out)
}

fn status_row(s: &StatusUpdate) -> StatusRow {
    let mut row = StatusRow {
        registration_id: s.registration_id.clone(),
        at: s.at,
        kind: s.payload.kind().to_string(),
        ..Default::default()
    };
    match &s.payload {
        StatusPayload::Biomarker(b) => {
            row.creatinine = Some(b.creatinine);
            row.bilirubin = Some(b.bilirubin);
            row.inr = Some(b.inr);
            row.dialysis = Some(b.dialysis);
            row.sodium = b.sodium;
        }
        StatusPayload::Exception {
            exception_id,
            action,
        } => {
            row.exception_id = Some(exception_id.clone());
            row.action = Some(action.to_string());
        }
        StatusPayload::Urgency(u) => row.urgency = Some(*u),
        StatusPayload::Profile(p) => {
            row.max_donor_age = p.max_donor_age;
            row.accept_dcd = Some(p.accept_dcd);
            row.accept_split = Some(p.accept_split);
            row.accept_rescue_offer = Some(p.accept_rescue_offer);
            row.min_donor_weight = p.min_donor_weight;
            row.max_donor_weight = p.max_donor_weight;
        }
        StatusPayload::Exit(r) => row.exit_reason = Some(*r),
    }
    row
}

pub fn write_statuses<'a>(w: impl Write, statuses: impl IntoIterator<Item = &'a StatusUpdate>) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for s in statuses {
        wtr.serialize(status_row(s))?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ExceptionRow {
    exception_id: String,
    country: Country,
    kind: String,
    initial_equivalent: f64,
    increment_90d: f64,
    max_equivalent: f64,
    max_age: Option<f64>,
    is_bonus: bool,
    auto_recertified: bool,
}

pub fn read_exceptions(r: impl Read, path: &Path) -> Result<Vec<ExceptionDefinition>, LoadError> {
    let mut out = Vec::new();
    for (i, row) in reader(r).deserialize::<ExceptionRow>().enumerate() {
        let row = row.map_err(|e| row_err(path, i, e))?;
        let def = ExceptionDefinition {
            exception_id: row.exception_id,
            country: row.country,
            kind: row.kind.parse().map_err(|e| row_err(path, i, e))?,
            initial_equivalent: row.initial_equivalent,
            increment_90d: row.increment_90d,
            max_equivalent: row.max_equivalent,
            max_age: row.max_age,
            is_bonus: row.is_bonus,
            auto_recertified: row.auto_recertified,
        };
        def.validate().map_err(|e| row_err(path, i, e))?;
        out.push(def);
    }
    Ok(out)
}

pub fn write_exceptions<'a>(
    w: impl Write,
    defs: impl IntoIterator<Item = &'a ExceptionDefinition>,
) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for d in defs {
        wtr.serialize(ExceptionRow {
            exception_id: d.exception_id.clone(),
            country: d.country,
            kind: d.kind.as_str().into(),
            initial_equivalent: d.initial_equivalent,
            increment_90d: d.increment_90d,
            max_equivalent: d.max_equivalent,
            max_age: d.max_age,
            is_bonus: d.is_bonus,
            auto_recertified: d.auto_recertified,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct CenterRow {
    center: String,
    country: Country,
    region: String,
}

pub fn read_centers(r: impl Read, path: &Path) -> Result<Vec<Center>, LoadError> {
    reader(r)
        .deserialize::<CenterRow>()
        .enumerate()
        .map(|(i, row)| {
            let row = row.map_err(|e| row_err(path, i, e))?;
            Ok(Center {
                id: row.center,
                country: row.country,
                region: row.region,
            })
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct BloodRow {
    tier: String,
    donor: BloodGroup,
    candidate: BloodGroup,
}

pub fn read_blood_groups(
    r: impl Read,
    path: &Path,
) -> Result<Vec<(TierClass, BloodGroup, BloodGroup)>, LoadError> {
    reader(r)
        .deserialize::<BloodRow>()
        .enumerate()
        .map(|(i, row)| {
            let row = row.map_err(|e| row_err(path, i, e))?;
            let tier: TierClass = row.tier.parse().map_err(|e| row_err(path, i, e))?;
            Ok((tier, row.donor, row.candidate))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub debtor: Party,
    pub creditor: Party,
    pub blood_group: BloodGroup,
    pub created_at: Timestamp,
}

pub fn read_ledger(r: impl Read, path: &Path) -> Result<Vec<LedgerRow>, LoadError> {
    reader(r)
        .deserialize::<LedgerRow>()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| row_err(path, i, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_round_trip() {
        let statuses = vec![
            StatusUpdate {
                registration_id: "r1".into(),
                at: Timestamp::from_date(2016, 1, 1),
                payload: StatusPayload::Biomarker(Biomarkers {
                    creatinine: 1.2,
                    bilirubin: 3.4,
                    inr: 1.1,
                    dialysis: false,
                    sodium: Some(131.0),
                }),
            },
            StatusUpdate {
                registration_id: "r1".into(),
                at: Timestamp::from_date(2016, 1, 2),
                payload: StatusPayload::Exception {
                    exception_id: "HCC-NL".into(),
                    action: ExceptionAction::Grant,
                },
            },
            StatusUpdate {
                registration_id: "r1".into(),
                at: Timestamp::from_date(2016, 1, 3),
                payload: StatusPayload::Profile(AllocationProfile {
                    max_donor_age: Some(60.0),
                    ..Default::default()
                }),
            },
            StatusUpdate {
                registration_id: "r1".into(),
                at: Timestamp::from_date(2016, 1, 4),
                payload: StatusPayload::Urgency(Urgency::HighUrgency),
            },
            StatusUpdate {
                registration_id: "r1".into(),
                at: Timestamp::from_date(2016, 1, 5),
                payload: StatusPayload::Exit(ExitReason::Died),
            },
        ];
        let mut buf = Vec::new();
        write_statuses(&mut buf, &statuses).unwrap();
        let back = read_statuses(buf.as_slice(), Path::new("s.csv")).unwrap();
        assert_eq!(back, statuses);
    }

    #[test]
    fn bad_status_row_named() {
        let text = "registration_id,at,kind,creatinine,bilirubin,inr\nr1,2016-01-01,BIOMARKER,1,1,1\nr1,2016-01-02,BIOMARKER,0,1,1\n";
        let err = read_statuses(text.as_bytes(), Path::new("s.csv")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("s.csv") && msg.contains("row 2"), "{msg}");
    }

    #[test]
    fn donor_extra_columns_become_covariates() {
        let text = "donor_id,reported_at,country,center,hospital,blood_group,age,weight_kg,height_cm,death_cause,dcd,ggt\n\
                    d1,2016-03-01,NL,NLGTP,h1,A,45,80,180,trauma,false,55\n";
        let donors = read_donors(text.as_bytes(), Path::new("d.csv")).unwrap();
        assert_eq!(donors[0].profile_covariates["ggt"], CovariateValue::Num(55.0));
        let mut buf = Vec::new();
        write_donors(&mut buf, &donors).unwrap();
        assert_eq!(read_donors(buf.as_slice(), Path::new("d.csv")).unwrap(), donors);
    }

    #[test]
    fn duplicate_registration_rejected() {
        let text = "patient_id,registration_id,listed_at,country,center,blood_group,age_at_listing,weight_kg,sex,disease_group,is_retransplant\n\
                    p,r,2016-01-01,NL,X,A,40,70,M,other,false\np,r,2016-01-01,NL,X,A,40,70,M,other,false\n";
        assert!(read_registrations(text.as_bytes(), Path::new("r.csv")).is_err());
    }
}
