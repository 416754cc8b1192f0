//! Covariates and linear predictors for the logistic and survival models.
//!
//! Coefficient files name covariates as strings; they are resolved once at
//! load time into [`Covariate`], so a misspelt name fails before any run.

use std::io::Read;
use std::str::FromStr;

use serde::Deserialize;

use crate::error::ConfigError;
use crate::model::{CandidateState, CovariateValue, DonorRecord, Tier};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Covariate {
    DonorAge,
    DonorWeight,
    DonorHeight,
    DonorBmi,
    DonorDcd,
    DonorDeathCause,
    DonorCountry,
    DonorBloodGroup,
    /// Free-form donor attribute from the donor file's extra columns.
    DonorAttribute(String),
    CandidateAge,
    CandidateWeight,
    CandidateSex,
    CandidateCountry,
    DiseaseGroup,
    Retransplant,
    Pediatric,
    LabMeld,
    MatchMeld,
    Tier,
    SameCountry,
    SameCenter,
    SameRegion,
    BloodGroupIdentical,
    WeightRatio,
    Rescue,
    Obligation,
    Split,
}

impl Covariate {
    /// Whether the covariate is known before any candidate is considered.
    pub fn is_center_level(&self) -> bool {
        matches!(
            self,
            Covariate::DonorAge
                | Covariate::DonorWeight
                | Covariate::DonorHeight
                | Covariate::DonorBmi
                | Covariate::DonorDcd
                | Covariate::DonorDeathCause
                | Covariate::DonorCountry
                | Covariate::DonorBloodGroup
                | Covariate::DonorAttribute(_)
                | Covariate::CandidateCountry
                | Covariate::SameCountry
                | Covariate::SameCenter
                | Covariate::SameRegion
                | Covariate::Rescue
                | Covariate::Obligation
        )
    }
}

impl FromStr for Covariate {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(attr) = s.strip_prefix("donor.") {
            if attr.is_empty() {
                return Err(ConfigError::UnknownCovariate(s.into()));
            }
            return Ok(Covariate::DonorAttribute(attr.to_string()));
        }
        Ok(match s {
            "donor_age" => Covariate::DonorAge,
            "donor_weight" => Covariate::DonorWeight,
            "donor_height" => Covariate::DonorHeight,
            "donor_bmi" => Covariate::DonorBmi,
            "donor_dcd" => Covariate::DonorDcd,
            "donor_death_cause" => Covariate::DonorDeathCause,
            "donor_country" => Covariate::DonorCountry,
            "donor_blood_group" => Covariate::DonorBloodGroup,
            "candidate_age" => Covariate::CandidateAge,
            "candidate_weight" => Covariate::CandidateWeight,
            "candidate_sex" => Covariate::CandidateSex,
            "candidate_country" => Covariate::CandidateCountry,
            "disease_group" => Covariate::DiseaseGroup,
            "retransplant" => Covariate::Retransplant,
            "pediatric" => Covariate::Pediatric,
            "lab_meld" => Covariate::LabMeld,
            "match_meld" => Covariate::MatchMeld,
            "tier" => Covariate::Tier,
            "same_country" => Covariate::SameCountry,
            "same_center" => Covariate::SameCenter,
            "same_region" => Covariate::SameRegion,
            "blood_group_identical" => Covariate::BloodGroupIdentical,
            "weight_ratio" => Covariate::WeightRatio,
            "rescue" => Covariate::Rescue,
            "obligation" => Covariate::Obligation,
            "split" => Covariate::Split,
            _ => return Err(ConfigError::UnknownCovariate(s.into())),
        })
    }
}

/// Everything a term may read. Candidate fields are absent for
/// center-level decisions; the match fields then describe the center.
#[derive(Debug, Clone, Copy)]
pub struct ScoringContext<'a> {
    pub donor: &'a DonorRecord,
    pub candidate: Option<&'a CandidateState>,
    pub center_country: crate::model::Country,
    pub center: &'a str,
    pub tier: Option<Tier>,
    pub match_meld: Option<f64>,
    pub same_region: bool,
    pub rescue: bool,
    pub obligation: bool,
    pub split: bool,
    pub at: crate::time::Timestamp,
}

fn flag(b: bool) -> CovariateValue {
    CovariateValue::Cat(if b { "true" } else { "false" }.into())
}

impl ScoringContext<'_> {
    pub fn value(&self, covariate: &Covariate) -> Option<CovariateValue> {
        use CovariateValue::{Cat, Num};
        let d = self.donor;
        let c = self.candidate;
        Some(match covariate {
            Covariate::DonorAge => Num(d.age),
            Covariate::DonorWeight => Num(d.weight_kg),
            Covariate::DonorHeight => Num(d.height_cm),
            Covariate::DonorBmi => {
                let m = d.height_cm / 100.0;
                if m > 0.0 {
                    Num(d.weight_kg / (m * m))
                } else {
                    return None;
                }
            }
            Covariate::DonorDcd => flag(d.dcd),
            Covariate::DonorDeathCause => Cat(d.death_cause.clone()),
            Covariate::DonorCountry => Cat(d.country.as_str().into()),
            Covariate::DonorBloodGroup => Cat(d.blood_group.as_str().into()),
            Covariate::DonorAttribute(name) => d.profile_covariates.get(name)?.clone(),
            Covariate::CandidateAge => Num(c?.registration.age_at(self.at)),
            Covariate::CandidateWeight => Num(c?.registration.weight_kg),
            Covariate::CandidateSex => Cat(c?.registration.sex.as_str().into()),
            Covariate::CandidateCountry => Cat(self.center_country.as_str().into()),
            Covariate::DiseaseGroup => Cat(c?.registration.disease_group.clone()),
            Covariate::Retransplant => flag(c?.registration.is_retransplant),
            Covariate::Pediatric => flag(c?.registration.is_pediatric()),
            Covariate::LabMeld => Num(c?.lab_meld),
            Covariate::MatchMeld => Num(self.match_meld?),
            Covariate::Tier => Cat(self.tier?.as_str().into()),
            Covariate::SameCountry => flag(self.center_country == d.country),
            Covariate::SameCenter => flag(self.center == d.center),
            Covariate::SameRegion => flag(self.same_region),
            Covariate::BloodGroupIdentical => flag(c?.registration.blood_group == d.blood_group),
            Covariate::WeightRatio => {
                let w = c?.registration.weight_kg;
                if w > 0.0 {
                    Num(d.weight_kg / w)
                } else {
                    return None;
                }
            }
            Covariate::Rescue => flag(self.rescue),
            Covariate::Obligation => flag(self.obligation),
            Covariate::Split => flag(self.split),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TermKind {
    /// Coefficient times the numeric value.
    Linear,
    /// Coefficient when the value equals the level; reference otherwise.
    Level(String),
    /// Coefficient times max(0, value - knot).
    Hinge(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub covariate: Covariate,
    pub kind: TermKind,
    pub coefficient: f64,
}

impl Term {
    fn contribution(&self, ctx: &ScoringContext<'_>) -> f64 {
        let Some(value) = ctx.value(&self.covariate) else {
            return 0.0;
        };
        match (&self.kind, value) {
            (TermKind::Linear, CovariateValue::Num(x)) => self.coefficient * x,
            (TermKind::Linear, CovariateValue::Cat(s)) if s == "true" => self.coefficient,
            (TermKind::Hinge(knot), CovariateValue::Num(x)) => self.coefficient * (x - knot).max(0.0),
            (TermKind::Level(level), CovariateValue::Cat(s)) if *level == s => self.coefficient,
            (TermKind::Level(level), CovariateValue::Num(x)) => match level.parse::<f64>() {
                Ok(l) if l == x => self.coefficient,
                _ => 0.0,
            },
            _ => 0.0,
        }
    }
}

/// Intercept plus terms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearPredictor {
    pub intercept: f64,
    pub terms: Vec<Term>,
}

impl LinearPredictor {
    pub fn constant(intercept: f64) -> Self {
        LinearPredictor {
            intercept,
            terms: Vec::new(),
        }
    }

    pub fn eval(&self, ctx: &ScoringContext<'_>) -> f64 {
        self.intercept + self.terms.iter().map(|t| t.contribution(ctx)).sum::<f64>()
    }

    /// Logistic probability of the predictor, read as log-odds.
    pub fn probability(&self, ctx: &ScoringContext<'_>) -> f64 {
        logistic(self.eval(ctx))
    }

    pub fn require_center_level(&self, what: &str) -> Result<(), ConfigError> {
        for t in &self.terms {
            if !t.covariate.is_center_level() {
                return Err(ConfigError::Invalid(format!(
                    "{what}: covariate {:?} is not available before a candidate is chosen",
                    t.covariate
                )));
            }
        }
        Ok(())
    }

    /// Adds a row read from a coefficient file.
    pub fn push_row(&mut self, covariate: &str, kind: &str, level: &str, estimate: f64) -> Result<(), ConfigError> {
        if covariate.trim() == "(intercept)" {
            self.intercept += estimate;
            return Ok(());
        }
        let covariate: Covariate = covariate.parse()?;
        let kind = match kind.trim() {
            "linear" => TermKind::Linear,
            "level" => TermKind::Level(level.trim().to_string()),
            "hinge" => TermKind::Hinge(level.trim().parse().map_err(|_| {
                ConfigError::Invalid(format!("hinge knot {level:?} is not a number"))
            })?),
            other => return Err(ConfigError::Invalid(format!("unknown term kind {other:?}"))),
        };
        if !estimate.is_finite() {
            return Err(ConfigError::Invalid("non-finite coefficient".into()));
        }
        self.terms.push(Term {
            covariate,
            kind,
            coefficient: estimate,
        });
        Ok(())
    }

    /// Reads a file with columns covariate, kind, level, estimate.
    pub fn from_csv(reader: impl Read) -> Result<Self, ConfigError> {
        #[derive(Deserialize)]
        struct Row {
            covariate: String,
            kind: String,
            level: String,
            estimate: f64,
        }
        let mut lp = LinearPredictor::default();
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| ConfigError::Invalid(format!("row {}: {e}", i + 1)))?;
            lp.push_row(&row.covariate, &row.kind, &row.level, row.estimate)
                .map_err(|e| ConfigError::Invalid(format!("row {}: {e}", i + 1)))?;
        }
        Ok(lp)
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
