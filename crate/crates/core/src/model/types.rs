use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::InputError;
use crate::time::{Timestamp, DAYS_PER_YEAR};

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident, $err:expr, { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = InputError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s.trim() {
                    $($text => Ok($name::$variant),)+
                    other => Err($err(other.to_string())),
                }
            }
        }
    };
}

string_enum!(
    /// ABO blood group.
    BloodGroup, InputError::UnknownBloodGroup, {
        O => "O", A => "A", B => "B", AB => "AB",
    }
);

string_enum!(
    /// Eurotransplant member countries.
    Country, InputError::UnknownCountry, {
        Austria => "AT", Belgium => "BE", Croatia => "HR", Germany => "DE",
        Hungary => "HU", Luxembourg => "LU", Netherlands => "NL", Slovenia => "SI",
    }
);

impl Country {
    /// Age below which a candidate counts as pediatric.
    pub fn pediatric_age_cutoff(self) -> f64 {
        match self {
            Country::Germany => 16.0,
            _ => 18.0,
        }
    }

    pub fn is_pediatric_age(self, age_years: f64) -> bool {
        age_years < self.pediatric_age_cutoff()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown code {0:?}")]
pub struct UnknownCode(pub String);

macro_rules! code_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = UnknownCode;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s.trim() {
                    $($text => Ok($name::$variant),)+
                    other => Err(UnknownCode(other.to_string())),
                }
            }
        }
    };
}

code_enum!(
    /// Waitlist urgency code.
    Urgency { Transplantable => "T", NonTransplantable => "NT", HighUrgency => "HU", CombinedOrgan => "ACO" }
);

impl Urgency {
    /// Only T, HU and ACO candidates appear on match lists.
    pub fn is_active(self) -> bool {
        !matches!(self, Urgency::NonTransplantable)
    }

    pub fn tier(self) -> Option<Tier> {
        match self {
            Urgency::HighUrgency => Some(Tier::HighUrgency),
            Urgency::CombinedOrgan => Some(Tier::CombinedOrgan),
            Urgency::Transplantable => Some(Tier::Elective),
            Urgency::NonTransplantable => None,
        }
    }
}

code_enum!(
    /// Terminal waitlist exit.
    ExitReason { Removed => "R", Died => "D" }
);

code_enum!(
    Sex { Male => "M", Female => "F" }
);

code_enum!(
    /// Match tier; declaration order is priority order.
    Tier { HighUrgency => "HU", CombinedOrgan => "ACO", Elective => "elective" }
);

impl Tier {
    pub fn class(self) -> TierClass {
        match self {
            Tier::HighUrgency | Tier::CombinedOrgan => TierClass::HuAco,
            Tier::Elective => TierClass::Elective,
        }
    }
}

code_enum!(
    /// Urgency grouping used by blood-group rules and acceptance selectors.
    TierClass { HuAco => "HU/ACO", Elective => "elective" }
);

code_enum!(
    AgeClass { Adult => "adult", Pediatric => "pediatric" }
);

/// A donor or match covariate value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovariateValue {
    Num(f64),
    Cat(String),
}

impl CovariateValue {
    /// Numbers when the text parses as one, categories otherwise.
    pub fn parse(text: &str) -> CovariateValue {
        match text.trim().parse::<f64>() {
            Ok(v) => CovariateValue::Num(v),
            Err(_) => CovariateValue::Cat(text.trim().to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DonorRecord {
    pub donor_id: String,
    pub reported_at: Timestamp,
    pub country: Country,
    pub center: String,
    pub hospital: String,
    pub blood_group: BloodGroup,
    pub age: f64,
    pub weight_kg: f64,
    pub height_cm: f64,
    pub death_cause: String,
    pub dcd: bool,
    pub profile_covariates: BTreeMap<String, CovariateValue>,
}

impl DonorRecord {
    pub fn is_pediatric(&self) -> bool {
        self.country.is_pediatric_age(self.age)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRegistration {
    pub patient_id: String,
    pub registration_id: String,
    pub listed_at: Timestamp,
    pub country: Country,
    pub center: String,
    pub blood_group: BloodGroup,
    pub age_at_listing: f64,
    pub weight_kg: f64,
    pub sex: Sex,
    pub disease_group: String,
    pub is_retransplant: bool,
}

impl CandidateRegistration {
    /// Pediatric status is fixed at listing, using the listing country's cutoff.
    pub fn is_pediatric(&self) -> bool {
        self.country.is_pediatric_age(self.age_at_listing)
    }

    pub fn age_at(&self, at: Timestamp) -> f64 {
        self.age_at_listing + at.days_since(self.listed_at) / DAYS_PER_YEAR
    }
}

/// Refusal criteria a candidate sets for graft offers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationProfile {
    pub max_donor_age: Option<f64>,
    pub accept_dcd: bool,
    pub accept_split: bool,
    pub accept_rescue_offer: bool,
    pub min_donor_weight: Option<f64>,
    pub max_donor_weight: Option<f64>,
}

impl Default for AllocationProfile {
    fn default() -> Self {
        AllocationProfile {
            max_donor_age: None,
            accept_dcd: true,
            accept_split: true,
            accept_rescue_offer: true,
            min_donor_weight: None,
            max_donor_weight: None,
        }
    }
}

impl AllocationProfile {
    pub fn is_consistent(&self) -> bool {
        match (self.min_donor_weight, self.max_donor_weight) {
            (Some(lo), Some(hi)) => lo <= hi,
            _ => true,
        }
    }

    /// Whether a whole-graft offer of `donor` is acceptable under this profile.
    pub fn admits(&self, donor: &DonorRecord) -> bool {
        if self.max_donor_age.is_some_and(|max| donor.age > max) {
            return false;
        }
        if donor.dcd && !self.accept_dcd {
            return false;
        }
        if self.min_donor_weight.is_some_and(|lo| donor.weight_kg < lo) {
            return false;
        }
        if self.max_donor_weight.is_some_and(|hi| donor.weight_kg > hi) {
            return false;
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biomarkers {
    pub creatinine: f64,
    pub bilirubin: f64,
    pub inr: f64,
    pub dialysis: bool,
    pub sodium: Option<f64>,
}

code_enum!(
    ExceptionAction { Grant => "grant", Upgrade => "upgrade", Expire => "expire" }
);

code_enum!(
    StatusKind { Biomarker => "BIOMARKER", Exception => "EXCEPTION", Urgency => "URGENCY", Profile => "PROFILE", Exit => "EXIT" }
);

#[derive(Debug, Clone, PartialEq)]
pub enum StatusPayload {
    Biomarker(Biomarkers),
    Exception {
        exception_id: String,
        action: ExceptionAction,
    },
    Urgency(Urgency),
    Profile(AllocationProfile),
    Exit(ExitReason),
}

impl StatusPayload {
    pub fn kind(&self) -> StatusKind {
        match self {
            StatusPayload::Biomarker(_) => StatusKind::Biomarker,
            StatusPayload::Exception { .. } => StatusKind::Exception,
            StatusPayload::Urgency(_) => StatusKind::Urgency,
            StatusPayload::Profile(_) => StatusKind::Profile,
            StatusPayload::Exit(_) => StatusKind::Exit,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatusUpdate {
    pub registration_id: String,
    pub at: Timestamp,
    pub payload: StatusPayload,
}

impl StatusUpdate {
    pub fn is_exit(&self) -> bool {
        matches!(self.payload, StatusPayload::Exit(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pediatric_cutoff_differs_by_country() {
        assert!(Country::Netherlands.is_pediatric_age(16.5));
        assert!(!Country::Germany.is_pediatric_age(16.5));
        assert!(Country::Germany.is_pediatric_age(15.9));
    }

    #[test]
    fn tiers_order_by_priority() {
        assert!(Tier::HighUrgency < Tier::CombinedOrgan);
        assert!(Tier::CombinedOrgan < Tier::Elective);
        assert_eq!(Urgency::NonTransplantable.tier(), None);
    }

    #[test]
    fn codes_round_trip() {
        for bg in BloodGroup::ALL {
            assert_eq!(bg.as_str().parse::<BloodGroup>().unwrap(), *bg);
        }
        assert!("C".parse::<BloodGroup>().is_err());
        assert_eq!("HU".parse::<Urgency>().unwrap(), Urgency::HighUrgency);
    }
}
