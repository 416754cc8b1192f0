//! Domain types and scoring formulas shared by every module.

pub mod blood;
pub mod centers;
pub mod curve;
pub mod meld;
pub mod state;
pub mod types;

pub use blood::BloodGroupRules;
pub use centers::{Center, CenterDirectory};
pub use curve::SurvivalCurve90;
pub use meld::{compute_remeld_na, MeldFormula};
pub use state::{CandidateState, Disposition, MeldContext, WaitingAnchor};
pub use types::*;

use crate::error::InputError;

/// Eligibility lookup from blood-group codes.
pub fn blood_group_eligible(
    rules: &BloodGroupRules,
    donor_bg: &str,
    candidate_bg: &str,
    tier: TierClass,
) -> Result<bool, InputError> {
    let donor: BloodGroup = donor_bg.parse()?;
    let candidate: BloodGroup = candidate_bg.parse()?;
    Ok(rules.eligible(tier, donor, candidate))
}
