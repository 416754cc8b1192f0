//! 90-day survival curves mapping MELD-scale scores to mortality equivalents.

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, InputError};
use crate::model::meld::round_half_up;

/// Reference score at which the curve equals `base`.
pub const REFERENCE_SCORE: f64 = 10.0;

/// `s90(score) = base ^ exp(slope * (score - 10))`, with the score range
/// used when translating mortality equivalents back to the MELD scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve90 {
    pub name: String,
    pub base: f64,
    pub slope: f64,
    pub min_score: f64,
    pub max_score: f64,
}

impl SurvivalCurve90 {
    pub fn unos() -> Self {
        SurvivalCurve90 {
            name: "unos".into(),
            base: 0.98037,
            slope: 0.17557,
            min_score: 6.0,
            max_score: 40.0,
        }
    }

    pub fn remeld_na() -> Self {
        SurvivalCurve90 {
            name: "remeld_na".into(),
            base: 0.9745,
            slope: 0.2216,
            min_score: 1.0,
            max_score: 36.0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.base > 0.0 && self.base < 1.0) || !(self.slope > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "curve {}: need 0 < base < 1 and slope > 0",
                self.name
            )));
        }
        if self.min_score > self.max_score {
            return Err(ConfigError::Invalid(format!(
                "curve {}: empty score range",
                self.name
            )));
        }
        Ok(())
    }

    pub fn survival90(&self, score: f64) -> f64 {
        self.base.powf((self.slope * (score - REFERENCE_SCORE)).exp())
    }

    pub fn mortality90(&self, score: f64) -> f64 {
        1.0 - self.survival90(score)
    }

    /// Continuous score whose 90-day mortality equals `equivalent`.
    pub fn inverse(&self, equivalent: f64) -> Result<f64, InputError> {
        if !(equivalent > 0.0 && equivalent < 1.0) {
            return Err(InputError::EquivalentOutOfRange(equivalent));
        }
        let exponent = (1.0 - equivalent).ln() / self.base.ln();
        Ok(REFERENCE_SCORE + exponent.ln() / self.slope)
    }

    /// MELD-scale score for a mortality equivalent: the continuous inverse,
    /// rounded half-up and clamped to the curve's score range.
    pub fn equivalent_to_meld(&self, equivalent: f64) -> Result<f64, InputError> {
        let score = self.inverse(equivalent)?;
        // Guard against 29.9999999 from the log round trip.
        let snapped = if (score - score.round()).abs() < 1e-9 {
            score.round()
        } else {
            round_half_up(score)
        };
        Ok(snapped.clamp(self.min_score, self.max_score))
    }
}
