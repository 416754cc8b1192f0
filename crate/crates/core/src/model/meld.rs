//! Laboratory MELD formulas.
//!
//! A formula is a scaled sum of log-biomarker terms, each capped before the
//! log is taken, with an optional serum-sodium term (linear plus an
//! interaction with log creatinine). Both UNOS-MELD and ReMELD-Na are
//! expressed as instances of [`MeldFormula`].

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, InputError};
use crate::model::types::Biomarkers;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogTerm {
    pub coefficient: f64,
    pub lower: f64,
    pub upper: f64,
}

impl LogTerm {
    fn contribution(&self, value: f64) -> f64 {
        self.coefficient * value.clamp(self.lower, self.upper).ln()
    }
}

/// Points awarded for hyponatremia: `revna = clamp(reference - Na, 0, max_points)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SodiumTerm {
    pub reference: f64,
    pub max_points: f64,
    pub coefficient: f64,
    /// Coefficient on `revna * ln(capped creatinine)`.
    pub creatinine_interaction: f64,
    /// Value imputed when serum sodium is not reported.
    pub missing_value: f64,
}

impl SodiumTerm {
    pub fn revna(&self, sodium: Option<f64>) -> f64 {
        let na = sodium.unwrap_or(self.missing_value);
        (self.reference - na).clamp(0.0, self.max_points)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    HalfUp,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeldFormula {
    pub name: String,
    pub intercept: f64,
    pub scale: f64,
    pub creatinine: LogTerm,
    pub bilirubin: LogTerm,
    pub inr: LogTerm,
    /// Creatinine value substituted for candidates on dialysis.
    pub dialysis_creatinine: Option<f64>,
    pub sodium: Option<SodiumTerm>,
    pub rounding: Rounding,
    pub min_score: f64,
    pub max_score: f64,
}

/// Half-up rounding to an integer.
pub fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

impl MeldFormula {
    pub fn unos() -> Self {
        let floor_one = |coefficient: f64, upper: f64| LogTerm {
            coefficient,
            lower: 1.0,
            upper,
        };
        MeldFormula {
            name: "unos".into(),
            intercept: 0.643,
            scale: 10.0,
            creatinine: floor_one(0.957, 4.0),
            bilirubin: floor_one(0.378, f64::INFINITY),
            inr: floor_one(1.120, f64::INFINITY),
            dialysis_creatinine: Some(4.0),
            sodium: None,
            rounding: Rounding::HalfUp,
            min_score: 6.0,
            max_score: 40.0,
        }
    }

    pub fn remeld_na() -> Self {
        MeldFormula {
            name: "remeld_na".into(),
            intercept: 7.85,
            scale: 1.0,
            creatinine: LogTerm {
                coefficient: 9.03,
                lower: 0.7,
                upper: 2.5,
            },
            bilirubin: LogTerm {
                coefficient: 2.97,
                lower: 0.3,
                upper: 27.0,
            },
            inr: LogTerm {
                coefficient: 9.52,
                lower: 0.1,
                upper: 2.6,
            },
            dialysis_creatinine: Some(2.5),
            sodium: Some(SodiumTerm {
                reference: 138.6,
                max_points: 13.6,
                coefficient: 0.392,
                creatinine_interaction: -0.351,
                missing_value: 138.6,
            }),
            rounding: Rounding::HalfUp,
            min_score: 1.0,
            max_score: 36.0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, term) in [
            ("creatinine", &self.creatinine),
            ("bilirubin", &self.bilirubin),
            ("inr", &self.inr),
        ] {
            if !(term.lower > 0.0 && term.lower <= term.upper) {
                return Err(ConfigError::Invalid(format!(
                    "formula {}: {name} caps must satisfy 0 < lower <= upper",
                    self.name
                )));
            }
        }
        if self.min_score > self.max_score {
            return Err(ConfigError::Invalid(format!(
                "formula {}: empty output range",
                self.name
            )));
        }
        if let Some(na) = &self.sodium {
            if na.max_points < 0.0 {
                return Err(ConfigError::Invalid(format!(
                    "formula {}: negative sodium bound",
                    self.name
                )));
            }
        }
        Ok(())
    }

    fn check(b: &Biomarkers) -> Result<(), InputError> {
        for (name, value) in [
            ("creatinine", b.creatinine),
            ("bilirubin", b.bilirubin),
            ("inr", b.inr),
        ] {
            if !(value > 0.0) {
                return Err(InputError::NonPositiveBiomarker { name, value });
            }
        }
        if let Some(na) = b.sodium {
            if !(na > 0.0) {
                return Err(InputError::NonPositiveBiomarker {
                    name: "sodium",
                    value: na,
                });
            }
        }
        Ok(())
    }

    /// The formula value before rounding and clamping.
    pub fn raw_score(&self, b: &Biomarkers) -> Result<f64, InputError> {
        Self::check(b)?;
        let crea = match (b.dialysis, self.dialysis_creatinine) {
            (true, Some(sub)) => sub,
            _ => b.creatinine,
        };
        let mut sum = self.intercept
            + self.creatinine.contribution(crea)
            + self.bilirubin.contribution(b.bilirubin)
            + self.inr.contribution(b.inr);
        if let Some(na) = &self.sodium {
            let revna = na.revna(b.sodium);
            let ln_crea = crea.clamp(self.creatinine.lower, self.creatinine.upper).ln();
            sum += na.coefficient * revna + na.creatinine_interaction * revna * ln_crea;
        }
        Ok(self.scale * sum)
    }

    /// Lab-MELD: the rounded raw score clamped to the output range.
    pub fn compute(&self, b: &Biomarkers) -> Result<f64, InputError> {
        let raw = self.raw_score(b)?;
        let rounded = match self.rounding {
            Rounding::HalfUp => round_half_up(raw),
            Rounding::None => raw,
        };
        Ok(rounded.clamp(self.min_score, self.max_score))
    }
}

/// ReMELD-Na with the default coefficients; missing sodium is imputed at 138.6.
pub fn compute_remeld_na(
    creatinine: f64,
    bilirubin: f64,
    inr: f64,
    sodium: Option<f64>,
) -> Result<f64, InputError> {
    MeldFormula::remeld_na().compute(&Biomarkers {
        creatinine,
        bilirubin,
        inr,
        dialysis: false,
        sodium,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labs(creatinine: f64, bilirubin: f64, inr: f64) -> Biomarkers {
        Biomarkers {
            creatinine,
            bilirubin,
            inr,
            dialysis: false,
            sodium: None,
        }
    }

    #[test]
    fn unos_floor_at_all_ones() {
        assert_eq!(MeldFormula::unos().compute(&labs(1.0, 1.0, 1.0)).unwrap(), 6.0);
    }

    #[test]
    fn unos_direct_evaluation() {
        // 10 * (0.957 ln 2.5 + 0.378 ln 4.1 + 1.120 ln 1.9 + 0.643), evaluated by hand.
        let raw = MeldFormula::unos().raw_score(&labs(2.5, 4.1, 1.9)).unwrap();
        assert!((raw - 27.721_196_589_791_273).abs() < 1e-9);
        assert_eq!(MeldFormula::unos().compute(&labs(2.5, 4.1, 1.9)).unwrap(), 28.0);
    }

    #[test]
    fn unos_dialysis_substitutes_creatinine() {
        let f = MeldFormula::unos();
        let mut b = labs(1.2, 2.0, 1.1);
        b.dialysis = true;
        let expected = f.compute(&labs(4.0, 2.0, 1.1)).unwrap();
        assert_eq!(f.compute(&b).unwrap(), expected);
    }

    #[test]
    fn remeld_intercept_only() {
        let f = MeldFormula::remeld_na();
        let mut b = labs(1.0, 1.0, 1.0);
        b.sodium = Some(138.6);
        assert!((f.raw_score(&b).unwrap() - 7.85).abs() < 1e-12);
        assert_eq!(compute_remeld_na(1.0, 1.0, 1.0, None).unwrap(), 8.0);
    }

    #[test]
    fn remeld_direct_evaluation() {
        // revna = 138.6 - 130 = 8.6; no caps bind for these labs.
        let revna = 8.6_f64;
        let expected = 7.85 + 9.03 * 2f64.ln() + 2.97 * 3f64.ln() + 9.52 * 1.5f64.ln()
            + 0.392 * revna
            - 0.351 * revna * 2f64.ln();
        let b = Biomarkers {
            sodium: Some(130.0),
            ..labs(2.0, 3.0, 1.5)
        };
        let raw = MeldFormula::remeld_na().raw_score(&b).unwrap();
        assert!((raw - expected).abs() < 1e-9);
        assert_eq!(compute_remeld_na(2.0, 3.0, 1.5, Some(130.0)).unwrap(), 23.0);
    }

    #[test]
    fn rejects_nonpositive_biomarkers() {
        let err = MeldFormula::unos().compute(&labs(0.0, 1.0, 1.0)).unwrap_err();
        assert!(matches!(err, InputError::NonPositiveBiomarker { name: "creatinine", .. }));
        assert!(compute_remeld_na(1.0, -2.0, 1.0, None).is_err());
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(round_half_up(6.5), 7.0);
        assert_eq!(round_half_up(6.49), 6.0);
    }

    proptest! {
        #[test]
        fn missing_sodium_matches_reference(
            c in 0.05f64..20.0, b in 0.05f64..60.0, i in 0.3f64..8.0,
        ) {
            prop_assert_eq!(
                compute_remeld_na(c, b, i, Some(138.6)).unwrap(),
                compute_remeld_na(c, b, i, None).unwrap()
            );
        }

        #[test]
        fn monotone_in_each_biomarker(
            c in 0.05f64..20.0, b in 0.05f64..60.0, i in 0.3f64..8.0,
            bump in 0.0f64..5.0, which in 0usize..3, remeld in any::<bool>(),
        ) {
            let f = if remeld { MeldFormula::remeld_na() } else { MeldFormula::unos() };
            let base = labs(c, b, i);
            let mut up = base;
            match which {
                0 => up.creatinine += bump,
                1 => up.bilirubin += bump,
                _ => up.inr += bump,
            }
            prop_assert!(f.raw_score(&up).unwrap() >= f.raw_score(&base).unwrap() - 1e-12);
            prop_assert!(f.compute(&up).unwrap() >= f.compute(&base).unwrap());
        }

        #[test]
        fn constant_above_upper_cap(extra in 0.0f64..50.0) {
            let f = MeldFormula::unos();
            let at_cap = f.raw_score(&labs(4.0, 2.0, 1.5)).unwrap();
            let above = f.raw_score(&labs(4.0 + extra, 2.0, 1.5)).unwrap();
            prop_assert_eq!(at_cap, above);
        }
    }
}
