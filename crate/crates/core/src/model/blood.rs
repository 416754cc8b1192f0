//! Blood-group eligibility rules per tier class.

use std::collections::BTreeSet;

use crate::model::types::{BloodGroup, TierClass};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BloodGroupRules {
    allowed: BTreeSet<(TierClass, BloodGroup, BloodGroup)>,
}

fn abo_compatible(donor: BloodGroup, candidate: BloodGroup) -> bool {
    use BloodGroup::*;
    matches!(
        (donor, candidate),
        (O, _) | (A, A) | (A, AB) | (B, B) | (B, AB) | (AB, AB)
    )
}

impl BloodGroupRules {
    pub fn from_rows(rows: impl IntoIterator<Item = (TierClass, BloodGroup, BloodGroup)>) -> Self {
        BloodGroupRules {
            allowed: rows.into_iter().collect(),
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = &(TierClass, BloodGroup, BloodGroup)> {
        self.allowed.iter()
    }

    pub fn eligible(&self, tier: TierClass, donor: BloodGroup, candidate: BloodGroup) -> bool {
        self.allowed.contains(&(tier, donor, candidate))
    }
}

impl Default for BloodGroupRules {
    /// Identical groups always; A donors also to AB in elective tiers;
    /// full ABO compatibility in HU/ACO tiers.
    fn default() -> Self {
        let mut rows = Vec::new();
        for &d in BloodGroup::ALL {
            for &c in BloodGroup::ALL {
                if abo_compatible(d, c) {
                    rows.push((TierClass::HuAco, d, c));
                }
            }
            rows.push((TierClass::Elective, d, d));
        }
        rows.push((TierClass::Elective, BloodGroup::A, BloodGroup::AB));
        BloodGroupRules::from_rows(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use BloodGroup::*;

    #[test]
    fn default_table_examples() {
        let r = BloodGroupRules::default();
        assert!(r.eligible(TierClass::Elective, A, A));
        assert!(r.eligible(TierClass::Elective, A, AB));
        assert!(!r.eligible(TierClass::Elective, A, B));
        assert!(r.eligible(TierClass::HuAco, O, AB));
    }

    #[test]
    fn default_table_exhaustive() {
        let r = BloodGroupRules::default();
        let mut elective = Vec::new();
        for &d in BloodGroup::ALL {
            for &c in BloodGroup::ALL {
                // Never eligible outside ABO compatibility.
                if !abo_compatible(d, c) {
                    assert!(!r.eligible(TierClass::HuAco, d, c));
                    assert!(!r.eligible(TierClass::Elective, d, c));
                }
                if r.eligible(TierClass::Elective, d, c) {
                    elective.push((d, c));
                }
            }
        }
        assert_eq!(elective, vec![(O, O), (A, A), (A, AB), (B, B), (AB, AB)]);
        assert_eq!(r.rows().filter(|row| row.0 == TierClass::HuAco).count(), 9);
    }
}
