//! Payback ledger for grafts exchanged across borders in the HU/ACO tiers.
//!
//! An international HU/ACO transplant creates an obligation for the
//! recipient's party to return a graft of the same blood group to the donor's
//! party. Obligations within one blood group are linked transitively: if X
//! owes Y and Y owes Z, both are replaced by X owes Z. Linking runs to a
//! fixpoint after every creation, so the open set never contains a chain.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::model::{BloodGroup, Country, Tier};
use crate::time::Timestamp;

/// A party to an obligation: a country, or a transplant center in Austria.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Party {
    Country(Country),
    Center(Country, String),
}

impl Party {
    pub fn for_site(country: Country, center: &str) -> Party {
        match country {
            Country::Austria => Party::Center(country, center.to_string()),
            _ => Party::Country(country),
        }
    }

    pub fn country(&self) -> Country {
        match self {
            Party::Country(c) | Party::Center(c, _) => *c,
        }
    }
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::Country(c) => write!(f, "{c}"),
            Party::Center(c, center) => write!(f, "{c}/{center}"),
        }
    }
}

impl FromStr for Party {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('/') {
            Some((c, center)) => Ok(Party::Center(
                c.parse().map_err(|e| format!("{e}"))?,
                center.to_string(),
            )),
            None => Ok(Party::Country(s.parse().map_err(|e| format!("{e}"))?)),
        }
    }
}

impl Serialize for Party {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Party {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

pub type ObligationId = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Obligation {
    pub id: ObligationId,
    pub debtor: Party,
    pub creditor: Party,
    pub blood_group: BloodGroup,
    pub created_at: Timestamp,
    /// Base obligations this one was linked from; empty if never linked.
    pub lineage: Vec<ObligationId>,
}

impl Obligation {
    fn base_ids(&self) -> Vec<ObligationId> {
        if self.lineage.is_empty() {
            vec![self.id]
        } else {
            self.lineage.clone()
        }
    }
}

/// An open obligation towards one creditor, as seen from a debtor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenObligation {
    pub creditor: Party,
    pub age_days: i64,
    pub obligation_id: ObligationId,
}

/// Net effect of one ledger mutation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LedgerDelta {
    pub added: Vec<Obligation>,
    pub removed: Vec<Obligation>,
}

impl LedgerDelta {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ObligationLedger {
    open: Vec<Obligation>,
    next_id: ObligationId,
}

impl ObligationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open(&self) -> &[Obligation] {
        &self.open
    }

    pub fn len(&self) -> usize {
        self.open.len()
    }

    pub fn is_empty(&self) -> bool {
        self.open.is_empty()
    }

    pub fn get(&self, id: ObligationId) -> Option<&Obligation> {
        self.open.iter().find(|o| o.id == id)
    }

    /// Adds an obligation and links it with existing ones.
    pub fn create(
        &mut self,
        debtor: Party,
        creditor: Party,
        blood_group: BloodGroup,
        created_at: Timestamp,
    ) -> Result<LedgerDelta, SimError> {
        if debtor == creditor {
            return Err(SimError::Fault(format!(
                "obligation from {debtor} to itself"
            )));
        }
        let before = self.open.clone();
        let id = self.fresh_id();
        self.open.push(Obligation {
            id,
            debtor,
            creditor,
            blood_group,
            created_at,
            lineage: Vec::new(),
        });
        self.saturate(blood_group);
        Ok(self.delta_from(&before))
    }

    /// Removes an obligation that was used to place a graft.
    pub fn redeem(&mut self, id: ObligationId) -> Result<LedgerDelta, SimError> {
        let pos = self
            .open
            .iter()
            .position(|o| o.id == id)
            .ok_or_else(|| SimError::Fault(format!("redeeming unknown obligation {id}")))?;
        let removed = self.open.remove(pos);
        Ok(LedgerDelta {
            added: Vec::new(),
            removed: vec![removed],
        })
    }

    /// Applies the ledger consequences of a transplant.
    ///
    /// Placements made through an obligation redeem it. Otherwise an HU/ACO
    /// placement between different parties creates a debt for the recipient
    /// party; every other placement leaves the ledger unchanged.
    pub fn record_transplant(
        &mut self,
        donor_party: &Party,
        recipient_party: &Party,
        blood_group: BloodGroup,
        tier: Tier,
        via_obligation: Option<ObligationId>,
        now: Timestamp,
    ) -> Result<LedgerDelta, SimError> {
        if let Some(id) = via_obligation {
            return self.redeem(id);
        }
        if tier.class() == crate::model::TierClass::HuAco && donor_party != recipient_party {
            return self.create(recipient_party.clone(), donor_party.clone(), blood_group, now);
        }
        Ok(LedgerDelta::default())
    }

    /// Undoes a delta returned by this ledger.
    pub fn revert(&mut self, delta: &LedgerDelta) {
        self.open
            .retain(|o| !delta.added.iter().any(|a| a.id == o.id));
        self.open.extend(delta.removed.iter().cloned());
        self.open.sort_by_key(|o| o.id);
    }

    /// Creditors of `debtor` in `blood_group`, oldest obligation first.
    /// Each creditor appears once, with its oldest obligation.
    pub fn open_obligations(
        &self,
        debtor: &Party,
        blood_group: BloodGroup,
        now: Timestamp,
    ) -> Vec<OpenObligation> {
        let mut owed: Vec<&Obligation> = self
            .open
            .iter()
            .filter(|o| o.blood_group == blood_group && &o.debtor == debtor)
            .collect();
        owed.sort_by_key(|o| (o.created_at, o.id));
        let mut out: Vec<OpenObligation> = Vec::new();
        for o in owed {
            if out.iter().any(|e| e.creditor == o.creditor) {
                continue;
            }
            out.push(OpenObligation {
                creditor: o.creditor.clone(),
                age_days: now.whole_days_since(o.created_at),
                obligation_id: o.id,
            });
        }
        out
    }

    /// Seeds the ledger with pre-existing obligations, linking as needed.
    pub fn seed(
        &mut self,
        rows: impl IntoIterator<Item = (Party, Party, BloodGroup, Timestamp)>,
    ) -> Result<(), SimError> {
        for (debtor, creditor, bg, at) in rows {
            self.create(debtor, creditor, bg, at)?;
        }
        Ok(())
    }

    fn fresh_id(&mut self) -> ObligationId {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn delta_from(&self, before: &[Obligation]) -> LedgerDelta {
        LedgerDelta {
            added: self
                .open
                .iter()
                .filter(|o| !before.iter().any(|b| b.id == o.id))
                .cloned()
                .collect(),
            removed: before
                .iter()
                .filter(|b| !self.open.iter().any(|o| o.id == b.id))
                .cloned()
                .collect(),
        }
    }

    /// Links chains X->Y, Y->Z in one blood group until none remain,
    /// always resolving the pair with the oldest constituent first.
    fn saturate(&mut self, blood_group: BloodGroup) {
        loop {
            let mut best: Option<((Timestamp, Timestamp, ObligationId, ObligationId), usize, usize)> =
                None;
            for (i, first) in self.open.iter().enumerate() {
                if first.blood_group != blood_group {
                    continue;
                }
                for (j, second) in self.open.iter().enumerate() {
                    if i == j || second.blood_group != blood_group || first.creditor != second.debtor
                    {
                        continue;
                    }
                    let (older, newer) = if first.created_at <= second.created_at {
                        (first.created_at, second.created_at)
                    } else {
                        (second.created_at, first.created_at)
                    };
                    let key = (older, newer, first.id, second.id);
                    if best.as_ref().is_none_or(|(k, _, _)| key < *k) {
                        best = Some((key, i, j));
                    }
                }
            }
            let Some((_, i, j)) = best else { break };
            let first = self.open[i].clone();
            let second = self.open[j].clone();
            self.open.retain(|o| o.id != first.id && o.id != second.id);
            if first.debtor != second.creditor {
                let mut lineage = first.base_ids();
                lineage.extend(second.base_ids());
                lineage.sort_unstable();
                let id = self.fresh_id();
                self.open.push(Obligation {
                    id,
                    debtor: first.debtor,
                    creditor: second.creditor,
                    blood_group,
                    created_at: first.created_at.min(second.created_at),
                    lineage,
                });
            }
        }
    }

    /// True when no chain X->Y, Y->Z exists within a blood group.
    pub fn is_saturated(&self) -> bool {
        self.open.iter().all(|a| {
            !self
                .open
                .iter()
                .any(|b| a.id != b.id && a.blood_group == b.blood_group && a.creditor == b.debtor)
        })
    }
}
