//! Match lists: who is offered a graft, and in which order.
//!
//! Each eligible candidate receives a [`MatchCode`]; records sort
//! lexicographically on it. Candidates whose layer rule marks the offer as
//! center-driven are collapsed into one record per center, placed where the
//! center's best candidate would stand.

use std::cmp::Ordering;
use std::io::Read;
use std::str::FromStr;

use serde::Deserialize;

use crate::error::ConfigError;
use crate::exceptions::ExceptionCatalog;
use crate::model::{
    BloodGroup, BloodGroupRules, CandidateState, CenterDirectory, Country, DonorRecord,
    MeldContext, SurvivalCurve90, Tier,
};
use crate::obligations::{ObligationId, ObligationLedger, OpenObligation, Party};
use crate::time::Timestamp;

/// Obligation rank of candidates whose party holds no obligation.
pub const NO_OBLIGATION: u32 = u32::MAX;

/// Sort key of a match record. Lower sorts first, except match-MELD and
/// waiting days, where higher values sort first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchCode {
    pub tier: Tier,
    pub layer: u32,
    pub obligation_rank: u32,
    pub match_meld: f64,
    pub locality: u32,
    pub waiting_days: i64,
    pub listed_at: Timestamp,
}

impl Eq for MatchCode {}

impl Ord for MatchCode {
    fn cmp(&self, other: &Self) -> Ordering {
        self.tier
            .cmp(&other.tier)
            .then(self.layer.cmp(&other.layer))
            .then(self.obligation_rank.cmp(&other.obligation_rank))
            .then(other.match_meld.total_cmp(&self.match_meld))
            .then(self.locality.cmp(&other.locality))
            .then(other.waiting_days.cmp(&self.waiting_days))
            .then(self.listed_at.cmp(&other.listed_at))
    }
}

impl PartialOrd for MatchCode {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    Always,
    SameCountry,
    SameCenter,
    SameRegion,
    CandidateCountry,
    CandidateBloodGroup,
    BloodGroupIdentical,
    DonorPediatric,
    CandidatePediatric,
    DonorDcd,
    Obligation,
    Tier,
    DonorAge,
    CandidateWeight,
}

impl FromStr for Field {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim() {
            "always" => Field::Always,
            "same_country" => Field::SameCountry,
            "same_center" => Field::SameCenter,
            "same_region" => Field::SameRegion,
            "candidate_country" => Field::CandidateCountry,
            "candidate_blood_group" => Field::CandidateBloodGroup,
            "blood_group_identical" => Field::BloodGroupIdentical,
            "donor_pediatric" => Field::DonorPediatric,
            "candidate_pediatric" => Field::CandidatePediatric,
            "donor_dcd" => Field::DonorDcd,
            "obligation" => Field::Obligation,
            "tier" => Field::Tier,
            "donor_age" => Field::DonorAge,
            "candidate_weight" => Field::CandidateWeight,
            other => return Err(ConfigError::UnknownCovariate(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl FromStr for Op {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim() {
            "eq" | "==" => Op::Eq,
            "ne" | "!=" => Op::Ne,
            "lt" | "<" => Op::Lt,
            "le" | "<=" => Op::Le,
            "gt" | ">" => Op::Gt,
            "ge" | ">=" => Op::Ge,
            other => return Err(ConfigError::Invalid(format!("unknown operator {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Operand {
    Bool(bool),
    Num(f64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub field: Field,
    op: Op,
    value: Operand,
}

impl Predicate {
    pub fn new(field: Field, op: Op, value: &str) -> Result<Self, ConfigError> {
        let bad = || ConfigError::Invalid(format!("bad value {value:?} for {field:?}"));
        let operand = match field {
            Field::Always
            | Field::SameCountry
            | Field::SameCenter
            | Field::SameRegion
            | Field::BloodGroupIdentical
            | Field::DonorPediatric
            | Field::CandidatePediatric
            | Field::DonorDcd
            | Field::Obligation => Operand::Bool(value.trim().parse().map_err(|_| bad())?),
            Field::DonorAge | Field::CandidateWeight => {
                Operand::Num(value.trim().parse().map_err(|_| bad())?)
            }
            Field::CandidateCountry => {
                Operand::Text(value.parse::<Country>().map_err(|_| bad())?.as_str().into())
            }
            Field::CandidateBloodGroup => {
                Operand::Text(value.parse::<BloodGroup>().map_err(|_| bad())?.as_str().into())
            }
            Field::Tier => Operand::Text(value.parse::<Tier>().map_err(|_| bad())?.as_str().into()),
        };
        let ordered = matches!(op, Op::Lt | Op::Le | Op::Gt | Op::Ge);
        if ordered && !matches!(operand, Operand::Num(_)) {
            return Err(ConfigError::Invalid(format!(
                "ordering comparison on non-numeric field {field:?}"
            )));
        }
        Ok(Predicate {
            field,
            op,
            value: operand,
        })
    }

    fn holds(&self, facts: &MatchFacts) -> bool {
        let actual = facts.value(self.field);
        match (self.op, &actual, &self.value) {
            (Op::Eq, a, b) => a == b,
            (Op::Ne, a, b) => a != b,
            (op, Operand::Num(a), Operand::Num(b)) => match op {
                Op::Lt => a < b,
                Op::Le => a <= b,
                Op::Gt => a > b,
                _ => a >= b,
            },
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRule {
    pub donor_country: Option<Country>,
    pub name: String,
    pub layer: u32,
    pub center_driven: bool,
    pub predicates: Vec<Predicate>,
}

impl LayerRule {
    fn is_catch_all(&self) -> bool {
        self.predicates
            .iter()
            .all(|p| p.field == Field::Always && p.op == Op::Eq && p.value == Operand::Bool(true))
    }
}

#[derive(Debug, Deserialize)]
struct RuleRow {
    donor_country: String,
    rule: String,
    layer: u32,
    center_driven: bool,
    field: String,
    op: String,
    value: String,
}

/// Ordered layer rules; the first rule whose predicates all hold decides.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRuleTable {
    rules: Vec<LayerRule>,
}

impl LayerRuleTable {
    pub fn new(rules: Vec<LayerRule>) -> Result<Self, ConfigError> {
        let table = LayerRuleTable { rules };
        for &country in Country::ALL {
            let total = table
                .rules
                .iter()
                .any(|r| r.donor_country.is_none_or(|c| c == country) && r.is_catch_all());
            if !total {
                return Err(ConfigError::Invalid(format!(
                    "layer rules leave donors from {country} without a catch-all rule"
                )));
            }
        }
        Ok(table)
    }

    /// Reads the rules file. Consecutive rows sharing donor country and rule
    /// name form one conjunctive rule.
    pub fn from_csv(reader: impl Read) -> Result<Self, ConfigError> {
        let mut rules: Vec<LayerRule> = Vec::new();
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        for (i, row) in rdr.deserialize::<RuleRow>().enumerate() {
            let row = row.map_err(|e| ConfigError::Invalid(format!("rule row {}: {e}", i + 1)))?;
            let donor_country = match row.donor_country.as_str() {
                "*" => None,
                c => Some(c.parse::<Country>().map_err(|e| {
                    ConfigError::Invalid(format!("rule row {}: {e}", i + 1))
                })?),
            };
            let predicate = Predicate::new(row.field.parse()?, row.op.parse()?, &row.value)
                .map_err(|e| ConfigError::Invalid(format!("rule row {}: {e}", i + 1)))?;
            match rules.last_mut() {
                Some(last) if last.donor_country == donor_country && last.name == row.rule => {
                    if last.layer != row.layer || last.center_driven != row.center_driven {
                        return Err(ConfigError::Invalid(format!(
                            "rule row {}: rule {} changes layer mid-rule",
                            i + 1,
                            row.rule
                        )));
                    }
                    last.predicates.push(predicate);
                }
                _ => rules.push(LayerRule {
                    donor_country,
                    name: row.rule,
                    layer: row.layer,
                    center_driven: row.center_driven,
                    predicates: vec![predicate],
                }),
            }
        }
        Self::new(rules)
    }

    pub fn rules(&self) -> &[LayerRule] {
        &self.rules
    }

    /// Layer and center-driven flag for one donor/candidate pair.
    pub fn classify(&self, facts: &MatchFacts) -> (u32, bool) {
        for rule in &self.rules {
            if rule.donor_country.is_some_and(|c| c != facts.donor.country) {
                continue;
            }
            if rule.predicates.iter().all(|p| p.holds(facts)) {
                return (rule.layer, rule.center_driven);
            }
        }
        unreachable!("layer rule tables are validated to be total")
    }
}

impl Default for LayerRuleTable {
    fn default() -> Self {
        Self::from_csv(include_str!("../defaults/match_rules.csv").as_bytes())
            .expect("default layer rules are valid")
    }
}

/// Everything a layer predicate may look at.
pub struct MatchFacts<'a> {
    pub donor: &'a DonorRecord,
    pub candidate: &'a CandidateState,
    pub tier: Tier,
    pub obligation: bool,
    pub same_region: bool,
}

impl MatchFacts<'_> {
    fn value(&self, field: Field) -> Operand {
        let reg = &self.candidate.registration;
        match field {
            Field::Always => Operand::Bool(true),
            Field::SameCountry => Operand::Bool(reg.country == self.donor.country),
            Field::SameCenter => Operand::Bool(reg.center == self.donor.center),
            Field::SameRegion => Operand::Bool(self.same_region),
            Field::CandidateCountry => Operand::Text(reg.country.as_str().into()),
            Field::CandidateBloodGroup => Operand::Text(reg.blood_group.as_str().into()),
            Field::BloodGroupIdentical => Operand::Bool(reg.blood_group == self.donor.blood_group),
            Field::DonorPediatric => Operand::Bool(self.donor.is_pediatric()),
            Field::CandidatePediatric => Operand::Bool(reg.is_pediatric()),
            Field::DonorDcd => Operand::Bool(self.donor.dcd),
            Field::Obligation => Operand::Bool(self.obligation),
            Field::Tier => Operand::Text(self.tier.as_str().into()),
            Field::DonorAge => Operand::Num(self.donor.age),
            Field::CandidateWeight => Operand::Num(reg.weight_kg),
        }
    }
}

/// Shared, immutable inputs to match-list construction.
pub struct MatchEnv<'a> {
    pub blood: &'a BloodGroupRules,
    pub rules: &'a LayerRuleTable,
    pub catalog: &'a ExceptionCatalog,
    pub curve: &'a SurvivalCurve90,
    pub centers: &'a CenterDirectory,
}

/// One candidate's place on a match list.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidacy {
    pub candidate: usize,
    pub registration_id: String,
    pub center: String,
    pub country: Country,
    pub code: MatchCode,
    pub center_driven: bool,
    pub lab_meld: f64,
    pub ped_meld: Option<f64>,
    pub se_meld: Option<f64>,
    /// Set when the candidate's party is owed a graft by the donor party.
    pub obligation: Option<ObligationId>,
}

impl Candidacy {
    fn sort_cmp(&self, other: &Self) -> Ordering {
        self.code
            .cmp(&other.code)
            .then_with(|| self.registration_id.cmp(&other.registration_id))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OfferKind {
    Patient,
    Center,
}

/// A row of the match list. Patient offers hold one member; center offers
/// hold every collapsed candidate, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchRecord {
    pub kind: OfferKind,
    pub members: Vec<Candidacy>,
}

impl MatchRecord {
    pub fn code(&self) -> &MatchCode {
        &self.members[0].code
    }

    pub fn best(&self) -> &Candidacy {
        &self.members[0]
    }

    pub fn center(&self) -> &str {
        &self.members[0].center
    }

    pub fn is_center_offer(&self) -> bool {
        self.kind == OfferKind::Center
    }
}

fn party_matches(party: &Party, country: Country, center: &str) -> bool {
    match party {
        Party::Country(c) => *c == country && country != Country::Austria,
        Party::Center(c, id) => *c == country && id == center,
    }
}

/// 1-based position of the candidate's party among the donor party's
/// creditors (oldest first), or [`NO_OBLIGATION`].
pub fn obligation_rank(
    owed: &[OpenObligation],
    candidate_country: Country,
    candidate_center: &str,
) -> (u32, Option<ObligationId>) {
    owed.iter()
        .position(|o| party_matches(&o.creditor, candidate_country, candidate_center))
        .map_or((NO_OBLIGATION, None), |i| {
            (i as u32 + 1, Some(owed[i].obligation_id))
        })
}

/// German regional priority: regional 0, national 1, other 2; constant for
/// donors from elsewhere.
pub fn locality(donor: &DonorRecord, candidate_country: Country, same_region: bool) -> u32 {
    if donor.country != Country::Germany {
        return 0;
    }
    match (candidate_country == Country::Germany, same_region) {
        (true, true) => 0,
        (true, false) => 1,
        _ => 2,
    }
}

/// Evaluates one candidate against a donor. `None` if not on the list.
pub fn evaluate(
    idx: usize,
    state: &CandidateState,
    donor: &DonorRecord,
    owed: &[OpenObligation],
    env: &MatchEnv<'_>,
    now: Timestamp,
) -> Option<Candidacy> {
    if !state.is_active() {
        return None;
    }
    let tier = state.urgency.tier()?;
    let reg = &state.registration;
    if !env.blood.eligible(tier.class(), donor.blood_group, reg.blood_group) {
        return None;
    }
    let elective = tier == Tier::Elective;
    let (rank, obligation) = if elective {
        obligation_rank(owed, reg.country, &reg.center)
    } else {
        (NO_OBLIGATION, None)
    };
    let same_region = env.centers.same_region(&reg.center, &donor.center);
    let facts = MatchFacts {
        donor,
        candidate: state,
        tier,
        obligation: obligation.is_some(),
        same_region,
    };
    let (layer, center_driven) = env.rules.classify(&facts);
    let context = if reg.country == donor.country {
        MeldContext::National
    } else if obligation.is_some() {
        MeldContext::Obligation
    } else {
        MeldContext::International
    };
    let (ped_meld, se_meld) = state.exception_scores(env.catalog, env.curve);
    let match_meld = state.match_meld(context, env.catalog, env.curve);
    let waiting_from = if elective {
        state.anchor.anchor().unwrap_or(reg.listed_at)
    } else {
        state.urgency_since
    };
    let code = MatchCode {
        tier,
        layer,
        obligation_rank: rank,
        match_meld: if elective { match_meld } else { 0.0 },
        locality: if elective {
            locality(donor, reg.country, same_region)
        } else {
            0
        },
        waiting_days: now.whole_days_since(waiting_from).max(0),
        listed_at: reg.listed_at,
    };
    Some(Candidacy {
        candidate: idx,
        registration_id: reg.registration_id.clone(),
        center: reg.center.clone(),
        country: reg.country,
        code,
        center_driven,
        lab_meld: state.lab_meld,
        ped_meld,
        se_meld,
        obligation,
    })
}

/// Sorts candidacies and collapses center-driven ones per center.
pub fn assemble(mut candidacies: Vec<Candidacy>) -> Vec<MatchRecord> {
    candidacies.sort_by(Candidacy::sort_cmp);
    let mut records: Vec<MatchRecord> = Vec::with_capacity(candidacies.len());
    let mut center_slot: Vec<(String, usize)> = Vec::new();
    for c in candidacies {
        if !c.center_driven {
            records.push(MatchRecord {
                kind: OfferKind::Patient,
                members: vec![c],
            });
            continue;
        }
        match center_slot.iter().find(|(center, _)| *center == c.center) {
            Some(&(_, pos)) => records[pos].members.push(c),
            None => {
                center_slot.push((c.center.clone(), records.len()));
                records.push(MatchRecord {
                    kind: OfferKind::Center,
                    members: vec![c],
                });
            }
        }
    }
    records
}

/// Ordered match list for `donor` over the given candidates.
pub fn build_match_list<'s>(
    donor: &DonorRecord,
    candidates: impl IntoIterator<Item = (usize, &'s CandidateState)>,
    ledger: &ObligationLedger,
    env: &MatchEnv<'_>,
    now: Timestamp,
) -> Vec<MatchRecord> {
    let donor_party = Party::for_site(donor.country, &donor.center);
    let owed = ledger.open_obligations(&donor_party, donor.blood_group, now);
    let candidacies = candidates
        .into_iter()
        .filter_map(|(i, s)| evaluate(i, s, donor, &owed, env, now))
        .collect();
    assemble(candidacies)
}
