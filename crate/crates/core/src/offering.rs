//! Graft offering: walks a match list until a center or candidate accepts.
//!
//! Patient-driven offers go through two draws: the center decides once per
//! donor whether it is willing at all, then each of its candidates decides.
//! Center-driven offers take a single draw and go to the center's best
//! eligible candidate. Offers are counted; once the count reaches a sampled
//! maximum the remainder of the list is rescue-filtered and reordered.

use std::collections::{BTreeMap, VecDeque};
use std::io::Read;

use serde::Deserialize;

use crate::covariates::{LinearPredictor, ScoringContext};
use crate::error::ConfigError;
use crate::matchlist::{Candidacy, MatchRecord, OfferKind};
use crate::model::{AgeClass, CandidateState, CenterDirectory, Country, DonorRecord, Tier, TierClass};
use crate::rng::{Purpose, RngStreams};
use crate::time::Timestamp;

/// Candidate rejections a center may contribute to the offer count.
pub const MAX_COUNTED_PER_CENTER: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    /// Center willingness ahead of patient-driven offers.
    Center,
    Patient,
    /// Center-driven offers; falls back to `Center` when not supplied.
    CenterDriven,
}

impl Stage {
    fn parse(s: &str) -> Result<Self, ConfigError> {
        match s.trim() {
            "center" => Ok(Stage::Center),
            "patient" => Ok(Stage::Patient),
            "center_driven" => Ok(Stage::CenterDriven),
            other => Err(ConfigError::Invalid(format!("unknown stage {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Center => "center",
            Stage::Patient => "patient",
            Stage::CenterDriven => "center_driven",
        }
    }
}

pub type Selector = (Stage, TierClass, AgeClass);

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AcceptanceModels {
    models: BTreeMap<Selector, LinearPredictor>,
}

impl AcceptanceModels {
    pub fn new(models: BTreeMap<Selector, LinearPredictor>) -> Result<Self, ConfigError> {
        for stage in [Stage::Center, Stage::Patient] {
            for tier in [TierClass::HuAco, TierClass::Elective] {
                for age in [AgeClass::Adult, AgeClass::Pediatric] {
                    if !models.contains_key(&(stage, tier, age)) {
                        return Err(ConfigError::MissingSelector(format!(
                            "{}/{}/{}",
                            stage.as_str(),
                            tier,
                            age
                        )));
                    }
                }
            }
        }
        for ((stage, tier, age), lp) in &models {
            if *stage != Stage::Patient {
                lp.require_center_level(&format!("{}/{tier}/{age}", stage.as_str()))?;
            }
        }
        Ok(AcceptanceModels { models })
    }

    /// Every selector with the same constant log-odds.
    pub fn constant(log_odds: f64) -> Self {
        let mut models = BTreeMap::new();
        for stage in [Stage::Center, Stage::Patient] {
            for tier in [TierClass::HuAco, TierClass::Elective] {
                for age in [AgeClass::Adult, AgeClass::Pediatric] {
                    models.insert((stage, tier, age), LinearPredictor::constant(log_odds));
                }
            }
        }
        AcceptanceModels { models }
    }

    /// Reads rows of stage, tier, age_class, covariate, kind, level, estimate.
    pub fn from_csv(reader: impl Read) -> Result<Self, ConfigError> {
        #[derive(Deserialize)]
        struct Row {
            stage: String,
            tier: String,
            age_class: String,
            covariate: String,
            kind: String,
            level: String,
            estimate: f64,
        }
        let mut models: BTreeMap<Selector, LinearPredictor> = BTreeMap::new();
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let wrap = |e: String| ConfigError::Invalid(format!("row {}: {e}", i + 1));
            let row = row.map_err(|e| wrap(e.to_string()))?;
            let stage = Stage::parse(&row.stage).map_err(|e| wrap(e.to_string()))?;
            let tier: TierClass = row.tier.parse().map_err(|e| wrap(format!("{e}")))?;
            let age: AgeClass = row.age_class.parse().map_err(|e| wrap(format!("{e}")))?;
            models
                .entry((stage, tier, age))
                .or_default()
                .push_row(&row.covariate, &row.kind, &row.level, row.estimate)
                .map_err(|e| wrap(e.to_string()))?;
        }
        Self::new(models)
    }

    pub fn get(&self, stage: Stage, tier: TierClass, age: AgeClass) -> &LinearPredictor {
        let fallback = if stage == Stage::CenterDriven {
            Stage::Center
        } else {
            stage
        };
        self.models
            .get(&(stage, tier, age))
            .or_else(|| self.models.get(&(fallback, tier, age)))
            .expect("required selectors validated at load")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Selector, &LinearPredictor)> {
        self.models.iter()
    }
}

/// Discrete-time model for the number of counted offers before rescue
/// allocation starts. `hazards[k]` is the baseline probability of
/// triggering right after the (k+1)-th counted offer; a donor predictor
/// scales the hazards on the complementary log-log scale.
#[derive(Debug, Clone, PartialEq)]
pub struct RescueModel {
    pub hazards: Vec<f64>,
    pub predictor: LinearPredictor,
}

impl RescueModel {
    pub fn new(hazards: Vec<f64>, predictor: LinearPredictor) -> Result<Self, ConfigError> {
        if hazards.is_empty() || hazards.iter().any(|h| !(0.0..=1.0).contains(h)) {
            return Err(ConfigError::Invalid(
                "rescue hazards must be probabilities".into(),
            ));
        }
        if *hazards.last().expect("nonempty") != 1.0 {
            return Err(ConfigError::Invalid(
                "last rescue hazard must be 1 so the support is bounded".into(),
            ));
        }
        predictor.require_center_level("rescue")?;
        Ok(RescueModel { hazards, predictor })
    }

    /// Rescue never triggers before `offers` counted offers.
    pub fn fixed(offers: usize) -> Self {
        let mut hazards = vec![0.0; offers.max(1)];
        *hazards.last_mut().expect("nonempty") = 1.0;
        RescueModel {
            hazards,
            predictor: LinearPredictor::default(),
        }
    }

    /// Probability mass over 1..=K given a linear predictor.
    pub fn distribution(&self, lp: f64) -> Vec<f64> {
        let scale = lp.exp();
        let mut surviving = 1.0;
        let mut out = Vec::with_capacity(self.hazards.len());
        for h in &self.hazards {
            let adjusted = 1.0 - (1.0 - h).powf(scale);
            out.push(surviving * adjusted);
            surviving *= 1.0 - adjusted;
        }
        out
    }

    /// Inverse-transform draw of the maximum counted offers.
    pub fn sample_max_offers(&self, lp: f64, u: f64) -> u32 {
        let scale = lp.exp();
        let mut surviving = 1.0;
        for (k, h) in self.hazards.iter().enumerate() {
            surviving *= (1.0 - h).powf(scale);
            if surviving < u {
                return k as u32 + 1;
            }
        }
        self.hazards.len() as u32
    }

    pub fn hazards_from_csv(reader: impl Read) -> Result<Vec<f64>, ConfigError> {
        #[derive(Deserialize)]
        struct Row {
            offers: usize,
            hazard: f64,
        }
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut out = Vec::new();
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| ConfigError::Invalid(format!("row {}: {e}", i + 1)))?;
            if row.offers != i + 1 {
                return Err(ConfigError::Invalid(format!(
                    "row {}: offers must run 1, 2, 3, ...",
                    i + 1
                )));
            }
            out.push(row.hazard);
        }
        Ok(out)
    }
}

/// Running count of offers towards the rescue trigger.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OfferCounter {
    pub total: u32,
    counted_per_center: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OfferEvent<'a> {
    CenterRejection { center: &'a str },
    CandidateRejection { center: &'a str, profile_compatible: bool },
    ProfileSkip,
}

impl OfferCounter {
    pub fn counted_for(&self, center: &str) -> u32 {
        self.counted_per_center.get(center).copied().unwrap_or(0)
    }
}

/// Updates the counter; returns whether the event counted.
pub fn count_offer(counter: &mut OfferCounter, event: OfferEvent<'_>) -> bool {
    match event {
        OfferEvent::CenterRejection { .. } => {
            counter.total += 1;
            true
        }
        OfferEvent::CandidateRejection {
            center,
            profile_compatible,
        } => {
            if !profile_compatible || counter.counted_for(center) >= MAX_COUNTED_PER_CENTER {
                return false;
            }
            counter.total += 1;
            *counter.counted_per_center.entry(center.to_string()).or_default() += 1;
            true
        }
        OfferEvent::ProfileSkip => false,
    }
}

/// Reorders and filters the rest of a match list once rescue starts.
/// Candidates refusing rescue offers are dropped. German donors go to
/// regional candidates first, Belgian donors to the local center first;
/// order is otherwise kept.
pub fn enter_rescue(
    remainder: Vec<MatchRecord>,
    donor: &DonorRecord,
    states: &[CandidateState],
    centers: &CenterDirectory,
) -> Vec<MatchRecord> {
    let kept: Vec<MatchRecord> = remainder
        .into_iter()
        .filter_map(|mut r| {
            r.members
                .retain(|m| states[m.candidate].profile.accept_rescue_offer);
            (!r.members.is_empty()).then_some(r)
        })
        .collect();
    let priority = |r: &MatchRecord| -> bool {
        match donor.country {
            Country::Germany => {
                r.best().country == Country::Germany
                    && centers.same_region(r.center(), &donor.center)
            }
            Country::Belgium => r.center() == donor.center,
            _ => false,
        }
    };
    let (mut first, rest): (Vec<_>, Vec<_>) = kept.into_iter().partition(|r| priority(r));
    first.extend(rest);
    first
}

/// Split decision for an accepted whole graft. The acceptor's profile
/// overrides the model.
pub fn split_decision(p: f64, acceptor_accepts_split: bool, u: f64) -> bool {
    acceptor_accepts_split && u < p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrailAction {
    ProfileSkip,
    CenterDeclined,
    CenterAlreadyDeclined,
    PatientDeclined,
    CenterOfferDeclined,
    Accepted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrailEntry {
    pub center: String,
    pub registration_id: Option<String>,
    pub action: TrailAction,
    pub counted: bool,
    pub rescue: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Acceptance {
    pub candidacy: Candidacy,
    pub center_offer: bool,
    pub probability: f64,
    pub rescue: bool,
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfferOutcome {
    pub acceptance: Option<Acceptance>,
    pub trail: Vec<TrailEntry>,
    pub counted_offers: u32,
    pub max_offers: u32,
    pub rescue_triggered: bool,
}

/// Inputs shared across one donor's offers.
pub struct OfferSetup<'a> {
    pub models: &'a AcceptanceModels,
    pub rescue: &'a RescueModel,
    pub centers: &'a CenterDirectory,
    pub streams: &'a RngStreams,
    pub force_placement: bool,
    pub now: Timestamp,
    /// 1 for the whole graft, 2 for the remainder of a split.
    pub segment: u8,
}

fn age_class(state: &CandidateState) -> AgeClass {
    if state.registration.is_pediatric() {
        AgeClass::Pediatric
    } else {
        AgeClass::Adult
    }
}

fn scoring<'a>(
    donor: &'a DonorRecord,
    state: Option<&'a CandidateState>,
    candidacy: &'a Candidacy,
    centers: &CenterDirectory,
    rescue: bool,
    now: Timestamp,
) -> ScoringContext<'a> {
    let tier = candidacy.code.tier;
    ScoringContext {
        donor,
        candidate: state,
        center_country: candidacy.country,
        center: &candidacy.center,
        tier: Some(tier),
        match_meld: Some(if tier == Tier::Elective {
            candidacy.code.match_meld
        } else {
            candidacy.lab_meld
        }),
        same_region: centers.same_region(&candidacy.center, &donor.center),
        rescue,
        obligation: candidacy.obligation.is_some(),
        split: false,
        at: now,
    }
}

/// Whether the candidate would be offered at all under their profile.
pub fn profile_compatible(state: &CandidateState, tier: Tier, donor: &DonorRecord, segment: u8) -> bool {
    if segment > 1 && !state.profile.accept_split {
        return false;
    }
    tier != Tier::Elective || state.profile.admits(donor)
}

/// Offers the graft down the list. See the module docs for the procedure.
pub fn offer_graft(
    records: &[MatchRecord],
    donor: &DonorRecord,
    states: &[CandidateState],
    setup: &OfferSetup<'_>,
) -> OfferOutcome {
    let key = if setup.segment > 1 {
        format!("{}#{}", donor.donor_id, setup.segment)
    } else {
        donor.donor_id.clone()
    };
    let willingness = setup.streams.for_donor(Purpose::CenterWillingness, &key);
    let patient = setup.streams.for_donor(Purpose::PatientAcceptance, &key);
    let center_offer = setup.streams.for_donor(Purpose::CenterOffer, &key);

    let donor_only = ScoringContext {
        donor,
        candidate: None,
        center_country: donor.country,
        center: &donor.center,
        tier: None,
        match_meld: None,
        same_region: true,
        rescue: false,
        obligation: false,
        split: false,
        at: setup.now,
    };
    let lp = setup.rescue.predictor.eval(&donor_only);
    let u_rescue = setup.streams.uniform(Purpose::Rescue, &key, "max-offers");
    let max_offers = setup.rescue.sample_max_offers(lp, u_rescue);

    let mut counter = OfferCounter::default();
    let mut center_willing: BTreeMap<String, bool> = BTreeMap::new();
    let mut trail = Vec::new();
    let mut queue: VecDeque<MatchRecord> = records.iter().cloned().collect();
    let mut rescue = false;

    while let Some(record) = queue.pop_front() {
        if !rescue && counter.total >= max_offers {
            rescue = true;
            let mut rest = vec![record];
            rest.extend(queue.drain(..));
            queue = enter_rescue(rest, donor, states, setup.centers).into();
            continue;
        }
        match record.kind {
            OfferKind::Patient => {
                let c = record.best();
                let state = &states[c.candidate];
                let entry = |action, counted| TrailEntry {
                    center: c.center.clone(),
                    registration_id: Some(c.registration_id.clone()),
                    action,
                    counted,
                    rescue,
                };
                if !profile_compatible(state, c.code.tier, donor, setup.segment) {
                    count_offer(&mut counter, OfferEvent::ProfileSkip);
                    trail.push(entry(TrailAction::ProfileSkip, false));
                    continue;
                }
                let tier_class = c.code.tier.class();
                let ages = age_class(state);
                let ctx = scoring(donor, Some(state), c, setup.centers, rescue, setup.now);
                let willing = match center_willing.get(&c.center) {
                    Some(&w) => {
                        if !w {
                            trail.push(entry(TrailAction::CenterAlreadyDeclined, false));
                            continue;
                        }
                        true
                    }
                    None => {
                        let mut center_ctx = ctx;
                        center_ctx.candidate = None;
                        let p = setup
                            .models
                            .get(Stage::Center, tier_class, ages)
                            .probability(&center_ctx);
                        let w = willingness.uniform(&c.center) < p;
                        center_willing.insert(c.center.clone(), w);
                        w
                    }
                };
                if !willing {
                    let counted = count_offer(&mut counter, OfferEvent::CenterRejection { center: &c.center });
                    trail.push(entry(TrailAction::CenterDeclined, counted));
                    continue;
                }
                let p = setup.models.get(Stage::Patient, tier_class, ages).probability(&ctx);
                if patient.uniform(&c.registration_id) < p {
                    trail.push(entry(TrailAction::Accepted, false));
                    return OfferOutcome {
                        acceptance: Some(Acceptance {
                            candidacy: c.clone(),
                            center_offer: false,
                            probability: p,
                            rescue,
                            forced: false,
                        }),
                        trail,
                        counted_offers: counter.total,
                        max_offers,
                        rescue_triggered: rescue,
                    };
                }
                let counted = count_offer(
                    &mut counter,
                    OfferEvent::CandidateRejection {
                        center: &c.center,
                        profile_compatible: true,
                    },
                );
                trail.push(entry(TrailAction::PatientDeclined, counted));
            }
            OfferKind::Center => {
                let eligible: Vec<&Candidacy> = record
                    .members
                    .iter()
                    .filter(|m| profile_compatible(&states[m.candidate], m.code.tier, donor, setup.segment))
                    .collect();
                let center = record.center().to_string();
                let Some(best) = eligible.first() else {
                    trail.push(TrailEntry {
                        center,
                        registration_id: None,
                        action: TrailAction::ProfileSkip,
                        counted: false,
                        rescue,
                    });
                    continue;
                };
                let state = &states[best.candidate];
                let mut ctx = scoring(donor, Some(state), best, setup.centers, rescue, setup.now);
                ctx.candidate = None;
                let p = setup
                    .models
                    .get(Stage::CenterDriven, best.code.tier.class(), age_class(state))
                    .probability(&ctx);
                if center_offer.uniform(&center) < p {
                    trail.push(TrailEntry {
                        center,
                        registration_id: Some(best.registration_id.clone()),
                        action: TrailAction::Accepted,
                        counted: false,
                        rescue,
                    });
                    return OfferOutcome {
                        acceptance: Some(Acceptance {
                            candidacy: (*best).clone(),
                            center_offer: true,
                            probability: p,
                            rescue,
                            forced: false,
                        }),
                        trail,
                        counted_offers: counter.total,
                        max_offers,
                        rescue_triggered: rescue,
                    };
                }
                let counted = count_offer(&mut counter, OfferEvent::CenterRejection { center: &center });
                trail.push(TrailEntry {
                    center,
                    registration_id: None,
                    action: TrailAction::CenterOfferDeclined,
                    counted,
                    rescue,
                });
            }
        }
    }

    let acceptance = if setup.force_placement {
        most_likely_acceptor(records, donor, states, setup)
    } else {
        None
    };
    OfferOutcome {
        acceptance,
        trail,
        counted_offers: counter.total,
        max_offers,
        rescue_triggered: rescue,
    }
}

/// The profile-compatible candidate with the highest acceptance
/// probability; earlier list position wins ties.
fn most_likely_acceptor(
    records: &[MatchRecord],
    donor: &DonorRecord,
    states: &[CandidateState],
    setup: &OfferSetup<'_>,
) -> Option<Acceptance> {
    let mut best: Option<Acceptance> = None;
    for record in records {
        for m in &record.members {
            let state = &states[m.candidate];
            if !profile_compatible(state, m.code.tier, donor, setup.segment) {
                continue;
            }
            let tier_class = m.code.tier.class();
            let ages = age_class(state);
            let ctx = scoring(donor, Some(state), m, setup.centers, false, setup.now);
            let mut center_ctx = ctx;
            center_ctx.candidate = None;
            let p = if record.is_center_offer() {
                setup.models.get(Stage::CenterDriven, tier_class, ages).probability(&center_ctx)
            } else {
                setup.models.get(Stage::Center, tier_class, ages).probability(&center_ctx)
                    * setup.models.get(Stage::Patient, tier_class, ages).probability(&ctx)
            };
            if best.as_ref().is_none_or(|b| p > b.probability) {
                best = Some(Acceptance {
                    candidacy: m.clone(),
                    center_offer: record.is_center_offer(),
                    probability: p,
                    rescue: false,
                    forced: true,
                });
            }
            if record.is_center_offer() {
                // The center places the graft with its best member.
                break;
            }
        }
    }
    best
}
