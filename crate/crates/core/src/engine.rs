//! The discrete-event loop: donor arrivals and candidate status updates
//! drawn from a future event set, dispatched to the allocation modules.

use std::collections::BTreeSet;
use std::path::Path;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::covariates::ScoringContext;
use crate::error::SimError;
use crate::exceptions::{apply_exception_status, autocontinue_recertification, ExceptionKind};
use crate::ingest::{drop_relistings, fault, ledger_rows_to_seed, InitReport, InputBundle, Window};
use crate::matchlist::{build_match_list, MatchEnv, MatchRecord};
use crate::model::{
    CandidateRegistration, CandidateState, Country, Disposition, DonorRecord, ExceptionAction,
    MeldContext, StatusPayload, StatusUpdate, Tier,
};
use crate::obligations::{ObligationLedger, Party};
use crate::offering::{offer_graft, split_decision, Acceptance, OfferOutcome, OfferSetup, TrailAction};
use crate::params::ModelParameterSet;
use crate::posttx::build_synthetic_reregistration;
use crate::rng::{Purpose, RngStreams};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    /// Sorts first at equal times.
    Donor,
    Patient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Event {
    pub at: Timestamp,
    pub kind: EventKind,
    pub seq: u64,
    /// Donor index or candidate index.
    pub subject: usize,
}

#[derive(Debug, Clone, Default)]
pub struct FutureEventSet {
    events: BTreeSet<Event>,
    next_seq: u64,
}

impl FutureEventSet {
    pub fn push(&mut self, at: Timestamp, kind: EventKind, subject: usize) -> Event {
        let e = Event {
            at,
            kind,
            seq: self.next_seq,
            subject,
        };
        self.next_seq += 1;
        self.events.insert(e);
        e
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.events.pop_first()
    }

    pub fn remove(&mut self, e: &Event) -> bool {
        self.events.remove(e)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Event> {
        self.events.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Place an all-declined graft with its most likely acceptor instead of
    /// discarding it.
    pub force_placement: bool,
    /// Re-offer the remainder of a split graft down the same list.
    pub split_remainder: bool,
    pub post_transplant: bool,
    /// Synthesize exception upgrades the streams do not mention.
    pub autocontinue_exceptions: bool,
    /// Keep every offer in the output.
    pub record_offers: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            force_placement: false,
            split_remainder: true,
            post_transplant: true,
            autocontinue_exceptions: true,
            record_offers: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransplantRow {
    pub donor_id: String,
    pub at: Timestamp,
    pub registration_id: String,
    pub patient_id: String,
    pub recipient_country: Country,
    pub recipient_center: String,
    pub donor_country: Country,
    pub donor_center: String,
    pub donor_blood_group: String,
    pub recipient_blood_group: String,
    pub tier: Tier,
    pub match_meld: f64,
    pub lab_meld: f64,
    pub ped_meld: Option<f64>,
    pub se_meld: Option<f64>,
    pub exception_kind: String,
    pub exception_id: String,
    pub mechanism: String,
    pub rescue: bool,
    pub rank: usize,
    pub offers_counted: u32,
    pub max_offers: u32,
    pub graft: String,
    pub remainder: String,
    pub obligation: String,
    pub geography: String,
    pub sex: String,
    pub pediatric: bool,
    pub recipient_age: f64,
    pub synthetic_recipient: bool,
    pub failure_days: Option<f64>,
    pub posttx_outcome: String,
    pub relisted_as: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscardRow {
    pub donor_id: String,
    pub at: Timestamp,
    pub country: Country,
    pub center: String,
    pub blood_group: String,
    pub age: f64,
    pub dcd: bool,
    pub list_length: usize,
    pub offers_counted: u32,
    pub max_offers: u32,
    pub rescue: bool,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub registration_id: String,
    pub patient_id: String,
    pub country: Country,
    pub center: String,
    pub blood_group: String,
    pub sex: String,
    pub pediatric: bool,
    pub synthetic: bool,
    pub listed_at: Timestamp,
    pub disposition: String,
    pub disposition_at: Option<Timestamp>,
    pub urgency: String,
    pub lab_meld: f64,
    pub match_meld: f64,
    pub exception_kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfferRow {
    pub donor_id: String,
    pub at: Timestamp,
    pub segment: u8,
    pub center: String,
    pub registration_id: String,
    pub action: String,
    pub counted: bool,
    pub rescue: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObligationRow {
    pub id: u64,
    pub debtor: Party,
    pub creditor: Party,
    pub blood_group: String,
    pub created_at: Timestamp,
    pub lineage: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimulationOutput {
    pub transplants: Vec<TransplantRow>,
    pub discards: Vec<DiscardRow>,
    pub candidates: Vec<CandidateRow>,
    pub obligations: Vec<ObligationRow>,
    pub offers: Vec<OfferRow>,
    pub report: InitReport,
    pub donors_processed: usize,
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), SimError> {
    let io_err = |e: csv::Error| SimError::Fault(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new()
        .has_headers(!rows.is_empty())
        .from_path(path)
        .map_err(io_err)?;
    if rows.is_empty() {
        w.write_record(header).map_err(io_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(io_err)?;
    }
    w.flush().map_err(|e| SimError::Fault(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub const TRANSPLANT_COLUMNS: &[&str] = &[
    "donor_id", "at", "registration_id", "patient_id", "recipient_country", "recipient_center",
    "donor_country", "donor_center", "donor_blood_group", "recipient_blood_group", "tier",
    "match_meld", "lab_meld", "ped_meld", "se_meld", "exception_kind", "exception_id", "mechanism",
    "rescue", "rank", "offers_counted", "max_offers", "graft", "remainder", "obligation",
    "geography", "sex", "pediatric", "recipient_age", "synthetic_recipient", "failure_days",
    "posttx_outcome", "relisted_as",
];
pub const DISCARD_COLUMNS: &[&str] = &[
    "donor_id", "at", "country", "center", "blood_group", "age", "dcd", "list_length",
    "offers_counted", "max_offers", "rescue", "reason",
];
pub const CANDIDATE_COLUMNS: &[&str] = &[
    "registration_id", "patient_id", "country", "center", "blood_group", "sex", "pediatric",
    "synthetic", "listed_at", "disposition", "disposition_at", "urgency", "lab_meld", "match_meld",
    "exception_kind",
];
pub const OFFER_COLUMNS: &[&str] = &[
    "donor_id", "at", "segment", "center", "registration_id", "action", "counted", "rescue",
];
pub const OBLIGATION_COLUMNS: &[&str] = &["id", "debtor", "creditor", "blood_group", "created_at", "lineage"];

impl SimulationOutput {
    /// Writes transplants, discards, candidates and obligations, plus
    /// offers when recorded.
    pub fn write_dir(&self, dir: &Path) -> Result<(), SimError> {
        std::fs::create_dir_all(dir).map_err(|e| SimError::Fault(format!("{}: {e}", dir.display())))?;
        write_rows(&dir.join("transplants.csv"), &self.transplants, TRANSPLANT_COLUMNS)?;
        write_rows(&dir.join("discards.csv"), &self.discards, DISCARD_COLUMNS)?;
        write_rows(&dir.join("candidates.csv"), &self.candidates, CANDIDATE_COLUMNS)?;
        write_rows(&dir.join("obligations.csv"), &self.obligations, OBLIGATION_COLUMNS)?;
        if !self.offers.is_empty() {
            write_rows(&dir.join("offers.csv"), &self.offers, OFFER_COLUMNS)?;
        }
        Ok(())
    }
}

/// One simulation run's mutable state.
pub struct Simulation<'p> {
    params: &'p ModelParameterSet,
    config: SimulationConfig,
    window: Window,
    streams: RngStreams,
    pub candidates: Vec<CandidateState>,
    /// Each candidate's status stream, including synthesized updates.
    pub statuses: Vec<Vec<StatusUpdate>>,
    pending: Vec<Option<Event>>,
    last_applied: Vec<Option<Timestamp>>,
    pub donors: Vec<DonorRecord>,
    pub ledger: ObligationLedger,
    pub fes: FutureEventSet,
    now: Timestamp,
    output: SimulationOutput,
}

impl<'p> Simulation<'p> {
    /// Builds the initial state: statuses up to the window start are
    /// applied, re-listings of included patients dropped, and one event
    /// scheduled per donor and per registration with a future status.
    pub fn initialize(
        bundle: &InputBundle,
        params: &'p ModelParameterSet,
        config: SimulationConfig,
        seed: u64,
    ) -> Result<Self, SimError> {
        let mut ledger = ObligationLedger::new();
        ledger.seed(ledger_rows_to_seed(&bundle.initial_ledger))?;
        let mut sim = Simulation {
            params,
            config,
            window: bundle.window,
            streams: RngStreams::new(seed),
            candidates: Vec::new(),
            statuses: Vec::new(),
            pending: Vec::new(),
            last_applied: Vec::new(),
            donors: bundle.donors.clone(),
            ledger,
            fes: FutureEventSet::default(),
            now: bundle.window.start,
            output: SimulationOutput::default(),
        };
        let (kept, dropped) = drop_relistings(&bundle.registrations);
        sim.output.report.dropped_relistings = dropped;
        for reg in kept {
            let stream = bundle.statuses[&reg.registration_id].clone();
            let idx = sim.add_candidate(reg.clone(), stream, false);
            sim.preprocess(idx)?;
            if !sim.candidates[idx].is_waiting() {
                sim.output.report.exited_during_preprocessing += 1;
            }
        }
        for (i, d) in sim.donors.iter().enumerate() {
            sim.fes.push(d.reported_at, EventKind::Donor, i);
        }
        sim.output.report.scheduled_donor_events = sim.donors.len();
        sim.output.report.scheduled_patient_events = sim.pending.iter().filter(|p| p.is_some()).count();
        Ok(sim)
    }

    fn add_candidate(&mut self, reg: CandidateRegistration, stream: Vec<StatusUpdate>, synthetic: bool) -> usize {
        let mut state = CandidateState::new(reg, &self.params.meld);
        state.synthetic = synthetic;
        self.candidates.push(state);
        self.statuses.push(stream);
        self.pending.push(None);
        self.last_applied.push(None);
        self.candidates.len() - 1
    }

    fn preprocess(&mut self, idx: usize) -> Result<(), SimError> {
        let start = self.window.start;
        while self.candidates[idx].is_waiting() {
            let next = self.candidates[idx].next_status;
            match self.statuses[idx].get(next) {
                Some(s) if s.at <= start => self.apply_next(idx)?,
                _ => break,
            }
        }
        self.schedule_next(idx);
        Ok(())
    }

    fn schedule_next(&mut self, idx: usize) {
        if let Some(e) = self.pending[idx].take() {
            self.fes.remove(&e);
        }
        if !self.candidates[idx].is_waiting() {
            return;
        }
        let next = self.candidates[idx].next_status;
        if let Some(s) = self.statuses[idx].get(next) {
            if s.at <= self.window.end {
                let at = s.at.max(self.now);
                self.pending[idx] = Some(self.fes.push(at, EventKind::Patient, idx));
            }
        }
    }

    fn apply_next(&mut self, idx: usize) -> Result<(), SimError> {
        let next = self.candidates[idx].next_status;
        let update = self.statuses[idx][next].clone();
        self.candidates[idx].next_status += 1;
        self.apply_status(idx, &update)
    }

    /// Applies one status update to a waiting candidate.
    pub fn apply_status(&mut self, idx: usize, update: &StatusUpdate) -> Result<(), SimError> {
        let params = self.params;
        if !self.candidates[idx].is_waiting() {
            return Err(fault(format!(
                "status for {} after it left the waiting list",
                self.candidates[idx].id()
            )));
        }
        if self.last_applied[idx].is_some_and(|t| update.at < t) {
            return Err(fault(format!("status for {} out of time order", self.candidates[idx].id())));
        }
        self.last_applied[idx] = Some(update.at);
        let at = update.at;
        let state = &mut self.candidates[idx];
        match &update.payload {
            StatusPayload::Biomarker(b) => {
                state.set_biomarkers(*b, &params.meld)?;
            }
            StatusPayload::Exception {
                exception_id,
                action,
            } => {
                let def = params
                    .exceptions
                    .get(exception_id)
                    .ok_or_else(|| fault(format!("unknown exception {exception_id}")))?;
                let age = state.registration.age_at(at);
                apply_exception_status(&mut state.exceptions, def, *action, age, at);
                if self.config.autocontinue_exceptions && *action != ExceptionAction::Expire {
                    self.autocontinue(idx, exception_id)?;
                }
            }
            StatusPayload::Urgency(u) => state.set_urgency(*u, at),
            StatusPayload::Profile(p) => state.profile = p.clone(),
            StatusPayload::Exit(reason) => state.disposition = Disposition::Exited(*reason, at),
        }
        let state = &mut self.candidates[idx];
        if state.is_waiting() {
            state.refresh_anchor(at, &params.exceptions, &params.curve);
        }
        Ok(())
    }

    /// Inserts upgrades for an exception the rest of the stream is silent on.
    fn autocontinue(&mut self, idx: usize, exception_id: &str) -> Result<(), SimError> {
        let def = &self.params.exceptions.get(exception_id).expect("checked by caller");
        let state = &self.candidates[idx];
        let Some(active) = state.exceptions.iter().find(|a| a.exception_id == exception_id) else {
            return Ok(());
        };
        let stream = &self.statuses[idx];
        let future = &stream[state.next_status..];
        let until = future
            .iter()
            .find(|s| s.is_exit())
            .map_or(self.window.end, |s| s.at.min(self.window.end));
        let reg = &state.registration;
        let upgrades = autocontinue_recertification(def, active, future, until, |t| reg.age_at(t));
        if upgrades.is_empty() {
            return Ok(());
        }
        let id = reg.registration_id.clone();
        let start = state.next_status;
        let stream = &mut self.statuses[idx];
        for (at, _) in upgrades {
            let pos = start + stream[start..].partition_point(|s| s.at <= at);
            stream.insert(
                pos,
                StatusUpdate {
                    registration_id: id.clone(),
                    at,
                    payload: StatusPayload::Exception {
                        exception_id: exception_id.to_string(),
                        action: ExceptionAction::Upgrade,
                    },
                },
            );
        }
        Ok(())
    }

    /// Runs the event loop to the end of the window.
    pub fn run(mut self) -> Result<SimulationOutput, SimError> {
        while let Some(event) = self.fes.pop() {
            if event.at > self.window.end {
                break;
            }
            self.now = event.at;
            match event.kind {
                EventKind::Patient => self.handle_patient(event)?,
                EventKind::Donor => self.handle_donor(event.subject)?,
            }
        }
        self.finish()
    }

    fn handle_patient(&mut self, event: Event) -> Result<(), SimError> {
        let idx = event.subject;
        if self.pending[idx] != Some(event) {
            return Err(fault(format!("stale event for {}", self.candidates[idx].id())));
        }
        self.pending[idx] = None;
        self.apply_next(idx)?;
        self.schedule_next(idx);
        Ok(())
    }

    fn match_env(&self) -> MatchEnv<'p> {
        MatchEnv {
            blood: &self.params.blood,
            rules: &self.params.match_rules,
            catalog: &self.params.exceptions,
            curve: &self.params.curve,
            centers: &self.params.centers,
        }
    }

    fn handle_donor(&mut self, d: usize) -> Result<(), SimError> {
        self.output.donors_processed += 1;
        let now = self.now;
        let donor = self.donors[d].clone();
        let env = self.match_env();
        let records = build_match_list(
            &donor,
            self.candidates
                .iter()
                .enumerate()
                .filter(|(_, s)| s.registration.listed_at <= now),
            &self.ledger,
            &env,
            now,
        );
        let setup = OfferSetup {
            models: &self.params.acceptance,
            rescue: &self.params.rescue,
            centers: &self.params.centers,
            streams: &self.streams,
            force_placement: self.config.force_placement,
            now,
            segment: 1,
        };
        let outcome = offer_graft(&records, &donor, &self.candidates, &setup);
        self.record_offers(&donor, &outcome, 1);
        let Some(acc) = outcome.acceptance.clone() else {
            self.output.discards.push(DiscardRow {
                donor_id: donor.donor_id.clone(),
                at: now,
                country: donor.country,
                center: donor.center.clone(),
                blood_group: donor.blood_group.to_string(),
                age: donor.age,
                dcd: donor.dcd,
                list_length: records.len(),
                offers_counted: outcome.counted_offers,
                max_offers: outcome.max_offers,
                rescue: outcome.rescue_triggered,
                reason: if records.is_empty() { "no_candidates" } else { "declined" }.into(),
            });
            return Ok(());
        };

        let split = self.decide_split(&donor, &acc);
        let first = self.transplant(&donor, &acc, &records, &outcome, if split { "split" } else { "whole" })?;
        if split && self.config.split_remainder {
            // Rebuilt so obligations redeemed by the first graft no longer rank.
            let env = self.match_env();
            let remaining = build_match_list(
                &donor,
                self.candidates
                    .iter()
                    .enumerate()
                    .filter(|(i, s)| s.registration.listed_at <= now && *i != acc.candidacy.candidate),
                &self.ledger,
                &env,
                now,
            );
            let setup = OfferSetup {
                models: &self.params.acceptance,
                rescue: &self.params.rescue,
                centers: &self.params.centers,
                streams: &self.streams,
                force_placement: false,
                now,
                segment: 2,
            };
            let second = offer_graft(&remaining, &donor, &self.candidates, &setup);
            self.record_offers(&donor, &second, 2);
            let placed = match &second.acceptance {
                Some(acc2) => {
                    self.transplant(&donor, acc2, &remaining, &second, "remainder")?;
                    "placed"
                }
                None => "unused",
            };
            self.output.transplants[first].remainder = placed.into();
        }
        Ok(())
    }

    fn decide_split(&self, donor: &DonorRecord, acc: &Acceptance) -> bool {
        let state = &self.candidates[acc.candidacy.candidate];
        let ctx = ScoringContext {
            donor,
            candidate: Some(state),
            center_country: acc.candidacy.country,
            center: &acc.candidacy.center,
            tier: Some(acc.candidacy.code.tier),
            match_meld: Some(acc.candidacy.code.match_meld),
            same_region: self.params.centers.same_region(&acc.candidacy.center, &donor.center),
            rescue: acc.rescue,
            obligation: acc.candidacy.obligation.is_some(),
            split: true,
            at: self.now,
        };
        let p = self.params.split.probability(&ctx);
        let u = self.streams.uniform(Purpose::Split, &donor.donor_id, "split");
        split_decision(p, state.profile.accept_split, u)
    }

    fn record_offers(&mut self, donor: &DonorRecord, outcome: &OfferOutcome, segment: u8) {
        if !self.config.record_offers {
            return;
        }
        for t in &outcome.trail {
            let action = match t.action {
                TrailAction::ProfileSkip => "profile_skip",
                TrailAction::CenterDeclined => "center_declined",
                TrailAction::CenterAlreadyDeclined => "center_already_declined",
                TrailAction::PatientDeclined => "patient_declined",
                TrailAction::CenterOfferDeclined => "center_offer_declined",
                TrailAction::Accepted => "accepted",
            };
            self.output.offers.push(OfferRow {
                donor_id: donor.donor_id.clone(),
                at: self.now,
                segment,
                center: t.center.clone(),
                registration_id: t.registration_id.clone().unwrap_or_default(),
                action: action.into(),
                counted: t.counted,
                rescue: t.rescue,
            });
        }
        if let Some(acc) = outcome.acceptance.as_ref().filter(|a| a.forced) {
            self.output.offers.push(OfferRow {
                donor_id: donor.donor_id.clone(),
                at: self.now,
                segment,
                center: acc.candidacy.center.clone(),
                registration_id: acc.candidacy.registration_id.clone(),
                action: "forced".into(),
                counted: false,
                rescue: acc.rescue,
            });
        }
    }

    /// Records a transplant; returns the index of its output row.
    fn transplant(
        &mut self,
        donor: &DonorRecord,
        acc: &Acceptance,
        records: &[MatchRecord],
        outcome: &OfferOutcome,
        graft: &str,
    ) -> Result<usize, SimError> {
        let now = self.now;
        let idx = acc.candidacy.candidate;
        if !self.candidates[idx].is_active() {
            return Err(fault(format!(
                "graft {} accepted for inactive candidate {}",
                donor.donor_id,
                self.candidates[idx].id()
            )));
        }
        let tier = acc.candidacy.code.tier;
        let reg = self.candidates[idx].registration.clone();
        let donor_party = Party::for_site(donor.country, &donor.center);
        let recipient_party = Party::for_site(reg.country, &reg.center);
        let delta = self.ledger.record_transplant(
            &donor_party,
            &recipient_party,
            donor.blood_group,
            tier,
            acc.candidacy.obligation,
            now,
        )?;
        let obligation = if acc.candidacy.obligation.is_some() {
            "redeemed"
        } else if !delta.is_empty() {
            "created"
        } else {
            "none"
        };

        let state = &self.candidates[idx];
        let (kind, exception_id) = dominant_exception(state, self.params);
        let national = state.match_meld(MeldContext::National, &self.params.exceptions, &self.params.curve);
        let rank = records
            .iter()
            .position(|r| r.members.iter().any(|m| m.candidate == idx))
            .map_or(0, |p| p + 1);
        let geography = if reg.center == donor.center {
            "local"
        } else if reg.country != donor.country {
            "international"
        } else if self.params.centers.same_region(&reg.center, &donor.center) {
            "regional"
        } else {
            "national"
        };
        let mechanism = if acc.forced {
            "forced"
        } else if acc.center_offer {
            "center"
        } else {
            "patient"
        };
        let mut row = TransplantRow {
            donor_id: donor.donor_id.clone(),
            at: now,
            registration_id: reg.registration_id.clone(),
            patient_id: reg.patient_id.clone(),
            recipient_country: reg.country,
            recipient_center: reg.center.clone(),
            donor_country: donor.country,
            donor_center: donor.center.clone(),
            donor_blood_group: donor.blood_group.to_string(),
            recipient_blood_group: reg.blood_group.to_string(),
            tier,
            match_meld: if tier == Tier::Elective {
                acc.candidacy.code.match_meld
            } else {
                national
            },
            lab_meld: state.lab_meld,
            ped_meld: acc.candidacy.ped_meld,
            se_meld: acc.candidacy.se_meld,
            exception_kind: kind,
            exception_id,
            mechanism: mechanism.into(),
            rescue: acc.rescue,
            rank,
            offers_counted: outcome.counted_offers,
            max_offers: outcome.max_offers,
            graft: graft.into(),
            remainder: String::new(),
            obligation: obligation.into(),
            geography: geography.into(),
            sex: reg.sex.to_string(),
            pediatric: reg.is_pediatric(),
            recipient_age: reg.age_at(now),
            synthetic_recipient: state.synthetic,
            failure_days: None,
            posttx_outcome: "not_simulated".into(),
            relisted_as: String::new(),
        };

        self.candidates[idx].disposition = Disposition::Transplanted(now);
        if let Some(e) = self.pending[idx].take() {
            self.fes.remove(&e);
        }
        if self.config.post_transplant {
            self.post_transplant(idx, donor, tier, &mut row)?;
        }
        self.output.transplants.push(row);
        Ok(self.output.transplants.len() - 1)
    }

    fn post_transplant(
        &mut self,
        idx: usize,
        donor: &DonorRecord,
        tier: Tier,
        row: &mut TransplantRow,
    ) -> Result<(), SimError> {
        let now = self.now;
        let state = &self.candidates[idx];
        let reg_id = state.registration.registration_id.clone();
        let ctx = ScoringContext {
            donor,
            candidate: Some(state),
            center_country: state.registration.country,
            center: &state.registration.center,
            tier: Some(tier),
            match_meld: Some(row.match_meld),
            same_region: self.params.centers.same_region(&state.registration.center, &donor.center),
            rescue: row.rescue,
            obligation: row.obligation == "redeemed",
            split: row.graft != "whole",
            at: now,
        };
        let stream = self.streams.for_donor(Purpose::PostTransplant, &donor.donor_id);
        let failure = self
            .params
            .weibull
            .sample(tier.class(), &ctx, stream.uniform(&format!("failure:{reg_id}")))?;
        row.failure_days = Some(failure);
        let Some(relist) = self
            .params
            .relisting
            .sample_relist_time(failure, stream.uniform(&format!("relist:{reg_id}")))
        else {
            row.posttx_outcome = "death_without_relisting".into();
            return Ok(());
        };
        if now.plus_days(relist) > self.window.end {
            row.posttx_outcome = "relist_after_window".into();
            return Ok(());
        }
        let synthetic = build_synthetic_reregistration(
            &state.registration,
            now,
            relist,
            failure,
            &self.params.pool,
            &self.params.exceptions,
            stream.uniform(&format!("pool:{reg_id}")),
        );
        let Some(synthetic) = synthetic else {
            warn!("no re-registration in the pool matches {reg_id}; treating as death without relisting");
            row.posttx_outcome = "no_pool_match".into();
            return Ok(());
        };
        debug!("{reg_id} relists after {relist:.1} days from {}", synthetic.source);
        row.posttx_outcome = "relisted".into();
        row.relisted_as = synthetic.registration.registration_id.clone();
        let new_idx = self.add_candidate(synthetic.registration, synthetic.statuses, true);
        self.schedule_next(new_idx);
        Ok(())
    }

    fn finish(self) -> Result<SimulationOutput, SimError> {
        let mut out = self.output;
        let params = self.params;
        for state in &self.candidates {
            let reg = &state.registration;
            let (disposition, at) = match state.disposition {
                Disposition::Waiting => ("waiting".to_string(), None),
                Disposition::Transplanted(t) => ("transplanted".to_string(), Some(t)),
                Disposition::Exited(r, t) => (r.to_string(), Some(t)),
            };
            out.candidates.push(CandidateRow {
                registration_id: reg.registration_id.clone(),
                patient_id: reg.patient_id.clone(),
                country: reg.country,
                center: reg.center.clone(),
                blood_group: reg.blood_group.to_string(),
                sex: reg.sex.to_string(),
                pediatric: reg.is_pediatric(),
                synthetic: state.synthetic,
                listed_at: reg.listed_at,
                disposition,
                disposition_at: at,
                urgency: state.urgency.to_string(),
                lab_meld: state.lab_meld,
                match_meld: state.match_meld(MeldContext::National, &params.exceptions, &params.curve),
                exception_kind: dominant_exception(state, params).0,
            });
        }
        out.obligations = self
            .ledger
            .open()
            .iter()
            .map(|o| ObligationRow {
                id: o.id,
                debtor: o.debtor.clone(),
                creditor: o.creditor.clone(),
                blood_group: o.blood_group.to_string(),
                created_at: o.created_at,
                lineage: o.lineage.iter().map(u64::to_string).collect::<Vec<_>>().join(" "),
            })
            .collect();
        Ok(out)
    }
}

/// Kind and id of the exception giving the highest national score.
fn dominant_exception(state: &CandidateState, params: &ModelParameterSet) -> (String, String) {
    let mut best: Option<(f64, ExceptionKind, &str)> = None;
    for a in &state.exceptions {
        let Some(def) = params.exceptions.get(&a.exception_id) else {
            continue;
        };
        let score = crate::exceptions::exception_meld(def, a, state.lab_meld, &params.curve);
        if best.is_none_or(|b| score > b.0) {
            best = Some((score, def.kind, &a.exception_id));
        }
    }
    match best {
        Some((_, kind, id)) => (kind.as_str().to_string(), id.to_string()),
        None => ("none".into(), String::new()),
    }
}

/// Convenience wrapper: initialize and run.
pub fn simulate(
    bundle: &InputBundle,
    params: &ModelParameterSet,
    config: SimulationConfig,
    seed: u64,
) -> Result<SimulationOutput, SimError> {
    Simulation::initialize(bundle, params, config, seed)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exceptions::ExceptionCatalog;
    use crate::model::{Biomarkers, BloodGroup, ExitReason, Sex, Urgency};
    use crate::offering::AcceptanceModels;

    fn day(n: f64) -> Timestamp {
        Timestamp::from_date(2016, 1, 1).plus_days(n)
    }

    fn reg(id: &str, listed: f64) -> CandidateRegistration {
        CandidateRegistration {
            patient_id: format!("p-{id}"),
            registration_id: id.into(),
            listed_at: day(listed),
            country: Country::Netherlands,
            center: "NLGTP".into(),
            blood_group: BloodGroup::A,
            age_at_listing: 45.0,
            weight_kg: 70.0,
            sex: Sex::Male,
            disease_group: "other".into(),
            is_retransplant: false,
        }
    }

    fn st(id: &str, at: f64, payload: StatusPayload) -> StatusUpdate {
        StatusUpdate {
            registration_id: id.into(),
            at: day(at),
            payload,
        }
    }

    fn labs(bili: f64) -> StatusPayload {
        StatusPayload::Biomarker(Biomarkers {
            creatinine: 1.0,
            bilirubin: bili,
            inr: 1.0,
            dialysis: false,
            sodium: None,
        })
    }

    fn donor(id: &str, at: f64) -> DonorRecord {
        DonorRecord {
            donor_id: id.into(),
            reported_at: day(at),
            country: Country::Netherlands,
            center: "NLGTP".into(),
            hospital: "h".into(),
            blood_group: BloodGroup::A,
            age: 40.0,
            weight_kg: 75.0,
            height_cm: 178.0,
            death_cause: "trauma".into(),
            dcd: false,
            profile_covariates: Default::default(),
        }
    }

    fn bundle(donors: Vec<DonorRecord>, regs: Vec<CandidateRegistration>, statuses: Vec<StatusUpdate>) -> InputBundle {
        crate::ingest::assemble_bundle(
            Window::new(day(10.0), day(400.0)).unwrap(),
            donors,
            regs,
            statuses,
            Vec::new(),
            &ModelParameterSet::defaults().exceptions,
            Path::new("r"),
            Path::new("s"),
        )
        .unwrap()
    }

    fn certain() -> ModelParameterSet {
        let mut p = ModelParameterSet::defaults();
        p.acceptance = AcceptanceModels::constant(50.0);
        p.split = crate::covariates::LinearPredictor::constant(-50.0);
        p
    }

    #[test]
    fn fes_orders_donors_first_then_sequence() {
        let mut f = FutureEventSet::default();
        f.push(day(1.0), EventKind::Patient, 0);
        f.push(day(1.0), EventKind::Donor, 1);
        f.push(day(0.5), EventKind::Patient, 2);
        f.push(day(1.0), EventKind::Patient, 3);
        let order: Vec<usize> = std::iter::from_fn(|| f.pop()).map(|e| e.subject).collect();
        assert_eq!(order, vec![2, 1, 0, 3]);
    }

    #[test]
    fn empty_bundle_yields_empty_output() {
        let p = ModelParameterSet::defaults();
        let b = bundle(vec![], vec![reg("r1", 0.0)], vec![st("r1", 0.0, labs(1.0))]);
        let out = simulate(&b, &p, SimulationConfig::default(), 1).unwrap();
        assert!(out.transplants.is_empty());
        assert_eq!(out.candidates.len(), 1);
        assert_eq!(out.candidates[0].disposition, "waiting");
    }

    #[test]
    fn certain_acceptance_transplants_and_removes_events() {
        let p = certain();
        let b = bundle(
            vec![donor("d1", 20.0)],
            vec![reg("r1", 0.0)],
            vec![
                st("r1", 0.0, labs(1.0)),
                st("r1", 50.0, labs(2.0)),
                st("r1", 90.0, StatusPayload::Exit(ExitReason::Died)),
            ],
        );
        let sim = Simulation::initialize(&b, &p, SimulationConfig { post_transplant: false, ..Default::default() }, 1).unwrap();
        assert_eq!(sim.fes.len(), 2);
        let out = sim.run().unwrap();
        assert_eq!(out.transplants.len(), 1);
        assert_eq!(out.transplants[0].registration_id, "r1");
        assert_eq!(out.candidates[0].disposition, "transplanted");
        assert_eq!(out.candidates[0].disposition_at, Some(day(20.0)));
    }

    #[test]
    fn pre_window_statuses_materialized() {
        let p = ModelParameterSet::defaults();
        let b = bundle(vec![], vec![reg("r1", 0.0)], vec![st("r1", 0.0, labs(4.0)), st("r1", 5.0, StatusPayload::Urgency(Urgency::NonTransplantable))]);
        let sim = Simulation::initialize(&b, &p, SimulationConfig::default(), 1).unwrap();
        assert!(sim.fes.is_empty());
        assert_eq!(sim.candidates[0].urgency, Urgency::NonTransplantable);
        assert!(sim.candidates[0].lab_meld > 6.0);
    }

    #[test]
    fn nt_candidate_gets_no_offer() {
        let p = certain();
        let b = bundle(
            vec![donor("d1", 20.0), donor("d2", 40.0)],
            vec![reg("r1", 0.0)],
            vec![
                st("r1", 0.0, labs(1.0)),
                st("r1", 15.0, StatusPayload::Urgency(Urgency::NonTransplantable)),
                st("r1", 30.0, StatusPayload::Urgency(Urgency::Transplantable)),
            ],
        );
        let out = simulate(&b, &p, SimulationConfig { post_transplant: false, ..Default::default() }, 1).unwrap();
        assert_eq!(out.discards.len(), 1);
        assert_eq!(out.discards[0].donor_id, "d1");
        assert_eq!(out.transplants[0].donor_id, "d2");
    }

    #[test]
    fn anchor_follows_match_meld_history() {
        let p = ModelParameterSet::defaults();
        let b = bundle(
            vec![],
            vec![reg("r1", 0.0)],
            vec![st("r1", 0.0, labs(1.0)), st("r1", 20.0, labs(8.0)), st("r1", 30.0, labs(1.0)), st("r1", 40.0, labs(8.0))],
        );
        let mut sim = Simulation::initialize(&b, &p, SimulationConfig::default(), 1).unwrap();
        while let Some(e) = sim.fes.pop() {
            sim.now = e.at;
            sim.handle_patient(e).unwrap();
        }
        assert_eq!(sim.candidates[0].anchor.anchor(), Some(day(40.0)));
    }

    #[test]
    fn exception_upgrades_synthesized() {
        let p = ModelParameterSet::defaults();
        let b = bundle(
            vec![],
            vec![reg("r1", 0.0)],
            vec![
                st("r1", 0.0, labs(1.0)),
                st("r1", 20.0, StatusPayload::Exception { exception_id: "HCC-NL".into(), action: ExceptionAction::Grant }),
            ],
        );
        let sim = Simulation::initialize(&b, &p, SimulationConfig::default(), 1).unwrap();
        let out_state = {
            let mut sim = sim;
            while let Some(e) = sim.fes.pop() {
                sim.now = e.at;
                sim.handle_patient(e).unwrap();
            }
            sim.statuses[0].clone()
        };
        let upgrades: Vec<Timestamp> = out_state
            .iter()
            .filter(|s| matches!(s.payload, StatusPayload::Exception { action: ExceptionAction::Upgrade, .. }))
            .map(|s| s.at)
            .collect();
        assert_eq!(upgrades, vec![day(110.0), day(200.0), day(290.0), day(380.0)]);
    }

    #[test]
    fn unknown_exception_in_synthetic_stream_faults() {
        let mut p = ModelParameterSet::defaults();
        let b = bundle(vec![], vec![reg("r1", 0.0)], vec![st("r1", 0.0, labs(1.0))]);
        p.exceptions = ExceptionCatalog::default();
        let mut sim = Simulation::initialize(&b, &p, SimulationConfig::default(), 1).unwrap();
        let bad = st("r1", 20.0, StatusPayload::Exception { exception_id: "X".into(), action: ExceptionAction::Grant });
        assert!(matches!(sim.apply_status(0, &bad), Err(SimError::Fault(_))));
    }

    #[test]
    fn out_of_order_status_faults() {
        let p = ModelParameterSet::defaults();
        let b = bundle(vec![], vec![reg("r1", 0.0)], vec![st("r1", 0.0, labs(1.0)), st("r1", 30.0, labs(2.0))]);
        let mut sim = Simulation::initialize(&b, &p, SimulationConfig::default(), 1).unwrap();
        sim.apply_status(0, &st("r1", 30.0, labs(2.0))).unwrap();
        assert!(sim.apply_status(0, &st("r1", 25.0, labs(2.0))).is_err());
    }
}
