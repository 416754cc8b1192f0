//! Mutable waitlist state of one registration.

use crate::exceptions::{exception_meld, ActiveException, ExceptionCatalog, ExceptionKind};
use crate::model::{AllocationProfile, Biomarkers, CandidateRegistration, ExitReason, Urgency};
use crate::model::{MeldFormula, SurvivalCurve90};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Disposition {
    Waiting,
    Transplanted(Timestamp),
    Exited(ExitReason, Timestamp),
}

impl Disposition {
    pub fn label(&self) -> &'static str {
        match self {
            Disposition::Waiting => "waiting",
            Disposition::Transplanted(_) => "transplanted",
            Disposition::Exited(ExitReason::Died, _) => "D",
            Disposition::Exited(ExitReason::Removed, _) => "R",
        }
    }
}

/// Where an offer comes from, relative to the candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeldContext {
    National,
    Obligation,
    International,
}

/// Start of the current run of days with match-MELD at least the current
/// value. Each entry is (start, value) with values strictly increasing up
/// the stack, so a later drop merges every higher plateau into one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WaitingAnchor {
    stack: Vec<(Timestamp, f64)>,
}

impl WaitingAnchor {
    pub fn observe(&mut self, at: Timestamp, value: f64) {
        let mut start = at;
        while let Some(&(s, v)) = self.stack.last() {
            if v >= value {
                start = s;
                self.stack.pop();
            } else {
                break;
            }
        }
        self.stack.push((start, value));
    }

    pub fn anchor(&self) -> Option<Timestamp> {
        self.stack.last().map(|e| e.0)
    }
}

#[derive(Debug, Clone)]
pub struct CandidateState {
    pub registration: CandidateRegistration,
    pub urgency: Urgency,
    pub urgency_since: Timestamp,
    pub biomarkers: Option<Biomarkers>,
    pub lab_meld: f64,
    pub exceptions: Vec<ActiveException>,
    pub anchor: WaitingAnchor,
    pub profile: AllocationProfile,
    pub disposition: Disposition,
    /// Index of the next unapplied status in the registration's stream.
    pub next_status: usize,
    pub synthetic: bool,
}

impl CandidateState {
    pub fn new(registration: CandidateRegistration, formula: &MeldFormula) -> Self {
        let listed = registration.listed_at;
        CandidateState {
            registration,
            urgency: Urgency::Transplantable,
            urgency_since: listed,
            biomarkers: None,
            lab_meld: formula.min_score,
            exceptions: Vec::new(),
            anchor: WaitingAnchor::default(),
            profile: AllocationProfile::default(),
            disposition: Disposition::Waiting,
            next_status: 0,
            synthetic: false,
        }
    }

    pub fn is_waiting(&self) -> bool {
        self.disposition == Disposition::Waiting
    }

    /// Waiting with a status that puts the candidate on match lists.
    pub fn is_active(&self) -> bool {
        self.is_waiting() && self.urgency.is_active()
    }

    pub fn id(&self) -> &str {
        &self.registration.registration_id
    }

    /// Highest exception score of each family: (PED-MELD, (N)SE-MELD).
    pub fn exception_scores(
        &self,
        catalog: &ExceptionCatalog,
        curve: &SurvivalCurve90,
    ) -> (Option<f64>, Option<f64>) {
        let mut ped: Option<f64> = None;
        let mut se: Option<f64> = None;
        for active in &self.exceptions {
            let Some(def) = catalog.get(&active.exception_id) else {
                continue;
            };
            let score = exception_meld(def, active, self.lab_meld, curve);
            let slot = if def.kind == ExceptionKind::Pediatric {
                &mut ped
            } else {
                &mut se
            };
            *slot = Some(slot.map_or(score, |s| s.max(score)));
        }
        (ped, se)
    }

    /// Lab-MELD raised by every exception valid in `context`.
    pub fn match_meld(
        &self,
        context: MeldContext,
        catalog: &ExceptionCatalog,
        curve: &SurvivalCurve90,
    ) -> f64 {
        let (ped, se) = self.exception_scores(catalog, curve);
        let mut score = self.lab_meld;
        if let Some(p) = ped {
            score = score.max(p);
        }
        if context != MeldContext::International {
            if let Some(s) = se {
                score = score.max(s);
            }
        }
        score
    }

    /// Records the current national match-MELD for waiting-time accrual.
    pub fn refresh_anchor(&mut self, now: Timestamp, catalog: &ExceptionCatalog, curve: &SurvivalCurve90) {
        let m = self.match_meld(MeldContext::National, catalog, curve);
        self.anchor.observe(now, m);
    }

    pub fn set_biomarkers(&mut self, b: Biomarkers, formula: &MeldFormula) -> Result<(), crate::error::InputError> {
        self.lab_meld = formula.compute(&b)?;
        self.biomarkers = Some(b);
        Ok(())
    }

    pub fn set_urgency(&mut self, urgency: Urgency, now: Timestamp) {
        if urgency != self.urgency {
            self.urgency = urgency;
            self.urgency_since = now;
        }
    }
}
