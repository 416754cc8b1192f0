//! Adaptive risk-set matching.

use serde::Deserialize;

use crate::cases::MatchAttributes;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    /// Maximum absolute difference in the linear predictor.
    pub eta_tolerance: f64,
    pub lab_meld_caliper: f64,
    pub age_caliper: f64,
    pub exception_meld_caliper: f64,
    /// Caliper multiplier per widening stage.
    pub widening_factor: f64,
    pub max_widenings: u32,
    pub target_hu: usize,
    pub target_other: usize,
    pub horizon_days: f64,
    /// Bound on chained imputations through transplanted risk-set members.
    pub max_chain_depth: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            eta_tolerance: 0.5,
            lab_meld_caliper: 3.0,
            age_caliper: 10.0,
            exception_meld_caliper: 3.0,
            widening_factor: 1.5,
            max_widenings: 3,
            target_hu: 35,
            target_other: 50,
            horizon_days: 90.0,
            max_chain_depth: 25,
        }
    }
}

/// Number of discrete criteria that may be relaxed.
pub const DISCRETE_CRITERIA: usize = 7;

/// Discrete criterion `k` (1-based, in relaxation order reversed).
fn discrete_match(k: usize, a: &MatchAttributes, b: &MatchAttributes) -> bool {
    match k {
        1 => a.retransplant == b.retransplant,
        2 => a.urgency == b.urgency,
        3 => a.exception_group == b.exception_group,
        4 => a.disease_group == b.disease_group,
        5 => a.urgency_reason == b.urgency_reason,
        6 => a.dialysis == b.dialysis,
        7 => a.country == b.country,
        _ => unreachable!("criterion {k}"),
    }
}

/// Criteria never relaxed: pediatric status, the HU/non-HU split and the
/// linear predictor tolerance.
fn hard_match(case: &MatchAttributes, other: &MatchAttributes, cfg: &MatchConfig) -> bool {
    case.pediatric == other.pediatric
        && case.is_hu() == other.is_hu()
        && (case.eta - other.eta).abs() < cfg.eta_tolerance
}

fn within_calipers(case: &MatchAttributes, other: &MatchAttributes, cfg: &MatchConfig, scale: f64) -> bool {
    if (case.lab_meld - other.lab_meld).abs() > cfg.lab_meld_caliper * scale {
        return false;
    }
    if (case.age - other.age).abs() > cfg.age_caliper * scale {
        return false;
    }
    if case.is_hu() {
        return true;
    }
    match (case.exception_meld, other.exception_meld) {
        (Some(a), Some(b)) => (a - b).abs() <= cfg.exception_meld_caliper * scale,
        (None, None) => true,
        _ => false,
    }
}

/// A registration still at risk when the case was censored.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolMember {
    pub registration_id: String,
    pub attributes: MatchAttributes,
    /// Days from the case's censoring time to the member's event or censoring.
    pub remaining: f64,
    /// Whether `remaining` ends in death or removal.
    pub event: bool,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskSet {
    pub members: Vec<PoolMember>,
    /// Discrete criteria dropped, counted from the last.
    pub dropped: usize,
    pub widenings: u32,
}

/// Filters the pool with all criteria, then drops discrete criteria from
/// the last to the first, then widens the calipers, stopping at the first
/// stage reaching the target size. Returns `None` when even the widest
/// stage leaves no member.
pub fn build_risk_set(case: &MatchAttributes, pool: &[PoolMember], cfg: &MatchConfig) -> Option<RiskSet> {
    let target = if case.is_hu() { cfg.target_hu } else { cfg.target_other };
    let hard: Vec<&PoolMember> = pool.iter().filter(|m| hard_match(case, &m.attributes, cfg)).collect();
    let mut stages: Vec<(usize, u32)> = (0..=DISCRETE_CRITERIA).map(|d| (d, 0)).collect();
    stages.extend((1..=cfg.max_widenings).map(|w| (DISCRETE_CRITERIA, w)));
    let mut last = None;
    for (dropped, widenings) in stages {
        let scale = cfg.widening_factor.powi(widenings as i32);
        let kept = DISCRETE_CRITERIA - dropped;
        let members: Vec<PoolMember> = hard
            .iter()
            .filter(|m| {
                (1..=kept).all(|k| discrete_match(k, case, &m.attributes))
                    && within_calipers(case, &m.attributes, cfg, scale)
            })
            .map(|m| (*m).clone())
            .collect();
        let enough = members.len() >= target;
        last = Some(RiskSet {
            members,
            dropped,
            widenings,
        });
        if enough {
            break;
        }
    }
    last.filter(|r| !r.members.is_empty())
}
