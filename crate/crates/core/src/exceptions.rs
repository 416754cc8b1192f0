//! Exception scores: standard, non-standard and pediatric MELD.
//!
//! Exceptions carry a 90-day mortality equivalent. The equivalent is the
//! stored state; a MELD-scale score is derived on demand through whichever
//! survival curve is active, so swapping curves never touches the schedule.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::model::{Country, ExceptionAction, StatusPayload, StatusUpdate, SurvivalCurve90};
use crate::time::Timestamp;

/// Keeps derived equivalents strictly below one.
pub const EQUIVALENT_EPSILON: f64 = 1e-6;

pub const AUTO_UPGRADE_DAYS: f64 = 90.0;
pub const MANUAL_UPGRADE_DAYS: f64 = 80.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExceptionKind {
    #[serde(rename = "SE")]
    Standard,
    #[serde(rename = "NSE")]
    NonStandard,
    #[serde(rename = "PED")]
    Pediatric,
}

impl ExceptionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExceptionKind::Standard => "SE",
            ExceptionKind::NonStandard => "NSE",
            ExceptionKind::Pediatric => "PED",
        }
    }

    /// PED-MELD counts in every context; (N)SE-MELD only nationally and on
    /// obligation-based offers.
    pub fn valid_internationally(self) -> bool {
        self == ExceptionKind::Pediatric
    }
}

impl fmt::Display for ExceptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExceptionKind {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "SE" => Ok(ExceptionKind::Standard),
            "NSE" => Ok(ExceptionKind::NonStandard),
            "PED" => Ok(ExceptionKind::Pediatric),
            other => Err(ConfigError::Invalid(format!("unknown exception kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExceptionDefinition {
    pub exception_id: String,
    pub country: Country,
    pub kind: ExceptionKind,
    pub initial_equivalent: f64,
    pub increment_90d: f64,
    pub max_equivalent: f64,
    pub max_age: Option<f64>,
    pub is_bonus: bool,
    pub auto_recertified: bool,
}

impl ExceptionDefinition {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let ok = self.initial_equivalent > 0.0
            && self.initial_equivalent <= self.max_equivalent
            && self.max_equivalent <= 1.0
            && self.increment_90d >= 0.0;
        if !ok {
            return Err(ConfigError::Invalid(format!(
                "exception {}: need 0 < initial <= max <= 1 and increment >= 0",
                self.exception_id
            )));
        }
        Ok(())
    }

    pub fn upgrade_interval_days(&self) -> f64 {
        if self.auto_recertified {
            AUTO_UPGRADE_DAYS
        } else {
            MANUAL_UPGRADE_DAYS
        }
    }

    /// Whether upgrades stop at `age_years`.
    pub fn past_max_age(&self, age_years: f64) -> bool {
        self.max_age.is_some_and(|max| age_years > max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveException {
    pub exception_id: String,
    pub granted_at: Timestamp,
    pub current_equivalent: f64,
    /// Time the equivalent last changed (grant or upgrade).
    pub last_change_at: Timestamp,
    pub next_recert_at: Timestamp,
}

impl ActiveException {
    pub fn grant(def: &ExceptionDefinition, now: Timestamp) -> Self {
        ActiveException {
            exception_id: def.exception_id.clone(),
            granted_at: now,
            current_equivalent: def.initial_equivalent,
            last_change_at: now,
            next_recert_at: now.plus_days(def.upgrade_interval_days()),
        }
    }

    /// Applies one upgrade at `now`: the equivalent rises by the increment,
    /// capped at the maximum, and the next recertification is rescheduled.
    /// At the maximum, or past the age limit, the equivalent is unchanged.
    pub fn upgrade(&mut self, def: &ExceptionDefinition, age_years: f64, now: Timestamp) {
        if !def.past_max_age(age_years) {
            self.current_equivalent =
                (self.current_equivalent + def.increment_90d).min(def.max_equivalent);
        }
        self.last_change_at = now;
        self.next_recert_at = now.plus_days(def.upgrade_interval_days());
    }

    pub fn at_max(&self, def: &ExceptionDefinition) -> bool {
        self.current_equivalent >= def.max_equivalent
    }
}

/// Next time an upgrade would change the equivalent, if any.
pub fn schedule_upgrade(
    def: &ExceptionDefinition,
    active: &ActiveException,
    age_at: impl Fn(Timestamp) -> f64,
) -> Option<Timestamp> {
    if active.at_max(def) || def.increment_90d == 0.0 {
        return None;
    }
    let next = active.next_recert_at;
    if def.past_max_age(age_at(next)) {
        return None;
    }
    Some(next)
}

/// MELD-scale score of an active exception under `curve`.
///
/// Bonus exceptions add their equivalent to the mortality implied by the
/// candidate's lab-MELD before translating back.
pub fn exception_meld(
    def: &ExceptionDefinition,
    active: &ActiveException,
    lab_meld: f64,
    curve: &SurvivalCurve90,
) -> f64 {
    let equivalent = if def.is_bonus {
        curve.mortality90(lab_meld) + active.current_equivalent
    } else {
        active.current_equivalent
    };
    let equivalent = equivalent.clamp(EQUIVALENT_EPSILON, 1.0 - EQUIVALENT_EPSILON);
    curve
        .equivalent_to_meld(equivalent)
        .expect("equivalent clamped into (0, 1)")
}

/// Upgrade times and resulting equivalents synthesized when the stream holds
/// no further status for this exception. Stops at `until` (exclusive), at the
/// maximum equivalent, or once the candidate passes the age limit.
pub fn autocontinue_recertification(
    def: &ExceptionDefinition,
    active: &ActiveException,
    future: &[StatusUpdate],
    until: Timestamp,
    age_at: impl Fn(Timestamp) -> f64,
) -> Vec<(Timestamp, f64)> {
    let mentioned = future.iter().any(|u| {
        matches!(&u.payload, StatusPayload::Exception { exception_id, .. } if *exception_id == def.exception_id)
    });
    if mentioned {
        return Vec::new();
    }
    let mut state = active.clone();
    let mut out = Vec::new();
    while let Some(at) = schedule_upgrade(def, &state, &age_at) {
        if at >= until {
            break;
        }
        state.upgrade(def, age_at(at), at);
        out.push((at, state.current_equivalent));
    }
    out
}

/// Applies a grant, upgrade or expiry from the status stream.
pub fn apply_exception_status(
    active: &mut Vec<ActiveException>,
    def: &ExceptionDefinition,
    action: ExceptionAction,
    age_years: f64,
    now: Timestamp,
) {
    let pos = active.iter().position(|a| a.exception_id == def.exception_id);
    match (action, pos) {
        (ExceptionAction::Grant, Some(i)) => active[i] = ActiveException::grant(def, now),
        (ExceptionAction::Grant, None) => active.push(ActiveException::grant(def, now)),
        (ExceptionAction::Upgrade, Some(i)) => active[i].upgrade(def, age_years, now),
        // An upgrade for an exception never granted starts it.
        (ExceptionAction::Upgrade, None) => active.push(ActiveException::grant(def, now)),
        (ExceptionAction::Expire, Some(i)) => {
            active.remove(i);
        }
        (ExceptionAction::Expire, None) => {}
    }
}

/// A modification of exception definitions evaluated as a policy option.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyVariant {
    Current,
    /// Cap the maximum equivalent, keeping it at the initial if that is higher.
    Capped(f64),
    /// Multiply the 90-day increment.
    Slower(f64),
    /// Replace initial equivalents below 20% by this value.
    Lowered(f64),
}

pub const LOWERED_THRESHOLD: f64 = 0.20;

impl FromStr for PolicyVariant {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "current" {
            return Ok(PolicyVariant::Current);
        }
        let bad = || ConfigError::Invalid(format!("malformed exception policy {s:?}"));
        let (name, rest) = s.split_once('(').ok_or_else(bad)?;
        let arg = rest.strip_suffix(')').ok_or_else(bad)?;
        let value: f64 = arg.trim().parse().map_err(|_| bad())?;
        let variant = match name.trim() {
            "capped" if value > 0.0 && value <= 1.0 => PolicyVariant::Capped(value),
            "slower" if value >= 0.0 => PolicyVariant::Slower(value),
            "lowered" if value > 0.0 && value < 1.0 => PolicyVariant::Lowered(value),
            _ => return Err(bad()),
        };
        Ok(variant)
    }
}

impl fmt::Display for PolicyVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyVariant::Current => write!(f, "current"),
            PolicyVariant::Capped(v) => write!(f, "capped({v})"),
            PolicyVariant::Slower(v) => write!(f, "slower({v})"),
            PolicyVariant::Lowered(v) => write!(f, "lowered({v})"),
        }
    }
}

/// A composition of variants, optionally restricted to some countries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExceptionPolicy {
    pub variants: Vec<PolicyVariant>,
    pub countries: Option<Vec<Country>>,
}

impl ExceptionPolicy {
    /// Parses `capped(0.25)+slower(0.5)` style descriptors.
    pub fn parse(spec: &str, countries: Option<Vec<Country>>) -> Result<Self, ConfigError> {
        let variants = spec
            .split('+')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ExceptionPolicy {
            variants,
            countries,
        })
    }

    pub fn describe(&self) -> String {
        if self.variants.is_empty() {
            return "current".into();
        }
        self.variants
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Applies a policy to every matching (N)SE; PED-MELD is left alone.
pub fn apply_policy_variant(
    defs: &ExceptionCatalog,
    policy: &ExceptionPolicy,
) -> Result<ExceptionCatalog, ConfigError> {
    let mut out = defs.clone();
    for def in out.defs.values_mut() {
        if def.kind == ExceptionKind::Pediatric {
            continue;
        }
        if let Some(countries) = &policy.countries {
            if !countries.contains(&def.country) {
                continue;
            }
        }
        for variant in &policy.variants {
            match *variant {
                PolicyVariant::Current => {}
                PolicyVariant::Capped(cap) => {
                    def.max_equivalent = cap.max(def.initial_equivalent);
                }
                PolicyVariant::Slower(factor) => def.increment_90d *= factor,
                PolicyVariant::Lowered(value) => {
                    if def.initial_equivalent < LOWERED_THRESHOLD {
                        def.initial_equivalent = value;
                        def.max_equivalent = def.max_equivalent.max(value);
                    }
                }
            }
        }
        def.validate()?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExceptionCatalog {
    defs: BTreeMap<String, ExceptionDefinition>,
}

impl ExceptionCatalog {
    pub fn new(defs: impl IntoIterator<Item = ExceptionDefinition>) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for def in defs {
            def.validate()?;
            if map.contains_key(&def.exception_id) {
                return Err(ConfigError::Invalid(format!(
                    "duplicate exception {}",
                    def.exception_id
                )));
            }
            map.insert(def.exception_id.clone(), def);
        }
        Ok(ExceptionCatalog { defs: map })
    }

    pub fn get(&self, id: &str) -> Option<&ExceptionDefinition> {
        self.defs.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ExceptionDefinition> {
        self.defs.values()
    }

    pub fn len(&self) -> usize {
        self.defs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defs.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Biomarkers, ExitReason};
    use proptest::prelude::*;

    fn def(initial: f64, increment: f64, max: f64, auto: bool) -> ExceptionDefinition {
        ExceptionDefinition {
            exception_id: "BE-HCC".into(),
            country: Country::Belgium,
            kind: ExceptionKind::Standard,
            initial_equivalent: initial,
            increment_90d: increment,
            max_equivalent: max,
            max_age: None,
            is_bonus: false,
            auto_recertified: auto,
        }
    }

    fn day(n: f64) -> Timestamp {
        Timestamp::from_date(2016, 1, 1).plus_days(n)
    }

    fn adult(_: Timestamp) -> f64 {
        50.0
    }

    #[test]
    fn regular_equivalent_maps_through_curve() {
        let d = def(0.10, 0.10, 1.0, true);
        let a = ActiveException::grant(&d, day(0.0));
        assert_eq!(exception_meld(&d, &a, 6.0, &SurvivalCurve90::unos()), 20.0);
    }

    #[test]
    fn full_equivalent_clamps_to_formula_max() {
        let d = def(0.10, 0.10, 1.0, true);
        let mut a = ActiveException::grant(&d, day(0.0));
        a.current_equivalent = 1.0;
        assert_eq!(exception_meld(&d, &a, 6.0, &SurvivalCurve90::unos()), 40.0);
    }

    #[test]
    fn bonus_adds_to_lab_mortality() {
        let curve = SurvivalCurve90::unos();
        let mut d = def(0.10, 0.0, 0.10, true);
        d.is_bonus = true;
        let a = ActiveException::grant(&d, day(0.0));
        let expected = curve
            .equivalent_to_meld(1.0 - curve.survival90(6.0) + 0.10)
            .unwrap();
        assert_eq!(exception_meld(&d, &a, 6.0, &curve), expected);
        // Bonus on a very high lab-MELD stays below one.
        assert_eq!(exception_meld(&d, &a, 40.0, &curve), 40.0);
    }

    #[test]
    fn auto_schedule_every_ninety_days() {
        let d = def(0.10, 0.10, 1.0, true);
        let mut a = ActiveException::grant(&d, day(0.0));
        let first = schedule_upgrade(&d, &a, adult).unwrap();
        assert_eq!(first, day(90.0));
        a.upgrade(&d, 50.0, first);
        assert!((a.current_equivalent - 0.20).abs() < 1e-12);
        let second = schedule_upgrade(&d, &a, adult).unwrap();
        assert_eq!(second, day(180.0));
        a.upgrade(&d, 50.0, second);
        assert!((a.current_equivalent - 0.30).abs() < 1e-12);
    }

    #[test]
    fn manual_upgrades_after_eighty_days() {
        let mut d = def(0.10, 0.10, 1.0, false);
        d.kind = ExceptionKind::NonStandard;
        let a = ActiveException::grant(&d, day(0.0));
        assert_eq!(schedule_upgrade(&d, &a, adult), Some(day(80.0)));
    }

    #[test]
    fn upgrade_at_max_is_noop() {
        let d = def(0.10, 0.10, 0.10, true);
        let mut a = ActiveException::grant(&d, day(0.0));
        assert_eq!(schedule_upgrade(&d, &a, adult), None);
        a.upgrade(&d, 50.0, day(90.0));
        assert_eq!(a.current_equivalent, 0.10);
    }

    #[test]
    fn no_upgrades_past_max_age() {
        let mut d = def(0.10, 0.10, 1.0, true);
        d.max_age = Some(17.9);
        let a = ActiveException::grant(&d, day(0.0));
        assert_eq!(schedule_upgrade(&d, &a, |_| 18.0), None);
        let synth = autocontinue_recertification(&d, &a, &[], day(1000.0), |_| 18.0);
        assert!(synth.is_empty());
    }

    #[test]
    fn autocontinue_synthesizes_after_stream_ends() {
        let d = def(0.10, 0.10, 1.0, true);
        let mut a = ActiveException::grant(&d, day(0.0));
        a.upgrade(&d, 50.0, day(90.0));
        // Stream has nothing after day 100 for this exception.
        let future = vec![StatusUpdate {
            registration_id: "r".into(),
            at: day(150.0),
            payload: StatusPayload::Biomarker(Biomarkers {
                creatinine: 1.0,
                bilirubin: 1.0,
                inr: 1.0,
                dialysis: false,
                sodium: None,
            }),
        }];
        let synth = autocontinue_recertification(&d, &a, &future, day(400.0), adult);
        let times: Vec<Timestamp> = synth.iter().map(|s| s.0).collect();
        assert_eq!(times, vec![day(180.0), day(270.0), day(360.0)]);
        assert!((synth[2].1 - 0.50).abs() < 1e-12);
    }

    #[test]
    fn autocontinue_defers_to_stream() {
        let d = def(0.10, 0.10, 1.0, true);
        let a = ActiveException::grant(&d, day(0.0));
        let future = vec![StatusUpdate {
            registration_id: "r".into(),
            at: day(200.0),
            payload: StatusPayload::Exception {
                exception_id: "BE-HCC".into(),
                action: ExceptionAction::Expire,
            },
        }];
        assert!(autocontinue_recertification(&d, &a, &future, day(400.0), adult).is_empty());
        let exit = vec![StatusUpdate {
            registration_id: "r".into(),
            at: day(50.0),
            payload: StatusPayload::Exit(ExitReason::Died),
        }];
        // Exit bounds the synthesis through `until`, not the stream scan.
        assert!(autocontinue_recertification(&d, &a, &exit, day(50.0), adult).is_empty());
    }

    fn catalog() -> ExceptionCatalog {
        let mut ped = def(0.35, 0.10, 1.0, true);
        ped.exception_id = "BE-PED".into();
        ped.kind = ExceptionKind::Pediatric;
        let mut high = def(0.30, 0.10, 1.0, true);
        high.exception_id = "BE-HIGH".into();
        let mut nl = def(0.10, 0.10, 1.0, true);
        nl.exception_id = "NL-HCC".into();
        nl.country = Country::Netherlands;
        ExceptionCatalog::new([def(0.15, 0.10, 1.0, true), ped, high, nl]).unwrap()
    }

    #[test]
    fn capped_variant() {
        let p = ExceptionPolicy::parse("capped(0.25)", None).unwrap();
        let out = apply_policy_variant(&catalog(), &p).unwrap();
        assert_eq!(out.get("BE-HCC").unwrap().max_equivalent, 0.25);
        assert_eq!(out.get("BE-HIGH").unwrap().max_equivalent, 0.30);
        assert_eq!(out.get("BE-PED").unwrap().max_equivalent, 1.0);
    }

    #[test]
    fn slower_and_lowered_variants() {
        let p = ExceptionPolicy::parse("slower(0.5)+lowered(0.08)", Some(vec![Country::Belgium]))
            .unwrap();
        let out = apply_policy_variant(&catalog(), &p).unwrap();
        let hcc = out.get("BE-HCC").unwrap();
        assert!((hcc.increment_90d - 0.05).abs() < 1e-15);
        assert_eq!(hcc.initial_equivalent, 0.08);
        assert_eq!(out.get("BE-HIGH").unwrap().initial_equivalent, 0.30);
        assert_eq!(out.get("NL-HCC").unwrap(), catalog().get("NL-HCC").unwrap());
        assert_eq!(out.get("BE-PED").unwrap().increment_90d, 0.10);
    }

    #[test]
    fn malformed_variants_rejected() {
        for bad in ["capped", "capped(x)", "faster(0.5)", "capped(1.5)", "lowered(0.3"] {
            assert!(ExceptionPolicy::parse(bad, None).is_err(), "{bad}");
        }
        assert_eq!(ExceptionPolicy::parse("current", None).unwrap().describe(), "current");
    }

    fn trajectory(d: &ExceptionDefinition, steps: usize) -> Vec<f64> {
        let mut a = ActiveException::grant(d, day(0.0));
        let mut out = vec![a.current_equivalent];
        for _ in 0..steps {
            let at = a.next_recert_at;
            a.upgrade(d, 50.0, at);
            out.push(a.current_equivalent);
        }
        out
    }

    proptest! {
        #[test]
        fn equivalent_nondecreasing_and_capped(
            initial in 0.01f64..0.5, inc in 0.0f64..0.3, extra in 0.0f64..0.5, steps in 1usize..30,
        ) {
            let max = (initial + extra).min(1.0);
            let d = def(initial, inc, max, true);
            let t = trajectory(&d, steps);
            for w in t.windows(2) {
                prop_assert!(w[1] >= w[0]);
            }
            prop_assert!(t.iter().all(|&e| e <= max));
        }

        #[test]
        fn capped_score_never_exceeds_cap_score(
            initial in 0.01f64..0.25, inc in 0.0f64..0.3, cap in 0.25f64..0.9, steps in 1usize..30, lab in 6.0f64..40.0,
        ) {
            let catalog = ExceptionCatalog::new([def(initial, inc, 1.0, true)]).unwrap();
            let p = ExceptionPolicy { variants: vec![PolicyVariant::Capped(cap)], countries: None };
            let capped = apply_policy_variant(&catalog, &p).unwrap();
            let d = capped.get("BE-HCC").unwrap();
            let curve = SurvivalCurve90::unos();
            let limit = curve.equivalent_to_meld(cap).unwrap();
            let mut a = ActiveException::grant(d, day(0.0));
            for _ in 0..steps {
                prop_assert!(exception_meld(d, &a, lab, &curve) <= limit);
                let at = a.next_recert_at;
                a.upgrade(d, 50.0, at);
            }
        }
    }
}
