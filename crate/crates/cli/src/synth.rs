//! Synthetic input bundles: Poisson donor and listing arrivals, lognormal
//! biomarkers following a random walk, competing death and removal
//! hazards driven by the lab score.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use elas_core::exceptions::ExceptionCatalog;
use elas_core::io;
use elas_core::model::{
    AllocationProfile, Biomarkers, BloodGroup, CandidateRegistration, CenterDirectory, Country,
    DonorRecord, ExceptionAction, ExitReason, MeldFormula, Sex, StatusPayload, StatusUpdate,
    SurvivalCurve90, Urgency,
};
use elas_core::time::{Timestamp, DAYS_PER_YEAR};
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, LogNormal, Normal};
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lognormal {
    pub median: f64,
    pub sigma: f64,
}

impl Lognormal {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        LogNormal::new(self.median.ln(), self.sigma)
            .expect("valid lognormal")
            .sample(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub start: Timestamp,
    pub end: Timestamp,
    /// Listings are generated from this many days before `start`.
    pub lead_in_days: f64,
    pub donors_per_day: f64,
    pub registrations_per_day: f64,
    /// Relative share of donors and listings per country.
    pub country_mix: BTreeMap<Country, f64>,
    pub exception_prevalence: f64,
    pub hu_fraction: f64,
    pub pediatric_fraction: f64,
    /// Share of donors after circulatory death, outside Germany.
    pub dcd_fraction: f64,
    /// Share of candidates with a restrictive allocation profile.
    pub profile_fraction: f64,
    pub sodium_fraction: f64,
    pub creatinine: Lognormal,
    pub bilirubin: Lognormal,
    pub inr: Lognormal,
    /// Standard deviation of the log-biomarker step per update.
    pub progression_sd: f64,
    /// Mean log-biomarker increase per update.
    pub progression_drift: f64,
    pub removal_per_year: f64,
    /// Multiplier on the death hazard implied by the lab score.
    pub death_scale: f64,
    /// Probability that an update switches the candidate to NT.
    pub nt_probability: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        let country_mix = [
            (Country::Germany, 0.50),
            (Country::Netherlands, 0.10),
            (Country::Belgium, 0.15),
            (Country::Austria, 0.09),
            (Country::Croatia, 0.08),
            (Country::Hungary, 0.05),
            (Country::Slovenia, 0.03),
        ]
        .into_iter()
        .collect();
        GenConfig {
            start: Timestamp::from_date(2016, 1, 1),
            end: Timestamp::from_date(2018, 1, 1),
            lead_in_days: 365.0,
            donors_per_day: 1.37,
            registrations_per_day: 2.28,
            country_mix,
            exception_prevalence: 0.18,
            hu_fraction: 0.04,
            pediatric_fraction: 0.05,
            dcd_fraction: 0.2,
            profile_fraction: 0.3,
            sodium_fraction: 0.8,
            creatinine: Lognormal { median: 1.0, sigma: 0.45 },
            bilirubin: Lognormal { median: 2.2, sigma: 1.0 },
            inr: Lognormal { median: 1.3, sigma: 0.25 },
            progression_sd: 0.15,
            progression_drift: 0.03,
            removal_per_year: 0.12,
            death_scale: 1.0,
            nt_probability: 0.04,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedBundle {
    pub donors: Vec<DonorRecord>,
    pub registrations: Vec<CandidateRegistration>,
    pub statuses: Vec<StatusUpdate>,
}

const BLOOD_GROUPS: [(BloodGroup, f64); 4] =
    [(BloodGroup::O, 0.39), (BloodGroup::A, 0.43), (BloodGroup::B, 0.12), (BloodGroup::AB, 0.06)];
const DISEASE_GROUPS: [&str; 6] = ["cirrhosis", "cholestatic", "metabolic", "malignancy", "acute", "other"];
const DEATH_CAUSES: [&str; 4] = ["cva", "trauma", "anoxia", "other"];
const EXCEPTION_MIX: [(&str, f64); 5] = [("HCC", 0.6), ("PSC", 0.1), ("PCLD", 0.1), ("HAT", 0.05), ("NSE", 0.15)];

fn choose<'a, T>(rng: &mut impl Rng, items: &'a [(T, f64)]) -> &'a T {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut x = rng.random::<f64>() * total;
    for (item, w) in items {
        if x < *w {
            return item;
        }
        x -= w;
    }
    &items.last().expect("nonempty").0
}

fn pick<'a, T>(rng: &mut impl Rng, items: &'a [T]) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

/// Poisson arrival times on [from, to).
fn arrivals(rng: &mut impl Rng, from: Timestamp, to: Timestamp, per_day: f64) -> Vec<Timestamp> {
    let mut out = Vec::new();
    if per_day <= 0.0 {
        return out;
    }
    let gap = Exp::new(per_day).expect("positive rate");
    let mut t = 0.0;
    let span = to.days_since(from);
    loop {
        t += gap.sample(rng);
        if t >= span {
            return out;
        }
        out.push(from.plus_days(t));
    }
}

struct Generator<'a> {
    cfg: &'a GenConfig,
    centers: &'a CenterDirectory,
    catalog: &'a ExceptionCatalog,
    countries: Vec<(Country, f64)>,
    formula: MeldFormula,
    curve: SurvivalCurve90,
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a GenConfig, centers: &'a CenterDirectory, catalog: &'a ExceptionCatalog) -> Self {
        let countries = cfg
            .country_mix
            .iter()
            .filter(|(c, w)| **w > 0.0 && centers.in_country(**c).next().is_some())
            .map(|(c, w)| (*c, *w))
            .collect();
        Generator {
            cfg,
            centers,
            catalog,
            countries,
            formula: MeldFormula::unos(),
            curve: SurvivalCurve90::unos(),
        }
    }

    fn center(&self, rng: &mut impl Rng, country: Country) -> String {
        let list: Vec<&str> = self.centers.in_country(country).map(|c| c.id.as_str()).collect();
        pick(rng, &list).to_string()
    }

    fn donor(&self, rng: &mut impl Rng, n: usize, at: Timestamp) -> DonorRecord {
        let country = *choose(rng, &self.countries);
        let center = self.center(rng, country);
        let age: f64 = Normal::new(52.0, 17.0).unwrap().sample(rng);
        let age = age.clamp(0.5, 90.0).round();
        let weight: f64 = if age < 16.0 {
            5.0 + 3.5 * age
        } else {
            Normal::<f64>::new(78.0, 14.0).unwrap().sample(rng).clamp(40.0, 150.0)
        };
        let height = if age < 16.0 { 60.0 + 6.5 * age } else { 150.0 + weight * 0.3 };
        let dcd = country != Country::Germany && age >= 16.0 && rng.random::<f64>() < self.cfg.dcd_fraction;
        DonorRecord {
            donor_id: format!("D{n:06}"),
            reported_at: at,
            hospital: format!("{center}-H{}", rng.random_range(1..=6)),
            country,
            center,
            blood_group: *choose(rng, &BLOOD_GROUPS),
            age,
            weight_kg: weight.round(),
            height_cm: height.round(),
            death_cause: pick(rng, &DEATH_CAUSES).to_string(),
            dcd,
            profile_covariates: BTreeMap::new(),
        }
    }

    fn registration(&self, rng: &mut impl Rng, n: usize, at: Timestamp) -> CandidateRegistration {
        let country = *choose(rng, &self.countries);
        let pediatric = rng.random::<f64>() < self.cfg.pediatric_fraction;
        let age = if pediatric {
            rng.random_range(0.5..country.pediatric_age_cutoff())
        } else {
            Normal::<f64>::new(54.0, 11.0).unwrap().sample(rng).clamp(18.0, 78.0)
        };
        let weight = if pediatric {
            5.0 + 3.0 * age
        } else {
            Normal::<f64>::new(78.0, 15.0).unwrap().sample(rng).clamp(40.0, 150.0)
        };
        CandidateRegistration {
            patient_id: format!("P{n:06}"),
            registration_id: format!("R{n:06}"),
            listed_at: at,
            center: self.center(rng, country),
            country,
            blood_group: *choose(rng, &BLOOD_GROUPS),
            age_at_listing: (age * 10.0).round() / 10.0,
            weight_kg: weight.round(),
            sex: if rng.random::<f64>() < 0.65 { Sex::Male } else { Sex::Female },
            disease_group: pick(rng, &DISEASE_GROUPS).to_string(),
            is_retransplant: rng.random::<f64>() < 0.08,
        }
    }

    fn biomarkers(&self, rng: &mut impl Rng) -> Biomarkers {
        Biomarkers {
            creatinine: round2(self.cfg.creatinine.sample(rng).clamp(0.2, 12.0)),
            bilirubin: round2(self.cfg.bilirubin.sample(rng).clamp(0.2, 60.0)),
            inr: round2(self.cfg.inr.sample(rng).clamp(0.8, 8.0)),
            dialysis: false,
            sodium: (rng.random::<f64>() < self.cfg.sodium_fraction)
                .then(|| Normal::<f64>::new(137.0, 4.5).unwrap().sample(rng).clamp(115.0, 150.0).round()),
        }
    }

    fn step(&self, rng: &mut impl Rng, b: Biomarkers) -> Biomarkers {
        let noise = Normal::new(self.cfg.progression_drift, self.cfg.progression_sd).unwrap();
        let mut walk = |x: f64, lo: f64, hi: f64| round2((x.ln() + noise.sample(rng)).exp().clamp(lo, hi));
        let creatinine = walk(b.creatinine, 0.2, 12.0);
        let bilirubin = walk(b.bilirubin, 0.2, 60.0);
        let inr = walk(b.inr, 0.8, 8.0);
        Biomarkers {
            creatinine,
            bilirubin,
            inr,
            dialysis: creatinine > 4.0 && rng.random::<f64>() < 0.5,
            sodium: b.sodium.map(|na| (na + Normal::new(0.0, 2.0).unwrap().sample(rng)).clamp(115.0, 150.0).round()),
        }
    }

    /// Days between biomarker updates, shorter for sicker candidates.
    fn recert_days(score: f64) -> f64 {
        match score {
            s if s >= 25.0 => 7.0,
            s if s >= 19.0 => 30.0,
            s if s >= 11.0 => 90.0,
            _ => 180.0,
        }
    }

    fn exception_for(&self, rng: &mut impl Rng, reg: &CandidateRegistration) -> Option<String> {
        let cc = reg.country.as_str();
        if reg.is_pediatric() {
            let id = format!("PED-{cc}");
            return self.catalog.get(&id).map(|_| id);
        }
        if rng.random::<f64>() >= self.cfg.exception_prevalence {
            return None;
        }
        let kind = choose(rng, &EXCEPTION_MIX);
        let id = format!("{kind}-{cc}");
        self.catalog.get(&id).map(|_| id)
    }

    /// One candidate's status stream from listing until exit or `horizon`.
    fn stream(&self, rng: &mut impl Rng, reg: &CandidateRegistration, horizon: Timestamp, hu: bool) -> Vec<StatusUpdate> {
        let id = &reg.registration_id;
        let push = |out: &mut Vec<StatusUpdate>, at: Timestamp, payload: StatusPayload| {
            out.push(StatusUpdate {
                registration_id: id.clone(),
                at,
                payload,
            })
        };
        let mut out = Vec::new();
        let mut b = self.biomarkers(rng);
        let mut t = reg.listed_at;
        push(&mut out, t, StatusPayload::Biomarker(b));
        if hu {
            push(&mut out, t, StatusPayload::Urgency(Urgency::HighUrgency));
        }
        let exception = self.exception_for(rng, reg);
        if let Some(e) = &exception {
            push(
                &mut out,
                t,
                StatusPayload::Exception {
                    exception_id: e.clone(),
                    action: ExceptionAction::Grant,
                },
            );
        }
        if rng.random::<f64>() < self.cfg.profile_fraction {
            let profile = AllocationProfile {
                max_donor_age: rng.random_bool(0.6).then(|| *pick(rng, &[55.0, 65.0, 70.0])),
                accept_dcd: rng.random_bool(0.5),
                accept_split: rng.random_bool(0.4),
                accept_rescue_offer: rng.random_bool(0.8),
                min_donor_weight: None,
                max_donor_weight: reg.is_pediatric().then_some(reg.weight_kg * 4.0 + 20.0),
            };
            push(&mut out, t, StatusPayload::Profile(profile));
        }
        let removal = self.cfg.removal_per_year / DAYS_PER_YEAR;
        let mut hu_until = hu.then(|| t.plus_days(rng.random_range(7.0..21.0)));
        let mut nt_until: Option<Timestamp> = None;
        loop {
            let score = self.formula.compute(&b).expect("generated biomarkers are positive");
            let mut death = self.cfg.death_scale * -self.curve.survival90(score).ln() / 90.0;
            if exception.is_some() {
                death *= 0.5;
            }
            if hu_until.is_some() {
                death += 0.02;
            }
            let mut next = t.plus_days(Self::recert_days(score) + rng.random_range(0.0..3.0));
            for switch in [hu_until, nt_until].into_iter().flatten() {
                next = next.min(switch);
            }
            let exit_after = Exp::new(death + removal).expect("positive hazard").sample(rng);
            let exit_at = t.plus_days(exit_after);
            if exit_at < next && exit_at <= horizon {
                let reason = if rng.random::<f64>() < death / (death + removal) {
                    ExitReason::Died
                } else {
                    ExitReason::Removed
                };
                push(&mut out, exit_at.max(t), StatusPayload::Exit(reason));
                return out;
            }
            if next > horizon {
                return out;
            }
            t = next;
            if hu_until == Some(t) {
                hu_until = None;
                push(&mut out, t, StatusPayload::Urgency(Urgency::Transplantable));
                continue;
            }
            if nt_until == Some(t) {
                nt_until = None;
                push(&mut out, t, StatusPayload::Urgency(Urgency::Transplantable));
                continue;
            }
            b = self.step(rng, b);
            push(&mut out, t, StatusPayload::Biomarker(b));
            if hu_until.is_none() && rng.random::<f64>() < self.cfg.nt_probability {
                nt_until = Some(t.plus_days(rng.random_range(10.0..60.0)));
                push(&mut out, t, StatusPayload::Urgency(Urgency::NonTransplantable));
            }
        }
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Generates a bundle deterministically from `seed`.
pub fn generate_bundle(
    cfg: &GenConfig,
    centers: &CenterDirectory,
    catalog: &ExceptionCatalog,
    seed: u64,
) -> GeneratedBundle {
    let g = Generator::new(cfg, centers, catalog);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GeneratedBundle {
        donors: Vec::new(),
        registrations: Vec::new(),
        statuses: Vec::new(),
    };
    if g.countries.is_empty() {
        return out;
    }
    for (n, at) in arrivals(&mut rng, cfg.start, cfg.end, cfg.donors_per_day).into_iter().enumerate() {
        out.donors.push(g.donor(&mut rng, n, at));
    }
    let from = cfg.start.plus_days(-cfg.lead_in_days);
    for (n, at) in arrivals(&mut rng, from, cfg.end, cfg.registrations_per_day).into_iter().enumerate() {
        let reg = g.registration(&mut rng, n, at);
        let hu = rng.random::<f64>() < cfg.hu_fraction;
        out.statuses.extend(g.stream(&mut rng, &reg, cfg.end, hu));
        out.registrations.push(reg);
    }
    out
}

/// Re-registration pool: relistings of retransplant candidates with the
/// delay since their first transplant.
pub fn generate_pool(
    cfg: &GenConfig,
    centers: &CenterDirectory,
    catalog: &ExceptionCatalog,
    size: usize,
    seed: u64,
) -> (Vec<(CandidateRegistration, f64)>, Vec<StatusUpdate>) {
    let g = Generator::new(cfg, centers, catalog);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Timestamp::from_date(2010, 1, 1);
    let mut regs = Vec::new();
    let mut statuses = Vec::new();
    if g.countries.is_empty() {
        return (regs, statuses);
    }
    for n in 0..size {
        let listed = base.plus_days(rng.random_range(0.0..2000.0));
        let mut reg = g.registration(&mut rng, n, listed);
        reg.patient_id = format!("PP{n:05}");
        reg.registration_id = format!("PR{n:05}");
        reg.is_retransplant = true;
        let relist = if rng.random_bool(0.25) {
            rng.random_range(0.5..14.0)
        } else {
            (rng.random_range(14f64.ln()..2500f64.ln())).exp()
        };
        let relist = (relist * 10.0).round() / 10.0;
        statuses.extend(g.stream(&mut rng, &reg, listed.plus_days(730.0), relist <= 14.0));
        regs.push((reg, relist));
    }
    (regs, statuses)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

const REGISTRATION_HEADER: &str =
    "patient_id,registration_id,listed_at,country,center,blood_group,age_at_listing,weight_kg,sex,disease_group,is_retransplant\n";
const STATUS_HEADER: &str = "registration_id,at,kind,creatinine,bilirubin,inr,dialysis,sodium,exception_id,action,urgency,max_donor_age,accept_dcd,accept_split,accept_rescue_offer,min_donor_weight,max_donor_weight,exit_reason\n";

/// Writes donors.csv, registrations.csv and statuses.csv into `dir`.
pub fn write_bundle(bundle: &GeneratedBundle, dir: &Path) -> Result<()> {
    use std::io::Write;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut w = create(&dir.join("donors.csv"))?;
    if bundle.donors.is_empty() {
        writeln!(w, "{}", io::DONOR_COLUMNS.join(","))?;
    } else {
        io::write_donors(&mut w, &bundle.donors)?;
    }
    w.flush()?;
    let mut w = create(&dir.join("registrations.csv"))?;
    if bundle.registrations.is_empty() {
        w.write_all(REGISTRATION_HEADER.as_bytes())?;
    } else {
        io::write_registrations(&mut w, bundle.registrations.iter().map(|r| (r, None)))?;
    }
    w.flush()?;
    let mut w = create(&dir.join("statuses.csv"))?;
    if bundle.statuses.is_empty() {
        w.write_all(STATUS_HEADER.as_bytes())?;
    } else {
        io::write_statuses(&mut w, &bundle.statuses)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_pool(regs: &[(CandidateRegistration, f64)], statuses: &[StatusUpdate], dir: &Path) -> Result<()> {
    use std::io::Write;
    std::fs::create_dir_all(dir)?;
    let mut w = create(&dir.join("pool_registrations.csv"))?;
    io::write_registrations(&mut w, regs.iter().map(|(r, d)| (r, Some(*d))))?;
    w.flush()?;
    let mut w = create(&dir.join("pool_statuses.csv"))?;
    io::write_statuses(&mut w, statuses)?;
    w.flush()?;
    Ok(())
}
