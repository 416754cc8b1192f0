//! Post-transplant outcomes: time to failure, time to relisting, and the
//! synthetic re-registration that brings a failing recipient back onto the
//! waiting list.

use std::collections::BTreeMap;
use std::io::Read;

use serde::Deserialize;

use crate::covariates::{LinearPredictor, ScoringContext};
use crate::error::{ConfigError, SimError};
use crate::exceptions::ExceptionCatalog;
use crate::model::{CandidateRegistration, Country, StatusPayload, StatusUpdate, TierClass};
use crate::time::{Timestamp, SECONDS_PER_DAY};

/// Relisting within this many days of transplantation makes the
/// re-registration eligible for high urgency.
pub const HU_RELIST_DAYS: f64 = 14.0;
pub const NEAREST_MATCHES: usize = 5;

/// Weibull time to death or retransplantation. Shapes are per group and
/// optionally per country; the scale is the linear predictor itself.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeibullModel {
    shapes: BTreeMap<(TierClass, Option<Country>), f64>,
    scales: BTreeMap<TierClass, LinearPredictor>,
}

impl WeibullModel {
    pub fn new(
        shapes: BTreeMap<(TierClass, Option<Country>), f64>,
        scales: BTreeMap<TierClass, LinearPredictor>,
    ) -> Result<Self, ConfigError> {
        for ((group, country), k) in &shapes {
            if !(k.is_finite() && *k > 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "weibull shape for {group}/{country:?} must be positive, got {k}"
                )));
            }
        }
        for group in [TierClass::HuAco, TierClass::Elective] {
            let Some(lp) = scales.get(&group) else {
                return Err(ConfigError::MissingSelector(format!("weibull scale {group}")));
            };
            if lp.intercept <= 0.0 {
                return Err(ConfigError::Invalid(format!(
                    "weibull scale intercept for {group} must be positive"
                )));
            }
            let has_shape = shapes.keys().any(|(g, _)| *g == group);
            if !has_shape {
                return Err(ConfigError::MissingSelector(format!("weibull shape {group}")));
            }
        }
        Ok(WeibullModel { shapes, scales })
    }

    pub fn shape(&self, group: TierClass, country: Country) -> Option<f64> {
        self.shapes
            .get(&(group, Some(country)))
            .or_else(|| self.shapes.get(&(group, None)))
            .copied()
    }

    pub fn scale(&self, group: TierClass, ctx: &ScoringContext<'_>) -> Result<f64, SimError> {
        let lambda = self.scales[&group].eval(ctx);
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(SimError::Parameter(format!(
                "weibull scale {lambda} is not positive"
            )));
        }
        Ok(lambda)
    }

    /// Failure time in days for a recipient of the given group.
    pub fn sample(
        &self,
        group: TierClass,
        ctx: &ScoringContext<'_>,
        u: f64,
    ) -> Result<f64, SimError> {
        let k = self.shape(group, ctx.center_country).ok_or_else(|| {
            SimError::Parameter(format!(
                "no weibull shape for {group}/{}",
                ctx.center_country
            ))
        })?;
        Ok(weibull_inverse(self.scale(group, ctx)?, k, u))
    }

    /// Reads rows of group, country, shape; a blank or `*` country applies
    /// to every country without its own row.
    pub fn shapes_from_csv(
        reader: impl Read,
    ) -> Result<BTreeMap<(TierClass, Option<Country>), f64>, ConfigError> {
        #[derive(Deserialize)]
        struct Row {
            group: String,
            country: String,
            shape: f64,
        }
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut out = BTreeMap::new();
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let wrap = |e: String| ConfigError::Invalid(format!("row {}: {e}", i + 1));
            let row = row.map_err(|e| wrap(e.to_string()))?;
            let group: TierClass = row.group.parse().map_err(|e| wrap(format!("{e}")))?;
            let country = match row.country.as_str() {
                "" | "*" => None,
                c => Some(c.parse::<Country>().map_err(|e| wrap(format!("{e}")))?),
            };
            out.insert((group, country), row.shape);
        }
        Ok(out)
    }

    /// Reads rows of group, covariate, kind, level, estimate.
    pub fn scales_from_csv(
        reader: impl Read,
    ) -> Result<BTreeMap<TierClass, LinearPredictor>, ConfigError> {
        #[derive(Deserialize)]
        struct Row {
            group: String,
            covariate: String,
            kind: String,
            level: String,
            estimate: f64,
        }
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut out: BTreeMap<TierClass, LinearPredictor> = BTreeMap::new();
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let wrap = |e: String| ConfigError::Invalid(format!("row {}: {e}", i + 1));
            let row = row.map_err(|e| wrap(e.to_string()))?;
            let group: TierClass = row.group.parse().map_err(|e| wrap(format!("{e}")))?;
            out.entry(group)
                .or_default()
                .push_row(&row.covariate, &row.kind, &row.level, row.estimate)
                .map_err(|e| wrap(e.to_string()))?;
        }
        Ok(out)
    }
}

/// T = scale * (-ln u)^(1/shape).
pub fn weibull_inverse(scale: f64, shape: f64, u: f64) -> f64 {
    scale * (-u.ln()).powf(1.0 / shape)
}

pub fn weibull_survival(scale: f64, shape: f64, t: f64) -> f64 {
    (-(t / scale).powf(shape)).exp()
}

/// Default failure-time bucket bounds in days; the last bucket is open.
pub const DEFAULT_BUCKETS: [f64; 5] = [7.0, 30.0, 90.0, 365.0, 1825.0];

/// Step function P[R/T > t]: each point (t, s) holds from t onwards.
#[derive(Debug, Clone, PartialEq)]
pub struct RelistCurve {
    points: Vec<(f64, f64)>,
}

impl RelistCurve {
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self, ConfigError> {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut last = 1.0;
        for &(t, s) in &points {
            if !(0.0..1.0).contains(&t) {
                return Err(ConfigError::Invalid(format!(
                    "relisting curve time {t} outside [0, 1)"
                )));
            }
            if !(0.0..=last).contains(&s) {
                return Err(ConfigError::Invalid(
                    "relisting curve must be nonincreasing from 1".into(),
                ));
            }
            last = s;
        }
        Ok(RelistCurve { points })
    }

    /// Probability of never relisting.
    pub fn never_mass(&self) -> f64 {
        self.points.last().map_or(1.0, |p| p.1)
    }

    pub fn survival(&self, t: f64) -> f64 {
        self.points
            .iter()
            .take_while(|p| p.0 <= t)
            .last()
            .map_or(1.0, |p| p.1)
    }

    /// First t with P[R/T > t] at or below u, if any.
    pub fn inverse(&self, u: f64) -> Option<f64> {
        self.points.iter().find(|p| p.1 <= u).map(|p| p.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelistingCurves {
    /// Upper bounds of all but the last bucket, increasing.
    pub bounds: Vec<f64>,
    pub curves: Vec<RelistCurve>,
}

impl RelistingCurves {
    pub fn new(bounds: Vec<f64>, curves: Vec<RelistCurve>) -> Result<Self, ConfigError> {
        if curves.len() != bounds.len() + 1 {
            return Err(ConfigError::Invalid(format!(
                "{} relisting buckets need {} curves, got {}",
                bounds.len() + 1,
                bounds.len() + 1,
                curves.len()
            )));
        }
        if bounds.windows(2).any(|w| w[0] >= w[1]) || bounds.iter().any(|b| *b <= 0.0) {
            return Err(ConfigError::Invalid("relisting bucket bounds must increase".into()));
        }
        Ok(RelistingCurves { bounds, curves })
    }

    pub fn bucket(&self, failure_days: f64) -> usize {
        self.bounds.iter().take_while(|b| failure_days > **b).count()
    }

    /// Days to relisting, or `None` for a post-transplant death.
    pub fn sample_relist_time(&self, failure_days: f64, u: f64) -> Option<f64> {
        let t = self.curves[self.bucket(failure_days)].inverse(u)?;
        Some(t * failure_days)
    }

    /// Reads rows of bucket, t, survival. `bucket` is the bucket's upper
    /// bound in days, `inf` for the last one.
    pub fn from_csv(reader: impl Read) -> Result<Self, ConfigError> {
        #[derive(Deserialize)]
        struct Row {
            bucket: String,
            t: f64,
            survival: f64,
        }
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut grouped: Vec<(f64, Vec<(f64, f64)>)> = Vec::new();
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let wrap = |e: String| ConfigError::Invalid(format!("row {}: {e}", i + 1));
            let row = row.map_err(|e| wrap(e.to_string()))?;
            let bound = match row.bucket.as_str() {
                "inf" => f64::INFINITY,
                b => b.parse::<f64>().map_err(|e| wrap(e.to_string()))?,
            };
            match grouped.iter_mut().find(|g| g.0 == bound) {
                Some(g) => g.1.push((row.t, row.survival)),
                None => grouped.push((bound, vec![(row.t, row.survival)])),
            }
        }
        grouped.sort_by(|a, b| a.0.total_cmp(&b.0));
        if grouped.last().is_none_or(|g| g.0 != f64::INFINITY) {
            return Err(ConfigError::Invalid("relisting curves need an `inf` bucket".into()));
        }
        let bounds = grouped[..grouped.len() - 1].iter().map(|g| g.0).collect();
        let curves = grouped
            .into_iter()
            .map(|g| RelistCurve::new(g.1))
            .collect::<Result<_, _>>()?;
        Self::new(bounds, curves)
    }
}

/// A real re-registration the synthetic ones copy their statuses from.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolRelisting {
    pub registration: CandidateRegistration,
    pub statuses: Vec<StatusUpdate>,
    /// Days from the previous transplant to this listing.
    pub relist_days: f64,
    /// Relisting time plus time from listing to the last status.
    pub event_days: f64,
}

impl PoolRelisting {
    pub fn new(registration: CandidateRegistration, statuses: Vec<StatusUpdate>, relist_days: f64) -> Self {
        let listed = registration.listed_at;
        let end = statuses.last().map_or(listed, |s| s.at);
        PoolRelisting {
            event_days: relist_days + end.days_since(listed),
            registration,
            statuses,
            relist_days,
        }
    }

    pub fn hu_eligible(&self) -> bool {
        self.relist_days <= HU_RELIST_DAYS
    }
}

/// Which filters were relaxed to find a match.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolRelaxation {
    None,
    Country,
    CountryAndAge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRelisting {
    pub registration: CandidateRegistration,
    pub statuses: Vec<StatusUpdate>,
    pub source: String,
    pub relaxation: PoolRelaxation,
}

/// Indices of the pool entries passing the filters at a relaxation level.
pub fn eligible_pool(
    pool: &[PoolRelisting],
    country: Country,
    age: f64,
    relist_days: f64,
    failure_days: f64,
    relaxation: PoolRelaxation,
) -> Vec<usize> {
    let hu = relist_days <= HU_RELIST_DAYS;
    pool.iter()
        .enumerate()
        .filter(|(_, p)| {
            p.hu_eligible() == hu
                && (p.relist_days - relist_days).abs() < 365.0
                && (p.event_days - failure_days).abs() < 365.0
                && (relaxation != PoolRelaxation::None || p.registration.country == country)
                && (relaxation == PoolRelaxation::CountryAndAge
                    || (p.registration.age_at_listing - age).abs() < 20.0)
        })
        .map(|(i, _)| i)
        .collect()
}

/// Squared Mahalanobis distances from `target` to each point, using the
/// sample covariance of the points. A singular covariance falls back to
/// Euclidean distance scaled by the per-axis variances.
pub fn mahalanobis_sq(points: &[(f64, f64)], target: (f64, f64)) -> Vec<f64> {
    let n = points.len() as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    if points.len() > 1 {
        let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
        let my = points.iter().map(|p| p.1).sum::<f64>() / n;
        for p in points {
            sxx += (p.0 - mx) * (p.0 - mx);
            syy += (p.1 - my) * (p.1 - my);
            sxy += (p.0 - mx) * (p.1 - my);
        }
        sxx /= n - 1.0;
        syy /= n - 1.0;
        sxy /= n - 1.0;
    }
    let det = sxx * syy - sxy * sxy;
    let scale = sxx.max(syy).max(1.0);
    let singular = det <= 1e-9 * scale * scale;
    points
        .iter()
        .map(|p| {
            let dx = p.0 - target.0;
            let dy = p.1 - target.1;
            if singular {
                let vx = if sxx > 0.0 { sxx } else { 1.0 };
                let vy = if syy > 0.0 { syy } else { 1.0 };
                dx * dx / vx + dy * dy / vy
            } else {
                (syy * dx * dx - 2.0 * sxy * dx * dy + sxx * dy * dy) / det
            }
        })
        .collect()
}

/// Builds a re-registration for a recipient relisting `relist_days` after
/// `transplanted_at`, or `None` when no pool entry matches even after
/// relaxing country and age. `u` picks among the nearest matches.
#[allow(clippy::too_many_arguments)]
pub fn build_synthetic_reregistration(
    recipient: &CandidateRegistration,
    transplanted_at: Timestamp,
    relist_days: f64,
    failure_days: f64,
    pool: &[PoolRelisting],
    catalog: &ExceptionCatalog,
    u: f64,
) -> Option<SyntheticRelisting> {
    let age = recipient.age_at(transplanted_at);
    let (relaxation, candidates) = [
        PoolRelaxation::None,
        PoolRelaxation::Country,
        PoolRelaxation::CountryAndAge,
    ]
    .into_iter()
    .map(|r| {
        (
            r,
            eligible_pool(pool, recipient.country, age, relist_days, failure_days, r),
        )
    })
    .find(|(_, c)| !c.is_empty())?;

    let points: Vec<(f64, f64)> = candidates
        .iter()
        .map(|&i| (pool[i].relist_days, pool[i].event_days))
        .collect();
    let dist = mahalanobis_sq(&points, (relist_days, failure_days));
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        dist[a]
            .total_cmp(&dist[b])
            .then_with(|| pool[candidates[a]].registration.registration_id.cmp(&pool[candidates[b]].registration.registration_id))
    });
    order.truncate(NEAREST_MATCHES);
    let pick = ((u * order.len() as f64) as usize).min(order.len() - 1);
    let source = &pool[candidates[order[pick]]];

    let listed_at = transplanted_at + (relist_days * SECONDS_PER_DAY as f64).round() as i64;
    let registration_id = format!("{}-re", recipient.registration_id);
    let registration = CandidateRegistration {
        registration_id: registration_id.clone(),
        listed_at,
        age_at_listing: recipient.age_at(listed_at),
        is_retransplant: true,
        ..recipient.clone()
    };
    let offset = listed_at.seconds() - source.registration.listed_at.seconds();
    let statuses = source
        .statuses
        .iter()
        .filter(|s| match &s.payload {
            StatusPayload::Profile(_) => false,
            StatusPayload::Exception { exception_id, .. } => catalog
                .get(exception_id)
                .is_some_and(|d| d.country == recipient.country),
            _ => true,
        })
        .map(|s| StatusUpdate {
            registration_id: registration_id.clone(),
            at: s.at + offset,
            payload: s.payload.clone(),
        })
        .collect();
    Some(SyntheticRelisting {
        registration,
        statuses,
        source: source.registration.registration_id.clone(),
        relaxation,
    })
}
