//! Run statistics, summaries over replications and paired comparisons.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use elas_core::engine::{CandidateRow, DiscardRow, TransplantRow};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Statistic name to value for one run.
pub type RunStatistics = BTreeMap<String, f64>;

pub const MELD_BANDS: [(f64, f64, &str); 4] =
    [(f64::NEG_INFINITY, 10.0, "6-10"), (10.0, 20.0, "11-20"), (20.0, 30.0, "21-30"), (30.0, f64::INFINITY, "31-40")];

pub fn meld_band(score: f64) -> &'static str {
    MELD_BANDS
        .iter()
        .find(|(_, hi, _)| score <= *hi)
        .map_or("31-40", |b| b.2)
}

fn bump(stats: &mut RunStatistics, key: String) {
    *stats.entry(key).or_insert(0.0) += 1.0;
}

/// Counts from one run's output rows. Every count a run could produce is
/// present, zero if nothing happened, so runs line up in summaries.
pub fn run_statistics(
    transplants: &[TransplantRow],
    discards: &[DiscardRow],
    candidates: &[CandidateRow],
) -> RunStatistics {
    let mut s = RunStatistics::new();
    let countries = ["AT", "BE", "DE", "HR", "HU", "LU", "NL", "SI"];
    for c in countries {
        s.insert(format!("transplants.country.{c}"), 0.0);
        s.insert(format!("waitlist_deaths.country.{c}"), 0.0);
    }
    for (_, _, b) in MELD_BANDS {
        s.insert(format!("transplants.match_meld.{b}"), 0.0);
        s.insert(format!("transplants.lab_meld.{b}"), 0.0);
        s.insert(format!("waitlist_deaths.lab_meld.{b}"), 0.0);
    }
    for k in ["none", "SE", "NSE", "PED"] {
        s.insert(format!("transplants.exception.{k}"), 0.0);
    }
    for k in ["patient", "center", "forced"] {
        s.insert(format!("transplants.mechanism.{k}"), 0.0);
    }
    for k in ["HU", "ACO", "elective"] {
        s.insert(format!("transplants.tier.{k}"), 0.0);
    }
    for k in ["local", "regional", "national", "international"] {
        s.insert(format!("transplants.geography.{k}"), 0.0);
    }
    for k in ["M", "F"] {
        s.insert(format!("transplants.sex.{k}"), 0.0);
    }
    for k in [
        "transplants.total",
        "transplants.pediatric",
        "transplants.split",
        "transplants.rescue",
        "transplants.retransplant_synthetic",
        "waitlist_deaths.total",
        "waitlist_deaths.hu_aco",
        "removals.total",
        "waitlist.final",
        "discards.total",
        "relistings.total",
    ] {
        s.insert(k.to_string(), 0.0);
    }

    for t in transplants {
        bump(&mut s, "transplants.total".into());
        bump(&mut s, format!("transplants.country.{}", t.recipient_country));
        bump(&mut s, format!("transplants.match_meld.{}", meld_band(t.match_meld)));
        bump(&mut s, format!("transplants.lab_meld.{}", meld_band(t.lab_meld)));
        bump(&mut s, format!("transplants.exception.{}", t.exception_kind));
        bump(&mut s, format!("transplants.mechanism.{}", t.mechanism));
        bump(&mut s, format!("transplants.tier.{}", t.tier));
        bump(&mut s, format!("transplants.geography.{}", t.geography));
        bump(&mut s, format!("transplants.sex.{}", t.sex));
        if t.pediatric {
            bump(&mut s, "transplants.pediatric".into());
        }
        if t.graft != "whole" {
            bump(&mut s, "transplants.split".into());
        }
        if t.rescue {
            bump(&mut s, "transplants.rescue".into());
        }
        if t.synthetic_recipient {
            bump(&mut s, "transplants.retransplant_synthetic".into());
        }
        if t.posttx_outcome == "relisted" {
            bump(&mut s, "relistings.total".into());
        }
    }
    for d in discards {
        let _ = d;
        bump(&mut s, "discards.total".into());
    }
    for c in candidates {
        match c.disposition.as_str() {
            "D" => {
                bump(&mut s, "waitlist_deaths.total".into());
                bump(&mut s, format!("waitlist_deaths.country.{}", c.country));
                bump(&mut s, format!("waitlist_deaths.lab_meld.{}", meld_band(c.lab_meld)));
                if c.urgency == "HU" || c.urgency == "ACO" {
                    bump(&mut s, "waitlist_deaths.hu_aco".into());
                }
            }
            "R" => bump(&mut s, "removals.total".into()),
            "waiting" => bump(&mut s, "waitlist.final".into()),
            _ => {}
        }
    }
    s
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.with_context(|| format!("{}: row {}", path.display(), i + 1)))
        .collect()
}

/// Recomputes a run's statistics from its output directory.
pub fn statistics_from_dir(dir: &Path) -> Result<RunStatistics> {
    let transplants: Vec<TransplantRow> = read_csv(&dir.join("transplants.csv"))?;
    let discards: Vec<DiscardRow> = read_csv(&dir.join("discards.csv"))?;
    let candidates: Vec<CandidateRow> = read_csv(&dir.join("candidates.csv"))?;
    Ok(run_statistics(&transplants, &discards, &candidates))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub statistic: String,
    pub mean: f64,
    pub p2_5: f64,
    pub p97_5: f64,
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(runs: &[RunStatistics]) -> Vec<SummaryRow> {
    let mut keys: Vec<&String> = runs.iter().flat_map(|r| r.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|k| {
            let mut v: Vec<f64> = runs.iter().map(|r| r.get(k).copied().unwrap_or(0.0)).collect();
            v.sort_by(f64::total_cmp);
            SummaryRow {
                statistic: k.clone(),
                mean: v.iter().sum::<f64>() / v.len() as f64,
                p2_5: quantile(&v, 0.025),
                p97_5: quantile(&v, 0.975),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedRow {
    pub statistic: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub mean_difference: f64,
    pub t: Option<f64>,
    pub p_value: Option<f64>,
    pub stars: String,
}

pub fn stars(p: f64) -> &'static str {
    match p {
        p if p < 0.001 => "***",
        p if p < 0.01 => "**",
        p if p < 0.05 => "*",
        _ => "",
    }
}

/// Paired t statistic and two-sided p-value on `runs - 1` degrees of
/// freedom. Identical samples give t = 0, p = 1; a nonzero constant
/// difference gives an infinite t and p = 0.
pub fn paired_t(diffs: &[f64]) -> Option<(f64, f64)> {
    let n = diffs.len();
    if n < 2 {
        return None;
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Some(if mean == 0.0 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Some((t, p))
}

/// Per-statistic paired differences b − a over runs with equal indices.
pub fn compare(a: &[RunStatistics], b: &[RunStatistics]) -> Vec<PairedRow> {
    assert_eq!(a.len(), b.len(), "paired comparison needs equal run counts");
    let mut keys: Vec<&String> = a.iter().chain(b).flat_map(|r| r.keys()).collect();
    keys.sort();
    keys.dedup();
    let n = a.len() as f64;
    keys.into_iter()
        .map(|k| {
            let get = |r: &RunStatistics| r.get(k).copied().unwrap_or(0.0);
            let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| get(y) - get(x)).collect();
            let test = paired_t(&diffs);
            PairedRow {
                statistic: k.clone(),
                mean_a: a.iter().map(get).sum::<f64>() / n,
                mean_b: b.iter().map(get).sum::<f64>() / n,
                mean_difference: diffs.iter().sum::<f64>() / n,
                t: test.map(|x| x.0),
                p_value: test.map(|x| x.1),
                stars: test.map_or("", |x| stars(x.1)).to_string(),
            }
        })
        .collect()
}

pub fn write_table<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
