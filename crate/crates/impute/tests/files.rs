//! Completing streams read from files and feeding the result back into
//! the simulator's loader.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use elas_core::exceptions::ExceptionCatalog;
use elas_core::ingest::{load_bundle, BundlePaths, Window};
use elas_core::io;
use elas_core::time::Timestamp;
use elas_impute::{complete_stream, read_cases, read_landmarks, ImputationInput, MatchConfig};

const STATUS_HEADER: &str = "registration_id,at,kind,creatinine,bilirubin,inr,dialysis,sodium,exception_id,action,urgency,max_donor_age,accept_dcd,accept_split,accept_rescue_offer,min_donor_weight,max_donor_weight,exit_reason";
const ATTRIBUTE_HEADER: &str =
    "eta,pediatric,retransplant,urgency,exception_group,disease_group,urgency_reason,dialysis,country,lab_meld,age,exception_meld";

fn date(day: u32) -> String {
    Timestamp::from_date(2015, 1, 1).plus_days(f64::from(day)).to_string()
}

fn attributes(eta: f64, lab: f64, age: f64) -> String {
    format!("{eta},false,false,T,none,cirrhosis,,false,DE,{lab},{age},")
}

/// Sixty waitlisted members who all leave the list, and four
/// registrations transplanted `censor` days after listing.
fn write_inputs(dir: &Path) {
    let mut regs = String::from(
        "patient_id,registration_id,listed_at,country,center,blood_group,age_at_listing,weight_kg,sex,disease_group,is_retransplant\n",
    );
    let mut statuses = format!("{STATUS_HEADER}\n");
    let mut landmarks = format!("registration_id,days,{ATTRIBUTE_HEADER},ipcw_weight\n");
    let mut cases = format!("registration_id,censor_days,{ATTRIBUTE_HEADER}\n");
    for i in 0..60u32 {
        let id = format!("M{i:02}");
        let listed = i * 3;
        let stay = 15 + (i * 37) % 200;
        let reason = if i % 3 == 0 { "R" } else { "D" };
        writeln!(regs, "P{id},{id},{},DE,DEBTP,O,{},80,F,cirrhosis,false", date(listed), 40 + i % 25).unwrap();
        writeln!(statuses, "{id},{},BIOMARKER,1.1,{},1.3,false,,,,,,,,,,,", date(listed), 1.5 + f64::from(i % 7)).unwrap();
        writeln!(statuses, "{id},{},BIOMARKER,1.4,{},1.5,false,,,,,,,,,,,", date(listed + stay / 2), 2.5 + f64::from(i % 5))
            .unwrap();
        writeln!(statuses, "{id},{},EXIT,,,,,,,,,,,,,,,{reason}", date(listed + stay)).unwrap();
        let eta = 2.0 + f64::from(i % 4) * 0.1;
        writeln!(landmarks, "{id},0,{},{}", attributes(eta, 18.0 + f64::from(i % 5), 50.0), 1.0 + f64::from(i % 3))
            .unwrap();
    }
    for (k, censor) in [10u32, 25, 40, 80].iter().enumerate() {
        let id = format!("T{k}");
        let listed = 30 + 20 * k as u32;
        writeln!(regs, "P{id},{id},{},DE,DEBTP,O,50,80,M,cirrhosis,false", date(listed)).unwrap();
        writeln!(statuses, "{id},{},BIOMARKER,1.2,3.0,1.4,false,,,,,,,,,,,", date(listed)).unwrap();
        writeln!(cases, "{id},{censor},{}", attributes(2.1, 19.0, 50.0)).unwrap();
    }
    fs::write(dir.join("registrations.csv"), regs).unwrap();
    fs::write(dir.join("statuses.csv"), statuses).unwrap();
    fs::write(dir.join("landmarks.csv"), landmarks).unwrap();
    fs::write(dir.join("cases.csv"), cases).unwrap();
    fs::write(dir.join("donors.csv"), io::DONOR_COLUMNS.join(",") + "\n").unwrap();
}

fn input(dir: &Path) -> ImputationInput {
    let open = |name: &str| io::open(&dir.join(name)).unwrap();
    let regs = io::read_registrations(open("registrations.csv"), &dir.join("registrations.csv"))
        .unwrap()
        .into_iter()
        .map(|(r, _)| r)
        .collect();
    let statuses = io::read_statuses(open("statuses.csv"), &dir.join("statuses.csv")).unwrap();
    let cases = read_cases(open("cases.csv"), &dir.join("cases.csv")).unwrap();
    let landmarks = read_landmarks(open("landmarks.csv"), &dir.join("landmarks.csv")).unwrap();
    ImputationInput::new(regs, statuses, cases, landmarks).unwrap()
}

#[test]
fn completed_streams_load_as_simulator_input() {
    let tmp = tempfile::tempdir().unwrap();
    write_inputs(tmp.path());
    let input = input(tmp.path());
    assert_eq!(input.case_count(), 4);
    let catalog = ExceptionCatalog::default();

    let out = complete_stream(&input, &catalog, &MatchConfig::default(), 5).unwrap();
    assert_eq!(out.cases.len(), 4);
    for rep in &out.cases {
        assert!(!rep.unmatchable, "{rep:?}");
        assert!(rep.risk_set_size > 0);
    }

    let completed = tmp.path().join("completed");
    fs::create_dir(&completed).unwrap();
    io::write_statuses(fs::File::create(completed.join("statuses.csv")).unwrap(), &out.statuses).unwrap();
    let paths = BundlePaths {
        statuses: completed.join("statuses.csv"),
        ..BundlePaths::in_dir(tmp.path())
    };
    let window = Window::new(Timestamp::from_date(2015, 1, 1), Timestamp::from_date(2016, 6, 1)).unwrap();
    let bundle = load_bundle(&paths, window, &catalog).unwrap();
    for (id, stream) in &bundle.statuses {
        assert!(stream.last().unwrap().is_exit(), "{id} still open after completion");
    }

    let again = complete_stream(&input, &catalog, &MatchConfig::default(), 5).unwrap();
    assert_eq!(out.statuses, again.statuses);
    let sources = |seed| -> Vec<String> {
        let c = complete_stream(&input, &catalog, &MatchConfig::default(), seed).unwrap();
        c.cases.into_iter().map(|r| r.source).collect()
    };
    let first = sources(0);
    assert!((1..20).any(|seed| sources(seed) != first), "seed never changes the selection");
}
