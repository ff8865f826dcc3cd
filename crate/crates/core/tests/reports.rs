//! Report emission and config handling through the public `bench` API.

use std::collections::BTreeMap;
use std::path::Path;

use qfin_core::bench::{emit_report, load_report, Cell, Report, ReportFormat, RunConfig, Study, Table};
use qfin_core::Error;

fn sample_report() -> Report {
    let mut table = Table::new(&["Ticker", "Model", "MSE", "DM", "Trades", "Ok"]);
    table.push(vec![
        "SYNA".into(),
        "garch".into(),
        Cell::from(3.25e-9),
        Cell::from(f64::NAN),
        Cell::from(12usize),
        Cell::Bool(true),
    ]);
    table.push(vec![
        "SYNB".into(),
        "svr_rbf".into(),
        Cell::from(0.123456),
        Cell::from(-1.5),
        Cell::from(0usize),
        Cell::Bool(false),
    ]);
    Report {
        study: Study::Volatility,
        config_hash: "ab".repeat(32),
        seeds: BTreeMap::from([("seed".to_string(), 11)]),
        table,
        details: serde_json::json!({ "note": "x" }),
    }
}

#[test]
fn csv_layout_and_number_format() {
    let dir = tempfile::tempdir().unwrap();
    let path = emit_report(&sample_report(), dir.path(), "vol", ReportFormat::Csv).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# study: volatility");
    assert_eq!(lines[1], format!("# config_sha256: {}", "ab".repeat(32)));
    assert_eq!(lines[2], "# seed: 11");
    assert_eq!(lines[3], "Ticker,Model,MSE,DM,Trades,Ok");
    assert_eq!(lines[4], "SYNA,garch,3.2500e-9,,12,true");
    assert_eq!(lines[5], "SYNB,svr_rbf,0.1235,-1.5000,0,false");
}

#[test]
fn json_round_trips_at_full_precision() {
    let dir = tempfile::tempdir().unwrap();
    let report = sample_report();
    let path = emit_report(&report, dir.path(), "vol", ReportFormat::Json).unwrap();
    assert_eq!(load_report(&path).unwrap(), report);
}

#[test]
fn empty_reports_are_rejected() {
    let mut report = sample_report();
    report.table.rows.clear();
    let dir = tempfile::tempdir().unwrap();
    assert!(emit_report(&report, dir.path(), "vol", ReportFormat::Csv).is_err());
}

#[test]
fn config_hash_ignores_output_but_not_seed() {
    let text = "study = \"volatility\"\nseed = 4\n[data]\ndir = \"d\"\ntickers = [\"SYNA\"]\n";
    let a = RunConfig::from_toml_str(text, Path::new(".")).unwrap();
    let mut b = a.clone();
    b.output = "elsewhere".into();
    assert_eq!(a.hash(), b.hash());
    b.seed = 5;
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn unknown_keys_and_bad_values_are_config_errors() {
    let unknown = "study = \"trade\"\nseed = 1\nwhat = 2\n";
    assert!(matches!(
        RunConfig::from_toml_str(unknown, Path::new(".")),
        Err(Error::Config(_))
    ));
    let bad = "study = \"classify\"\nseed = 1\n[classify]\nfolds = 1\n";
    let cfg = RunConfig::from_toml_str(bad, Path::new("."));
    assert!(matches!(cfg.and_then(|c| c.validate()), Err(Error::Config(_))));
}
