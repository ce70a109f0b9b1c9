use std::fs;
use std::path::Path;

use anyhow::anyhow;
use horl_lab::config::{validate_config, ExperimentConfig};
use horl_lab::experiments::CellOutput;
use horl_lab::report::Metrics;
use horl_lab::runner::{read_cell_records, run_experiment, run_with, CellStatus};
use serde_json::Value;

const SMALL_CHAIN: &str = r#"{
  "schema_version": 1,
  "kind": "skill-length-sweep",
  "task": {"type": "chain", "length": 6, "slip": 0.1, "noise": 0.1, "gamma": 0.9},
  "c_list": [1, 2, 3],
  "n_list": [40],
  "seeds": {"start": 0, "count": 4},
  "master_seed": 9,
  "pevi": {"constant": 0.001},
  "skills": {"smoothing": 0.001}
}"#;

const SMALL_TV: &str = r#"{
  "schema_version": 1,
  "kind": "tv-audit",
  "task": {"type": "random-chains", "max_states": 5, "max_c": 3},
  "seeds": {"start": 0, "count": 12}
}"#;

fn parse(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(text).unwrap()
}

fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn repeated_runs_are_byte_identical() {
    for text in [SMALL_CHAIN, SMALL_TV] {
        let tmp = tempfile::tempdir().unwrap();
        let mut config = parse(text);
        config.workers = Some(3);
        run_experiment(&config, &tmp.path().join("a")).unwrap();
        run_experiment(&config, &tmp.path().join("b")).unwrap();
        let a = outputs(&tmp.path().join("a"));
        assert!(a.iter().any(|(name, _)| name == "cells.csv"));
        assert!(a.iter().any(|(name, _)| name.ends_with(".svg")));
        assert_eq!(a, outputs(&tmp.path().join("b")));
        let cells = read_cell_records(&tmp.path().join("a")).unwrap();
        assert_eq!(cells.len(), config.seed_list().len() * config.c_list.len().max(1) * config.n_list.len().max(1));
    }
}

#[test]
fn results_do_not_depend_on_the_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = parse(SMALL_CHAIN);
    config.workers = Some(1);
    run_experiment(&config, &tmp.path().join("a")).unwrap();
    config.workers = Some(4);
    run_experiment(&config, &tmp.path().join("b")).unwrap();
    for name in ["cells.csv", "summary.csv", "cells/cell_0007.json"] {
        let read = |run: &str| fs::read(tmp.path().join(run).join(name)).unwrap();
        assert_eq!(read("a"), read("b"), "{name}");
    }
}

#[test]
fn summary_and_plots_carry_the_sweep_numbers() {
    let tmp = tempfile::tempdir().unwrap();
    let config = parse(SMALL_CHAIN);
    let summary = run_experiment(&config, tmp.path()).unwrap();
    assert_eq!((summary.cells, summary.failed), (12, 0));
    let csv = fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    assert!(csv.starts_with("c,n,cells,median_subopt"));
    assert_eq!(csv.lines().count(), 4);
    let svg = fs::read_to_string(tmp.path().join("subopt.svg")).unwrap();
    assert!(svg.contains(&format!("<!-- config sha256 {} -->", config.hash())));
    let report: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["kind"], "skill-length-sweep");
    assert!(report["fits"]["first_median_subopt"].is_number());
    let saved = validate_config(&tmp.path().join("config.json")).unwrap();
    assert_eq!(saved, config);
}

#[test]
fn failing_cells_are_recorded_and_the_rest_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let config = parse(SMALL_TV);
    let summary = run_with(&config, tmp.path(), |cell| match cell.index {
        3 => Err(anyhow!("synthetic failure")),
        5 => panic!("synthetic panic"),
        _ => {
            let mut metrics = Metrics::new();
            for key in ["lhs", "rhs", "epsilon", "holds", "states", "c"] {
                metrics.set(key, 1.0);
            }
            Ok(CellOutput { metrics, detail: Value::Null })
        }
    })
    .unwrap();
    assert_eq!((summary.cells, summary.failed), (12, 2));
    assert!(!summary.all_succeeded());
    let records = read_cell_records(tmp.path()).unwrap();
    assert_eq!(records.len(), 12);
    assert_eq!(records[3].status, CellStatus::Failed);
    assert_eq!(records[3].error.as_deref(), Some("synthetic failure"));
    assert_eq!(records[5].error.as_deref(), Some("synthetic panic"));
    assert!(records.iter().filter(|r| r.status == CellStatus::Ok).count() == 10);
    let report: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["failed"], 2);
    assert_eq!(report["failures"][0]["index"], 3);
    assert_eq!(report["fits"]["instances"], 10.0);
    assert!(!tmp.path().join("cells").join("cell_0003.tmp").exists());
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut count = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        validate_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        count += 1;
    }
    assert!(count >= 7);
}
