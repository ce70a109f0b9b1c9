//! Parallel sweep execution with per-cell isolation and atomic output.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{ConfigLoadError, ExperimentConfig};
use crate::experiments::{plan_cells, prepare, run_cell, summarize, CellOutput, CellSpec, Finished};
use crate::report::{Cell, Metrics, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// Everything recorded about one cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRecord {
    #[serde(flatten)]
    pub spec: CellSpec,
    pub status: CellStatus,
    pub error: Option<String>,
    pub metrics: Metrics,
    pub detail: Value,
}

/// Outcome of a whole sweep.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub cells: usize,
    pub failed: usize,
    pub fits: Metrics,
}

impl RunSummary {
    pub fn all_succeeded(&self) -> bool {
        self.failed == 0
    }
}

/// Write through a temporary file and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "cell panicked".to_string()
    }
}

pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    config.validate().map_err(ConfigLoadError::Invalid)?;
    let shared = prepare(config)?;
    run_with(config, out_dir, |cell| run_cell(config, &shared, cell))
}

/// Run every planned cell through `body`. A failing or panicking cell is
/// recorded and the rest continue.
pub fn run_with<F>(config: &ExperimentConfig, out_dir: &Path, body: F) -> Result<RunSummary>
where
    F: Fn(&CellSpec) -> Result<CellOutput> + Sync,
{
    let cells_dir = out_dir.join("cells");
    fs::create_dir_all(&cells_dir).with_context(|| format!("creating {}", cells_dir.display()))?;
    write_atomic(&out_dir.join("config.json"), config.to_json().as_bytes())?;

    let plan = plan_cells(config);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.unwrap_or(0))
        .build()
        .context("building worker pool")?;
    let records: Vec<CellRecord> = pool.install(|| {
        plan.par_iter()
            .map(|spec| {
                let outcome = catch_unwind(AssertUnwindSafe(|| body(spec)))
                    .unwrap_or_else(|p| Err(anyhow!(panic_message(p))));
                let record = match outcome {
                    Ok(out) => CellRecord {
                        spec: *spec,
                        status: CellStatus::Ok,
                        error: None,
                        metrics: out.metrics,
                        detail: out.detail,
                    },
                    Err(e) => CellRecord {
                        spec: *spec,
                        status: CellStatus::Failed,
                        error: Some(format!("{e:#}")),
                        metrics: Metrics::new(),
                        detail: Value::Null,
                    },
                };
                let path = cells_dir.join(format!("cell_{:04}.json", spec.index));
                let text = serde_json::to_vec_pretty(&record).expect("cell record serializes");
                write_atomic(&path, &text).map(|_| record)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    write_atomic(&out_dir.join("cells.csv"), cells_table(&records).to_csv()?.as_bytes())?;

    let finished: Vec<Finished> = records
        .iter()
        .filter(|r| r.status == CellStatus::Ok)
        .map(|r| Finished {
            spec: &r.spec,
            metrics: &r.metrics,
        })
        .collect();
    let summary = summarize(config, &finished)?;
    write_atomic(&out_dir.join("summary.csv"), summary.table.to_csv()?.as_bytes())?;

    let hash = config.hash();
    let provenance = format!("config sha256 {hash}");
    for plot in &summary.plots {
        write_atomic(&out_dir.join(&plot.file), plot.to_svg(&provenance).as_bytes())?;
    }

    let failed: Vec<Value> = records
        .iter()
        .filter(|r| r.status == CellStatus::Failed)
        .map(|r| json!({ "index": r.spec.index, "c": r.spec.c, "n": r.spec.n, "seed": r.spec.seed, "error": r.error }))
        .collect();
    let fits = Metrics(summary.fits);
    let report = json!({
        "kind": config.kind.name(),
        "config_sha256": hash,
        "cells": records.len(),
        "failed": failed.len(),
        "failures": failed,
        "fits": fits,
        "plots": summary.plots.iter().map(|p| p.file.clone()).collect::<Vec<_>>(),
    });
    write_atomic(&out_dir.join("report.json"), serde_json::to_vec_pretty(&report)?.as_slice())?;

    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        cells: records.len(),
        failed: failed.len(),
        fits,
    })
}

/// One row per cell; metric columns are the union over all cells.
fn cells_table(records: &[CellRecord]) -> Table {
    let keys: BTreeSet<&str> = records.iter().flat_map(|r| r.metrics.0.keys().map(String::as_str)).collect();
    let mut columns = vec!["index", "c", "n", "seed", "ok"];
    columns.extend(keys.iter().copied());
    let mut table = Table::new(&columns);
    for r in records {
        let mut row: Vec<Cell> = vec![
            r.spec.index.into(),
            r.spec.c.into(),
            r.spec.n.into(),
            r.spec.seed.into(),
            usize::from(r.status == CellStatus::Ok).into(),
        ];
        row.extend(keys.iter().map(|k| Cell::from(r.metrics.get(k).unwrap_or(f64::NAN))));
        table.push(row);
    }
    table
}

/// Load every cell record written under `out_dir`, in index order.
pub fn read_cell_records(out_dir: &Path) -> Result<Vec<CellRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(out_dir.join("cells"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect()
}
