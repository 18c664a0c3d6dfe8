//! CSV and JSON artifacts.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiments::protocols::{AblationRow, ConvergenceReport, HorizonRow, LookbackPoint, RowStatus};
use crate::experiments::reference::{reference_for, ReferencePoint};
use crate::experiments::runner::{BaselineMetrics, ResultRow, RunOutcome};
use crate::experiments::spec::{derive_seed, ExperimentSpec, SEED_ADAPTERS, SEED_DATA, SEED_FEDERATION, SEED_MODEL, SEED_PRETRAIN};
use crate::federation::{ledger_report, LedgerReport};
use crate::model::ParamCounts;

pub const RESULT_HEADER: [&str; 12] = [
    "dataset",
    "L",
    "T",
    "mode",
    "clustering",
    "peft",
    "seed",
    "mse",
    "mae",
    "rounds",
    "uplink_bytes",
    "downlink_bytes",
];

fn result_fields(r: &ResultRow) -> [String; 12] {
    [
        r.dataset.clone(),
        r.lookback.to_string(),
        r.horizon.to_string(),
        r.mode.clone(),
        r.clustering.to_string(),
        r.peft.to_string(),
        r.seed.to_string(),
        r.mse.to_string(),
        r.mae.to_string(),
        r.rounds.to_string(),
        r.uplink_bytes.to_string(),
        r.downlink_bytes.to_string(),
    ]
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_results_csv(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULT_HEADER)?;
    for r in rows {
        w.write_record(result_fields(r))?;
    }
    finish(w, path)
}

/// Results schema plus `label`, `status` and `note` columns; rows that did
/// not run leave the metric columns empty.
fn write_status_csv<'a>(
    label_name: &str,
    rows: impl Iterator<Item = (String, &'a RowStatus)>,
    path: &Path,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![label_name, "status"];
    header.extend(RESULT_HEADER);
    header.push("note");
    w.write_record(&header)?;
    for (label, status) in rows {
        let mut rec = vec![label];
        match status {
            RowStatus::Ok { row } => {
                rec.push("ok".into());
                rec.extend(result_fields(row));
                rec.push(String::new());
            }
            RowStatus::Infeasible { reason } => {
                rec.push("infeasible".into());
                rec.extend(std::iter::repeat_n(String::new(), RESULT_HEADER.len()));
                rec.push(reason.clone());
            }
            RowStatus::Failed { error } => {
                rec.push("failed".into());
                rec.extend(std::iter::repeat_n(String::new(), RESULT_HEADER.len()));
                rec.push(error.clone());
            }
        }
        w.write_record(&rec)?;
    }
    finish(w, path)
}

/// Horizon table with the reference numbers alongside.
pub fn write_horizon_csv(rows: &[HorizonRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["status"];
    header.extend(RESULT_HEADER);
    header.extend(["reference_mse", "reference_mae", "reference_flag", "note"]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec: Vec<String> = Vec::new();
        let note = match &r.status {
            RowStatus::Ok { row } => {
                rec.push("ok".into());
                rec.extend(result_fields(row));
                String::new()
            }
            RowStatus::Infeasible { reason } => {
                rec.push("infeasible".into());
                rec.extend(std::iter::repeat_n(String::new(), RESULT_HEADER.len()));
                reason.clone()
            }
            RowStatus::Failed { error } => {
                rec.push("failed".into());
                rec.extend(std::iter::repeat_n(String::new(), RESULT_HEADER.len()));
                error.clone()
            }
        };
        if rec[3].is_empty() {
            rec[3] = r.horizon.to_string();
        }
        let refp = r.reference;
        rec.push(refp.map_or(String::new(), |p| p.mse.to_string()));
        rec.push(refp.map_or(String::new(), |p| p.mae.to_string()));
        rec.push(refp.and_then(|p| p.flag).unwrap_or("").to_string());
        rec.push(note);
        w.write_record(&rec)?;
    }
    finish(w, path)
}

pub fn write_sweep_csv(points: &[LookbackPoint], path: impl AsRef<Path>) -> Result<()> {
    write_status_csv(
        "lookback",
        points.iter().map(|p| (p.lookback.to_string(), &p.status)),
        path.as_ref(),
    )
}

pub fn write_ablation_csv(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    write_status_csv(
        "variant",
        rows.iter().map(|r| (r.variant.label().to_string(), &r.status)),
        path.as_ref(),
    )
}

pub fn write_convergence_csv(report: &ConvergenceReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "federated_mse", "centralized_mse"])?;
    let n = report.federated_mse.len().max(report.centralized_mse.len());
    let cell = |v: Option<&f64>| v.map_or(String::new(), |x| x.to_string());
    for i in 0..n {
        w.write_record([
            (i + 1).to_string(),
            cell(report.federated_mse.get(i)),
            cell(report.centralized_mse.get(i)),
        ])?;
    }
    finish(w, path)
}

/// Communication summary: the ledger totals per payload mode next to the
/// parameter byte ratio the serializer implies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommReport {
    pub ledger: LedgerReport,
    pub counts: ParamCounts,
    pub total_param_bytes: usize,
    pub trainable_param_bytes: usize,
    /// `total_param_bytes / trainable_param_bytes`.
    pub param_byte_ratio: f64,
}

pub fn comm_report(outcome: &RunOutcome) -> Result<CommReport> {
    let ledger = outcome
        .ledger
        .as_ref()
        .ok_or_else(|| Error::config("mode", "communication reports need a federated run"))?;
    let counts = outcome.base.counts();
    let total = crate::model::checkpoint::full_payload(&outcome.base).len();
    let trainable = crate::model::checkpoint::trainable_payload(&outcome.base).len();
    Ok(CommReport {
        ledger: ledger_report(ledger),
        counts,
        total_param_bytes: total,
        trainable_param_bytes: trainable,
        param_byte_ratio: total as f64 / trainable as f64,
    })
}

pub fn write_comm_csv(report: &CommReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "payload",
        "rounds",
        "messages",
        "uplink_bytes",
        "downlink_bytes",
        "total_bytes",
        "ratio",
        "param_byte_ratio",
    ])?;
    let actual = report.ledger.rows.first().map_or(0, |r| r.total_bytes);
    for r in &report.ledger.rows {
        let ratio = if actual > 0 { r.total_bytes as f64 / actual as f64 } else { f64::NAN };
        w.write_record([
            r.mode.label().to_string(),
            r.rounds.to_string(),
            r.messages.to_string(),
            r.uplink_bytes.to_string(),
            r.downlink_bytes.to_string(),
            r.total_bytes.to_string(),
            ratio.to_string(),
            report.param_byte_ratio.to_string(),
        ])?;
    }
    finish(w, path)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Seeds {
    pub root: u64,
    pub model: u64,
    pub pretrain: u64,
    pub adapters: u64,
    pub federation: u64,
    pub data: u64,
}

impl Seeds {
    pub fn from_root(root: u64) -> Self {
        Self {
            root,
            model: derive_seed(root, SEED_MODEL),
            pretrain: derive_seed(root, SEED_PRETRAIN),
            adapters: derive_seed(root, SEED_ADAPTERS),
            federation: derive_seed(root, SEED_FEDERATION),
            data: derive_seed(root, SEED_DATA),
        }
    }
}

/// Self-describing record of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub version: &'static str,
    pub spec: ExperimentSpec,
    pub seeds: Seeds,
    pub result: ResultRow,
    pub counts: ParamCounts,
    pub assignments: Vec<usize>,
    pub baselines: Option<BaselineMetrics>,
    pub reference: Option<ReferencePoint>,
    pub pretrain_losses: Vec<f64>,
}

impl RunManifest {
    pub fn new(outcome: &RunOutcome, baselines: Option<BaselineMetrics>) -> Self {
        let spec = outcome.resolved.clone();
        Self {
            version: env!("CARGO_PKG_VERSION"),
            seeds: Seeds::from_root(spec.seed),
            reference: reference_for(&spec.dataset, spec.model.horizon),
            result: outcome.row.clone(),
            counts: outcome.base.counts(),
            assignments: outcome.assignments.clone(),
            baselines,
            pretrain_losses: outcome.pretrain_losses.clone(),
            spec,
        }
    }
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
