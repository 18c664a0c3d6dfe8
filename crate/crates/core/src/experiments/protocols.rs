//! Multi-run protocols: horizon tables, look-back sweeps, convergence
//! comparison and the three-variant ablation.

use serde::Serialize;

use crate::error::Result;
use crate::experiments::reference::{reference_for, ReferencePoint};
use crate::experiments::runner::{run_prepared, ResultRow, RunOutcome};
use crate::experiments::spec::{prepare, ExperimentSpec, Mode};
use crate::federation::{RoundReport, ServerKind};

/// Outcome of one row in a multi-run table. Failures are kept as text so a
/// single bad row never aborts the rest.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RowStatus {
    Ok { row: ResultRow },
    /// The configuration cannot be run on this data (too few rows).
    Infeasible { reason: String },
    Failed { error: String },
}

impl RowStatus {
    pub fn row(&self) -> Option<&ResultRow> {
        match self {
            RowStatus::Ok { row } => Some(row),
            _ => None,
        }
    }
}

fn run_row(spec: &ExperimentSpec) -> (RowStatus, Option<RunOutcome>) {
    let data = match prepare(spec) {
        Ok(d) => d,
        Err(e) => return (RowStatus::Infeasible { reason: e.to_string() }, None),
    };
    match run_prepared(spec, &data) {
        Ok(out) => (RowStatus::Ok { row: out.row.clone() }, Some(out)),
        Err(e) => (RowStatus::Failed { error: e.to_string() }, None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonRow {
    pub horizon: usize,
    pub status: RowStatus,
    pub reference: Option<ReferencePoint>,
}

/// One run per horizon, everything else taken from `template`.
pub fn horizon_table(template: &ExperimentSpec, horizons: &[usize]) -> Vec<HorizonRow> {
    horizons
        .iter()
        .map(|&t| {
            let mut spec = template.clone();
            spec.model.horizon = t;
            HorizonRow {
                horizon: t,
                status: run_row(&spec).0,
                reference: reference_for(&spec.dataset, t),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LookbackPoint {
    pub lookback: usize,
    pub status: RowStatus,
}

/// One run per look-back; look-backs whose windows do not fit the splits
/// are reported as infeasible.
pub fn lookback_sweep(template: &ExperimentSpec, grid: &[usize]) -> Vec<LookbackPoint> {
    grid.iter()
        .map(|&l| {
            let mut spec = template.clone();
            spec.model.lookback = l;
            let status = match spec.model.validate() {
                Err(e) => RowStatus::Infeasible { reason: e.to_string() },
                Ok(()) => run_row(&spec).0,
            };
            LookbackPoint { lookback: l, status }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub federated_mse: Vec<f64>,
    pub centralized_mse: Vec<f64>,
    /// Within 5% of the best test MSE either mode reached.
    pub target_mse: f64,
    pub federated_rounds: Option<usize>,
    pub centralized_rounds: Option<usize>,
    /// Centralized over federated rounds-to-target.
    pub speedup: Option<f64>,
}

impl ConvergenceReport {
    pub fn speedup_label(&self) -> String {
        self.speedup.map_or_else(|| "not reached".into(), |s| format!("{s:.3}"))
    }
}

pub const CONVERGENCE_TOLERANCE: f64 = 0.05;

/// First round (1-based) whose test MSE is at most `target`.
pub fn rounds_to_target(curve: &[f64], target: f64) -> Option<usize> {
    curve.iter().position(|&m| m <= target).map(|i| i + 1)
}

fn curve(reports: &[RoundReport]) -> Vec<f64> {
    reports.iter().map(|r| r.test_mse).collect()
}

/// Compares learning curves of two runs against one shared target.
pub fn compare_curves(federated: &[RoundReport], centralized: &[RoundReport]) -> ConvergenceReport {
    let (f, c) = (curve(federated), curve(centralized));
    let best = f.iter().chain(&c).copied().fold(f64::INFINITY, f64::min);
    let target = best * (1.0 + CONVERGENCE_TOLERANCE);
    let fr = rounds_to_target(&f, target);
    let cr = rounds_to_target(&c, target);
    ConvergenceReport {
        speedup: fr.zip(cr).map(|(f, c)| c as f64 / f as f64),
        federated_mse: f,
        centralized_mse: c,
        target_mse: target,
        federated_rounds: fr,
        centralized_rounds: cr,
    }
}

/// Runs `spec` federated and centralized and compares their curves.
pub fn convergence_compare(spec: &ExperimentSpec) -> Result<ConvergenceReport> {
    let data = prepare(spec)?;
    let mut fed = spec.clone();
    fed.mode = Mode::Federated;
    let mut cen = spec.clone();
    cen.mode = Mode::Centralized;
    let f = run_prepared(&fed, &data)?;
    let c = run_prepared(&cen, &data)?;
    Ok(compare_curves(&f.reports, &c.reports))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    NoClustering,
    NoPeft,
    Full,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 3] = [AblationVariant::NoClustering, AblationVariant::NoPeft, AblationVariant::Full];

    pub fn label(&self) -> &'static str {
        match self {
            AblationVariant::NoClustering => "no-clustering",
            AblationVariant::NoPeft => "no-peft",
            AblationVariant::Full => "full",
        }
    }

    pub fn apply(&self, template: &ExperimentSpec) -> ExperimentSpec {
        let mut spec = template.clone();
        spec.mode = Mode::Federated;
        match self {
            AblationVariant::NoClustering => {
                spec.clustering = false;
                spec.peft = true;
            }
            AblationVariant::NoPeft => {
                spec.clustering = true;
                spec.peft = false;
            }
            AblationVariant::Full => {
                spec.clustering = true;
                spec.peft = true;
            }
        }
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub status: RowStatus,
}

/// The three variants on the same data, isolated from each other's failures.
pub fn ablation_grid(template: &ExperimentSpec) -> Vec<AblationRow> {
    AblationVariant::ALL
        .iter()
        .map(|v| AblationRow {
            variant: *v,
            status: run_row(&v.apply(template)).0,
        })
        .collect()
}

/// Spec for a plain FedAvg run, used for degenerate comparisons.
pub fn pass_through(spec: &ExperimentSpec) -> ExperimentSpec {
    let mut s = spec.clone();
    s.federation.server = ServerKind::PassThrough;
    s
}
