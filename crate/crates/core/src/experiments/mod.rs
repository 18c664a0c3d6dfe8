//! Experiment protocols on top of the federation engine, with baselines,
//! reference numbers and report artifacts.

pub mod baselines;
pub mod protocols;
pub mod reference;
pub mod report;
pub mod runner;
pub mod spec;

pub use protocols::{
    ablation_grid, compare_curves, convergence_compare, horizon_table, lookback_sweep, rounds_to_target,
    AblationRow, AblationVariant, ConvergenceReport, HorizonRow, LookbackPoint, RowStatus,
};
pub use reference::{reference_for, ReferencePoint, HORIZONS, LOOKBACK_GRID, REFERENCE_RESULTS};
pub use report::{comm_report, write_results_csv, CommReport, RunManifest};
pub use runner::{baselines, run_experiment, run_prepared, BaselineMetrics, ResultRow, RunOutcome};
pub use spec::{derive_seed, prepare, DatasetSource, ExperimentSpec, Mode, PreparedData};
