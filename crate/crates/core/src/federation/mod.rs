//! Clustered federated training with exact communication accounting.

pub mod client;
pub mod kmeans;
pub mod ledger;
pub mod run;
pub mod server;

pub use client::{update_device, ClientState, DeviceUpdate, LocalTraining, WindowPool};
pub use kmeans::{kmeans, KMeans};
pub use ledger::{ledger_report, CommLedger, Direction, LedgerReport, PayloadMode};
pub use run::{
    run_centralized, run_federated, write_round_csv, CentralizedRun, ClusterModel, EvalSet, FederatedRun,
    FederatedSetup, FederationConfig, RoundReport,
};
pub use server::{aggregate, fedadam_step, ServerKind, ServerOptimizer};
