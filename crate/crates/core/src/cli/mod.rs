//! Command-line layer: configuration resolution and the subcommands.

pub mod commands;
pub mod config;
pub mod selftest;

pub use commands::{cmd_ablate, cmd_comm_report, cmd_evaluate, cmd_sweep, cmd_train, EvalSummary, SweepKind, TrainSummary};
pub use config::{documented_keys, keys_help, ConfigBuilder, RunConfig};
pub use selftest::{run_selftest, Check};
