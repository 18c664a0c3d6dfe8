//! The channel-independent patch transformer, its adapters and training.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod layers;
pub mod metrics;
pub mod params;
pub mod quant;
pub mod train;

pub use config::{AdaptTargets, ModelConfig, PatchConfig};
pub use forward::{predict, Batch};
pub use metrics::{evaluate, mae_metric, mse_metric, EvalReport, Predictions};
pub use params::{AdapterSet, ForecastModel, ParamCounts, ParamValue, Phase};
pub use quant::QuantizedTensor;
pub use train::{train_step, Optimizer, OptimizerKind, Pretrainer, DEFAULT_MICRO_BATCH};
