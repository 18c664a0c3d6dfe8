//! Dataset ingestion, windowing, normalization and client partitioning.

pub mod dataset;
pub mod norm;
pub mod partition;
pub mod synthetic;
pub mod windows;

pub use dataset::{split_train_test, Scaler, TimeSeriesDataset, KNOWN_DATASETS};
pub use norm::{instance_denormalize, instance_normalize, instance_stats, RevinState, NORM_EPS};
pub use partition::{client_features, partition_clients, standardize_features, ClientShard};
pub use windows::{make_windows, origins_per_channel, window_input, window_refs, window_target, WindowRef, WindowSample};
