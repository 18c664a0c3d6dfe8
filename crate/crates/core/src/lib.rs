//! Federated long-horizon forecasting simulator.
//!
//! A channel-independent patch transformer is trained across simulated edge
//! devices: devices are grouped with k-means, train low-rank adapters over a
//! quantized frozen encoder, and their updates are averaged per cluster and
//! applied with a server-side Adam step. Every byte that crosses the
//! simulated wire is counted.

pub mod cli;
pub mod data;
pub mod error;
pub mod experiments;
pub mod federation;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
