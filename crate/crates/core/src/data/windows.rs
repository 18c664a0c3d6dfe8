//! Channel-independent window construction.

use crate::data::dataset::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One univariate training example cut from a single channel.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub input: Tensor,
    pub target: Tensor,
    pub channel: usize,
    /// Row of the first input value; the target starts at `origin + L`.
    pub origin: usize,
}

/// Lightweight reference to a window; materialized on demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct WindowRef {
    pub channel: usize,
    pub origin: usize,
}

/// Origins per channel: `⌊(rows − L − T)/stride⌋ + 1`, or zero when the
/// series is shorter than one window.
pub fn origins_per_channel(rows: usize, lookback: usize, horizon: usize, stride: usize) -> usize {
    if rows < lookback + horizon || stride == 0 {
        0
    } else {
        (rows - lookback - horizon) / stride + 1
    }
}

fn check_window_args(lookback: usize, horizon: usize, stride: usize) -> Result<()> {
    for (key, v) in [("lookback", lookback), ("horizon", horizon), ("window_stride", stride)] {
        if v == 0 {
            return Err(Error::config(key, "must be at least 1"));
        }
    }
    Ok(())
}

/// Window references in channel-major order (all origins of channel 0, then
/// channel 1, ...).
pub fn window_refs(
    ds: &TimeSeriesDataset,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowRef>> {
    check_window_args(lookback, horizon, stride)?;
    let per = origins_per_channel(ds.rows(), lookback, horizon, stride);
    if per == 0 {
        return Err(Error::EmptySet(format!(
            "{} rows cannot hold a window of L={lookback} + T={horizon}",
            ds.rows()
        )));
    }
    Ok((0..ds.channels())
        .flat_map(|channel| (0..per).map(move |k| WindowRef { channel, origin: k * stride }))
        .collect())
}

/// Input values of a window.
pub fn window_input(ds: &TimeSeriesDataset, w: WindowRef, lookback: usize) -> Vec<f64> {
    (w.origin..w.origin + lookback).map(|r| ds.value(r, w.channel)).collect()
}

/// Target values of a window.
pub fn window_target(ds: &TimeSeriesDataset, w: WindowRef, lookback: usize, horizon: usize) -> Vec<f64> {
    let start = w.origin + lookback;
    (start..start + horizon).map(|r| ds.value(r, w.channel)).collect()
}

/// Materializes every window of the dataset.
pub fn make_windows(
    ds: &TimeSeriesDataset,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    window_refs(ds, lookback, horizon, stride)?
        .into_iter()
        .map(|w| {
            Ok(WindowSample {
                input: Tensor::vector(window_input(ds, w, lookback))?,
                target: Tensor::vector(window_target(ds, w, lookback, horizon))?,
                channel: w.channel,
                origin: w.origin,
            })
        })
        .collect()
}
