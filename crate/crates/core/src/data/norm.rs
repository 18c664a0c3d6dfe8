//! Instance normalization and its reversible, affine variant.
//!
//! These are the plain-value versions used for data handling and checks; the
//! model applies the same formulas on the gradient tape so that the RevIN
//! gain and bias are trained.

use crate::error::{Error, Result};

/// Floor on the per-instance standard deviation.
pub const NORM_EPS: f64 = 1e-5;

/// Smallest |gain| accepted when inverting the RevIN affine.
pub const MIN_REVIN_GAIN: f64 = 1e-8;

/// Population mean and floored standard deviation of a window.
pub fn instance_stats(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(NORM_EPS))
}

/// Normalizes to zero mean and unit standard deviation, returning the
/// statistics needed to restore the scale of predictions.
pub fn instance_normalize(x: &[f64]) -> Result<(Vec<f64>, f64, f64)> {
    if x.len() < 2 {
        return Err(Error::Contract(format!(
            "instance normalization needs at least 2 values, got {}",
            x.len()
        )));
    }
    let (mean, std) = instance_stats(x);
    Ok((x.iter().map(|v| (v - mean) / std).collect(), mean, std))
}

/// Restores the scale removed by [`instance_normalize`].
pub fn instance_denormalize(y: &[f64], mean: f64, std: f64) -> Vec<f64> {
    y.iter().map(|v| v * std + mean).collect()
}

/// Per-window RevIN state: statistics of the input instance plus the
/// channel's learnable affine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RevinState {
    pub mean: f64,
    pub std: f64,
    pub gain: f64,
    pub bias: f64,
}

impl RevinState {
    pub fn fit(x: &[f64], gain: f64, bias: f64) -> Self {
        let (mean, std) = instance_stats(x);
        Self { mean, std, gain, bias }
    }

    pub fn identity(x: &[f64]) -> Self {
        Self::fit(x, 1.0, 0.0)
    }

    /// `gain·(x − μ)/σ̂ + bias`
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|v| self.gain * (v - self.mean) / self.std + self.bias)
            .collect()
    }

    /// `(y − bias)/gain·σ̂ + μ`
    pub fn denormalize(&self, y: &[f64]) -> Result<Vec<f64>> {
        if self.gain.abs() < MIN_REVIN_GAIN {
            return Err(Error::Degenerate(format!(
                "RevIN gain {} is too close to zero to invert",
                self.gain
            )));
        }
        Ok(y.iter()
            .map(|v| (v - self.bias) / self.gain * self.std + self.mean)
            .collect())
    }
}
