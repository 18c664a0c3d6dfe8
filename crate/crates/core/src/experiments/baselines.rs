//! Sanity floors: repeat the last observed value, and a ridge-regularized
//! linear map from the look-back window to the horizon.

use nalgebra::{DMatrix, DVector};

use crate::data::dataset::TimeSeriesDataset;
use crate::data::windows::{window_input, window_target, WindowRef};
use crate::error::{Error, Result};
use crate::model::metrics::ErrorSums;

/// Forecasts every step as the last input value.
pub fn last_value(sets: &[(&TimeSeriesDataset, &[WindowRef])], lookback: usize, horizon: usize) -> ErrorSums {
    let mut sums = ErrorSums::default();
    for (ds, refs) in sets {
        for &w in *refs {
            let last = ds.value(w.origin + lookback - 1, w.channel);
            for y in window_target(ds, w, lookback, horizon) {
                sums.add(last, y);
            }
        }
    }
    sums
}

/// `ŷ = Wᵀ·[x; 1]`, shared across channels, fitted by ridge least squares.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBaseline {
    /// `[(L + 1) × T]`.
    weights: DMatrix<f64>,
    lookback: usize,
    horizon: usize,
}

pub const RIDGE_LAMBDA: f64 = 1e-3;

impl LinearBaseline {
    pub fn fit(sets: &[(&TimeSeriesDataset, &[WindowRef])], lookback: usize, horizon: usize) -> Result<Self> {
        let d = lookback + 1;
        let mut xtx = DMatrix::<f64>::zeros(d, d);
        let mut xty = DMatrix::<f64>::zeros(d, horizon);
        let mut n = 0usize;
        for (ds, refs) in sets {
            for &w in *refs {
                let mut x = window_input(ds, w, lookback);
                x.push(1.0);
                let x = DVector::from_vec(x);
                let y = DVector::from_vec(window_target(ds, w, lookback, horizon));
                xtx.ger(1.0, &x, &x, 1.0);
                xty.ger(1.0, &x, &y, 1.0);
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::EmptySet("no windows to fit the linear baseline".into()));
        }
        for i in 0..lookback {
            xtx[(i, i)] += RIDGE_LAMBDA * n as f64;
        }
        let weights = xtx
            .cholesky()
            .ok_or_else(|| Error::Degenerate("linear baseline normal equations are singular".into()))?
            .solve(&xty);
        Ok(Self {
            weights,
            lookback,
            horizon,
        })
    }

    pub fn predict(&self, input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        x.push(1.0);
        let x = DVector::from_vec(x);
        (self.weights.transpose() * x).iter().copied().collect()
    }

    pub fn evaluate(&self, sets: &[(&TimeSeriesDataset, &[WindowRef])]) -> ErrorSums {
        let mut sums = ErrorSums::default();
        for (ds, refs) in sets {
            for &w in *refs {
                let p = self.predict(&window_input(ds, w, self.lookback));
                for (a, b) in p.into_iter().zip(window_target(ds, w, self.lookback, self.horizon)) {
                    sums.add(a, b);
                }
            }
        }
        sums
    }
}
