//! Forecast error metrics and window-level evaluation.

use serde::{Deserialize, Serialize};

use crate::data::dataset::TimeSeriesDataset;
use crate::data::windows::WindowRef;
use crate::error::{Error, Result};
use crate::model::forward::predict;
use crate::model::params::ForecastModel;
use crate::model::train::window_batch;
use crate::numerics::Tensor;

fn check(op: &'static str, p: &Tensor, t: &Tensor) -> Result<()> {
    if p.shape() != t.shape() {
        return Err(Error::Shape {
            op,
            left: p.shape().to_vec(),
            right: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean of `(x̂ − x)²` over every entry.
pub fn mse_metric(predictions: &Tensor, targets: &Tensor) -> Result<f64> {
    check("mse", predictions, targets)?;
    let sum: f64 = predictions
        .data()
        .iter()
        .zip(targets.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / predictions.len() as f64)
}

/// Mean of `|x̂ − x|` over every entry.
pub fn mae_metric(predictions: &Tensor, targets: &Tensor) -> Result<f64> {
    check("mae", predictions, targets)?;
    let sum: f64 = predictions
        .data()
        .iter()
        .zip(targets.data())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(sum / predictions.len() as f64)
}

/// Running squared/absolute error sums, mergeable across evaluation sets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorSums {
    pub squared: f64,
    pub absolute: f64,
    pub count: usize,
}

impl ErrorSums {
    pub fn add(&mut self, prediction: f64, target: f64) {
        let e = prediction - target;
        self.squared += e * e;
        self.absolute += e.abs();
        self.count += 1;
    }

    pub fn merge(&mut self, other: &ErrorSums) {
        self.squared += other.squared;
        self.absolute += other.absolute;
        self.count += other.count;
    }

    pub fn mse(&self) -> f64 {
        self.squared / self.count.max(1) as f64
    }

    pub fn mae(&self) -> f64 {
        self.absolute / self.count.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub channel: usize,
    pub name: String,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
    pub per_channel: Vec<ChannelMetrics>,
    #[serde(skip)]
    pub sums: ErrorSums,
}

/// Predictions for a set of windows, in window order.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub refs: Vec<WindowRef>,
    /// `[W × T]`.
    pub predictions: Tensor,
    /// `[W × T]`.
    pub targets: Tensor,
}

/// Windows evaluated per forward batch.
const EVAL_BATCH: usize = 256;

/// Forecasts every window with the model's f32-rounded parameters, so the
/// numbers match what a checkpoint of the model reproduces.
pub fn predict_windows(model: &ForecastModel, ds: &TimeSeriesDataset, refs: &[WindowRef]) -> Result<Predictions> {
    if refs.is_empty() {
        return Err(Error::EmptySet("no evaluation windows".into()));
    }
    let model = model.snapped_f32();
    let (l, t) = (model.config().lookback, model.config().horizon);
    let mut preds = Vec::with_capacity(refs.len() * t);
    let mut targets = Vec::with_capacity(refs.len() * t);
    for chunk in refs.chunks(EVAL_BATCH) {
        let batch = window_batch(ds, chunk, l, t)?;
        preds.extend(predict(&model, &batch.inputs, &batch.channels)?.into_data());
        targets.extend(batch.targets.into_data());
    }
    Ok(Predictions {
        refs: refs.to_vec(),
        predictions: Tensor::new(vec![refs.len(), t], preds)?,
        targets: Tensor::new(vec![refs.len(), t], targets)?,
    })
}

/// Summarizes predictions overall and per channel.
pub fn summarize(p: &Predictions, channel_names: &[String]) -> EvalReport {
    let t = p.predictions.cols();
    let mut total = ErrorSums::default();
    let mut per: Vec<ErrorSums> = vec![ErrorSums::default(); channel_names.len()];
    for (i, w) in p.refs.iter().enumerate() {
        for k in 0..t {
            let (a, b) = (p.predictions.data()[i * t + k], p.targets.data()[i * t + k]);
            total.add(a, b);
            if let Some(s) = per.get_mut(w.channel) {
                s.add(a, b);
            }
        }
    }
    EvalReport {
        mse: total.mse(),
        mae: total.mae(),
        windows: p.refs.len(),
        per_channel: per
            .iter()
            .enumerate()
            .filter(|(_, s)| s.count > 0)
            .map(|(c, s)| ChannelMetrics {
                channel: c,
                name: channel_names[c].clone(),
                mse: s.mse(),
                mae: s.mae(),
            })
            .collect(),
        sums: total,
    }
}

pub fn evaluate(model: &ForecastModel, ds: &TimeSeriesDataset, refs: &[WindowRef]) -> Result<EvalReport> {
    Ok(summarize(&predict_windows(model, ds, refs)?, &ds.channel_names))
}
