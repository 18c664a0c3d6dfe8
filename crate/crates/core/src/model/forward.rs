//! Full forecaster forward pass on the tape: normalization, patching,
//! embedding, encoder, head and denormalization.

use crate::data::norm::{instance_stats, MIN_REVIN_GAIN};
use crate::error::{Error, Result};
use crate::model::layers::{adapted_weight, embed, encoder_forward, forecast_head, patchify_rows, LayerVars};
use crate::model::params::{ForecastModel, Phase};
use crate::numerics::{Tape, Tensor, Var};

/// Rows of windows cut from one or more channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B × L]` raw input windows.
    pub inputs: Tensor,
    /// `[B × T]` raw targets.
    pub targets: Tensor,
    /// Channel of each row, selecting its RevIN affine.
    pub channels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// Rows `start..end` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> Result<Batch> {
        Ok(Batch {
            inputs: slice_rows(&self.inputs, start, end)?,
            targets: slice_rows(&self.targets, start, end)?,
            channels: self.channels[start..end].to_vec(),
        })
    }
}

pub(crate) fn slice_rows(t: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let c = t.cols();
    Tensor::new(vec![end - start, c], t.data()[start * c..end * c].to_vec())
}

/// Registers the model on a tape: trainable entries become parameters keyed
/// by entry index when `with_grad` is set, everything else becomes a constant.
pub fn bind(tape: &mut Tape, model: &ForecastModel, with_grad: bool) -> Result<Vec<Var>> {
    model
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let value = e.value.dense().clone();
            if with_grad && e.trainable {
                tape.param(i, value)
            } else {
                Ok(tape.constant(value))
            }
        })
        .collect()
}

/// Effective per-layer weights, with adapters folded into the attention
/// projections they modify.
pub fn layer_vars(tape: &mut Tape, model: &ForecastModel, vars: &[Var]) -> Result<Vec<LayerVars>> {
    let scale = model.config().lora_scale();
    model
        .layout()
        .layers
        .iter()
        .map(|l| {
            let mut attn = [vars[l.attn[0]], vars[l.attn[1]], vars[l.attn[2]], vars[l.attn[3]]];
            for (m, adapter) in l.adapters.iter().enumerate() {
                if let Some((a, b)) = adapter {
                    attn[m] = adapted_weight(tape, attn[m], vars[*a], vars[*b], scale)?;
                }
            }
            Ok(LayerVars {
                ln1_gain: vars[l.ln1_gain],
                ln1_bias: vars[l.ln1_bias],
                wq: attn[0],
                wk: attn[1],
                wv: attn[2],
                wo: attn[3],
                ln2_gain: vars[l.ln2_gain],
                ln2_bias: vars[l.ln2_bias],
                w_gate: vars[l.w_gate],
                w_up: vars[l.w_up],
                w_down: vars[l.w_down],
            })
        })
        .collect()
}

/// Per-row instance statistics of a `[B × L]` tensor.
pub fn row_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    x.data().chunks(x.cols()).map(instance_stats).unzip()
}

/// Forecasts `[B × T]` in the original scale for `[B × L]` inputs.
///
/// Phase 1 models use plain instance normalization; phase 2 models apply the
/// channel's RevIN affine after normalizing and invert it on the output.
pub fn forward(tape: &mut Tape, model: &ForecastModel, vars: &[Var], inputs: &Tensor, channels: &[usize]) -> Result<Var> {
    let cfg = model.config();
    if inputs.shape().len() != 2 || inputs.cols() != cfg.lookback || inputs.rows() != channels.len() {
        return Err(Error::Shape {
            op: "forward",
            left: inputs.shape().to_vec(),
            right: vec![channels.len(), cfg.lookback],
        });
    }
    if cfg.lookback < 2 {
        return Err(Error::config("model.lookback", "instance normalization needs at least 2 values"));
    }
    if let Some(&c) = channels.iter().find(|&&c| c >= cfg.channels) {
        return Err(Error::Contract(format!("channel {c} out of range for {} channels", cfg.channels)));
    }
    let b = inputs.rows();
    let patch = cfg.patch()?;
    let (mean, std) = row_stats(inputs);
    let mut normed = Vec::with_capacity(inputs.len());
    for (r, row) in inputs.data().chunks(cfg.lookback).enumerate() {
        normed.extend(row.iter().map(|v| (v - mean[r]) / std[r]));
    }
    let normed = Tensor::new(vec![b, cfg.lookback], normed)?;
    let patches = patchify_rows(&normed, &patch)?;
    let mut x = tape.constant(patches);

    let layout = model.layout();
    let affine = if model.phase() == Phase::Pretrain {
        None
    } else {
        let gain = tape.gather(vars[layout.revin_gain], channels)?;
        let bias = tape.gather(vars[layout.revin_bias], channels)?;
        if let Some(g) = tape.value(gain).data().iter().find(|g| g.abs() < MIN_REVIN_GAIN) {
            return Err(Error::Degenerate(format!("RevIN gain {g} is too close to zero to invert")));
        }
        x = tape.scale_rows(x, gain)?;
        x = tape.shift_rows(x, bias)?;
        Some((gain, bias))
    };

    let x = tape.reshape(x, &[b, patch.n_patches, patch.patch_len])?;
    let x = embed(tape, x, vars[layout.patch_proj], vars[layout.pos_embed])?;
    let layers = layer_vars(tape, model, vars)?;
    let z = encoder_forward(tape, x, &layers, cfg.heads)?;
    let mut y = forecast_head(tape, z, vars[layout.head_w], vars[layout.head_b])?;

    if let Some((gain, bias)) = affine {
        let neg_bias = tape.scale(bias, -1.0)?;
        y = tape.shift_rows(y, neg_bias)?;
        let inv_gain = tape.recip(gain)?;
        y = tape.scale_rows(y, inv_gain)?;
    }
    let std = tape.constant(Tensor::vector(std)?);
    let mean = tape.constant(Tensor::vector(mean)?);
    let y = tape.scale_rows(y, std)?;
    tape.shift_rows(y, mean)
}

/// Rows per tape when forecasting without gradients.
pub const PREDICT_CHUNK: usize = 64;

/// Forecasts without recording gradients, in chunks of [`PREDICT_CHUNK`] rows.
pub fn predict(model: &ForecastModel, inputs: &Tensor, channels: &[usize]) -> Result<Tensor> {
    if inputs.shape().len() != 2 || inputs.rows() != channels.len() {
        return Err(Error::Shape {
            op: "predict",
            left: inputs.shape().to_vec(),
            right: vec![channels.len(), model.config().lookback],
        });
    }
    let b = inputs.rows();
    if b == 0 {
        return Err(Error::EmptySet("no windows to forecast".into()));
    }
    let mut out = Vec::with_capacity(b * model.config().horizon);
    let mut start = 0;
    while start < b {
        let end = (start + PREDICT_CHUNK).min(b);
        let mut tape = Tape::new();
        let vars = bind(&mut tape, model, false)?;
        let chunk = slice_rows(inputs, start, end)?;
        let y = forward(&mut tape, model, &vars, &chunk, &channels[start..end])?;
        out.extend_from_slice(tape.value(y).data());
        start = end;
    }
    Tensor::new(vec![b, model.config().horizon], out)
}
