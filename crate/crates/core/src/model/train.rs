//! Losses, gradient accumulation and optimizer steps for both training phases.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::dataset::TimeSeriesDataset;
use crate::data::norm::instance_stats;
use crate::data::windows::{window_input, window_target, WindowRef};
use crate::error::{Error, Result};
use crate::model::forward::{bind, forward, layer_vars, Batch};
use crate::model::layers::{embed, encoder_forward, mse_loss, patchify_rows};
use crate::model::params::{ForecastModel, Phase};
use crate::numerics::{sgd_step, AdamConfig, AdamState, Gradients, Tape, Tensor};

/// Rows per tape during training; gradients are accumulated across chunks so
/// memory stays bounded for large batches.
pub const DEFAULT_MICRO_BATCH: usize = 64;

/// Materializes windows into a batch.
pub fn window_batch(ds: &TimeSeriesDataset, refs: &[WindowRef], lookback: usize, horizon: usize) -> Result<Batch> {
    if refs.is_empty() {
        return Err(Error::EmptySet("batch has no windows".into()));
    }
    let mut inputs = Vec::with_capacity(refs.len() * lookback);
    let mut targets = Vec::with_capacity(refs.len() * horizon);
    for &w in refs {
        inputs.extend(window_input(ds, w, lookback));
        targets.extend(window_target(ds, w, lookback, horizon));
    }
    Ok(Batch {
        inputs: Tensor::new(vec![refs.len(), lookback], inputs)?,
        targets: Tensor::new(vec![refs.len(), horizon], targets)?,
        channels: refs.iter().map(|w| w.channel).collect(),
    })
}

/// Draws `min(size, refs.len())` distinct windows uniformly at random, kept
/// in their original order.
pub fn sample_refs<R: Rng + ?Sized>(refs: &[WindowRef], size: usize, rng: &mut R) -> Vec<WindowRef> {
    let k = size.min(refs.len());
    let mut idx = rand::seq::index::sample(rng, refs.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| refs[i]).collect()
}

/// Chunk boundaries of `n` rows.
fn chunks(n: usize, size: usize) -> Vec<(usize, usize)> {
    let size = size.max(1);
    (0..n.div_ceil(size)).map(|i| (i * size, ((i + 1) * size).min(n))).collect()
}

/// Sums per-chunk `(loss, grads)` weighted by chunk share, in chunk order.
fn accumulate(parts: Vec<(f64, Vec<Tensor>)>, weights: &[f64]) -> Result<(f64, Vec<Tensor>)> {
    let mut iter = parts.into_iter().zip(weights);
    let ((loss0, grads0), &w0) = iter.next().ok_or_else(|| Error::EmptySet("no chunks".into()))?;
    let mut loss = loss0 * w0;
    let mut grads: Vec<Tensor> = grads0.iter().map(|g| g.scale(w0)).collect();
    for ((l, gs), &w) in iter {
        loss += l * w;
        for (acc, g) in grads.iter_mut().zip(&gs) {
            *acc = acc.add(&g.scale(w))?;
        }
    }
    Ok((loss, grads))
}

fn collect_grads(g: &Gradients, keys: &[usize]) -> Result<Vec<Tensor>> {
    keys.iter()
        .map(|k| {
            g.get(*k)
                .cloned()
                .ok_or_else(|| Error::Contract(format!("no gradient for parameter {k}")))
        })
        .collect()
}

/// Mean squared forecast error over the batch and its gradient for every trainable parameter,
/// in [`ForecastModel::trainable_indices`] order.
pub fn loss_and_grads(model: &ForecastModel, batch: &Batch, micro_batch: usize) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::EmptySet("empty batch".into()));
    }
    let keys = model.trainable_indices();
    let bounds = chunks(batch.len(), micro_batch);
    let parts = bounds
        .par_iter()
        .map(|&(s, e)| {
            let chunk = batch.slice(s, e)?;
            let mut tape = Tape::new();
            let vars = bind(&mut tape, model, true)?;
            let y = forward(&mut tape, model, &vars, &chunk.inputs, &chunk.channels)?;
            let t = tape.constant(chunk.targets);
            let loss = mse_loss(&mut tape, y, t)?;
            let grads = tape.backward(loss)?;
            Ok((tape.value(loss).item()?, collect_grads(&grads, &keys)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = bounds.iter().map(|(s, e)| (e - s) as f64 / batch.len() as f64).collect();
    accumulate(parts, &weights)
}

/// Optimizer used for the trainable parameters of one model copy.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    /// Plain `θ ← θ − η∇L`.
    Sgd { lr: f64 },
    Adam(AdamState),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &[Tensor]) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(AdamConfig::with_lr(lr), params)),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        match self {
            Optimizer::Sgd { lr } => sgd_step(params, grads, *lr),
            Optimizer::Adam(state) => state.step(params, grads),
        }
    }
}

/// One optimizer step on the batch; returns the pre-step loss.
pub fn train_step(model: &mut ForecastModel, opt: &mut Optimizer, batch: &Batch, micro_batch: usize) -> Result<f64> {
    let (loss, grads) = loss_and_grads(model, batch, micro_batch)?;
    let mut params = model.trainable_params();
    opt.step(&mut params, &grads)?;
    model.set_trainable_params(params)?;
    Ok(loss)
}

/// Patch-reconstruction head of the phase-1 objective: flattens the encoding
/// of patches `1..N−1` and predicts the `P` values of patch `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainHead {
    /// `[(N−1)·D × P]`.
    pub weight: Tensor,
    /// `[P]`.
    pub bias: Tensor,
}

impl PretrainHead {
    pub fn new<R: Rng + ?Sized>(model: &ForecastModel, rng: &mut R) -> Result<Self> {
        let cfg = model.config();
        let n = cfg.n_patches();
        if n < 2 {
            return Err(Error::config(
                "model.patch_len",
                format!("next-patch pretraining needs at least 2 patches, got {n}"),
            ));
        }
        Ok(Self {
            weight: Tensor::randn(&[(n - 1) * cfg.d_model, cfg.patch_len], cfg.init_std, rng),
            bias: Tensor::zeros(&[cfg.patch_len]),
        })
    }
}

/// Next-patch loss on `[B × L]` windows: every window is normalized with the
/// statistics of its first `N−1` patches, which are encoded (with the first
/// `N−1` position rows) to predict the normalized final patch.
///
/// Returns the loss, the gradients of the model's trainable parameters and of
/// `[head.weight, head.bias]`.
pub fn pretrain_loss_and_grads(
    model: &ForecastModel,
    head: &PretrainHead,
    inputs: &Tensor,
    micro_batch: usize,
) -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
    if model.phase() != Phase::Pretrain {
        return Err(Error::Contract(format!("next-patch pretraining needs a phase-1 model, got {:?}", model.phase())));
    }
    let cfg = model.config();
    let patch = cfg.patch()?;
    let n = patch.n_patches;
    if n < 2 {
        return Err(Error::config("model.patch_len", "next-patch pretraining needs at least 2 patches"));
    }
    if inputs.shape().len() != 2 || inputs.cols() != cfg.lookback || inputs.rows() == 0 {
        return Err(Error::Shape {
            op: "pretrain",
            left: inputs.shape().to_vec(),
            right: vec![inputs.rows(), cfg.lookback],
        });
    }
    let (p, d) = (cfg.patch_len, cfg.d_model);
    let context_end = patch.patch_start(n - 2) + p;
    let mut keys = model.trainable_indices();
    let head_key = model.entries().len();
    keys.extend([head_key, head_key + 1]);
    let b = inputs.rows();
    let bounds = chunks(b, micro_batch);
    let parts = bounds
        .par_iter()
        .map(|&(s, e)| {
            let rows = e - s;
            let mut normed = Vec::with_capacity(rows * cfg.lookback);
            for row in inputs.data()[s * cfg.lookback..e * cfg.lookback].chunks(cfg.lookback) {
                let (mean, std) = instance_stats(&row[..context_end]);
                normed.extend(row.iter().map(|v| (v - mean) / std));
            }
            let all = patchify_rows(&Tensor::new(vec![rows, cfg.lookback], normed)?, &patch)?;
            let (mut ctx, mut tgt) = (Vec::new(), Vec::new());
            for row in all.data().chunks(n * p) {
                ctx.extend_from_slice(&row[..(n - 1) * p]);
                tgt.extend_from_slice(&row[(n - 1) * p..]);
            }
            let mut tape = Tape::new();
            let vars = bind(&mut tape, model, true)?;
            let hw = tape.param(head_key, head.weight.clone())?;
            let hb = tape.param(head_key + 1, head.bias.clone())?;
            let layout = model.layout();
            let x = tape.constant(Tensor::new(vec![rows, n - 1, p], ctx)?);
            let pos = tape.reshape(vars[layout.pos_embed], &[1, n * d])?;
            let pos = tape.slice_cols(pos, 0, (n - 1) * d)?;
            let pos = tape.reshape(pos, &[n - 1, d])?;
            let x = embed(&mut tape, x, vars[layout.patch_proj], pos)?;
            let layers = layer_vars(&mut tape, model, &vars)?;
            let z = encoder_forward(&mut tape, x, &layers, cfg.heads)?;
            let flat = tape.reshape(z, &[rows, (n - 1) * d])?;
            let y = tape.matmul(flat, hw)?;
            let y = tape.add(y, hb)?;
            let t = tape.constant(Tensor::new(vec![rows, p], tgt)?);
            let loss = mse_loss(&mut tape, y, t)?;
            let grads = tape.backward(loss)?;
            Ok((tape.value(loss).item()?, collect_grads(&grads, &keys)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = bounds.iter().map(|(s, e)| (e - s) as f64 / b as f64).collect();
    let (loss, mut grads) = accumulate(parts, &weights)?;
    let head_grads = grads.split_off(grads.len() - 2);
    Ok((loss, grads, head_grads))
}

/// Phase-1 trainer: the model's trainable parameters and the reconstruction
/// head share one Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct Pretrainer {
    pub head: PretrainHead,
    adam: AdamState,
}

impl Pretrainer {
    pub fn new<R: Rng + ?Sized>(model: &ForecastModel, lr: f64, rng: &mut R) -> Result<Self> {
        let head = PretrainHead::new(model, rng)?;
        let mut params = model.trainable_params();
        params.extend([head.weight.clone(), head.bias.clone()]);
        Ok(Self {
            head,
            adam: AdamState::new(AdamConfig::with_lr(lr), &params),
        })
    }

    /// One next-patch step on `[B × L]` windows; returns the pre-step loss.
    pub fn step(&mut self, model: &mut ForecastModel, inputs: &Tensor, micro_batch: usize) -> Result<f64> {
        let (loss, mut grads, head_grads) = pretrain_loss_and_grads(model, &self.head, inputs, micro_batch)?;
        grads.extend(head_grads);
        let mut params = model.trainable_params();
        params.extend([self.head.weight.clone(), self.head.bias.clone()]);
        self.adam.step(&mut params, &grads)?;
        let bias = params.pop().expect("head bias");
        let weight = params.pop().expect("head weight");
        self.head = PretrainHead { weight, bias };
        model.set_trainable_params(params)?;
        Ok(loss)
    }
}
