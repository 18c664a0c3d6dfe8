//! Forward building blocks of the forecaster, expressed on the gradient tape.
//!
//! Inputs may carry a leading batch axis: `[N, D]` and `[B, N, D]` are both
//! accepted wherever a token matrix is expected.

use crate::error::{Error, Result};
use crate::model::config::PatchConfig;
use crate::numerics::{Tape, Tensor, Var};

/// Splits a univariate window into `[N × P]` patches. Row `k` starts at
/// `k·stride`; a final patch ending at `L` is added when the stride does not
/// tile the window.
pub fn patchify(x: &[f64], patch: &PatchConfig) -> Result<Tensor> {
    if x.len() != patch.lookback {
        return Err(Error::Shape {
            op: "patchify",
            left: vec![x.len()],
            right: vec![patch.lookback],
        });
    }
    let p = patch.patch_len;
    let mut data = Vec::with_capacity(patch.n_patches * p);
    for k in 0..patch.n_patches {
        let s = patch.patch_start(k);
        data.extend_from_slice(&x[s..s + p]);
    }
    Tensor::new(vec![patch.n_patches, p], data)
}

/// Patches every row of a `[B × L]` tensor into `[B × N·P]`.
pub fn patchify_rows(x: &Tensor, patch: &PatchConfig) -> Result<Tensor> {
    let b = x.rows();
    let mut data = Vec::with_capacity(b * patch.n_patches * patch.patch_len);
    for row in x.data().chunks(x.cols()) {
        data.extend(patchify(row, patch)?.into_data());
    }
    Tensor::new(vec![b, patch.n_patches * patch.patch_len], data)
}

/// `X_p·W_p + W_pos`, with the position table broadcast over the batch.
pub fn embed(tape: &mut Tape, patches: Var, w_patch: Var, w_pos: Var) -> Result<Var> {
    let projected = tape.matmul(patches, w_patch)?;
    tape.add(projected, w_pos)
}

/// Single-head scaled dot-product attention with projections `[D × d_k]`.
pub fn self_attention(tape: &mut Tape, x: Var, wq: Var, wk: Var, wv: Var) -> Result<Var> {
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    attend(tape, q, k, v)
}

/// `softmax_rows(Q·Kᵀ/√d_k)·V` for already-projected queries, keys, values.
fn attend(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let dk = tape.value(q).cols();
    let kt = tape.transpose(k)?;
    let scores = tape.bmm(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let weights = tape.softmax_rows(scaled)?;
    tape.bmm(weights, v)
}

/// Multi-head attention with stacked `[D × D]` projections: head `j` uses
/// columns `j·d_k .. (j+1)·d_k` of each of `wq`, `wk`, `wv`. Head outputs are
/// concatenated and mapped through `wo`.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
) -> Result<Var> {
    let d = tape.value(wq).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::config("model.heads", format!("{heads} heads do not divide width {d}")));
    }
    let dk = d / heads;
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        outs.push(attend(tape, qh, kh, vh)?);
    }
    let concat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    tape.matmul(concat, wo)
}

/// `(silu(x·W_gate) ⊙ (x·W_up))·W_down`.
pub fn swiglu(tape: &mut Tape, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
    let gate = tape.matmul(x, w_gate)?;
    let gate = tape.silu(gate)?;
    let up = tape.matmul(x, w_up)?;
    let hidden = tape.mul(gate, up)?;
    tape.matmul(hidden, w_down)
}

/// Tape handles for one encoder layer. Attention weights are the effective
/// (possibly adapter-augmented) matrices.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

/// Pre-norm block: `u = x + MSA(LN₁(x))`, `x' = u + FFN(LN₂(u))`.
pub fn encoder_layer(tape: &mut Tape, x: Var, layer: &LayerVars, heads: usize) -> Result<Var> {
    let normed = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias)?;
    let attn = multi_head_attention(tape, normed, layer.wq, layer.wk, layer.wv, layer.wo, heads)?;
    let u = tape.add(x, attn)?;
    let normed = tape.layer_norm(u, layer.ln2_gain, layer.ln2_bias)?;
    let ffn = swiglu(tape, normed, layer.w_gate, layer.w_up, layer.w_down)?;
    tape.add(u, ffn)
}

pub fn encoder_forward(tape: &mut Tape, x: Var, layers: &[LayerVars], heads: usize) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::config("model.layers", "encoder needs at least one layer"));
    }
    layers
        .iter()
        .try_fold(x, |h, layer| encoder_layer(tape, h, layer, heads))
}

/// Flattens `[B, N, D]` (or `[N, D]`) tokens and applies the linear head,
/// giving `[B, T]` (or `[1, T]`).
pub fn forecast_head(tape: &mut Tape, z: Var, w_head: Var, b_head: Var) -> Result<Var> {
    let shape = tape.value(z).shape().to_vec();
    let batch = if shape.len() == 3 { shape[0] } else { 1 };
    let flat = tape.reshape(z, &[batch, tape.value(z).len() / batch])?;
    let y = tape.matmul(flat, w_head)?;
    tape.add(y, b_head)
}

/// `(1/n)·Σ (x̂ − x)²` over all entries.
pub fn mse_loss(tape: &mut Tape, predictions: Var, targets: Var) -> Result<Var> {
    let diff = tape.sub(predictions, targets)?;
    tape.mean_square(diff)
}

/// Effective adapted weight `W_frozen + (α/r)·(B·A)ᵀ` for the `x·W`
/// convention, with `A: [r × in]`, `B: [out × r]`.
pub fn adapted_weight(tape: &mut Tape, frozen: Var, a: Var, b: Var, scale: f64) -> Result<Var> {
    let at = tape.transpose(a)?;
    let bt = tape.transpose(b)?;
    let delta = tape.matmul(at, bt)?;
    let delta = tape.scale(delta, scale)?;
    tape.add(frozen, delta)
}

/// `x·(W_frozen + (α/r)·(B·A)ᵀ)` where only `A: [r × in]` and `B: [out × r]`
/// should be tape parameters.
pub fn adapter_forward(tape: &mut Tape, x: Var, frozen: Var, a: Var, b: Var, alpha: f64) -> Result<Var> {
    let w = tape.value(frozen).shape().to_vec();
    let (sa, sb) = (tape.value(a).shape().to_vec(), tape.value(b).shape().to_vec());
    if w.len() != 2 || sa.len() != 2 || sb.len() != 2 {
        return Err(Error::Shape {
            op: "adapter_forward",
            left: sa,
            right: sb,
        });
    }
    let (d_in, d_out, r) = (w[0], w[1], sa[0]);
    if r == 0 || r > d_in.min(d_out) {
        return Err(Error::config(
            "model.lora_rank",
            format!("rank {r} exceeds min(in, out) = {}", d_in.min(d_out)),
        ));
    }
    if sa[1] != d_in || sb != [d_out, r] {
        return Err(Error::Shape {
            op: "adapter_forward",
            left: sa,
            right: sb,
        });
    }
    let weight = adapted_weight(tape, frozen, a, b, alpha / r as f64)?;
    tape.matmul(x, weight)
}
