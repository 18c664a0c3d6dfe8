//! Shared test oracles: explicit-loop reference implementations, central
//! finite differences and small configurations.
#![allow(dead_code)]

use fedtime_core::experiments::{DatasetSource, ExperimentSpec};
use fedtime_core::model::{Batch, ForecastModel, ModelConfig, ParamValue, Phase};
use fedtime_core::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, independent of the library's sampler.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| gaussian(rng) * std).collect()).unwrap()
}

pub fn mat(t: &Tensor) -> Mat {
    let c = t.cols();
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn loop_matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn loop_add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn loop_transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn loop_softmax(row: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut z = 0.0;
    let mut e = vec![0.0; row.len()];
    for (i, &v) in row.iter().enumerate() {
        e[i] = (v - max).exp();
        z += e[i];
    }
    e.iter().map(|v| v / z).collect()
}

/// Single-head attention on already projected Q, K, V.
pub fn loop_attend(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let n = q.len();
    let dk = q[0].len();
    let dv = v[0].len();
    let mut out = vec![vec![0.0; dv]; n];
    for i in 0..n {
        let mut scores = vec![0.0; n];
        for j in 0..n {
            let mut s = 0.0;
            for c in 0..dk {
                s += q[i][c] * k[j][c];
            }
            scores[j] = s / (dk as f64).sqrt();
        }
        let w = loop_softmax(&scores);
        for c in 0..dv {
            let mut s = 0.0;
            for j in 0..n {
                s += w[j] * v[j][c];
            }
            out[i][c] = s;
        }
    }
    out
}

pub fn loop_self_attention(x: &Mat, wq: &Mat, wk: &Mat, wv: &Mat) -> Mat {
    loop_attend(&loop_matmul(x, wq), &loop_matmul(x, wk), &loop_matmul(x, wv))
}

fn cols(m: &Mat, start: usize, len: usize) -> Mat {
    m.iter().map(|r| r[start..start + len].to_vec()).collect()
}

pub fn loop_msa(x: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, wo: &Mat, heads: usize) -> Mat {
    let d = wq[0].len();
    let dk = d / heads;
    let (q, k, v) = (loop_matmul(x, wq), loop_matmul(x, wk), loop_matmul(x, wv));
    let mut concat = vec![Vec::with_capacity(d); x.len()];
    for h in 0..heads {
        let o = loop_attend(&cols(&q, h * dk, dk), &cols(&k, h * dk, dk), &cols(&v, h * dk, dk));
        for (row, part) in concat.iter_mut().zip(o) {
            row.extend(part);
        }
    }
    loop_matmul(&concat, wo)
}

pub const LN_EPS: f64 = 1e-5;

pub fn loop_layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + LN_EPS).sqrt() * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

pub fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

pub fn loop_swiglu(x: &Mat, w_gate: &Mat, w_up: &Mat, w_down: &Mat) -> Mat {
    let g = loop_matmul(x, w_gate);
    let u = loop_matmul(x, w_up);
    let h: Mat = g
        .iter()
        .zip(&u)
        .map(|(gr, ur)| gr.iter().zip(ur).map(|(a, b)| silu(*a) * b).collect())
        .collect();
    loop_matmul(&h, w_down)
}

/// Plain weights of one encoder layer.
#[derive(Clone, Debug)]
pub struct LayerW {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w_gate: Mat,
    pub w_up: Mat,
    pub w_down: Mat,
}

pub fn loop_encoder_layer(x: &Mat, w: &LayerW, heads: usize) -> Mat {
    let a = loop_msa(&loop_layer_norm(x, &w.ln1_g, &w.ln1_b), &w.wq, &w.wk, &w.wv, &w.wo, heads);
    let u = loop_add(x, &a);
    let f = loop_swiglu(&loop_layer_norm(&u, &w.ln2_g, &w.ln2_b), &w.w_gate, &w.w_up, &w.w_down);
    loop_add(&u, &f)
}

pub fn loop_encoder(x: &Mat, layers: &[LayerW], heads: usize) -> Mat {
    layers.iter().fold(x.clone(), |h, w| loop_encoder_layer(&h, w, heads))
}

pub fn loop_mse(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s / a.len() as f64
}

pub fn loop_mae(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

fn dense(model: &ForecastModel, name: &str) -> Tensor {
    model
        .entry(name)
        .unwrap_or_else(|| panic!("no entry {name}"))
        .value
        .dense()
        .clone()
}

fn dense_vec(model: &ForecastModel, name: &str) -> Vec<f64> {
    dense(model, name).data().to_vec()
}

/// Effective attention weight with the adapter folded in: `W + s·Aᵀ·Bᵀ`.
fn effective(model: &ForecastModel, name: &str) -> Mat {
    let w = mat(&dense(model, name));
    let (Some(a), Some(b)) = (model.entry(&format!("{name}.lora_a")), model.entry(&format!("{name}.lora_b"))) else {
        return w;
    };
    let a = mat(a.value.dense());
    let b = mat(b.value.dense());
    let s = model.config().lora_scale();
    let delta = loop_matmul(&loop_transpose(&a), &loop_transpose(&b));
    w.iter()
        .zip(&delta)
        .map(|(r, d)| r.iter().zip(d).map(|(x, y)| x + s * y).collect())
        .collect()
}

pub fn layer_weights(model: &ForecastModel, l: usize) -> LayerW {
    let p = |s: &str| format!("layers.{l}.{s}");
    LayerW {
        ln1_g: dense_vec(model, &p("ln1.gain")),
        ln1_b: dense_vec(model, &p("ln1.bias")),
        wq: effective(model, &p("attn.wq")),
        wk: effective(model, &p("attn.wk")),
        wv: effective(model, &p("attn.wv")),
        wo: effective(model, &p("attn.wo")),
        ln2_g: dense_vec(model, &p("ln2.gain")),
        ln2_b: dense_vec(model, &p("ln2.bias")),
        w_gate: mat(&dense(model, &p("ffn.w_gate"))),
        w_up: mat(&dense(model, &p("ffn.w_up"))),
        w_down: mat(&dense(model, &p("ffn.w_down"))),
    }
}

/// Patch start offsets: stride steps plus an end-anchored patch when the
/// stride does not tile the window.
pub fn patch_starts(lookback: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|s| s + patch <= lookback).collect();
    if *starts.last().unwrap() + patch != lookback {
        starts.push(lookback - patch);
    }
    starts
}

/// Whole-model forecast for one window, written out loop by loop.
pub fn loop_forecast(model: &ForecastModel, x: &[f64], channel: usize) -> Vec<f64> {
    let cfg = model.config();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-5);
    let (g, b) = if model.phase() == Phase::Pretrain {
        (1.0, 0.0)
    } else {
        (dense_vec(model, "revin.gain")[channel], dense_vec(model, "revin.bias")[channel])
    };
    let z: Vec<f64> = x.iter().map(|v| g * (v - mean) / std + b).collect();
    let patches: Mat = patch_starts(cfg.lookback, cfg.patch_len, cfg.patch_stride)
        .into_iter()
        .map(|s| z[s..s + cfg.patch_len].to_vec())
        .collect();
    let tokens = loop_add(&loop_matmul(&patches, &mat(&dense(model, "patch_proj"))), &mat(&dense(model, "pos_embed")));
    let layers: Vec<LayerW> = (0..cfg.layers).map(|l| layer_weights(model, l)).collect();
    let enc = loop_encoder(&tokens, &layers, cfg.heads);
    let flat_tokens = vec![flat(&enc)];
    let y = loop_matmul(&flat_tokens, &mat(&dense(model, "head.weight")));
    let hb = dense_vec(model, "head.bias");
    y[0].iter()
        .zip(&hb)
        .map(|(v, c)| ((v + c) - b) / g * std + mean)
        .collect()
}

/// Batch MSE of the loop forecast.
pub fn loop_loss(model: &ForecastModel, batch: &Batch) -> f64 {
    let (l, t) = (model.config().lookback, model.config().horizon);
    let mut preds = Vec::new();
    for (i, &c) in batch.channels.iter().enumerate() {
        preds.extend(loop_forecast(model, &batch.inputs.data()[i * l..(i + 1) * l], c));
    }
    let _ = t;
    loop_mse(&preds, batch.targets.data())
}

/// Central finite differences of `loss` with respect to every trainable
/// scalar, in trainable order.
pub fn finite_differences(model: &ForecastModel, loss: impl Fn(&ForecastModel) -> f64, h: f64) -> Vec<Vec<f64>> {
    let params = model.trainable_params();
    params
        .iter()
        .enumerate()
        .map(|(pi, p)| {
            (0..p.len())
                .map(|j| {
                    let at = |delta: f64| {
                        let mut ps = params.clone();
                        ps[pi].data_mut()[j] += delta;
                        let mut m = model.clone();
                        m.set_trainable_params(ps).unwrap();
                        loss(&m)
                    };
                    (at(h) - at(-h)) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)`, maximized over all entries.
pub fn max_relative_error(a: &[Vec<f64>], b: &[Tensor], floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (x, t) in a.iter().zip(b) {
        for (p, q) in x.iter().zip(t.data()) {
            worst = worst.max((p - q).abs() / p.abs().max(q.abs()).max(floor));
        }
    }
    worst
}

/// Random tiny configuration: N ≤ 4 patches, D ≤ 8, one or two layers.
pub fn tiny_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let heads = [1, 2][rng.random_range(0..2)];
    let d_model = heads * rng.random_range(2..=8 / heads);
    let patch_len = rng.random_range(2..=4);
    let stride = rng.random_range(1..=patch_len);
    let n_target = rng.random_range(2..=4);
    let lookback = patch_len + (n_target - 1) * stride;
    ModelConfig {
        lookback,
        horizon: rng.random_range(1..=4),
        channels: rng.random_range(1..=3),
        patch_len,
        patch_stride: stride,
        d_model,
        heads,
        layers: rng.random_range(1..=2),
        ffn_dim: rng.random_range(2..=8),
        lora_rank: rng.random_range(1..=d_model.min(3)),
        lora_alpha: 2.0,
        quant_block: rng.random_range(1..=16),
        init_std: 0.4,
        ..ModelConfig::default()
    }
}

/// Makes every adapter B nonzero so gradients reach both factors.
pub fn randomize_adapters(model: &mut ForecastModel, rng: &mut ChaCha8Rng) {
    let names: Vec<(String, Vec<usize>)> = model
        .entries()
        .iter()
        .filter(|e| e.name.ends_with("lora_b") && matches!(e.value, ParamValue::Dense(_)))
        .map(|e| (e.name.clone(), e.value.shape().to_vec()))
        .collect();
    for (name, shape) in names {
        model.set_dense(&name, randn(rng, &shape, 0.3)).unwrap();
    }
}

/// Random affine so the RevIN path is exercised away from identity.
pub fn randomize_revin(model: &mut ForecastModel, rng: &mut ChaCha8Rng) {
    let m = model.config().channels;
    let gain: Vec<f64> = (0..m).map(|_| 0.5 + rng.random::<f64>()).collect();
    let bias: Vec<f64> = (0..m).map(|_| gaussian(rng) * 0.2).collect();
    model.set_dense("revin.gain", Tensor::vector(gain).unwrap()).unwrap();
    model.set_dense("revin.bias", Tensor::vector(bias).unwrap()).unwrap();
}

pub fn random_batch(rng: &mut ChaCha8Rng, cfg: &ModelConfig, rows: usize) -> Batch {
    Batch {
        inputs: randn(rng, &[rows, cfg.lookback], 1.0),
        targets: randn(rng, &[rows, cfg.horizon], 1.0),
        channels: (0..rows).map(|_| rng.random_range(0..cfg.channels)).collect(),
    }
}

/// Small model for federated runs on short synthetic series.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        lookback: 24,
        horizon: 8,
        channels: 2,
        patch_len: 8,
        patch_stride: 4,
        d_model: 8,
        heads: 2,
        layers: 1,
        ffn_dim: 16,
        lora_rank: 2,
        lora_alpha: 4.0,
        quant_block: 16,
        init_std: 0.1,
        ..ModelConfig::default()
    }
}

/// Federated spec on a noisy sine with `clients` devices.
pub fn sine_spec(seed: u64, clients: usize, clusters: usize, rounds: usize) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(
        "sine",
        DatasetSource::Sine {
            rows: 120 * clients + 200,
            channels: 2,
            period: 12.0,
            noise: 0.1,
        },
        seed,
    );
    spec.model = small_model();
    let f = &mut spec.federation;
    f.clients = clients;
    f.clusters = clusters;
    f.rounds = rounds;
    f.local_steps = 2;
    f.batch_size = 32;
    f.eval_stride = 4;
    f.patience = 0;
    spec
}
