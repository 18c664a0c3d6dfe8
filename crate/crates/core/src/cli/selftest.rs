//! A quick invariant suite runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::norm::RevinState;
use crate::error::Result;
use crate::experiments::{run_experiment, DatasetSource, ExperimentSpec, Mode};
use crate::federation::ServerKind;
use crate::model::checkpoint;
use crate::model::layers::self_attention;
use crate::model::train::loss_and_grads;
use crate::model::{Batch, ForecastModel, ModelConfig, QuantizedTensor};
use crate::numerics::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Small model used by the quick checks.
pub fn tiny_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let heads = if rng.random_bool(0.5) { 1 } else { 2 };
    ModelConfig {
        lookback: 16,
        horizon: 4,
        channels: 2,
        patch_len: 8,
        patch_stride: rng.random_range(4..=8),
        d_model: 4 * heads,
        heads,
        layers: rng.random_range(1..=2),
        ffn_dim: 6,
        lora_rank: 2,
        lora_alpha: 4.0,
        quant_block: 8,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

fn tiny_batch(rng: &mut ChaCha8Rng, cfg: &ModelConfig, rows: usize) -> Batch {
    Batch {
        inputs: randn(rng, &[rows, cfg.lookback], 1.0),
        targets: randn(rng, &[rows, cfg.horizon], 1.0),
        channels: (0..rows).map(|i| i % cfg.channels).collect(),
    }
}

/// Largest relative deviation between tape gradients and central
/// differences over every trainable scalar.
pub fn gradient_error(model: &ForecastModel, batch: &Batch) -> Result<f64> {
    let (_, grads) = loss_and_grads(model, batch, batch.len())?;
    let params = model.trainable_params();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut m = model.clone();
                let mut ps = params.clone();
                ps[pi].data_mut()[j] += delta;
                m.set_trainable_params(ps)?;
                Ok(loss_and_grads(&m, batch, batch.len())?.0)
            };
            let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
            let g = grads[pi].data()[j];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn check_gradients() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        let cfg = tiny_config(&mut rng);
        let base = ForecastModel::new(cfg.clone(), 100 + i)?;
        let model = if i % 2 == 0 { base.into_peft(7)? } else { base.into_full()? };
        let batch = tiny_batch(&mut rng, &cfg, 3);
        worst = worst.max(gradient_error(&model, &batch)?);
    }
    Ok(Check {
        name: "gradients match central differences",
        passed: worst < 1e-4,
        detail: format!("max relative error {worst:.2e}"),
    })
}

fn check_attention() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (n, d) = (rng.random_range(1..=4), rng.random_range(1..=6));
        let x = randn(&mut rng, &[n, d], 1.0);
        let w: Vec<Tensor> = (0..3).map(|_| randn(&mut rng, &[d, d], 1.0)).collect();
        let mut tape = Tape::new();
        let vars: Vec<_> = std::iter::once(&x).chain(&w).map(|t| tape.constant(t.clone())).collect();
        let out = self_attention(&mut tape, vars[0], vars[1], vars[2], vars[3])?;
        let got = tape.value(out).clone();
        let proj = |m: &Tensor, i: usize, j: usize| (0..d).map(|k| x.data()[i * d + k] * m.data()[k * d + j]).sum::<f64>();
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|k| (0..d).map(|j| proj(&w[0], i, j) * proj(&w[1], k, j)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..d {
                let want: f64 = (0..n).map(|k| exps[k] / z * proj(&w[2], k, j)).sum();
                worst = worst.max((want - got.data()[i * d + j]).abs());
            }
        }
    }
    Ok(Check {
        name: "self-attention matches loop oracle",
        passed: worst < 1e-10,
        detail: format!("max abs error {worst:.2e}"),
    })
}

fn check_revin_and_quant() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut revin: f64 = 0.0;
    let mut quant_ok = true;
    for _ in 0..100 {
        let x: Vec<f64> = (0..32).map(|_| rng.sample::<f64, _>(StandardNormal) * 5.0 + 3.0).collect();
        let st = RevinState::identity(&x);
        let back = st.denormalize(&st.normalize(&x))?;
        revin = revin.max(x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));

        let n = rng.random_range(1..=50);
        let t = randn(&mut rng, &[n], 2.0);
        let q = QuantizedTensor::quantize(&t, 16)?;
        let d = q.dequantize();
        for (a, b) in t.data().chunks(16).zip(d.data().chunks(16)) {
            let absmax = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let err = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            if err > absmax / 127.0 + 1e-9 {
                quant_ok = false;
            }
        }
    }
    Ok(vec![
        Check {
            name: "RevIN round trip",
            passed: revin < 1e-6,
            detail: format!("max abs error {revin:.2e}"),
        },
        Check {
            name: "quantization error within absmax/127",
            passed: quant_ok,
            detail: String::new(),
        },
    ])
}

fn check_checkpoint() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let model = ForecastModel::new(tiny_config(&mut rng), 5)?.into_peft(6)?.snapped_f32();
    let bytes = checkpoint::to_bytes(&model)?;
    let back = checkpoint::from_bytes(&bytes)?;
    let same = checkpoint::to_bytes(&back)? == bytes && back == model;
    Ok(Check {
        name: "checkpoint round trip",
        passed: same,
        detail: format!("{} bytes", bytes.len()),
    })
}

/// Small federated spec on synthetic sine data.
pub fn tiny_spec(seed: u64) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(
        "sine",
        DatasetSource::Sine {
            rows: 400,
            channels: 2,
            period: 12.0,
            noise: 0.05,
        },
        seed,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.model = ModelConfig {
        patch_stride: 4,
        layers: 1,
        heads: 2,
        ..tiny_config(&mut rng)
    };
    let f = &mut spec.federation;
    f.clients = 4;
    f.clusters = 2;
    f.rounds = 3;
    f.local_steps = 2;
    f.batch_size = 32;
    f.eval_stride = 4;
    f.patience = 0;
    spec
}

fn check_determinism() -> Result<Check> {
    let mut a = tiny_spec(21);
    a.federation.workers = 1;
    let mut b = a.clone();
    b.federation.workers = 2;
    let (ra, rb) = (run_experiment(&a)?, run_experiment(&b)?);
    let same = ra.row == rb.row && ra.clusters.iter().zip(&rb.clusters).all(|(x, y)| x.params == y.params);
    Ok(Check {
        name: "seeded runs are bit-identical across worker counts",
        passed: same,
        detail: format!("mse {:.6} vs {:.6}", ra.row.mse, rb.row.mse),
    })
}

fn check_fedavg_degeneracy() -> Result<Check> {
    let mut fed = tiny_spec(22);
    fed.federation.clients = 1;
    fed.federation.clusters = 1;
    fed.federation.server = ServerKind::PassThrough;
    let mut cen = fed.clone();
    cen.mode = Mode::Centralized;
    let (f, c) = (run_experiment(&fed)?, run_experiment(&cen)?);
    let worst = f.clusters[0]
        .params
        .iter()
        .zip(&c.clusters[0].params)
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    Ok(Check {
        name: "single-client pass-through equals centralized training",
        passed: worst <= 1e-6,
        detail: format!("max parameter gap {worst:.2e}"),
    })
}

/// Runs every check; an error inside a check counts as a failure.
pub fn run_selftest() -> Vec<Check> {
    let mut out = Vec::new();
    let mut push = |name: &'static str, r: Result<Vec<Check>>| match r {
        Ok(cs) => out.extend(cs),
        Err(e) => out.push(Check {
            name,
            passed: false,
            detail: e.to_string(),
        }),
    };
    push("gradients", check_gradients().map(|c| vec![c]));
    push("attention", check_attention().map(|c| vec![c]));
    push("round trips", check_revin_and_quant());
    push("checkpoint", check_checkpoint().map(|c| vec![c]));
    push("determinism", check_determinism().map(|c| vec![c]));
    push("degeneracy", check_fedavg_degeneracy().map(|c| vec![c]));
    out
}
