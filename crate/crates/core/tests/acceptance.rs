//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria that cannot be met in this environment are still run and still
//! print FAIL; they are listed in `KNOWN_RED` so the target exits zero when
//! they are the only failures. Any other failure exits nonzero.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::*;
use fedtime_core::data::TimeSeriesDataset;
use fedtime_core::experiments::protocols::pass_through;
use fedtime_core::experiments::{baselines, prepare, run_experiment, DatasetSource, ExperimentSpec, Mode};
use fedtime_core::federation::{
    aggregate, ledger_report, run_federated, update_device, ClientState, Direction, LocalTraining, ServerKind,
    WindowPool,
};
use fedtime_core::model::checkpoint::to_bytes;
use fedtime_core::model::layers::{encoder_forward, multi_head_attention, self_attention, LayerVars};
use fedtime_core::model::train::loss_and_grads;
use fedtime_core::model::{mae_metric, mse_metric, AdaptTargets, ForecastModel, ModelConfig, QuantizedTensor};
use fedtime_core::data::RevinState;
use fedtime_core::numerics::{Tape, Tensor};
use rand::Rng;

/// Criteria expected to fail here, with the reason printed next to FAIL.
const KNOWN_RED: &[(u32, &str)] = &[
    (5, "a 50x byte ratio needs a backbone far larger than the desk model"),
    (6, "needs the ETTh1 file and a desktop-class CPU budget"),
];

struct Verdict {
    pass: bool,
    detail: String,
    /// A failure is only excused for a known-red criterion when this holds,
    /// i.e. the failing part is the unattainable one.
    excusable: bool,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
            excusable: false,
        }
    }

    fn excusable(mut self, yes: bool) -> Self {
        self.excusable = yes;
        self
    }
}

fn run(id: u32, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let started = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Verdict::new(false, format!("panicked: {msg}"))
    });
    let known = KNOWN_RED.iter().find(|(k, _)| *k == id).filter(|_| v.excusable);
    let tag = if v.pass { "PASS" } else { "FAIL" };
    let note = match (v.pass, known) {
        (false, Some((_, why))) => format!(" [known red: {why}]"),
        _ => String::new(),
    };
    println!("{tag} {id} {name}: {} ({:.1}s){note}", v.detail, started.elapsed().as_secs_f64());
    v.pass || known.is_some()
}

fn gradient_soundness() -> Verdict {
    let started = Instant::now();
    let mut r = rng(1001);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let cfg = tiny_config(&mut r);
        assert!(cfg.n_patches() <= 4 && cfg.d_model <= 8 && cfg.layers <= 2);
        let base = ForecastModel::new(cfg.clone(), 2000 + i).unwrap();
        let mut model = if i % 2 == 0 {
            base.into_peft(3000 + i).unwrap()
        } else {
            base.into_full().unwrap()
        };
        randomize_adapters(&mut model, &mut r);
        randomize_revin(&mut model, &mut r);
        let batch = random_batch(&mut r, &cfg, 3);
        let (_, grads) = loss_and_grads(&model, &batch, batch.len()).unwrap();
        let fd = finite_differences(&model, |m| loop_loss(m, &batch), 1e-5);
        worst = worst.max(max_relative_error(&fd, &grads, 1e-3));
    }
    let secs = started.elapsed();
    Verdict::new(
        worst < 1e-4 && secs < Duration::from_secs(120),
        format!("20 configs, max relative error {worst:.2e}"),
    )
}

fn oracle_equivalence() -> Verdict {
    let mut r = rng(1002);
    let mut worst = [0.0f64; 5];
    for _ in 0..100 {
        let heads = r.random_range(1..=2);
        let d = heads * r.random_range(1..=4);
        let n = r.random_range(1..=4);
        let x = randn(&mut r, &[n, d], 1.0);
        let ws: Vec<Tensor> = (0..4).map(|_| randn(&mut r, &[d, d], 0.5)).collect();
        let m: Vec<Mat> = ws.iter().map(mat).collect();

        let mut tape = Tape::new();
        let v: Vec<_> = std::iter::once(&x).chain(&ws).map(|w| tape.constant(w.clone())).collect();
        let sa = self_attention(&mut tape, v[0], v[1], v[2], v[3]).unwrap();
        let msa = multi_head_attention(&mut tape, v[0], v[1], v[2], v[3], v[4], heads).unwrap();
        worst[0] = worst[0].max(max_abs_diff(
            tape.value(sa).data(),
            &flat(&loop_self_attention(&mat(&x), &m[0], &m[1], &m[2])),
        ));
        worst[1] = worst[1].max(max_abs_diff(
            tape.value(msa).data(),
            &flat(&loop_msa(&mat(&x), &m[0], &m[1], &m[2], &m[3], heads)),
        ));

        let f = r.random_range(1..=8);
        let layers: Vec<LayerW> = (0..r.random_range(1..=2))
            .map(|_| LayerW {
                ln1_g: (0..d).map(|_| 1.0 + 0.1 * gaussian(&mut r)).collect(),
                ln1_b: (0..d).map(|_| 0.1 * gaussian(&mut r)).collect(),
                wq: mat(&randn(&mut r, &[d, d], 0.4)),
                wk: mat(&randn(&mut r, &[d, d], 0.4)),
                wv: mat(&randn(&mut r, &[d, d], 0.4)),
                wo: mat(&randn(&mut r, &[d, d], 0.4)),
                ln2_g: (0..d).map(|_| 1.0 + 0.1 * gaussian(&mut r)).collect(),
                ln2_b: (0..d).map(|_| 0.1 * gaussian(&mut r)).collect(),
                w_gate: mat(&randn(&mut r, &[d, f], 0.4)),
                w_up: mat(&randn(&mut r, &[d, f], 0.4)),
                w_down: mat(&randn(&mut r, &[f, d], 0.4)),
            })
            .collect();
        let xv = tape.constant(x.clone());
        let t = |m: &Mat| Tensor::from_rows(m).unwrap();
        let vec = |v: &Vec<f64>| Tensor::vector(v.clone()).unwrap();
        let lv: Vec<LayerVars> = layers
            .iter()
            .map(|l| LayerVars {
                ln1_gain: tape.constant(vec(&l.ln1_g)),
                ln1_bias: tape.constant(vec(&l.ln1_b)),
                wq: tape.constant(t(&l.wq)),
                wk: tape.constant(t(&l.wk)),
                wv: tape.constant(t(&l.wv)),
                wo: tape.constant(t(&l.wo)),
                ln2_gain: tape.constant(vec(&l.ln2_g)),
                ln2_bias: tape.constant(vec(&l.ln2_b)),
                w_gate: tape.constant(t(&l.w_gate)),
                w_up: tape.constant(t(&l.w_up)),
                w_down: tape.constant(t(&l.w_down)),
            })
            .collect();
        let enc = encoder_forward(&mut tape, xv, &lv, heads).unwrap();
        worst[2] = worst[2].max(max_abs_diff(tape.value(enc).data(), &flat(&loop_encoder(&mat(&x), &layers, heads))));

        let (b, h) = (r.random_range(1..=4), r.random_range(1..=6));
        let p = randn(&mut r, &[b, h], 2.0);
        let y = randn(&mut r, &[b, h], 2.0);
        worst[3] = worst[3].max((mse_metric(&p, &y).unwrap() - loop_mse(p.data(), y.data())).abs());
        worst[4] = worst[4].max((mae_metric(&p, &y).unwrap() - loop_mae(p.data(), y.data())).abs());
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    Verdict::new(
        max < 1e-10,
        format!(
            "100 instances each; SA {:.1e}, MSA {:.1e}, encoder {:.1e}, MSE {:.1e}, MAE {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

fn fedavg_degeneracy() -> Verdict {
    let mut worst: f64 = 0.0;
    for rounds in 1..=20 {
        let fed = pass_through(&sine_spec(1003, 1, 1, rounds));
        let mut cen = fed.clone();
        cen.mode = Mode::Centralized;
        let (f, c) = (run_experiment(&fed).unwrap(), run_experiment(&cen).unwrap());
        for (a, b) in f.clusters[0].params.iter().zip(&c.clusters[0].params) {
            worst = worst.max(max_abs_diff(a.data(), b.data()));
        }
    }
    Verdict::new(worst <= 1e-6, format!("20-round trajectory, max parameter gap {worst:.2e}"))
}

fn determinism() -> Verdict {
    let mut spec = sine_spec(1004, 8, 2, 20);
    let mut fingerprints = Vec::new();
    for workers in [1, 1, 2, 0] {
        spec.federation.workers = workers;
        let out = run_experiment(&spec).unwrap();
        let ckpts: Vec<Vec<u8>> = out
            .clusters
            .iter()
            .map(|c| to_bytes(&c.model(&out.base).unwrap()).unwrap())
            .collect();
        fingerprints.push((ckpts, out.row));
    }
    let same = fingerprints.windows(2).all(|w| w[0] == w[1]);
    Verdict::new(
        same,
        format!("workers 1, 1, 2, all: checkpoints and result rows identical = {same}"),
    )
}

/// Closed-form parameter counts: `(total, trainable)`.
fn closed_form(c: &ModelConfig) -> (usize, usize) {
    let (d, f, t) = (c.d_model, c.ffn_dim, c.horizon);
    let n = c.n_patches();
    let per_layer = 4 * d + 4 * d * d + 3 * d * f;
    let adapted = c.adapt.as_array().iter().filter(|&&a| a).count();
    let adapters = c.layers * adapted * c.lora_rank * (d + d);
    let head = n * d * t + t;
    let revin = 2 * c.channels;
    let total = c.patch_len * d + n * d + c.layers * per_layer + head + revin + adapters;
    (total, adapters + head + revin)
}

fn peft_accounting() -> Verdict {
    let desk = ModelConfig::default();
    let model = ForecastModel::new(desk.clone(), 1).unwrap().into_peft(2).unwrap();
    let counts = model.counts();
    let (total, trainable) = closed_form(&desk);
    let counts_ok = (counts.total, counts.trainable) == (total, trainable)
        && model.trainable_fraction() == trainable as f64 / total as f64;

    // A one-round run at desk scale: the ledger's full/actual ratio.
    let mut spec = ExperimentSpec::new(
        "sine",
        DatasetSource::Sine {
            rows: 5000,
            channels: 7,
            period: 24.0,
            noise: 0.1,
        },
        1005,
    );
    spec.federation.rounds = 1;
    spec.federation.local_steps = 0;
    spec.federation.eval_stride = 24;
    let out = run_experiment(&spec).unwrap();
    let ledger = out.ledger.as_ref().unwrap();
    let rep = ledger_report(ledger);
    let (full, actual) = (rep.rows[1].total_bytes, rep.rows[0].total_bytes);
    let c = out.base.counts();
    let ledger_ok = full * (4 * c.trainable) == actual * (4 * c.total);
    let ratio = full as f64 / actual as f64;

    let large = ModelConfig {
        d_model: 1024,
        heads: 16,
        ffn_dim: 4096,
        layers: 16,
        lora_rank: 4,
        adapt: AdaptTargets::QV,
        ..ModelConfig::default()
    };
    let (lt, ltr) = closed_form(&large);
    let large_fraction = ltr as f64 / lt as f64;
    let large_ok = (0.01..=0.02).contains(&large_fraction);
    let ratio_ok = ratio >= 50.0;
    Verdict::new(
        counts_ok && ledger_ok && large_ok && ratio_ok,
        format!(
            "desk counts {}/{} match closed form = {counts_ok}; ledger ratio {ratio:.4} = total/trainable exactly = {ledger_ok}; \
             16-layer D=1024 q/v r=4 fraction {:.4} in [0.01, 0.02] = {large_ok}; ratio >= 50x = {ratio_ok}",
            counts.trainable,
            counts.total,
            large_fraction
        ),
    )
    .excusable(counts_ok && ledger_ok && large_ok)
}

fn etth1_path() -> Option<PathBuf> {
    std::env::var_os("FEDTIME_ETTH1")
        .map(PathBuf::from)
        .or_else(|| Some(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/ETTh1.csv")))
        .filter(|p| p.exists())
}

fn etth1_quality() -> Verdict {
    let Some(path) = etth1_path() else {
        return Verdict::new(false, "ETTh1.csv not found (set FEDTIME_ETTH1 or place it at data/ETTh1.csv)")
            .excusable(true);
    };
    let started = Instant::now();
    let ds = TimeSeriesDataset::load_csv(&path).unwrap();
    let dims_ok = ds.verify_known_dimensions().unwrap_or(false) && ds.channels() == 7 && ds.rows() == 17_420;
    let mut spec = ExperimentSpec::new("ETTh1", DatasetSource::Csv { path }, 1006);
    spec.federation.clients = 8;
    spec.federation.clusters = 2;
    let data = prepare(&spec).unwrap();
    let out = fedtime_core::experiments::run_prepared(&spec, &data).unwrap();
    let base = baselines(&out.resolved, &data, &out.resolved.federation).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let pass = dims_ok
        && out.row.mse <= 0.55
        && out.row.mse < base.last_value_mse
        && out.row.mae < base.last_value_mae
        && secs <= 1800.0;
    Verdict::new(
        pass,
        format!(
            "dims ok = {dims_ok}; mse {:.4} mae {:.4} vs last-value {:.4}/{:.4}",
            out.row.mse, out.row.mae, base.last_value_mse, base.last_value_mae
        ),
    )
}

fn clustering_direction() -> Verdict {
    let started = Instant::now();
    let mut clustered = Vec::new();
    let mut single = Vec::new();
    for seed in 1..=3 {
        for k in [1, 2] {
            let mut spec = ExperimentSpec::new("two-regime", DatasetSource::TwoRegime { rows: 600, channels: 1 }, seed);
            spec.model = ModelConfig {
                lookback: 48,
                horizon: 12,
                channels: 1,
                patch_len: 8,
                patch_stride: 8,
                d_model: 16,
                heads: 2,
                layers: 1,
                ffn_dim: 32,
                lora_rank: 4,
                lora_alpha: 8.0,
                quant_block: 32,
                init_std: 0.1,
                ..ModelConfig::default()
            };
            let f = &mut spec.federation;
            f.clients = 8;
            f.clusters = k;
            f.rounds = 20;
            f.local_steps = 5;
            f.batch_size = 64;
            f.local_lr = 1e-2;
            f.eval_stride = 4;
            f.patience = 0;
            let mse = run_experiment(&spec).unwrap().row.mse;
            if k == 2 { &mut clustered } else { &mut single }.push(mse);
        }
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[1]
    };
    let (mk2, mk1) = (median(&mut clustered), median(&mut single));
    Verdict::new(
        mk2 <= mk1 && started.elapsed() <= Duration::from_secs(600),
        format!("median test MSE K=2 {mk2:.5} vs K=1 {mk1:.5} over 3 seeds"),
    )
}

fn round_trips() -> Verdict {
    let mut r = rng(1008);
    let mut revin: f64 = 0.0;
    let mut quant_ok = true;
    for _ in 0..1000 {
        let n = r.random_range(2..=200);
        let scale = 10f64.powf(r.random_range(-3.0..3.0));
        let x: Vec<f64> = (0..n).map(|_| scale * gaussian(&mut r) + r.random_range(-50.0..50.0)).collect();
        let st = RevinState::identity(&x);
        let back = st.denormalize(&st.normalize(&x)).unwrap();
        revin = revin.max(max_abs_diff(&x, &back));

        let block = r.random_range(1..=128);
        let w = randn(&mut r, &[n], scale);
        let d = QuantizedTensor::quantize(&w, block).unwrap().dequantize();
        for (a, b) in w.data().chunks(block).zip(d.data().chunks(block)) {
            let absmax = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            quant_ok &= max_abs_diff(a, b) <= absmax / 127.0 + 1e-9;
        }
    }
    Verdict::new(
        revin < 1e-6 && quant_ok,
        format!("RevIN max error {revin:.2e}; quantization within absmax/127 on 1000 tensors = {quant_ok}"),
    )
}

fn fault_tolerance() -> Verdict {
    // Pick a client that shares its cluster, so the cluster survives.
    let mut spec = sine_spec(1009, 8, 2, 20);
    let probe = {
        let mut s = spec.clone();
        s.federation.rounds = 1;
        run_experiment(&s).unwrap()
    };
    let victim = (0..8)
        .find(|&i| probe.assignments.iter().filter(|&&a| a == probe.assignments[i]).count() > 1)
        .unwrap();
    spec.federation.faults = vec![[5, victim]];
    let out = run_experiment(&spec).unwrap();
    let ledger = out.ledger.as_ref().unwrap();
    let completed = out.reports.len() == 20;
    let skipped_ok = out.reports.iter().all(|r| r.skipped == if r.round == 5 { vec![victim] } else { vec![] });
    let up: Vec<_> = ledger.messages().iter().filter(|m| m.direction == Direction::Uplink).collect();
    let missing_ok = up.len() == 8 * 20 - 1 && !up.iter().any(|m| m.round == 5 && m.client == victim);

    // Renormalization: one pass-through round with the fault, against the
    // weighted mean of the survivors' own updates.
    let data = prepare(&spec).unwrap();
    let base = ForecastModel::new(spec.model.clone(), 5).unwrap().into_peft(6).unwrap();
    let mut fed = spec.federation.clone();
    fed.rounds = 1;
    fed.server = ServerKind::PassThrough;
    fed.faults = vec![[1, victim]];
    let run = run_federated(&base, &data.setup, &fed, 77).unwrap();
    let local = LocalTraining {
        steps: fed.local_steps,
        batch_size: fed.batch_size,
        optimizer: fed.local_optimizer,
        lr: fed.local_lr,
        micro_batch: fed.micro_batch,
    };
    let (l, t) = (spec.model.lookback, spec.model.horizon);
    let cluster = run.assignments[victim];
    let theta0 = base.trainable_params();
    let updates: Vec<(Vec<Tensor>, f64)> = (0..8)
        .filter(|&i| i != victim && run.assignments[i] == cluster)
        .map(|i| {
            let pool = WindowPool::new(vec![data.setup.clients[i].clone()], l, t, fed.window_stride).unwrap();
            let mut c = ClientState::new(i, cluster, pool, 77);
            let w = c.weight;
            (update_device(&mut c, &base, &theta0, &local).unwrap().params, w)
        })
        .collect();
    let members: Vec<(&[Tensor], f64)> = updates.iter().map(|(p, w)| (p.as_slice(), *w)).collect();
    let want = aggregate(&members).unwrap();
    let gap = want
        .iter()
        .zip(&run.clusters[cluster].params)
        .map(|(a, b)| max_abs_diff(a.data(), b.data()))
        .fold(0.0, f64::max);
    let renorm_ok = gap < 1e-12;
    Verdict::new(
        completed && skipped_ok && missing_ok && renorm_ok,
        format!(
            "client {victim} killed in round 5: 20 rounds = {completed}; skipped only there = {skipped_ok}; \
             {} uplinks, round-5 upload absent = {missing_ok}; survivor renormalization gap {gap:.1e}",
            up.len()
        ),
    )
}

fn main() {
    let started = Instant::now();
    let results = [
        run(1, "gradient soundness", gradient_soundness),
        run(2, "oracle equivalence", oracle_equivalence),
        run(3, "FedAvg degeneracy", fedavg_degeneracy),
        run(4, "determinism", determinism),
        run(5, "PEFT accounting", peft_accounting),
        run(6, "ETTh1 forecasting quality", etth1_quality),
        run(7, "clustering ablation direction", clustering_direction),
        run(8, "RevIN and quantization round trips", round_trips),
        run(9, "fault tolerance", fault_tolerance),
    ];
    let unexpected = results.iter().filter(|ok| !**ok).count();
    println!("acceptance finished in {:.1}s; unexpected failures: {unexpected}", started.elapsed().as_secs_f64());
    if unexpected > 0 {
        std::process::exit(1);
    }
}
