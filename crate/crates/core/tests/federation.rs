//! Federation engine: local updates, server step, clustering, faults,
//! isolation of the test split and determinism.

mod common;

use common::*;
use fedtime_core::data::TimeSeriesDataset;
use fedtime_core::experiments::{prepare, run_experiment, Mode};
use fedtime_core::federation::server::{FEDADAM_BETA1, FEDADAM_BETA2, FEDADAM_EPS};
use fedtime_core::federation::{
    fedadam_step, kmeans, run_federated, update_device, ClientState, Direction, EvalSet, LocalTraining, ServerKind,
    WindowPool,
};
use fedtime_core::model::train::loss_and_grads;
use fedtime_core::model::{predict, ForecastModel, OptimizerKind, ParamValue};
use fedtime_core::numerics::{AdamConfig, AdamState, Tensor};
use rand::Rng;

fn peft_base(seed: u64) -> ForecastModel {
    ForecastModel::new(small_model(), seed).unwrap().into_peft(seed + 1).unwrap()
}

#[test]
fn local_sgd_matches_a_hand_written_loop() {
    let ds = fedtime_core::data::synthetic::sine_dataset(60, 2, 12.0, 0.1, 3);
    let cfg = small_model();
    let pool = WindowPool::new(vec![ds], cfg.lookback, cfg.horizon, 4).unwrap();
    let all: Vec<usize> = (0..pool.len()).collect();
    let batch = pool.batch(&all).unwrap();
    let mut base = peft_base(4);
    let mut r = rng(5);
    randomize_adapters(&mut base, &mut r);
    let local = LocalTraining {
        steps: 3,
        batch_size: 10_000,
        optimizer: OptimizerKind::Sgd,
        lr: 0.05,
        micro_batch: 7,
    };
    let mut client = ClientState::new(0, 0, pool, 9);
    let theta0 = base.trainable_params();
    let got = update_device(&mut client, &base, &theta0, &local).unwrap();

    let mut theta = theta0.clone();
    let mut losses = Vec::new();
    for _ in 0..3 {
        let mut m = base.clone();
        m.set_trainable_params(theta.clone()).unwrap();
        let (loss, g) = loss_and_grads(&m, &batch, batch.len()).unwrap();
        losses.push(loss);
        for (p, gi) in theta.iter_mut().zip(&g) {
            for (x, d) in p.data_mut().iter_mut().zip(gi.data()) {
                *x -= 0.05 * d;
            }
        }
    }
    for (a, b) in got.params.iter().zip(&theta) {
        assert!(max_abs_diff(a.data(), b.data()) < 1e-10);
    }
    let mean = losses.iter().sum::<f64>() / 3.0;
    assert!((got.train_loss.unwrap() - mean).abs() < 1e-10);
    // The caller's parameters are untouched.
    assert_eq!(theta0, base.trainable_params());
}

#[test]
fn fedadam_matches_a_hand_written_loop() {
    let mut r = rng(6);
    let n = 7;
    let mut prev = vec![randn(&mut r, &[n], 1.0)];
    let lr = 0.03;
    let mut state = AdamState::new(
        AdamConfig {
            lr,
            beta1: FEDADAM_BETA1,
            beta2: FEDADAM_BETA2,
            eps: FEDADAM_EPS,
        },
        &prev,
    );
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let mut want = prev[0].data().to_vec();
    for step in 1..=5 {
        let agg = vec![randn(&mut r, &[n], 1.0)];
        for j in 0..n {
            let g = want[j] - agg[0].data()[j];
            m[j] = 0.9 * m[j] + 0.1 * g;
            v[j] = 0.99 * v[j] + 0.01 * g * g;
            let mh = m[j] / (1.0 - 0.9f64.powi(step));
            let vh = v[j] / (1.0 - 0.99f64.powi(step));
            want[j] -= lr * mh / (vh.sqrt() + 1e-3);
        }
        prev = fedadam_step(&prev, &agg, &mut state).unwrap();
        assert!(max_abs_diff(prev[0].data(), &want) < 1e-12);
    }
}

#[test]
fn kmeans_finds_the_optimal_partition_of_separated_groups() {
    let mut r = rng(7);
    for trial in 0..20 {
        let k = r.random_range(1..=3);
        let n = r.random_range(k..=8);
        let centers: Vec<Vec<f64>> = (0..k).map(|c| vec![20.0 * c as f64, -15.0 * c as f64]).collect();
        let points: Vec<Vec<f64>> = (0..n)
            .map(|i| centers[i % k].iter().map(|c| c + 0.3 * gaussian(&mut r)).collect())
            .collect();
        let km = kmeans(&points, k, trial).unwrap();
        // Brute force over every labelling.
        let mut best = f64::INFINITY;
        for code in 0..k.pow(n as u32) {
            let labels: Vec<usize> = (0..n).map(|i| code / k.pow(i as u32) % k).collect();
            let mut cost = 0.0;
            for c in 0..k {
                let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue;
                }
                let mean: Vec<f64> =
                    (0..2).map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64).collect();
                cost += members.iter().map(|p| (p[0] - mean[0]).powi(2) + (p[1] - mean[1]).powi(2)).sum::<f64>();
            }
            best = best.min(cost);
        }
        assert!((km.inertia() - best).abs() < 1e-9, "trial {trial}: {} vs {best}", km.inertia());
    }
}

#[test]
fn injected_fault_skips_exactly_one_upload() {
    let mut spec = sine_spec(8, 4, 1, 4);
    spec.federation.faults = vec![[2, 1]];
    let out = run_experiment(&spec).unwrap();
    assert_eq!(out.reports.len(), 4);
    for rep in &out.reports {
        let want: Vec<usize> = if rep.round == 2 { vec![1] } else { vec![] };
        assert_eq!(rep.skipped, want);
    }
    let ledger = out.ledger.unwrap();
    let up = ledger.messages().iter().filter(|m| m.direction == Direction::Uplink).count();
    let down = ledger.messages().iter().filter(|m| m.direction == Direction::Downlink).count();
    assert_eq!(up, 4 * 4 - 1);
    assert_eq!(down, 4 * 4);
    assert!(!ledger
        .messages()
        .iter()
        .any(|m| m.direction == Direction::Uplink && m.round == 2 && m.client == 1));
}

#[test]
fn whole_cluster_failure_is_an_error() {
    let mut spec = sine_spec(9, 2, 2, 2);
    spec.federation.faults = vec![[1, 0], [1, 1]];
    assert!(run_experiment(&spec).is_err());
}

#[test]
fn test_split_never_influences_training() {
    let spec = sine_spec(10, 4, 2, 3);
    let data = prepare(&spec).unwrap();
    let base = peft_base(11);
    let mut fed = spec.federation.clone();
    fed.patience = 0;
    let a = run_federated(&base, &data.setup, &fed, 12).unwrap();
    let mut other = data.setup.clone();
    let mut r = rng(13);
    other.eval = other
        .eval
        .iter()
        .map(|e| {
            let cols: Vec<Vec<f64>> =
                (0..e.data.channels()).map(|_| (0..e.data.rows()).map(|_| 100.0 * gaussian(&mut r)).collect()).collect();
            EvalSet {
                owner: e.owner,
                data: TimeSeriesDataset::from_columns("noise", &cols).unwrap(),
            }
        })
        .collect();
    let b = run_federated(&base, &other, &fed, 12).unwrap();
    assert_ne!(a.reports[0].test_mse, b.reports[0].test_mse);
    for (x, y) in a.clusters.iter().zip(&b.clusters) {
        assert_eq!(x.params, y.params);
    }
}

#[test]
fn frozen_weights_never_change() {
    let spec = sine_spec(14, 4, 2, 3);
    let out = run_experiment(&spec).unwrap();
    for c in &out.clusters {
        let m = c.model(&out.base).unwrap();
        for (e, b) in m.entries().iter().zip(out.base.entries()) {
            if !e.trainable {
                assert_eq!(e.value, b.value, "{} changed", e.name);
            }
            if let ParamValue::Quantized { .. } = e.value {
                assert!(!e.trainable);
            }
        }
    }
}

#[test]
fn zero_adapters_leave_the_quantized_model_unchanged() {
    let mut r = rng(15);
    let cfg = small_model();
    let pre = ForecastModel::new(cfg.clone(), 16).unwrap();
    let peft = pre.clone().into_peft(17).unwrap();
    let mut full = pre.into_full().unwrap();
    for e in peft.entries() {
        if let ParamValue::Quantized { dense, .. } = &e.value {
            full.set_dense(&e.name, dense.clone()).unwrap();
        }
    }
    let batch = random_batch(&mut r, &cfg, 6);
    let a = predict(&peft, &batch.inputs, &batch.channels).unwrap();
    let b = predict(&full, &batch.inputs, &batch.channels).unwrap();
    assert!(max_abs_diff(a.data(), b.data()) < 1e-12);
}

#[test]
fn runs_are_deterministic_across_worker_counts() {
    let mut spec = sine_spec(18, 4, 2, 3);
    spec.federation.workers = 1;
    let a = run_experiment(&spec).unwrap();
    let a2 = run_experiment(&spec).unwrap();
    spec.federation.workers = 3;
    let b = run_experiment(&spec).unwrap();
    for other in [&a2, &b] {
        assert_eq!(a.row, other.row);
        assert_eq!(a.assignments, other.assignments);
        for (x, y) in a.clusters.iter().zip(&other.clusters) {
            assert_eq!(x.params, y.params);
        }
    }
}

#[test]
fn single_client_pass_through_equals_centralized_training() {
    let mut fed = sine_spec(19, 1, 1, 4);
    fed.federation.server = ServerKind::PassThrough;
    let mut cen = fed.clone();
    cen.mode = Mode::Centralized;
    let (f, c) = (run_experiment(&fed).unwrap(), run_experiment(&cen).unwrap());
    for (a, b) in f.clusters[0].params.iter().zip(&c.clusters[0].params) {
        assert!(max_abs_diff(a.data(), b.data()) <= 1e-6);
    }
    assert!(c.ledger.is_none());
}

#[test]
fn ledger_counts_one_message_per_member_and_direction() {
    let spec = sine_spec(20, 5, 2, 3);
    let out = run_experiment(&spec).unwrap();
    let ledger = out.ledger.as_ref().unwrap();
    let payload = 4 * out.base.trainable_params().iter().map(Tensor::len).sum::<usize>();
    assert_eq!(ledger.messages().len(), 2 * 5 * 3);
    assert!(ledger.messages().iter().all(|m| m.bytes == payload));
    assert_eq!(out.row.uplink_bytes, 5 * 3 * payload);
    assert_eq!(out.row.downlink_bytes, 5 * 3 * payload);
}
