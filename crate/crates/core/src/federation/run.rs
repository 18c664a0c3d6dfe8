//! The round loop: clustering, broadcast, local training, aggregation,
//! server step, evaluation. Plus the centralized counterpart.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::dataset::TimeSeriesDataset;
use crate::data::partition::{client_features, standardize_features, ClientShard};
use crate::data::windows::{window_refs, WindowRef};
use crate::error::{Error, Result};
use crate::federation::client::{update_device, ClientState, DeviceUpdate, LocalTraining, WindowPool};
use crate::federation::kmeans::kmeans;
use crate::federation::ledger::{CommLedger, Direction, PayloadMode};
use crate::federation::server::{aggregate, ServerKind, ServerOptimizer};
use crate::model::checkpoint::{encode_payload, full_payload};
use crate::model::metrics::{predict_windows, summarize, ErrorSums};
use crate::model::params::{ForecastModel, Phase};
use crate::model::train::{OptimizerKind, DEFAULT_MICRO_BATCH};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    /// Number of simulated devices S.
    pub clients: usize,
    /// Number of k-means clusters K.
    pub clusters: usize,
    /// Maximum rounds (federated) or epochs (centralized).
    pub rounds: usize,
    /// Mini-batch steps per device per round; also steps per centralized epoch.
    pub local_steps: usize,
    pub batch_size: usize,
    pub local_optimizer: OptimizerKind,
    pub local_lr: f64,
    pub server: ServerKind,
    pub server_lr: f64,
    /// Rounds without a test-MSE improvement before stopping; 0 disables.
    pub patience: usize,
    pub window_stride: usize,
    pub eval_stride: usize,
    pub micro_batch: usize,
    /// Worker threads for client training; 0 uses every core.
    pub workers: usize,
    /// `[round, client]` pairs whose local update fails.
    pub faults: Vec<[usize; 2]>,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 8,
            clusters: 3,
            rounds: 100,
            local_steps: 5,
            batch_size: 512,
            local_optimizer: OptimizerKind::Adam,
            local_lr: 1e-3,
            server: ServerKind::FedAdam,
            server_lr: 1e-2,
            patience: 10,
            window_stride: 1,
            eval_stride: 1,
            micro_batch: DEFAULT_MICRO_BATCH,
            workers: 0,
            faults: Vec::new(),
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("clients", self.clients),
            ("clusters", self.clusters),
            ("batch_size", self.batch_size),
            ("window_stride", self.window_stride),
            ("eval_stride", self.eval_stride),
            ("micro_batch", self.micro_batch),
        ] {
            if v == 0 {
                return Err(Error::config(format!("federation.{key}"), "must be positive"));
            }
        }
        if self.clusters > self.clients {
            return Err(Error::config(
                "federation.clusters",
                format!("K = {} exceeds S = {}", self.clusters, self.clients),
            ));
        }
        for (key, v) in [("local_lr", self.local_lr), ("server_lr", self.server_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("federation.{key}"), "must be finite and non-negative"));
            }
        }
        Ok(())
    }

    fn local(&self) -> LocalTraining {
        LocalTraining {
            steps: self.local_steps,
            batch_size: self.batch_size,
            optimizer: self.local_optimizer,
            lr: self.local_lr,
            micro_batch: self.micro_batch,
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Contract(format!("worker pool: {e}")))
    }
}

/// A held-out series and the client whose cluster model forecasts it.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub owner: usize,
    pub data: TimeSeriesDataset,
}

/// Per-device training series plus held-out evaluation series.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedSetup {
    pub clients: Vec<TimeSeriesDataset>,
    pub eval: Vec<EvalSet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub id: usize,
    pub members: Vec<usize>,
    pub weights: Vec<f64>,
    pub params: Vec<Tensor>,
}

impl ClusterModel {
    /// The base model carrying this cluster's trainable parameters.
    pub fn model(&self, base: &ForecastModel) -> Result<ForecastModel> {
        let mut m = base.clone();
        m.set_trainable_params(self.params.clone())?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRound {
    pub cluster: usize,
    pub trained: usize,
    pub train_mse: Option<f64>,
    pub uplink_bytes: usize,
    pub downlink_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub clusters: Vec<ClusterRound>,
    pub test_mse: f64,
    pub test_mae: f64,
    pub seconds: f64,
    /// Clients whose update failed this round.
    pub skipped: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FederatedRun {
    pub clusters: Vec<ClusterModel>,
    pub assignments: Vec<usize>,
    pub reports: Vec<RoundReport>,
    pub ledger: CommLedger,
}

impl FederatedRun {
    pub fn final_report(&self) -> Option<&RoundReport> {
        self.reports.last()
    }
}

/// Windows of every evaluation set, grouped with the owning cluster.
fn eval_refs(eval: &[EvalSet], lookback: usize, horizon: usize, stride: usize) -> Result<Vec<Vec<WindowRef>>> {
    eval.iter()
        .map(|e| window_refs(&e.data, lookback, horizon, stride))
        .collect()
}

fn evaluate_sets(
    models: &[ForecastModel],
    owner_cluster: impl Fn(usize) -> usize,
    eval: &[EvalSet],
    refs: &[Vec<WindowRef>],
) -> Result<ErrorSums> {
    let mut sums = ErrorSums::default();
    for (e, r) in eval.iter().zip(refs) {
        let p = predict_windows(&models[owner_cluster(e.owner)], &e.data, r)?;
        sums.merge(&summarize(&p, &e.data.channel_names).sums);
    }
    Ok(sums)
}

/// Standardized per-client summary features.
pub fn cluster_features(clients: &[TimeSeriesDataset]) -> Vec<Vec<f64>> {
    let raw: Vec<[f64; 4]> = clients
        .iter()
        .enumerate()
        .map(|(id, d)| {
            client_features(&ClientShard {
                id,
                data: d.clone(),
                start_row: 0,
            })
        })
        .collect();
    standardize_features(&raw)
}

/// Runs the federated protocol from `base`, whose trainable parameters seed
/// every cluster model.
pub fn run_federated(
    base: &ForecastModel,
    setup: &FederatedSetup,
    cfg: &FederationConfig,
    seed: u64,
) -> Result<FederatedRun> {
    cfg.validate()?;
    if setup.clients.len() != cfg.clients {
        return Err(Error::config(
            "federation.clients",
            format!("configured {} clients, setup has {}", cfg.clients, setup.clients.len()),
        ));
    }
    let mode = match base.phase() {
        Phase::Peft => PayloadMode::AdapterOnly,
        Phase::Full => PayloadMode::FullModel,
        Phase::Pretrain => {
            return Err(Error::Contract("federated training needs a phase-2 model".into()));
        }
    };
    let mc = base.config();
    let (l, t) = (mc.lookback, mc.horizon);
    let assignments = kmeans(&cluster_features(&setup.clients), cfg.clusters, seed)?.assignments;

    let mut clients = setup
        .clients
        .iter()
        .enumerate()
        .map(|(id, d)| {
            let pool = WindowPool::new(vec![d.clone()], l, t, cfg.window_stride).map_err(|e| {
                Error::config("federation.clients", format!("client {id} cannot hold a window: {e}"))
            })?;
            Ok(ClientState::new(id, assignments[id], pool, seed))
        })
        .collect::<Result<Vec<_>>>()?;

    let theta0 = base.trainable_params();
    let mut clusters: Vec<ClusterModel> = (0..cfg.clusters)
        .map(|c| {
            let members: Vec<usize> = (0..clients.len()).filter(|&i| assignments[i] == c).collect();
            ClusterModel {
                id: c,
                weights: members.iter().map(|&i| clients[i].weight).collect(),
                members,
                params: theta0.clone(),
            }
        })
        .collect();
    let mut servers: Vec<ServerOptimizer> = (0..cfg.clusters)
        .map(|_| ServerOptimizer::new(cfg.server, cfg.server_lr, &theta0))
        .collect();

    let refs = eval_refs(&setup.eval, l, t, cfg.eval_stride)?;
    let mut ledger = CommLedger::new(mode, full_payload(base).len());
    let local = cfg.local();
    let pool = cfg.pool()?;
    let mut reports = Vec::new();
    let mut best = f64::INFINITY;
    let mut since_best = 0;

    for round in 1..=cfg.rounds {
        let started = Instant::now();
        for c in &clusters {
            let bytes = encode_payload(&c.params).len();
            for &m in &c.members {
                ledger.record(round, m, c.id, Direction::Downlink, bytes);
            }
        }
        let thetas: Vec<&[Tensor]> = clusters.iter().map(|c| c.params.as_slice()).collect();
        let updates: Vec<Result<DeviceUpdate>> = pool.install(|| {
            clients
                .par_iter_mut()
                .map(|client| {
                    if cfg.faults.contains(&[round, client.id]) {
                        return Err(Error::ClientFailed {
                            client: client.id,
                            round,
                            message: "injected fault".into(),
                        });
                    }
                    update_device(client, base, thetas[client.cluster], &local)
                })
                .collect()
        });

        let mut skipped = Vec::new();
        let mut cluster_rounds = Vec::with_capacity(clusters.len());
        for c in clusters.iter_mut() {
            let mut members: Vec<(&[Tensor], f64)> = Vec::new();
            let mut losses = Vec::new();
            for (&m, &w) in c.members.iter().zip(&c.weights) {
                match &updates[m] {
                    Ok(u) => {
                        ledger.record(round, m, c.id, Direction::Uplink, encode_payload(&u.params).len());
                        members.push((&u.params, w));
                        losses.extend(u.train_loss);
                    }
                    Err(_) => skipped.push(m),
                }
            }
            if members.is_empty() {
                return Err(Error::Aggregation(format!("cluster {} has no surviving members in round {round}", c.id)));
            }
            let agg = aggregate(&members)?;
            c.params = servers[c.id].step(&c.params, agg)?;
            cluster_rounds.push(ClusterRound {
                cluster: c.id,
                trained: members.len(),
                train_mse: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
                uplink_bytes: ledger.cluster_round_totals(round, c.id, Direction::Uplink).bytes,
                downlink_bytes: ledger.cluster_round_totals(round, c.id, Direction::Downlink).bytes,
            });
        }
        skipped.sort_unstable();

        let models = clusters.iter().map(|c| c.model(base)).collect::<Result<Vec<_>>>()?;
        let sums = evaluate_sets(&models, |owner| assignments[owner], &setup.eval, &refs)?;
        reports.push(RoundReport {
            round,
            clusters: cluster_rounds,
            test_mse: sums.mse(),
            test_mae: sums.mae(),
            seconds: started.elapsed().as_secs_f64(),
            skipped,
        });
        if sums.mse() < best {
            best = sums.mse();
            since_best = 0;
        } else {
            since_best += 1;
        }
        if cfg.patience > 0 && since_best >= cfg.patience {
            break;
        }
    }
    Ok(FederatedRun {
        clusters,
        assignments,
        reports,
        ledger,
    })
}

#[derive(Debug, Clone)]
pub struct CentralizedRun {
    pub params: Vec<Tensor>,
    pub reports: Vec<RoundReport>,
}

/// Trains `base` on the pooled series with the same optimizer family and step
/// budget, one report per epoch of `local_steps` steps. The sampling stream is
/// the one a device with id 0 would use.
pub fn run_centralized(
    base: &ForecastModel,
    train: &[TimeSeriesDataset],
    eval: &[TimeSeriesDataset],
    cfg: &FederationConfig,
    seed: u64,
) -> Result<CentralizedRun> {
    let mc = base.config();
    let (l, t) = (mc.lookback, mc.horizon);
    let pool = WindowPool::new(train.to_vec(), l, t, cfg.window_stride)?;
    let mut client = ClientState::new(0, 0, pool, seed);
    let eval: Vec<EvalSet> = eval.iter().map(|d| EvalSet { owner: 0, data: d.clone() }).collect();
    let refs = eval_refs(&eval, l, t, cfg.eval_stride)?;
    let local = cfg.local();
    let workers = cfg.pool()?;
    let mut params = base.trainable_params();
    let mut reports = Vec::new();
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    for epoch in 1..=cfg.rounds {
        let started = Instant::now();
        let update = workers.install(|| update_device(&mut client, base, &params, &local))?;
        params = update.params;
        let mut model = base.clone();
        model.set_trainable_params(params.clone())?;
        let sums = evaluate_sets(std::slice::from_ref(&model), |_| 0, &eval, &refs)?;
        reports.push(RoundReport {
            round: epoch,
            clusters: vec![ClusterRound {
                cluster: 0,
                trained: 1,
                train_mse: update.train_loss,
                uplink_bytes: 0,
                downlink_bytes: 0,
            }],
            test_mse: sums.mse(),
            test_mae: sums.mae(),
            seconds: started.elapsed().as_secs_f64(),
            skipped: Vec::new(),
        });
        if sums.mse() < best {
            best = sums.mse();
            since_best = 0;
        } else {
            since_best += 1;
        }
        if cfg.patience > 0 && since_best >= cfg.patience {
            break;
        }
    }
    Ok(CentralizedRun { params, reports })
}

/// Writes one CSV row per round and cluster.
pub fn write_round_csv(reports: &[RoundReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "round",
        "cluster",
        "train_mse",
        "test_mse",
        "test_mae",
        "uplink_bytes",
        "downlink_bytes",
        "seconds",
    ])?;
    for r in reports {
        for c in &r.clusters {
            w.write_record([
                r.round.to_string(),
                c.cluster.to_string(),
                c.train_mse.map_or(String::new(), |v| v.to_string()),
                r.test_mse.to_string(),
                r.test_mae.to_string(),
                c.uplink_bytes.to_string(),
                c.downlink_bytes.to_string(),
                format!("{:.3}", r.seconds),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
