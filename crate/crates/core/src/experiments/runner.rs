//! One experiment run: model construction, phase-1 pretraining, phase-2
//! federated or centralized training, and the resulting metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::windows::window_refs;
use crate::error::{Error, Result};
use crate::experiments::baselines::{last_value, LinearBaseline};
use crate::experiments::spec::{
    derive_seed, prepare, ExperimentSpec, Mode, PreparedData, SEED_ADAPTERS, SEED_FEDERATION, SEED_MODEL,
    SEED_PRETRAIN,
};
use crate::federation::{
    run_centralized, run_federated, ClusterModel, CommLedger, FederationConfig, RoundReport, WindowPool,
};
use crate::model::train::Pretrainer;
use crate::model::ForecastModel;

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    #[serde(rename = "L")]
    pub lookback: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub mode: String,
    pub clustering: bool,
    pub peft: bool,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
    pub rounds: usize,
    pub uplink_bytes: usize,
    pub downlink_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineMetrics {
    pub last_value_mse: f64,
    pub last_value_mae: f64,
    pub linear_mse: f64,
    pub linear_mae: f64,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// The spec with data-dependent fields (channel count, effective K) filled in.
    pub resolved: ExperimentSpec,
    pub row: ResultRow,
    pub reports: Vec<RoundReport>,
    pub ledger: Option<CommLedger>,
    /// Phase-2 model before training; cluster parameters apply on top of it.
    pub base: ForecastModel,
    pub clusters: Vec<ClusterModel>,
    pub assignments: Vec<usize>,
    pub pretrain_losses: Vec<f64>,
}

impl RunOutcome {
    /// The trained model that forecasts the (first) evaluation series.
    pub fn eval_model(&self, data: &PreparedData) -> Result<ForecastModel> {
        let owner = data.setup.eval.first().map_or(0, |e| e.owner);
        let cluster = self.assignments.get(owner).copied().unwrap_or(0);
        self.clusters
            .iter()
            .find(|c| c.id == cluster)
            .ok_or_else(|| Error::Contract("no trained cluster model".into()))?
            .model(&self.base)
    }
}

/// Fills in the fields a spec derives from its data.
pub fn resolve(spec: &ExperimentSpec, data: &PreparedData) -> ExperimentSpec {
    let mut r = spec.clone();
    r.model.channels = data.channels;
    if !r.clustering {
        r.federation.clusters = 1;
    }
    r
}

/// Phase-1 model: random init followed by next-patch pretraining on the
/// pooled training split.
pub fn pretrained_model(spec: &ExperimentSpec, data: &PreparedData) -> Result<(ForecastModel, Vec<f64>)> {
    let mut model = ForecastModel::new(spec.model.clone(), derive_seed(spec.seed, SEED_MODEL))?;
    let mut losses = Vec::with_capacity(spec.pretrain_steps);
    if spec.pretrain_steps > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, SEED_PRETRAIN));
        let pool = WindowPool::new(
            data.pooled_train.clone(),
            spec.model.lookback,
            spec.model.horizon,
            spec.federation.window_stride,
        )?;
        let mut trainer = Pretrainer::new(&model, spec.pretrain_lr, &mut rng)?;
        for _ in 0..spec.pretrain_steps {
            let picks = pool.sample(spec.federation.batch_size, &mut rng);
            let batch = pool.batch(&picks)?;
            losses.push(trainer.step(&mut model, &batch.inputs, spec.federation.micro_batch)?);
        }
    }
    Ok((model, losses))
}

/// Phase-2 starting point for the spec.
pub fn phase2_model(spec: &ExperimentSpec, pretrained: ForecastModel) -> Result<ForecastModel> {
    if spec.peft {
        pretrained.into_peft(derive_seed(spec.seed, SEED_ADAPTERS))
    } else {
        pretrained.into_full()
    }
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunOutcome> {
    let data = prepare(spec)?;
    run_prepared(spec, &data)
}

/// Runs a spec on already prepared data.
pub fn run_prepared(spec: &ExperimentSpec, data: &PreparedData) -> Result<RunOutcome> {
    let resolved = resolve(spec, data);
    resolved.model.validate()?;
    resolved.federation.validate()?;
    let (pretrained, pretrain_losses) = pretrained_model(&resolved, data)?;
    let base = phase2_model(&resolved, pretrained)?;
    let fed_seed = derive_seed(resolved.seed, SEED_FEDERATION);
    let (reports, ledger, clusters, assignments) = match resolved.mode {
        Mode::Federated => {
            let run = run_federated(&base, &data.setup, &resolved.federation, fed_seed)?;
            (run.reports, Some(run.ledger), run.clusters, run.assignments)
        }
        Mode::Centralized => {
            let run = run_centralized(&base, &data.pooled_train, &data.eval_series(), &resolved.federation, fed_seed)?;
            let cluster = ClusterModel {
                id: 0,
                members: (0..data.setup.clients.len()).collect(),
                weights: vec![1.0; data.setup.clients.len()],
                params: run.params,
            };
            (run.reports, None, vec![cluster], vec![0; data.setup.clients.len()])
        }
    };
    let last = reports
        .last()
        .ok_or_else(|| Error::config("federation.rounds", "at least one round is needed for metrics"))?;
    let (up, down) = ledger.as_ref().map_or((0, 0), |l| {
        let t = |d| l.totals(Some(d)).bytes;
        (t(crate::federation::Direction::Uplink), t(crate::federation::Direction::Downlink))
    });
    let row = ResultRow {
        dataset: resolved.dataset.clone(),
        lookback: resolved.model.lookback,
        horizon: resolved.model.horizon,
        mode: resolved.mode.label().into(),
        clustering: resolved.clustering,
        peft: resolved.peft,
        seed: resolved.seed,
        mse: last.test_mse,
        mae: last.test_mae,
        rounds: reports.len(),
        uplink_bytes: up,
        downlink_bytes: down,
    };
    Ok(RunOutcome {
        resolved,
        row,
        reports,
        ledger,
        base,
        clusters,
        assignments,
        pretrain_losses,
    })
}

/// Baseline metrics on the same evaluation windows as the model.
pub fn baselines(spec: &ExperimentSpec, data: &PreparedData, fed: &FederationConfig) -> Result<BaselineMetrics> {
    let (l, t) = (spec.model.lookback, spec.model.horizon);
    let eval_refs = data
        .setup
        .eval
        .iter()
        .map(|e| window_refs(&e.data, l, t, fed.eval_stride))
        .collect::<Result<Vec<_>>>()?;
    let eval: Vec<_> = data.setup.eval.iter().zip(&eval_refs).map(|(e, r)| (&e.data, r.as_slice())).collect();
    let train_refs = data
        .pooled_train
        .iter()
        .map(|d| window_refs(d, l, t, fed.window_stride))
        .collect::<Result<Vec<_>>>()?;
    let train: Vec<_> = data.pooled_train.iter().zip(&train_refs).map(|(d, r)| (d, r.as_slice())).collect();
    let naive = last_value(&eval, l, t);
    let linear = LinearBaseline::fit(&train, l, t)?.evaluate(&eval);
    Ok(BaselineMetrics {
        last_value_mse: naive.mse(),
        last_value_mae: naive.mae(),
        linear_mse: linear.mse(),
        linear_mae: linear.mae(),
    })
}
