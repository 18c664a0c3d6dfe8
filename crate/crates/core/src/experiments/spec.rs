//! Experiment descriptions and the data preparation they imply.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::dataset::{split_train_test, Scaler, TimeSeriesDataset};
use crate::data::partition::partition_clients;
use crate::data::synthetic::{constant_dataset, demo_dataset, sine_dataset, sine_mixture_clients, two_regime_clients};
use crate::error::{Error, Result};
use crate::federation::{EvalSet, FederatedSetup, FederationConfig};
use crate::model::ModelConfig;

/// Where the series come from. Single-series sources are split in time and
/// cut into contiguous client shards; multi-client sources give every client
/// its own series, each split in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    Csv {
        path: PathBuf,
    },
    /// The bundled 200-row, 2-channel hourly series.
    Demo,
    Sine {
        rows: usize,
        channels: usize,
        period: f64,
        noise: f64,
    },
    Constant {
        rows: usize,
        channels: usize,
        value: f64,
    },
    /// Half the clients follow one seasonal AR(1) regime, half another.
    TwoRegime {
        rows: usize,
        channels: usize,
    },
    SineMixture {
        rows: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Federated,
    Centralized,
}

impl Mode {
    pub fn label(&self) -> &'static str {
        match self {
            Mode::Federated => "federated",
            Mode::Centralized => "centralized",
        }
    }
}

/// Everything that determines one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// Dataset label used in reports.
    pub dataset: String,
    pub source: DatasetSource,
    pub train_ratio: f64,
    /// Z-score every channel with statistics of the training rows.
    pub scale: bool,
    pub model: ModelConfig,
    pub federation: FederationConfig,
    pub mode: Mode,
    /// When off, K is forced to 1.
    pub clustering: bool,
    /// When off, phase 2 trains and transmits the full model.
    pub peft: bool,
    /// Next-patch steps on the pooled training split before phase 2.
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub seed: u64,
}

impl ExperimentSpec {
    /// A spec with library defaults for the given source and seed.
    pub fn new(dataset: impl Into<String>, source: DatasetSource, seed: u64) -> Self {
        Self {
            dataset: dataset.into(),
            source,
            train_ratio: 0.8,
            scale: true,
            model: ModelConfig::default(),
            federation: FederationConfig::default(),
            mode: Mode::Federated,
            clustering: true,
            peft: true,
            pretrain_steps: 0,
            pretrain_lr: 1e-3,
            seed,
        }
    }

    pub fn window_rows(&self) -> usize {
        self.model.lookback + self.model.horizon
    }
}

/// Independent seed for one purpose, derived from the root seed.
pub fn derive_seed(root: u64, purpose: u64) -> u64 {
    // SplitMix64 finalizer over the pair.
    let mut z = root ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const SEED_MODEL: u64 = 1;
pub const SEED_PRETRAIN: u64 = 2;
pub const SEED_ADAPTERS: u64 = 3;
pub const SEED_FEDERATION: u64 = 4;
pub const SEED_DATA: u64 = 5;

/// Series ready for training and evaluation, already scaled.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub setup: FederatedSetup,
    /// Training series for pooled (centralized, pretraining) use.
    pub pooled_train: Vec<TimeSeriesDataset>,
    pub channels: usize,
    pub channel_names: Vec<String>,
    pub scaler: Option<Scaler>,
}

impl PreparedData {
    pub fn eval_series(&self) -> Vec<TimeSeriesDataset> {
        self.setup.eval.iter().map(|e| e.data.clone()).collect()
    }

    /// Shortest evaluation series.
    pub fn min_test_rows(&self) -> usize {
        self.setup.eval.iter().map(|e| e.data.rows()).min().unwrap_or(0)
    }
}

fn pooled_scaler(train: &[TimeSeriesDataset]) -> Scaler {
    let m = train[0].channels();
    let mut mean = vec![0.0; m];
    let mut std = vec![1.0; m];
    for c in 0..m {
        let col: Vec<f64> = train.iter().flat_map(|d| d.channel(c)).collect();
        let n = col.len() as f64;
        let mu = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        mean[c] = mu;
        if var.sqrt() > 1e-12 {
            std[c] = var.sqrt();
        }
    }
    Scaler { mean, std }
}

/// Loads or generates the series, splits, scales and partitions them.
///
/// For a single series, the test split continues the last client's shard in
/// time, so that client's cluster model forecasts it.
pub fn prepare(spec: &ExperimentSpec) -> Result<PreparedData> {
    let fed = &spec.federation;
    let window = spec.window_rows();
    let data_seed = derive_seed(spec.seed, SEED_DATA);
    let multi = match &spec.source {
        DatasetSource::TwoRegime { rows, channels } => Some(two_regime_clients(fed.clients, *rows, *channels, data_seed)),
        DatasetSource::SineMixture { rows } => Some(sine_mixture_clients(fed.clients, *rows, data_seed)),
        _ => None,
    };
    if let Some(series) = multi {
        let mut train = Vec::with_capacity(series.len());
        let mut test = Vec::with_capacity(series.len());
        for s in &series {
            let (a, b) = split_train_test(s, spec.train_ratio, window)?;
            train.push(a);
            test.push(b);
        }
        let scaler = spec.scale.then(|| pooled_scaler(&train));
        if let Some(sc) = &scaler {
            train = train.iter().map(|d| sc.transform(d)).collect::<Result<_>>()?;
            test = test.iter().map(|d| sc.transform(d)).collect::<Result<_>>()?;
        }
        let names = train[0].channel_names.clone();
        return Ok(PreparedData {
            setup: FederatedSetup {
                clients: train.clone(),
                eval: test
                    .into_iter()
                    .enumerate()
                    .map(|(owner, data)| EvalSet { owner, data })
                    .collect(),
            },
            pooled_train: train,
            channels: names.len(),
            channel_names: names,
            scaler,
        });
    }

    let ds = match &spec.source {
        DatasetSource::Csv { path } => {
            if path.as_os_str().is_empty() {
                return Err(Error::config("dataset.path", "no dataset path given"));
            }
            if !path.exists() {
                return Err(Error::config(
                    "dataset.path",
                    format!("{} does not exist", path.display()),
                ));
            }
            TimeSeriesDataset::load_csv(path)?
        }
        DatasetSource::Demo => demo_dataset(),
        DatasetSource::Sine {
            rows,
            channels,
            period,
            noise,
        } => sine_dataset(*rows, *channels, *period, *noise, data_seed),
        DatasetSource::Constant { rows, channels, value } => constant_dataset(*rows, *channels, *value),
        DatasetSource::TwoRegime { .. } | DatasetSource::SineMixture { .. } => unreachable!("handled above"),
    };
    let (mut train, mut test) = split_train_test(&ds, spec.train_ratio, window)?;
    let scaler = spec.scale.then(|| Scaler::fit(&train));
    if let Some(sc) = &scaler {
        train = sc.transform(&train)?;
        test = sc.transform(&test)?;
    }
    let shards = partition_clients(&train, fed.clients, window).map_err(|e| match e {
        Error::Config { message, .. } => Error::config("federation.clients", message),
        e => e,
    })?;
    Ok(PreparedData {
        setup: FederatedSetup {
            clients: shards.into_iter().map(|s| s.data).collect(),
            eval: vec![EvalSet {
                owner: fed.clients - 1,
                data: test,
            }],
        },
        channels: train.channels(),
        channel_names: train.channel_names.clone(),
        pooled_train: vec![train],
        scaler,
    })
}
