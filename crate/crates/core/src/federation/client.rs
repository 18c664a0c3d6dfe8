//! Simulated edge devices and their local update.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::dataset::TimeSeriesDataset;
use crate::data::windows::{window_input, window_refs, window_target, WindowRef};
use crate::error::{Error, Result};
use crate::model::forward::Batch;
use crate::model::params::ForecastModel;
use crate::model::train::{train_step, Optimizer, OptimizerKind};
use crate::numerics::Tensor;

/// Training windows drawn from one or more series.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPool {
    sets: Vec<(TimeSeriesDataset, Vec<WindowRef>)>,
    offsets: Vec<usize>,
    lookback: usize,
    horizon: usize,
}

impl WindowPool {
    pub fn new(datasets: Vec<TimeSeriesDataset>, lookback: usize, horizon: usize, stride: usize) -> Result<Self> {
        let mut sets = Vec::with_capacity(datasets.len());
        let mut offsets = Vec::with_capacity(datasets.len());
        let mut total = 0;
        for ds in datasets {
            let refs = window_refs(&ds, lookback, horizon, stride)?;
            offsets.push(total);
            total += refs.len();
            sets.push((ds, refs));
        }
        if total == 0 {
            return Err(Error::EmptySet("window pool has no windows".into()));
        }
        Ok(Self {
            sets,
            offsets,
            lookback,
            horizon,
        })
    }

    pub fn len(&self) -> usize {
        self.offsets.last().map_or(0, |o| o + self.sets.last().map_or(0, |s| s.1.len()))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn datasets(&self) -> impl Iterator<Item = &TimeSeriesDataset> {
        self.sets.iter().map(|(d, _)| d)
    }

    fn locate(&self, i: usize) -> (&TimeSeriesDataset, WindowRef) {
        let s = self.offsets.partition_point(|&o| o <= i) - 1;
        (&self.sets[s].0, self.sets[s].1[i - self.offsets[s]])
    }

    /// Batch of the windows at flat indices `picks`, in the given order.
    pub fn batch(&self, picks: &[usize]) -> Result<Batch> {
        if picks.is_empty() {
            return Err(Error::EmptySet("batch has no windows".into()));
        }
        let (l, t) = (self.lookback, self.horizon);
        let mut inputs = Vec::with_capacity(picks.len() * l);
        let mut targets = Vec::with_capacity(picks.len() * t);
        let mut channels = Vec::with_capacity(picks.len());
        for &i in picks {
            let (ds, w) = self.locate(i);
            inputs.extend(window_input(ds, w, l));
            targets.extend(window_target(ds, w, l, t));
            channels.push(w.channel);
        }
        Ok(Batch {
            inputs: Tensor::new(vec![picks.len(), l], inputs)?,
            targets: Tensor::new(vec![picks.len(), t], targets)?,
            channels,
        })
    }

    /// `min(size, len)` distinct windows drawn uniformly, in ascending order.
    pub fn sample(&self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut idx = rand::seq::index::sample(rng, self.len(), size.min(self.len())).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Local training settings shared by every device.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub micro_batch: usize,
}

/// One simulated edge device. Its optimizer state and RNG stream persist
/// across rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub cluster: usize,
    pub pool: WindowPool,
    /// Aggregation weight: the number of local training windows.
    pub weight: f64,
    optimizer: Option<Optimizer>,
    rng: ChaCha8Rng,
}

impl ClientState {
    /// The RNG stream is seeded with `seed ⊕ id`.
    pub fn new(id: usize, cluster: usize, pool: WindowPool, seed: u64) -> Self {
        let weight = pool.len() as f64;
        Self {
            id,
            cluster,
            pool,
            weight,
            optimizer: None,
            rng: ChaCha8Rng::seed_from_u64(seed ^ id as u64),
        }
    }

    pub fn optimizer(&self) -> Option<&Optimizer> {
        self.optimizer.as_ref()
    }
}

/// Result of one device's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceUpdate {
    pub params: Vec<Tensor>,
    /// Mean pre-step training loss; `None` when no step ran.
    pub train_loss: Option<f64>,
}

/// Copies `theta` into a local model and runs the configured number of
/// mini-batch steps on the device's own windows.
pub fn update_device(
    client: &mut ClientState,
    base: &ForecastModel,
    theta: &[Tensor],
    local: &LocalTraining,
) -> Result<DeviceUpdate> {
    let mut model = base.clone();
    model.set_trainable_params(theta.to_vec())?;
    if client.pool.is_empty() {
        return Err(Error::EmptySet(format!("client {} has no windows", client.id)));
    }
    let opt = client
        .optimizer
        .get_or_insert_with(|| Optimizer::new(local.optimizer, local.lr, theta));
    let mut loss_sum = 0.0;
    for _ in 0..local.steps {
        let picks = client.pool.sample(local.batch_size, &mut client.rng);
        let batch = client.pool.batch(&picks)?;
        loss_sum += train_step(&mut model, opt, &batch, local.micro_batch)?;
    }
    Ok(DeviceUpdate {
        params: model.trainable_params(),
        train_loss: (local.steps > 0).then(|| loss_sum / local.steps as f64),
    })
}
