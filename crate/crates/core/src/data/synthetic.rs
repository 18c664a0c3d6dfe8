//! Seeded synthetic series for tests, demos and the clustering ablation.

use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::dataset::TimeSeriesDataset;
use crate::error::{Error, Result};

/// Parameters of an AR(1) noise process riding on a sinusoidal season.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeasonalAr1 {
    pub level: f64,
    pub amplitude: f64,
    pub period: f64,
    pub phi: f64,
    pub noise: f64,
}

impl SeasonalAr1 {
    /// First regime of the clustering ablation: slow season, persistent noise.
    pub const REGIME_A: SeasonalAr1 = SeasonalAr1 {
        level: 0.0,
        amplitude: 1.0,
        period: 24.0,
        phi: 0.8,
        noise: 0.1,
    };

    /// Second regime: fast, large season around a shifted level with
    /// anti-persistent noise. No parameter is shared with regime A.
    pub const REGIME_B: SeasonalAr1 = SeasonalAr1 {
        level: 4.0,
        amplitude: 2.5,
        period: 8.0,
        phi: -0.5,
        noise: 0.3,
    };

    pub fn sample(&self, rows: usize, phase: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut e = 0.0;
        (0..rows)
            .map(|t| {
                e = self.phi * e + self.noise * normal.sample(rng);
                self.level + self.amplitude * (TAU * t as f64 / self.period + phase).sin() + e
            })
            .collect()
    }
}

/// Sine waves, one phase-shifted copy per channel, with optional noise.
pub fn sine_dataset(rows: usize, channels: usize, period: f64, noise: f64, seed: u64) -> TimeSeriesDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let cols: Vec<Vec<f64>> = (0..channels)
        .map(|c| {
            let phase = c as f64 * 0.7;
            (0..rows)
                .map(|t| (TAU * t as f64 / period + phase).sin() + noise * normal.sample(&mut rng))
                .collect()
        })
        .collect();
    TimeSeriesDataset::from_columns("sine", &cols).expect("non-empty columns")
}

pub fn constant_dataset(rows: usize, channels: usize, value: f64) -> TimeSeriesDataset {
    TimeSeriesDataset::from_columns("constant", &vec![vec![value; rows]; channels]).expect("non-empty columns")
}

/// Per-client series for the clustering ablation: the first half of the
/// clients follow [`SeasonalAr1::REGIME_A`], the second half
/// [`SeasonalAr1::REGIME_B`]. Each client gets its own phase and noise stream.
pub fn two_regime_clients(clients: usize, rows: usize, channels: usize, seed: u64) -> Vec<TimeSeriesDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..clients)
        .map(|id| {
            let regime = if id < clients / 2 {
                SeasonalAr1::REGIME_A
            } else {
                SeasonalAr1::REGIME_B
            };
            let cols: Vec<Vec<f64>> = (0..channels)
                .map(|c| regime.sample(rows, 0.37 * (id * channels + c) as f64, &mut rng))
                .collect();
            let mut ds = TimeSeriesDataset::from_columns(format!("regime-client-{id}"), &cols)
                .expect("non-empty columns");
            ds.name = "two-regime".into();
            ds
        })
        .collect()
}

/// Per-client sine mixtures with client-specific periods and phases.
pub fn sine_mixture_clients(clients: usize, rows: usize, seed: u64) -> Vec<TimeSeriesDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..clients)
        .map(|id| {
            let period = 12.0 + 4.0 * (id % 3) as f64;
            let col: Vec<f64> = (0..rows)
                .map(|t| {
                    let t = t as f64;
                    (TAU * t / period + id as f64).sin()
                        + 0.5 * (TAU * t / (2.5 * period)).sin()
                        + 0.05 * normal.sample(&mut rng)
                })
                .collect();
            let mut ds = TimeSeriesDataset::from_columns("sine-mixture", &[col]).expect("non-empty");
            ds.name = "sine-mixture".into();
            ds
        })
        .collect()
}

/// The small demo series shipped with the CLI: 200 hourly rows, 2 channels.
pub fn demo_dataset() -> TimeSeriesDataset {
    let mut ds = sine_dataset(200, 2, 24.0, 0.05, 7);
    ds.name = "demo".into();
    ds.channel_names = vec!["load".into(), "temp".into()];
    let start = chrono::NaiveDate::from_ymd_opt(2024, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date");
    ds.timestamps = (0..200)
        .map(|h| (start + chrono::Duration::hours(h)).format("%Y-%m-%d %H:%M:%S").to_string())
        .collect();
    ds.granularity_minutes = Some(60);
    ds
}

/// Writes a dataset in the loader's CSV layout.
pub fn write_csv(ds: &TimeSeriesDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from("date");
    for name in &ds.channel_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for r in 0..ds.rows() {
        out.push_str(&ds.timestamps[r]);
        for c in 0..ds.channels() {
            out.push_str(&format!(",{}", ds.value(r, c)));
        }
        out.push('\n');
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
