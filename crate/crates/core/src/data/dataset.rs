//! Multivariate series loading and chronological splitting.

use std::path::Path;

use chrono::NaiveDateTime;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A multivariate series: `values` is `[rows × channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    pub name: String,
    values: Tensor,
    pub channel_names: Vec<String>,
    pub timestamps: Vec<String>,
    /// Sampling interval in minutes, when the timestamps parse.
    pub granularity_minutes: Option<i64>,
}

/// Published dimensions of the standard long-horizon benchmarks, used to
/// verify downloaded files: `(name, channels, rows, granularity minutes)`.
pub const KNOWN_DATASETS: &[(&str, usize, usize, i64)] = &[
    ("Weather", 21, 52_696, 10),
    ("Traffic", 862, 17_544, 60),
    ("Electricity", 321, 26_304, 60),
    ("ETTh1", 7, 17_420, 60),
    ("ETTh2", 7, 17_420, 60),
    ("ETTm1", 7, 69_680, 15),
    ("ETTm2", 7, 69_680, 15),
];

const TIMESTAMP_FORMATS: &[&str] = &["%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M", "%Y/%m/%d %H:%M", "%Y-%m-%dT%H:%M:%S"];

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s.trim(), f).ok())
}

impl TimeSeriesDataset {
    pub fn new(name: impl Into<String>, values: Tensor, channel_names: Vec<String>) -> Result<Self> {
        if values.shape().len() != 2 || values.shape()[1] != channel_names.len() {
            return Err(Error::Format(format!(
                "values {:?} do not match {} channel names",
                values.shape(),
                channel_names.len()
            )));
        }
        let rows = values.shape()[0];
        Ok(Self {
            name: name.into(),
            values,
            channel_names,
            timestamps: (0..rows).map(|i| i.to_string()).collect(),
            granularity_minutes: None,
        })
    }

    /// Builds a dataset from per-channel columns.
    pub fn from_columns(name: impl Into<String>, columns: &[Vec<f64>]) -> Result<Self> {
        let m = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        if m == 0 || columns.iter().any(|c| c.len() != rows) {
            return Err(Error::Format("columns must be non-empty and equally long".into()));
        }
        let mut data = Vec::with_capacity(rows * m);
        for r in 0..rows {
            for c in columns {
                data.push(c[r]);
            }
        }
        let names = (0..m).map(|i| format!("c{i}")).collect();
        Self::new(name, Tensor::new(vec![rows, m], data)?, names)
    }

    /// Loads a CSV whose first column is a timestamp and whose remaining
    /// columns are numeric channels.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
        let headers = reader.headers()?.clone();
        if headers.len() < 2 {
            return Err(Error::Format(format!(
                "{}: need a timestamp column and at least one channel, found {} column(s)",
                path.display(),
                headers.len()
            )));
        }
        let m = headers.len() - 1;
        let channel_names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut data = Vec::new();
        let mut timestamps = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            // Header is row 1 in the file.
            let row = i + 2;
            if record.len() != headers.len() {
                return Err(Error::Parse {
                    row,
                    column: record.len() + 1,
                    message: format!("expected {} fields, found {}", headers.len(), record.len()),
                });
            }
            timestamps.push(record[0].to_string());
            for c in 1..=m {
                let cell = record[c].trim();
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    row,
                    column: c + 1,
                    message: format!("not a number: {cell:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row,
                        column: c + 1,
                        message: "missing or non-finite value".into(),
                    });
                }
                data.push(v);
            }
        }
        let rows = timestamps.len();
        if rows == 0 {
            return Err(Error::Format(format!("{}: no data rows", path.display())));
        }
        let parsed: Vec<Option<NaiveDateTime>> = timestamps.iter().map(|t| parse_timestamp(t)).collect();
        let mut granularity = None;
        if parsed.iter().all(Option::is_some) {
            let times: Vec<NaiveDateTime> = parsed.into_iter().flatten().collect();
            if let Some(bad) = times.windows(2).position(|w| w[1] < w[0]) {
                return Err(Error::Parse {
                    row: bad + 3,
                    column: 1,
                    message: "timestamps are not in time order".into(),
                });
            }
            if times.len() >= 2 {
                granularity = Some((times[1] - times[0]).num_minutes());
            }
        }
        let name = path
            .file_stem()
            .map_or_else(|| "dataset".to_string(), |s| s.to_string_lossy().into_owned());
        Ok(Self {
            name,
            values: Tensor::new(vec![rows, m], data)?,
            channel_names,
            timestamps,
            granularity_minutes: granularity,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn value(&self, row: usize, channel: usize) -> f64 {
        self.values.data()[row * self.channels() + channel]
    }

    /// Copy of one channel as a plain vector.
    pub fn channel(&self, channel: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.value(r, channel)).collect()
    }

    /// Rows `start..end` as a new dataset.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.rows() {
            return Err(Error::Contract(format!(
                "row range {start}..{end} invalid for {} rows",
                self.rows()
            )));
        }
        let m = self.channels();
        let data = self.values.data()[start * m..end * m].to_vec();
        Ok(Self {
            name: self.name.clone(),
            values: Tensor::new(vec![end - start, m], data)?,
            channel_names: self.channel_names.clone(),
            timestamps: self.timestamps[start..end].to_vec(),
            granularity_minutes: self.granularity_minutes,
        })
    }

    /// Checks the file against the published benchmark dimensions when the
    /// dataset name is a known benchmark. Returns `Ok(false)` for unknown names.
    pub fn verify_known_dimensions(&self) -> Result<bool> {
        let Some(&(name, m, rows, _)) = KNOWN_DATASETS
            .iter()
            .find(|(n, ..)| n.eq_ignore_ascii_case(&self.name))
        else {
            return Ok(false);
        };
        if self.channels() != m || self.rows() != rows {
            return Err(Error::Format(format!(
                "{name}: expected {m} channels × {rows} rows, found {} × {}",
                self.channels(),
                self.rows()
            )));
        }
        Ok(true)
    }

    fn with_values(&self, values: Tensor) -> Self {
        Self {
            name: self.name.clone(),
            values,
            channel_names: self.channel_names.clone(),
            timestamps: self.timestamps.clone(),
            granularity_minutes: self.granularity_minutes,
        }
    }
}

/// Chronological split: the first `⌊ratio·rows⌋` rows train, the rest test.
/// Both sides must hold at least `min_rows` (normally `L + T`).
pub fn split_train_test(
    ds: &TimeSeriesDataset,
    ratio: f64,
    min_rows: usize,
) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config("train_ratio", format!("must lie in (0, 1), got {ratio}")));
    }
    let n_train = (ratio * ds.rows() as f64).floor() as usize;
    let n_test = ds.rows() - n_train;
    if n_train < min_rows.max(1) || n_test < min_rows.max(1) {
        return Err(Error::config(
            "train_ratio",
            format!(
                "split of {} rows gives {n_train}/{n_test}; each side needs at least {min_rows}",
                ds.rows()
            ),
        ));
    }
    Ok((ds.slice_rows(0, n_train)?, ds.slice_rows(n_train, ds.rows())?))
}

/// Per-channel standardization fitted on training rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(train: &TimeSeriesDataset) -> Self {
        let (n, m) = (train.rows() as f64, train.channels());
        let mut mean = vec![0.0; m];
        let mut std = vec![0.0; m];
        for c in 0..m {
            let col = train.channel(c);
            let mu = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            mean[c] = mu;
            std[c] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn transform(&self, ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
        let m = ds.channels();
        if m != self.mean.len() {
            return Err(Error::Shape {
                op: "scaler",
                left: vec![self.mean.len()],
                right: vec![m],
            });
        }
        let data = ds
            .values
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % m]) / self.std[i % m])
            .collect();
        Ok(ds.with_values(Tensor::new(ds.values.shape().to_vec(), data)?))
    }
}
