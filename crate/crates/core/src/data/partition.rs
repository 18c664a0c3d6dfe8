//! Splitting training data across simulated devices, and the per-device
//! summary statistics used for clustering.

use crate::data::dataset::TimeSeriesDataset;
use crate::error::{Error, Result};

/// One device's local training data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub id: usize,
    pub data: TimeSeriesDataset,
    /// First row of this shard within the series it was cut from.
    pub start_row: usize,
}

impl ClientShard {
    pub fn rows(&self) -> usize {
        self.data.rows()
    }
}

/// Cuts `train` into `clients` contiguous, disjoint, covering shards whose
/// sizes differ by at most one row. Every shard must hold at least
/// `min_rows` rows (one window).
pub fn partition_clients(train: &TimeSeriesDataset, clients: usize, min_rows: usize) -> Result<Vec<ClientShard>> {
    if clients == 0 {
        return Err(Error::config("clients", "need at least one client"));
    }
    let base = train.rows() / clients;
    let extra = train.rows() % clients;
    if base < min_rows.max(1) {
        return Err(Error::config(
            "clients",
            format!(
                "{} training rows over {clients} clients leaves shards of {base} rows; each needs {min_rows}",
                train.rows()
            ),
        ));
    }
    let mut shards = Vec::with_capacity(clients);
    let mut start = 0;
    for id in 0..clients {
        let len = base + usize::from(id < extra);
        shards.push(ClientShard {
            id,
            data: train.slice_rows(start, start + len)?,
            start_row: start,
        });
        start += len;
    }
    Ok(shards)
}

/// Channel-averaged `(mean, std, trend slope per step, row count)` of a shard,
/// before standardization across clients.
pub fn client_features(shard: &ClientShard) -> [f64; 4] {
    let ds = &shard.data;
    let n = ds.rows();
    let m = ds.channels();
    let t_mean = (n as f64 - 1.0) / 2.0;
    let t_var: f64 = (0..n).map(|t| (t as f64 - t_mean).powi(2)).sum();
    let (mut mean_acc, mut std_acc, mut slope_acc) = (0.0, 0.0, 0.0);
    for c in 0..m {
        let col = ds.channel(c);
        let mu = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        let cov: f64 = col
            .iter()
            .enumerate()
            .map(|(t, v)| (t as f64 - t_mean) * (v - mu))
            .sum();
        mean_acc += mu;
        std_acc += var.sqrt();
        slope_acc += if t_var > 0.0 { cov / t_var } else { 0.0 };
    }
    let m = m as f64;
    [mean_acc / m, std_acc / m, slope_acc / m, n as f64]
}

/// Z-scores each feature column across clients. Columns with zero spread map
/// to zeros.
pub fn standardize_features(features: &[[f64; 4]]) -> Vec<Vec<f64>> {
    let n = features.len() as f64;
    let mut out: Vec<Vec<f64>> = features.iter().map(|f| f.to_vec()).collect();
    for j in 0..4 {
        let mean = features.iter().map(|f| f[j]).sum::<f64>() / n;
        let sd = (features.iter().map(|f| (f[j] - mean).powi(2)).sum::<f64>() / n).sqrt();
        for row in &mut out {
            row[j] = if sd > 1e-12 { (row[j] - mean) / sd } else { 0.0 };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(values: Vec<f64>) -> TimeSeriesDataset {
        TimeSeriesDataset::from_columns("s", &[values]).unwrap()
    }

    #[test]
    fn even_partition() {
        let shards = partition_clients(&series((0..100).map(f64::from).collect()), 4, 20).unwrap();
        assert!(shards.iter().all(|s| s.rows() == 25));
        assert_eq!(shards[2].start_row, 50);
    }

    #[test]
    fn single_client_is_identity() {
        let ds = series((0..37).map(f64::from).collect());
        let shards = partition_clients(&ds, 1, 10).unwrap();
        assert_eq!(shards[0].data, ds);
    }

    #[test]
    fn etm1_scale_partition_sizes() {
        let ds = series(vec![0.0; 55_744]);
        let shards = partition_clients(&ds, 555, 96).unwrap();
        assert_eq!(shards.len(), 555);
        assert!(shards.iter().all(|s| s.rows() == 100 || s.rows() == 101));
        assert_eq!(shards.iter().map(ClientShard::rows).sum::<usize>(), 55_744);
    }

    #[test]
    fn too_many_clients_is_config_error() {
        let ds = series(vec![0.0; 100]);
        assert!(partition_clients(&ds, 10, 20).unwrap_err().is_config());
        assert!(partition_clients(&ds, 0, 1).unwrap_err().is_config());
    }

    #[test]
    fn feature_examples() {
        let constant = ClientShard {
            id: 0,
            data: series(vec![5.0; 100]),
            start_row: 0,
        };
        assert_eq!(client_features(&constant), [5.0, 0.0, 0.0, 100.0]);
        let ramp = ClientShard {
            id: 1,
            data: series((0..100).map(f64::from).collect()),
            start_row: 0,
        };
        assert!((client_features(&ramp)[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn standardized_columns_have_zero_mean() {
        let f = vec![[1.0, 2.0, 0.0, 10.0], [3.0, 2.0, 1.0, 10.0], [5.0, 2.0, 2.0, 10.0]];
        let z = standardize_features(&f);
        for j in 0..4 {
            assert!(z.iter().map(|r| r[j]).sum::<f64>().abs() < 1e-12);
        }
        assert_eq!(z[0][1], 0.0);
    }
}
