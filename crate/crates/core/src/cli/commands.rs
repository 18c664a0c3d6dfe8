//! Subcommand implementations. Each writes its artifacts under the
//! configured output directory and returns a printable summary.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cli::config::RunConfig;
use crate::data::windows::window_refs;
use crate::error::{Error, Result};
use crate::experiments::report::{
    write_ablation_csv, write_comm_csv, write_convergence_csv, write_horizon_csv, write_json, write_sweep_csv,
};
use crate::experiments::{
    ablation_grid, baselines, comm_report, convergence_compare, horizon_table, lookback_sweep, prepare, run_prepared,
    write_results_csv, CommReport, Mode, PreparedData, ResultRow, RunManifest, RunOutcome,
};
use crate::federation::write_round_csv;
use crate::model::checkpoint;
use crate::model::metrics::{predict_windows, ChannelMetrics, ErrorSums};
use crate::model::ForecastModel;

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const ASSIGNMENTS_FILE: &str = "assignments.json";

pub fn checkpoint_file(cluster: usize) -> String {
    format!("cluster-{cluster}.ckpt")
}

/// Writes one checkpoint per cluster plus the client-to-cluster map.
pub fn write_checkpoints(outcome: &RunOutcome, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    for c in &outcome.clusters {
        checkpoint::save(&c.model(&outcome.base)?, dir.join(checkpoint_file(c.id)))?;
    }
    write_json(&outcome.assignments, dir.join(ASSIGNMENTS_FILE))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub row: ResultRow,
    pub final_round: usize,
}

/// Trains one run and writes checkpoints, round CSV, results CSV, the
/// resolved config and the manifest.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let spec = cfg.spec()?;
    let data = prepare(&spec)?;
    let outcome = run_prepared(&spec, &data)?;
    let dir = &cfg.out_dir;
    ensure_dir(dir)?;
    let mut resolved = cfg.clone();
    resolved.model = outcome.resolved.model.clone();
    resolved.federation = outcome.resolved.federation.clone();
    fs::write(dir.join("config.toml"), resolved.to_toml()).map_err(|e| Error::io(dir.join("config.toml"), e))?;
    write_checkpoints(&outcome, &dir.join(CHECKPOINT_DIR))?;
    write_round_csv(&outcome.reports, dir.join("rounds.csv"))?;
    write_results_csv(std::slice::from_ref(&outcome.row), dir.join("results.csv"))?;
    let base = baselines(&outcome.resolved, &data, &outcome.resolved.federation).ok();
    write_json(&RunManifest::new(&outcome, base), dir.join("manifest.json"))?;
    if outcome.ledger.is_some() {
        write_comm_csv(&comm_report(&outcome)?, dir.join("comm.csv"))?;
    }
    Ok(TrainSummary {
        out_dir: dir.clone(),
        final_round: outcome.reports.last().map_or(0, |r| r.round),
        row: outcome.row,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
    pub per_channel: Vec<ChannelMetrics>,
}

/// Models for evaluation: a single checkpoint serves every series; a run's
/// checkpoint directory maps each series to its owner's cluster model.
enum Checkpoints {
    Single(Box<ForecastModel>),
    PerCluster { models: Vec<(usize, ForecastModel)>, assignments: Vec<usize> },
}

impl Checkpoints {
    fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::config("checkpoint", format!("{} does not exist", path.display())));
        }
        if !path.is_dir() {
            return Ok(Checkpoints::Single(Box::new(checkpoint::load(path)?)));
        }
        let text = fs::read_to_string(path.join(ASSIGNMENTS_FILE)).map_err(|e| Error::io(path.join(ASSIGNMENTS_FILE), e))?;
        let assignments: Vec<usize> = serde_json::from_str(&text)?;
        let clusters = assignments.iter().max().map_or(0, |m| m + 1);
        let models = (0..clusters)
            .map(|c| Ok((c, checkpoint::load(path.join(checkpoint_file(c)))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoints::PerCluster { models, assignments })
    }

    fn any(&self) -> &ForecastModel {
        match self {
            Checkpoints::Single(m) => m,
            Checkpoints::PerCluster { models, .. } => &models[0].1,
        }
    }

    fn for_owner(&self, owner: usize) -> Result<&ForecastModel> {
        match self {
            Checkpoints::Single(m) => Ok(m),
            Checkpoints::PerCluster { models, assignments } => {
                let c = *assignments
                    .get(owner)
                    .ok_or_else(|| Error::config("federation.clients", format!("no assignment for client {owner}")))?;
                Ok(&models[c].1)
            }
        }
    }
}

/// Evaluates checkpoints on the test split the config describes.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint_path: &Path, dump: Option<&Path>) -> Result<EvalSummary> {
    let spec = cfg.spec()?;
    let ckpt = Checkpoints::load(checkpoint_path)?;
    let mc = ckpt.any().config();
    for (key, want, have) in [
        ("model.lookback", spec.model.lookback, mc.lookback),
        ("model.horizon", spec.model.horizon, mc.horizon),
    ] {
        if want != have {
            return Err(Error::config(key, format!("config asks for {want}, checkpoint was trained with {have}")));
        }
    }
    let data = prepare(&spec)?;
    if mc.channels != data.channels {
        return Err(Error::config(
            "dataset",
            format!("dataset has {} channels, checkpoint expects {}", data.channels, mc.channels),
        ));
    }
    let (l, t) = (mc.lookback, mc.horizon);
    let mut total = ErrorSums::default();
    let mut per = vec![ErrorSums::default(); data.channels];
    let mut windows = 0;
    let mut dump_writer = dump.map(csv::Writer::from_path).transpose()?;
    if let Some(w) = dump_writer.as_mut() {
        w.write_record(["set", "channel", "origin", "step", "prediction", "target"])?;
    }
    for (set, e) in data.setup.eval.iter().enumerate() {
        let refs = window_refs(&e.data, l, t, spec.federation.eval_stride)?;
        let p = predict_windows(ckpt.for_owner(e.owner)?, &e.data, &refs)?;
        let mut sums = ErrorSums::default();
        for (i, w) in p.refs.iter().enumerate() {
            for k in 0..t {
                let (a, b) = (p.predictions.data()[i * t + k], p.targets.data()[i * t + k]);
                sums.add(a, b);
                per[w.channel].add(a, b);
                if let Some(out) = dump_writer.as_mut() {
                    out.write_record([
                        set.to_string(),
                        w.channel.to_string(),
                        w.origin.to_string(),
                        k.to_string(),
                        format!("{a:e}"),
                        format!("{b:e}"),
                    ])?;
                }
            }
        }
        total.merge(&sums);
        windows += refs.len();
    }
    if let (Some(mut w), Some(path)) = (dump_writer, dump) {
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    let summary = EvalSummary {
        mse: total.mse(),
        mae: total.mae(),
        windows,
        per_channel: per
            .iter()
            .enumerate()
            .filter(|(_, s)| s.count > 0)
            .map(|(c, s)| ChannelMetrics {
                channel: c,
                name: data.channel_names[c].clone(),
                mse: s.mse(),
                mae: s.mae(),
            })
            .collect(),
    };
    ensure_dir(&cfg.out_dir)?;
    write_json(&summary, cfg.out_dir.join("metrics.json"))?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Lookback,
    Horizon,
    Convergence,
}

/// Runs a sweep and returns the path of the CSV it wrote.
pub fn cmd_sweep(cfg: &RunConfig, kind: SweepKind) -> Result<PathBuf> {
    let spec = cfg.spec()?;
    ensure_dir(&cfg.out_dir)?;
    match kind {
        SweepKind::Lookback => {
            let points = lookback_sweep(&spec, &cfg.sweep.lookbacks);
            let path = cfg.out_dir.join("sweep_lookback.csv");
            write_sweep_csv(&points, &path)?;
            write_json(&points, cfg.out_dir.join("sweep_lookback.json"))?;
            Ok(path)
        }
        SweepKind::Horizon => {
            let rows = horizon_table(&spec, &cfg.sweep.horizons);
            let path = cfg.out_dir.join("horizons.csv");
            write_horizon_csv(&rows, &path)?;
            Ok(path)
        }
        SweepKind::Convergence => {
            let report = convergence_compare(&spec)?;
            let path = cfg.out_dir.join("convergence.csv");
            write_convergence_csv(&report, &path)?;
            write_json(&report, cfg.out_dir.join("convergence.json"))?;
            Ok(path)
        }
    }
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<PathBuf> {
    let spec = cfg.spec()?;
    ensure_dir(&cfg.out_dir)?;
    let rows = ablation_grid(&spec);
    let path = cfg.out_dir.join("ablation.csv");
    write_ablation_csv(&rows, &path)?;
    write_json(&rows, cfg.out_dir.join("ablation.json"))?;
    Ok(path)
}

/// Runs the configured federated training and writes the communication report.
pub fn cmd_comm_report(cfg: &RunConfig) -> Result<CommReport> {
    let mut spec = cfg.spec()?;
    spec.mode = Mode::Federated;
    let data: PreparedData = prepare(&spec)?;
    let outcome = run_prepared(&spec, &data)?;
    let report = comm_report(&outcome)?;
    ensure_dir(&cfg.out_dir)?;
    write_comm_csv(&report, cfg.out_dir.join("comm.csv"))?;
    write_json(&report, cfg.out_dir.join("comm.json"))?;
    Ok(report)
}
