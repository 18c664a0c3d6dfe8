//! The run configuration file: a TOML document with full defaulting, strict
//! key checking and dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::experiments::{DatasetSource, ExperimentSpec, Mode, HORIZONS, LOOKBACK_GRID};
use crate::federation::FederationConfig;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Csv,
    Demo,
    Sine,
    Constant,
    TwoRegime,
    SineMixture,
}

/// The `[dataset]` table. Only the fields its `kind` needs are read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Label written to reports.
    pub name: String,
    pub kind: DatasetKind,
    /// CSV file for `kind = "csv"`.
    pub path: PathBuf,
    pub rows: usize,
    pub channels: usize,
    pub period: f64,
    pub noise: f64,
    pub value: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: "demo".into(),
            kind: DatasetKind::Demo,
            path: PathBuf::new(),
            rows: 2000,
            channels: 2,
            period: 24.0,
            noise: 0.1,
            value: 1.0,
        }
    }
}

impl DatasetConfig {
    pub fn source(&self) -> Result<DatasetSource> {
        let positive = |key: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("dataset.{key}"), "must be positive"))
            } else {
                Ok(v)
            }
        };
        Ok(match self.kind {
            DatasetKind::Csv => {
                if self.path.as_os_str().is_empty() {
                    return Err(Error::config("dataset.path", "required when dataset.kind = \"csv\""));
                }
                DatasetSource::Csv { path: self.path.clone() }
            }
            DatasetKind::Demo => DatasetSource::Demo,
            DatasetKind::Sine => DatasetSource::Sine {
                rows: positive("rows", self.rows)?,
                channels: positive("channels", self.channels)?,
                period: self.period,
                noise: self.noise,
            },
            DatasetKind::Constant => DatasetSource::Constant {
                rows: positive("rows", self.rows)?,
                channels: positive("channels", self.channels)?,
                value: self.value,
            },
            DatasetKind::TwoRegime => DatasetSource::TwoRegime {
                rows: positive("rows", self.rows)?,
                channels: positive("channels", self.channels)?,
            },
            DatasetKind::SineMixture => DatasetSource::SineMixture {
                rows: positive("rows", self.rows)?,
            },
        })
    }
}

/// Grids for `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub lookbacks: Vec<usize>,
    pub horizons: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lookbacks: LOOKBACK_GRID.to_vec(),
            horizons: HORIZONS.to_vec(),
        }
    }
}

/// Everything one invocation needs. `seed` has no default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "defaults::mode")]
    pub mode: Mode,
    #[serde(default = "defaults::yes")]
    pub clustering: bool,
    #[serde(default = "defaults::yes")]
    pub peft: bool,
    #[serde(default = "defaults::train_ratio")]
    pub train_ratio: f64,
    #[serde(default = "defaults::yes")]
    pub scale: bool,
    #[serde(default)]
    pub pretrain_steps: usize,
    #[serde(default = "defaults::pretrain_lr")]
    pub pretrain_lr: f64,
    #[serde(default = "defaults::out_dir")]
    pub out_dir: PathBuf,
    /// 0 silent, 1 per-run summary, 2 per-round lines.
    #[serde(default = "defaults::verbosity")]
    pub verbosity: u8,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

mod defaults {
    use std::path::PathBuf;

    use crate::experiments::Mode;

    pub fn mode() -> Mode {
        Mode::Federated
    }
    pub fn yes() -> bool {
        true
    }
    pub fn train_ratio() -> f64 {
        0.8
    }
    pub fn pretrain_lr() -> f64 {
        1e-3
    }
    pub fn out_dir() -> PathBuf {
        PathBuf::from("runs")
    }
    pub fn verbosity() -> u8 {
        1
    }
}

impl RunConfig {
    /// All defaults with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            mode: defaults::mode(),
            clustering: true,
            peft: true,
            train_ratio: defaults::train_ratio(),
            scale: true,
            pretrain_steps: 0,
            pretrain_lr: defaults::pretrain_lr(),
            out_dir: defaults::out_dir(),
            verbosity: defaults::verbosity(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            federation: FederationConfig::default(),
            sweep: SweepConfig::default(),
        }
    }

    pub fn spec(&self) -> Result<ExperimentSpec> {
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::config("train_ratio", "must lie in (0, 1)"));
        }
        self.federation.validate()?;
        Ok(ExperimentSpec {
            dataset: self.dataset.name.clone(),
            source: self.dataset.source()?,
            train_ratio: self.train_ratio,
            scale: self.scale,
            model: self.model.clone(),
            federation: self.federation.clone(),
            mode: self.mode,
            clustering: self.clustering,
            peft: self.peft,
            pretrain_steps: self.pretrain_steps,
            pretrain_lr: self.pretrain_lr,
            seed: self.seed,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn default_table() -> Table {
    match Value::try_from(RunConfig::with_seed(0)).expect("defaults serialize") {
        Value::Table(t) => t,
        _ => unreachable!("config is a table"),
    }
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            _ => out.push((key, v.clone())),
        }
    }
}

/// Every configurable key with its default, sorted by name. The seed has no
/// default and is listed as required.
pub fn documented_keys() -> Vec<(String, String)> {
    let mut flat = Vec::new();
    flatten("", &default_table(), &mut flat);
    flat.into_iter()
        .map(|(k, v)| {
            let shown = if k == "seed" { "<required>".to_string() } else { v.to_string() };
            (k, shown)
        })
        .collect()
}

/// Help text block listing every key.
pub fn keys_help() -> String {
    let keys = documented_keys();
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Configuration keys (TOML file or --set key=value; flags win over the file):\n");
    for (k, v) in keys {
        s.push_str(&format!("  {k:<width$}  {v}\n"));
    }
    s
}

fn lookup<'a>(table: &'a Table, key: &str) -> Option<&'a Value> {
    let mut parts = key.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

fn insert(table: &mut Table, key: &str, value: Value) {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        if !entry.is_table() {
            *entry = Value::Table(Table::new());
        }
        cur = entry.as_table_mut().expect("just made a table");
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
}

/// Parses the right-hand side of `--set`: a TOML literal, else a bare string.
fn parse_literal(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Layered configuration: defaults, then the file, then overrides in order.
#[derive(Debug, Clone, Default)]
pub struct ConfigBuilder {
    table: Table,
}

impl ConfigBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn file(mut self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        let table: Table = toml::from_str(&text)
            .map_err(|e| Error::config("config", format!("{}: {}", path.display(), e.message())))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat);
        for (k, v) in flat {
            self = self.set_value(&k, v)?;
        }
        Ok(self)
    }

    /// Applies one `key=value` override.
    pub fn set(self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
        self.set_value(key.trim(), parse_literal(raw.trim()))
    }

    pub fn set_value(mut self, key: &str, value: Value) -> Result<Self> {
        let defaults = default_table();
        let Some(default) = lookup(&defaults, key) else {
            return Err(Error::config(key, "unknown configuration key"));
        };
        if default.is_table() {
            return Err(Error::config(key, "is a section, set its keys instead"));
        }
        // Integers are accepted where floats are expected.
        let value = match (default, value) {
            (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
            (_, v) => v,
        };
        insert(&mut self.table, key, value);
        Ok(self)
    }

    /// Resolves the layers into a checked configuration.
    pub fn build(self) -> Result<RunConfig> {
        if lookup(&self.table, "seed").is_none() {
            return Err(Error::config("seed", "missing; every run needs an explicit root seed"));
        }
        let mut merged = default_table();
        let mut flat = Vec::new();
        flatten("", &self.table, &mut flat);
        // Check each key on its own so a bad value is reported by name.
        for (k, v) in &flat {
            let mut probe = default_table();
            insert(&mut probe, k, v.clone());
            if let Err(e) = Value::Table(probe).try_into::<RunConfig>() {
                return Err(Error::config(k.clone(), e.message().trim().to_string()));
            }
            insert(&mut merged, k, v.clone());
        }
        Value::Table(merged)
            .try_into::<RunConfig>()
            .map_err(|e| Error::config("config", e.message().trim().to_string()))
    }
}
