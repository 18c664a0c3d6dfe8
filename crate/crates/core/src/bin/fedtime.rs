//! `fedtime` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::LazyLock;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use fedtime_core::cli::{
    cmd_ablate, cmd_comm_report, cmd_evaluate, cmd_sweep, cmd_train, keys_help, run_selftest, ConfigBuilder, RunConfig,
    SweepKind,
};
use fedtime_core::experiments::Mode;
use fedtime_core::Error;

static KEYS_HELP: LazyLock<String> = LazyLock::new(keys_help);

#[derive(Parser, Debug)]
#[command(name = "fedtime", version, about = "Federated patch-transformer forecasting simulator")]
#[command(after_help = KEYS_HELP.as_str())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set federation.rounds=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed (same as `--set seed=N`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for client training (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Federated,
    Centralized,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepArg {
    Lookback,
    Horizon,
    Convergence,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one run and write checkpoints, round CSV and manifest.
    #[command(after_help = KEYS_HELP.as_str())]
    Train(ConfigArgs),
    /// Evaluate a checkpoint (or a run's checkpoint directory) on the test split.
    #[command(after_help = KEYS_HELP.as_str())]
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write every prediction and target to this CSV.
        #[arg(long)]
        dump_predictions: Option<PathBuf>,
    },
    /// Look-back sweep, horizon table or convergence comparison.
    #[command(after_help = KEYS_HELP.as_str())]
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value = "lookback")]
        kind: SweepArg,
    },
    /// Three-variant ablation: no clustering, no adapters, full method.
    #[command(after_help = KEYS_HELP.as_str())]
    Ablate(ConfigArgs),
    /// Federated run with the communication ledger summary.
    #[command(name = "comm-report", after_help = KEYS_HELP.as_str())]
    CommReport(ConfigArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

fn resolve(args: &ConfigArgs) -> fedtime_core::Result<RunConfig> {
    let mut b = ConfigBuilder::new();
    if let Some(path) = &args.config {
        b = b.file(path)?;
    }
    for s in &args.set {
        b = b.set(s)?;
    }
    if let Some(seed) = args.seed {
        b = b.set_value("seed", toml::Value::Integer(seed as i64))?;
    }
    if let Some(w) = args.workers {
        b = b.set_value("federation.workers", toml::Value::Integer(w as i64))?;
    }
    if let Some(out) = &args.out {
        b = b.set_value("out_dir", toml::Value::String(out.display().to_string()))?;
    }
    if let Some(m) = args.mode {
        let m = match m {
            ModeArg::Federated => Mode::Federated,
            ModeArg::Centralized => Mode::Centralized,
        };
        b = b.set_value("mode", toml::Value::String(m.label().into()))?;
    }
    b.build()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = resolve(&args)?;
            let s = cmd_train(&cfg)?;
            if cfg.verbosity > 0 {
                println!(
                    "{} L={} T={} mode={} rounds={} mse={:.6} mae={:.6} uplink={}B downlink={}B -> {}",
                    s.row.dataset,
                    s.row.lookback,
                    s.row.horizon,
                    s.row.mode,
                    s.row.rounds,
                    s.row.mse,
                    s.row.mae,
                    s.row.uplink_bytes,
                    s.row.downlink_bytes,
                    s.out_dir.display()
                );
            }
        }
        Command::Evaluate {
            config,
            checkpoint,
            dump_predictions,
        } => {
            let cfg = resolve(&config)?;
            let s = cmd_evaluate(&cfg, &checkpoint, dump_predictions.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&s).context("serializing metrics")?);
        }
        Command::Sweep { config, kind } => {
            let cfg = resolve(&config)?;
            let kind = match kind {
                SweepArg::Lookback => SweepKind::Lookback,
                SweepArg::Horizon => SweepKind::Horizon,
                SweepArg::Convergence => SweepKind::Convergence,
            };
            let path = cmd_sweep(&cfg, kind)?;
            println!("wrote {}", path.display());
        }
        Command::Ablate(args) => {
            let cfg = resolve(&args)?;
            println!("wrote {}", cmd_ablate(&cfg)?.display());
        }
        Command::CommReport(args) => {
            let cfg = resolve(&args)?;
            let r = cmd_comm_report(&cfg)?;
            for row in &r.ledger.rows {
                println!(
                    "{:<12} messages={} uplink={}B downlink={}B total={}B",
                    row.mode.label(),
                    row.messages,
                    row.uplink_bytes,
                    row.downlink_bytes,
                    row.total_bytes
                );
            }
            println!(
                "parameter bytes: total={} trainable={} ratio={:.4}",
                r.total_param_bytes, r.trainable_param_bytes, r.param_byte_ratio
            );
        }
        Command::Selftest => {
            let checks = run_selftest();
            let mut failed = 0;
            for c in &checks {
                println!("{} {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                anyhow::bail!("{failed} of {} checks failed", checks.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.downcast_ref::<Error>().is_some_and(Error::is_config);
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
