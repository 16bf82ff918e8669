mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use ciac_core::experiment::{
    dataset_windows, evaluate_model, gen_dataset, load_dataset, replay, simulate, write_dataset,
    ExperimentOutcome, RunSpec, SutureModel,
};
use ciac_core::gesture::{kfold_evaluate, load_checkpoint, save_checkpoint, train};
use ciac_core::metrics::{emit_report, emit_report_files, ReportFormat};
use ciac_core::sim::SimEventLog;
use ciac_core::stream::LabelStrategy;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::{parse_override, Config};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] ciac_core::Error),
    #[error(transparent)]
    Service(#[from] ciac_service::ServiceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    TomlRead(#[from] toml::de::Error),
    #[error("config: {0}")]
    TomlWrite(#[from] toml::ser::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Core(_) => "core",
            Self::Service(_) => "service",
            Self::Io(_) => "io",
            Self::Json(_) => "json",
            Self::TomlRead(_) | Self::TomlWrite(_) => "config",
        }
    }
}

#[derive(Parser)]
#[command(name = "ciac", version, about = "Confidence-weighted shared control for teleoperated suturing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set reach.seeds=[1,2,3]`.
    #[arg(long = "set", value_parser = parse_override, global = true)]
    set: Vec<(String, String)>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted suturing recordings.
    GenData {
        #[arg(long, default_value = "out/data")]
        out: PathBuf,
        #[arg(long)]
        recordings: Option<usize>,
        #[arg(long)]
        throws: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Cross-validate and train the surgeme classifier.
    Train {
        #[arg(long, default_value = "out/data")]
        data: PathBuf,
        #[arg(long, default_value = "out/model")]
        out: PathBuf,
        #[arg(long)]
        strategy: Option<LabelStrategy>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Frame-wise confusion of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "out/data")]
        data: PathBuf,
        #[arg(long)]
        strategy: Option<LabelStrategy>,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value = "out/eval")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Paired target-reaching runs.
    Reach {
        #[arg(long, default_value = "out/reach")]
        out: PathBuf,
        /// Runs seeds 0..N.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
        #[command(flatten)]
        common: Common,
    },
    /// Paired four-throw suturing runs.
    Suture {
        #[arg(long, default_value = "out/suture")]
        out: PathBuf,
        /// Classifier checkpoint; ground-truth surgemes when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        throws: Option<usize>,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
        #[command(flatten)]
        common: Common,
    },
    /// Recompute metrics from a log and regenerate the run it came from.
    Replay {
        log: PathBuf,
        /// Input file for session logs whose recorded path moved.
        #[arg(long)]
        inputs: Option<PathBuf>,
        /// Writes the regenerated log here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve live sessions over WebSocket.
    Serve {
        #[arg(long)]
        addr: Option<String>,
        #[arg(long)]
        log_dir: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common, flags: &[(&str, Option<String>)]) -> Result<Config, CliError> {
    let mut overrides = common.set.clone();
    overrides.extend(flags.iter().filter_map(|(k, v)| v.clone().map(|v| (k.to_string(), v))));
    config::load(common.config.as_deref(), &overrides)
}

fn quoted(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| format!("{:?}", p.display().to_string()))
}

/// Records what produced the outputs in `dir`.
fn stamp(dir: &Path, config: &Config, seeds: serde_json::Value) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), toml::to_string_pretty(config)?)?;
    std::fs::write(dir.join("seeds.json"), serde_json::to_string_pretty(&seeds)?)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn write_runs(dir: &Path, outcome: &ExperimentOutcome) -> Result<(), CliError> {
    let logs = dir.join("logs");
    std::fs::create_dir_all(&logs)?;
    for r in &outcome.runs {
        let name = format!("seed{:04}_{}.ndjson", r.metrics.seed, r.metrics.mode.to_string().to_lowercase());
        r.log.write_ndjson(std::io::BufWriter::new(std::fs::File::create(logs.join(name))?))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            out,
            recordings,
            throws,
            seed,
            common,
        } => {
            let cfg = load(
                &common,
                &[
                    ("dataset.recordings", recordings.map(|v| v.to_string())),
                    ("dataset.throws", throws.map(|v| v.to_string())),
                    ("dataset.seed", seed.map(|v| v.to_string())),
                ],
            )?;
            let recs = gen_dataset(&cfg.dataset)?;
            let paths = write_dataset(&out, &recs)?;
            let derived: Vec<u64> = (0..cfg.dataset.recordings as u64)
                .map(|i| ciac_core::experiment::derive_seed(cfg.dataset.seed, i))
                .collect();
            stamp(&out, &cfg, json!({"seed": cfg.dataset.seed, "recordings": derived}))?;
            println!("wrote {} recordings to {}", paths.len(), out.display());
        }
        Command::Train {
            data,
            out,
            strategy,
            stride,
            folds,
            epochs,
            seed,
            common,
        } => {
            let cfg = load(
                &common,
                &[
                    ("train.strategy", strategy.map(|s| s.id().to_string())),
                    ("train.stride", stride.map(|v| v.to_string())),
                    ("train.folds", folds.map(|v| v.to_string())),
                    ("train.model.epochs", epochs.map(|v| v.to_string())),
                    ("train.model.seed", seed.map(|v| v.to_string())),
                ],
            )?;
            let t = &cfg.train;
            let recs = load_dataset(&data)?;
            let windows = dataset_windows(&recs, t.strategy, t.stride)?;
            std::fs::create_dir_all(&out)?;
            if t.folds >= 2 {
                let report = kfold_evaluate(&windows, t.folds, |_, d| Ok(train(d, &t.model)?.params))?;
                println!(
                    "{}-fold accuracy {:.4} (folds {})",
                    t.folds,
                    report.mean_accuracy,
                    report
                        .folds
                        .iter()
                        .map(|f| format!("{:.3}", f.accuracy))
                        .collect::<Vec<_>>()
                        .join(", ")
                );
                write_json(&out.join("kfold.json"), &report)?;
            }
            let outcome = train(&windows, &t.model)?;
            save_checkpoint(&outcome.params, &out.join("model.json"))?;
            write_json(&out.join("history.json"), &outcome.history)?;
            stamp(&out, &cfg, json!({"train": t.model.seed}))?;
            println!("saved {}", out.join("model.json").display());
        }
        Command::Eval {
            model,
            data,
            strategy,
            stride,
            out,
            common,
        } => {
            let cfg = load(&common, &[("train.strategy", strategy.map(|s| s.id().to_string()))])?;
            let params = load_checkpoint(&model)?;
            let recs = load_dataset(&data)?;
            let ev = evaluate_model(&params, &recs, cfg.train.strategy, stride)?;
            std::fs::create_dir_all(&out)?;
            write_json(&out.join("eval.json"), &ev)?;
            stamp(&out, &cfg, json!(null))?;
            println!("accuracy {:.4} over {} windows", ev.accuracy, ev.windows);
            println!("{}", ev.confusion);
        }
        Command::Reach {
            out,
            seeds,
            format,
            common,
        } => {
            let seeds = seeds.map(|n| format!("{:?}", (0..n).collect::<Vec<_>>()));
            let cfg = load(&common, &[("reach.seeds", seeds)])?;
            let outcome = ciac_core::experiment::run_target_reaching(&cfg.reach)?;
            emit_report_files(&outcome.report, &out, "reach")?;
            write_runs(&out, &outcome)?;
            stamp(&out, &cfg, json!({"seeds": cfg.reach.seeds}))?;
            emit_report(&outcome.report, format, std::io::stdout().lock())?;
        }
        Command::Suture {
            out,
            model,
            seeds,
            throws,
            format,
            common,
        } => {
            let seeds = seeds.map(|n| format!("{:?}", (0..n).collect::<Vec<_>>()));
            let cfg = load(
                &common,
                &[("suture.seeds", seeds), ("suture.throws", throws.map(|v| v.to_string()))],
            )?;
            let model = match &model {
                Some(p) => Some(SutureModel {
                    model: Arc::new(load_checkpoint(p)?),
                    path: Some(std::fs::canonicalize(p)?),
                }),
                None => None,
            };
            let outcome = ciac_core::experiment::run_suturing(&cfg.suture, model.as_ref())?;
            emit_report_files(&outcome.report, &out, "suture")?;
            write_runs(&out, &outcome)?;
            stamp(&out, &cfg, json!({"seeds": cfg.suture.seeds}))?;
            emit_report(&outcome.report, format, std::io::stdout().lock())?;
        }
        Command::Replay { log, inputs, out } => {
            let file = std::fs::File::open(&log)?;
            let mut stored = SimEventLog::read_ndjson(std::io::BufReader::new(file))?;
            if let Some(path) = inputs {
                let spec: RunSpec = serde_json::from_value(stored.header.config.clone())?;
                let RunSpec::Session { world, .. } = spec else {
                    return Err(CliError::Usage("--inputs applies to session logs only".into()));
                };
                stored.header = RunSpec::Session { world, inputs: Some(path) }.header()?;
            }
            let outcome = replay(&stored)?;
            if let Some(dir) = &out {
                let spec: RunSpec = serde_json::from_value(stored.header.config.clone())?;
                let again = simulate(&spec, &spec.frames()?, spec.source()?)?;
                std::fs::create_dir_all(dir)?;
                again.write_ndjson(std::io::BufWriter::new(std::fs::File::create(dir.join("replay.ndjson"))?))?;
            }
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "metrics": outcome.metrics,
                    "resimulated": outcome.resimulated,
                }))?
            );
            if outcome.resimulated == Some(false) {
                return Err(CliError::Usage("regenerated log differs from the stored one".into()));
            }
        }
        Command::Serve {
            addr,
            log_dir,
            model,
            common,
        } => {
            let cfg = load(
                &common,
                &[
                    ("serve.addr", addr.map(|a| format!("{a:?}"))),
                    ("serve.log_dir", quoted(&log_dir)),
                    ("serve.model", quoted(&model)),
                ],
            )?;
            let addr = cfg
                .serve
                .addr
                .parse()
                .map_err(|e| CliError::Usage(format!("bad address {:?}: {e}", cfg.serve.addr)))?;
            let model = match &cfg.serve.model {
                Some(p) => Some(Arc::new(load_checkpoint(p)?)),
                None => None,
            };
            if let Some(dir) = &cfg.serve.log_dir {
                stamp(dir, &cfg, json!(null))?;
            }
            let service = ciac_service::ServiceConfig {
                log_dir: cfg.serve.log_dir.clone(),
                model,
                ..Default::default()
            };
            tracing_subscriber::fmt()
                .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
                .with_writer(std::io::stderr)
                .init();
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = ciac_service::bind(addr).await?;
                eprintln!("listening on {}", listener.local_addr()?);
                ciac_service::serve(listener, service).await
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": {"kind": e.kind(), "message": e.to_string()}}));
            ExitCode::FAILURE
        }
    }
}
