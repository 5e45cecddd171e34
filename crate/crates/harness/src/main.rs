use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use gds_core::config::{DeploymentMode, ScenarioConfig};
use gds_core::csc::ScenarioKind;
use gds_core::metrics::compute_metrics;
use gds_core::node::Role;
use gds_core::record::RunRecord;
use gds_core::signal::SignalRegistry;
use gds_core::sim::RunOptions;
use gds_harness::{run_scenario, write_outputs, HarnessError};
use gds_uapi::{ApiState, Scope, ServerHandle, CLOUD_NAMESPACE};

#[derive(Parser)]
#[command(name = "gds", version, about = "Distributed multi-energy co-simulation testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    InProcess,
    MultiProcess,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write record.csv, metrics.txt and config.toml.
    Run {
        #[arg(long)]
        scenario: Option<ScenarioKind>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Pace ticks to wall-clock time.
        #[arg(long)]
        realtime: bool,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Serve one namespace (or CLOUD) over REST until killed.
    Serve {
        #[arg(long)]
        namespace: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Check a configuration file and print its hash.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Recompute metrics from a record.
    Metrics {
        #[arg(long)]
        record: PathBuf,
    },
}

fn load(config: Option<&PathBuf>) -> Result<ScenarioConfig, HarnessError> {
    match config {
        Some(path) => ScenarioConfig::load(path).map_err(|e| HarnessError::Config(e.0)),
        None => Ok(ScenarioConfig::default()),
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run { scenario, config, out, seed, realtime, mode } => {
            let mut cfg = load(config.as_ref())?;
            if let Some(kind) = scenario {
                cfg.kind = kind;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(mode) = mode {
                cfg.deployment.mode = match mode {
                    ModeArg::InProcess => DeploymentMode::InProcess,
                    ModeArg::MultiProcess => DeploymentMode::MultiProcess,
                };
            }
            cfg.validate().map_err(|e| HarnessError::Config(e.0))?;
            let exe = std::env::current_exe()?;
            let output = run_scenario(&cfg, &exe, RunOptions { realtime })?;
            let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
            let files = write_outputs(&dir, &cfg, &output)?;
            print!("{}", output.metrics.to_kv());
            println!("record={}", files.record.display());
            println!("metrics={}", files.metrics.display());
            println!("config={}", files.config.display());
            println!("config_hash={}", cfg.hash());
        }
        Command::Serve { namespace, config, port, host } => {
            let scope = if namespace == CLOUD_NAMESPACE {
                Scope::All
            } else if Role::from_namespace(&namespace).is_some_and(|r| r != Role::Csc) {
                Scope::Namespace(namespace.clone())
            } else {
                return Err(HarnessError::Config(format!("no service for namespace {namespace}")));
            };
            let cfg = config.as_ref().map(|p| load(Some(p))).transpose()?;
            let state = ApiState::new(Arc::new(SignalRegistry::with_default_catalog()), scope);
            if let Some(cfg) = &cfg {
                state.set_staleness_horizon(cfg.staleness_horizon_ms);
                if namespace != CLOUD_NAMESPACE && cfg.deployment.cloud.is_some() {
                    state.init_lab(cfg).map_err(HarnessError::Config)?;
                }
            }
            let server = ServerHandle::spawn(&format!("{host}:{port}"), state)
                .map_err(|e| HarnessError::Spawn(e.to_string()))?;
            let mut stdout = std::io::stdout();
            writeln!(stdout, "{}{}", gds_harness::cluster::LISTENING_PREFIX, server.addr)?;
            stdout.flush()?;
            loop {
                std::thread::park();
            }
        }
        Command::Validate { config } => {
            let cfg = load(Some(&config))?;
            cfg.validate().map_err(|e| HarnessError::Config(e.0))?;
            println!("ok kind={} ticks={} config_hash={}", cfg.kind, cfg.tick_count(), cfg.hash());
        }
        Command::Metrics { record } => {
            let record = RunRecord::read(&record)?;
            print!("{}", compute_metrics(&record).to_kv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err {
                HarnessError::Config(_) => 2,
                _ => 1,
            })
        }
    }
}
