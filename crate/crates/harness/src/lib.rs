//! Scenario orchestration: in-process and multi-process runs, and the files
//! a run leaves behind.

pub mod cluster;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use gds_core::config::{DeploymentMode, ScenarioConfig};
use gds_core::node::{ControllerNode, Role};
use gds_core::record::RecordError;
use gds_core::signal::SignalRegistry;
use gds_core::sim::{run_in_process, run_with, LabDriver, RunOptions, RunOutput, SimError};
use gds_uapi::{ClientError, HttpCloud, RemoteLab, UapiClient, CLOUD_NAMESPACE};
use thiserror::Error;

pub use cluster::Cluster;

/// How long a freshly started service may take to answer.
pub const READY_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("cannot start service: {0}")]
    Spawn(String),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn unreachable(ns: &str, err: ClientError) -> HarnessError {
    match err {
        ClientError::Unreachable(e) => SimError::EndpointUnreachable(format!("{ns}: {e}")).into(),
        other => SimError::Remote(format!("{ns}: {other}")).into(),
    }
}

/// Run with every node in separate processes talking REST over loopback.
/// Services named in the deployment section are used as they are; the rest
/// are started from `exe` and stopped afterwards.
pub fn run_multi_process(cfg: &ScenarioConfig, exe: &Path, opts: RunOptions) -> Result<RunOutput, HarnessError> {
    cfg.validate().map_err(|e| HarnessError::Config(e.0))?;
    let (cluster, resolved) = Cluster::start(exe, cfg)?;
    let cloud_addr = resolved.deployment.cloud.clone().expect("cluster resolves the cloud");

    let cloud = UapiClient::new(&cloud_addr);
    cloud.wait_ready(CLOUD_NAMESPACE, READY_TIMEOUT).map_err(|e| unreachable(CLOUD_NAMESPACE, e))?;
    cloud.init(CLOUD_NAMESPACE, &resolved).map_err(|e| unreachable(CLOUD_NAMESPACE, e))?;

    let mut labs: Vec<Box<dyn LabDriver>> = Vec::new();
    for role in Role::LABS {
        let ns = role.namespace();
        let lab = RemoteLab::new(role, &resolved.deployment.endpoints[ns]);
        lab.client().wait_ready(ns, READY_TIMEOUT).map_err(|e| unreachable(ns, e))?;
        lab.init(&resolved)?;
        labs.push(Box::new(lab));
    }
    let registry = Arc::new(SignalRegistry::with_default_catalog());
    let mut controller =
        ControllerNode::new(&resolved, registry, Box::new(HttpCloud::new(&cloud_addr))).map_err(SimError::from)?;
    let out = run_with(&resolved, &mut labs, &mut controller, "multi-process", opts)?;
    drop(cluster);
    Ok(out)
}

/// Run in the mode the deployment section asks for.
pub fn run_scenario(cfg: &ScenarioConfig, exe: &Path, opts: RunOptions) -> Result<RunOutput, HarnessError> {
    match cfg.deployment.mode {
        DeploymentMode::InProcess => Ok(run_in_process(cfg, opts)?),
        DeploymentMode::MultiProcess => run_multi_process(cfg, exe, opts),
    }
}

#[derive(Debug, Clone)]
pub struct OutputFiles {
    pub record: PathBuf,
    pub metrics: PathBuf,
    pub config: PathBuf,
}

/// Write `record.csv`, `metrics.txt` and `config.toml` (headed by its hash)
/// into `dir`, creating it if needed.
pub fn write_outputs(dir: &Path, cfg: &ScenarioConfig, out: &RunOutput) -> Result<OutputFiles, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let files = OutputFiles {
        record: dir.join("record.csv"),
        metrics: dir.join("metrics.txt"),
        config: dir.join("config.toml"),
    };
    out.record.write(&files.record)?;
    std::fs::write(&files.metrics, out.metrics.to_kv())?;
    std::fs::write(&files.config, format!("# config_hash={}\n{}", cfg.hash(), cfg.to_toml()))?;
    Ok(files)
}
