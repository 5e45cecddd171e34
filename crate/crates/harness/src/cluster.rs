//! Child processes of a multi-process run: one cloud node and one service
//! per lab, each started as `gds serve` on an ephemeral loopback port.

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, ChildStdout, Command, Stdio};

use gds_core::config::{DeploymentMode, ScenarioConfig};
use gds_core::node::Role;
use gds_uapi::CLOUD_NAMESPACE;

use crate::HarnessError;

/// Line a service prints on stdout once it accepts connections.
pub const LISTENING_PREFIX: &str = "listening on ";

#[derive(Debug)]
pub struct NodeProcess {
    pub namespace: String,
    pub addr: String,
    child: Child,
    // Held so the child never writes into a closed pipe.
    _stdout: BufReader<ChildStdout>,
}

impl NodeProcess {
    pub fn spawn(exe: &Path, namespace: &str) -> Result<Self, HarnessError> {
        let mut child = Command::new(exe)
            .args(["serve", "--namespace", namespace, "--port", "0"])
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| HarnessError::Spawn(format!("{}: {e}", exe.display())))?;
        let mut stdout = BufReader::new(child.stdout.take().expect("stdout is piped"));
        let mut line = String::new();
        let read = stdout.read_line(&mut line);
        let addr = match read {
            Ok(n) if n > 0 => line.trim().strip_prefix(LISTENING_PREFIX).map(str::to_string),
            _ => None,
        };
        match addr {
            Some(addr) => Ok(Self { namespace: namespace.to_string(), addr, child, _stdout: stdout }),
            None => {
                let _ = child.kill();
                let status = child.wait().ok();
                Err(HarnessError::Spawn(format!(
                    "{namespace} service did not report its address (got {:?}, exit {status:?})",
                    line.trim()
                )))
            }
        }
    }

    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    pub fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for NodeProcess {
    fn drop(&mut self) {
        self.kill();
    }
}

/// Every process a run needs. Processes are killed when the cluster drops.
#[derive(Debug, Default)]
pub struct Cluster {
    nodes: Vec<NodeProcess>,
}

impl Cluster {
    /// Start whatever the deployment section does not already point at, and
    /// return the configuration with every address filled in.
    pub fn start(exe: &Path, cfg: &ScenarioConfig) -> Result<(Self, ScenarioConfig), HarnessError> {
        let mut cluster = Cluster::default();
        let mut resolved = cfg.clone();
        resolved.deployment.mode = DeploymentMode::MultiProcess;
        if resolved.deployment.cloud.is_none() {
            let node = NodeProcess::spawn(exe, CLOUD_NAMESPACE)?;
            resolved.deployment.cloud = Some(node.addr.clone());
            cluster.nodes.push(node);
        }
        for role in Role::LABS {
            let ns = role.namespace();
            if !resolved.deployment.endpoints.contains_key(ns) {
                let node = NodeProcess::spawn(exe, ns)?;
                resolved.deployment.endpoints.insert(ns.to_string(), node.addr.clone());
                cluster.nodes.push(node);
            }
        }
        Ok((cluster, resolved))
    }

    pub fn nodes(&self) -> &[NodeProcess] {
        &self.nodes
    }

    /// Kill one spawned process. False when this cluster did not start it.
    pub fn kill(&mut self, namespace: &str) -> bool {
        match self.nodes.iter_mut().find(|n| n.namespace == namespace) {
            Some(node) => {
                node.kill();
                true
            }
            None => false,
        }
    }
}
