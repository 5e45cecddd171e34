//! Blocking HTTP client for the REST façade, and the two adapters built on
//! it: a replication endpoint and a remote lab driver.

use std::time::{Duration, Instant};

use gds_core::config::ScenarioConfig;
use gds_core::node::{PhaseOutput, Role, Tick};
use gds_core::replication::{CloudEndpoint, ReplicationError};
use gds_core::signal::{default_catalog, MergeOutcome, SignalError, SignalId, SignalRegistry, SignalSample};
use gds_core::sim::{LabDriver, SimError};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;
use ureq::Agent;

use crate::wire::{
    DescriptorBody, ErrorBody, FetchBatch, FetchBatchResponse, Health, InitResponse, MergeBatch,
    MergeBatchResponse, MergeResult, SampleBody, SetBody, SetResponse, StatusBody, TickBody, WireSample,
};

const REQUEST_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("unreachable: {0}")]
    Unreachable(String),
    #[error("HTTP {status}: {} ({})", body.error, body.detail)]
    Api { status: u16, body: ErrorBody },
    #[error("undecodable response: {0}")]
    Decode(String),
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            Self::Api { status, .. } => Some(*status),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UapiClient {
    base: String,
    agent: Agent,
}

impl UapiClient {
    /// `addr` is `host:port` or a full `http://` base URL.
    pub fn new(addr: &str) -> Self {
        let base = if addr.starts_with("http://") || addr.starts_with("https://") {
            addr.trim_end_matches('/').to_string()
        } else {
            format!("http://{addr}")
        };
        let agent: Agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(REQUEST_TIMEOUT))
            .build()
            .into();
        Self { base, agent }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn finish<T: DeserializeOwned>(
        result: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<T, ClientError> {
        let mut resp = result.map_err(|e| ClientError::Unreachable(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_json::<ErrorBody>().unwrap_or_else(|e| ErrorBody {
                error: "unknown".into(),
                detail: e.to_string(),
            });
            return Err(ClientError::Api { status, body });
        }
        resp.body_mut().read_json::<T>().map_err(|e| ClientError::Decode(e.to_string()))
    }

    fn get_json<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        Self::finish(self.agent.get(format!("{}{path}", self.base)).call())
    }

    fn post_json<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        Self::finish(self.agent.post(format!("{}{path}", self.base)).send_json(body))
    }

    pub fn list(&self, ns: &str) -> Result<Vec<DescriptorBody>, ClientError> {
        self.get_json(&format!("/v1/{ns}/signals"))
    }

    pub fn get(&self, ns: &str, name: &str) -> Result<SampleBody, ClientError> {
        self.get_json(&format!("/v1/{ns}/signals/{name}"))
    }

    pub fn set(&self, ns: &str, name: &str, body: &SetBody) -> Result<SetResponse, ClientError> {
        Self::finish(self.agent.put(format!("{}/v1/{ns}/signals/{name}", self.base)).send_json(body))
    }

    /// PUT an arbitrary body, for exercising the validation path.
    pub fn set_raw(&self, ns: &str, name: &str, body: &str) -> Result<SetResponse, ClientError> {
        Self::finish(
            self.agent
                .put(format!("{}/v1/{ns}/signals/{name}", self.base))
                .header("content-type", "application/json")
                .send(body),
        )
    }

    pub fn set_value(&self, ns: &str, name: &str, value: f64) -> Result<SetResponse, ClientError> {
        self.set(ns, name, &SetBody::value(value))
    }

    pub fn status(&self, ns: &str) -> Result<StatusBody, ClientError> {
        self.get_json(&format!("/v1/{ns}/status"))
    }

    /// Reported health, or `Offline` when the service cannot be reached.
    pub fn health(&self, ns: &str) -> Health {
        match self.status(ns) {
            Ok(s) => s.status,
            Err(ClientError::Unreachable(_)) => Health::Offline,
            Err(_) => Health::Degraded,
        }
    }

    pub fn merge_batch(&self, samples: Vec<WireSample>) -> Result<MergeBatchResponse, ClientError> {
        self.post_json("/v1/_replication/merge", &MergeBatch { samples })
    }

    pub fn fetch_batch(&self, signals: Vec<String>) -> Result<FetchBatchResponse, ClientError> {
        self.post_json("/v1/_replication/fetch", &FetchBatch { signals })
    }

    pub fn init(&self, ns: &str, cfg: &ScenarioConfig) -> Result<InitResponse, ClientError> {
        self.post_json(&format!("/v1/{ns}/control/init"), cfg)
    }

    pub fn advance(&self, ns: &str, tick: Tick) -> Result<PhaseOutput, ClientError> {
        self.post_json(&format!("/v1/{ns}/control/advance"), &TickBody { tick })
    }

    pub fn settle(&self, ns: &str, tick: Tick) -> Result<PhaseOutput, ClientError> {
        self.post_json(&format!("/v1/{ns}/control/settle"), &TickBody { tick })
    }

    /// Poll the status route until it answers or `timeout` elapses.
    pub fn wait_ready(&self, ns: &str, timeout: Duration) -> Result<(), ClientError> {
        let deadline = Instant::now() + timeout;
        loop {
            match self.status(ns) {
                Err(ClientError::Unreachable(e)) if Instant::now() >= deadline => {
                    return Err(ClientError::Unreachable(e))
                }
                Err(ClientError::Unreachable(_)) => std::thread::sleep(Duration::from_millis(20)),
                other => return other.map(|_| ()),
            }
        }
    }
}

/// Replication endpoint backed by a remote cloud node. Samples travel by
/// key, so both ends only need to agree on signal names.
pub struct HttpCloud {
    client: UapiClient,
    registry: SignalRegistry,
}

impl HttpCloud {
    pub fn new(addr: &str) -> Self {
        Self::with_catalog(addr, SignalRegistry::with_catalog(&default_catalog()).expect("default catalog"))
    }

    /// `registry` maps local ids to keys; its stored samples are unused.
    pub fn with_catalog(addr: &str, registry: SignalRegistry) -> Self {
        Self { client: UapiClient::new(addr), registry }
    }

    fn key(&self, id: SignalId) -> Result<String, ReplicationError> {
        Ok(self.registry.descriptor(id)?.key())
    }

    fn to_wire(&self, s: &SignalSample) -> Result<WireSample, ReplicationError> {
        Ok(WireSample {
            signal: self.key(s.id)?,
            value: s.value,
            timestamp_ms: s.timestamp_ms,
            origin: s.origin.clone(),
            quality: s.quality,
        })
    }
}

fn replication_error(err: ClientError) -> ReplicationError {
    match err {
        ClientError::Api { status: 404, body } => ReplicationError::Signal(SignalError::UnknownSignal(body.detail)),
        ClientError::Api { status: 422, body } => ReplicationError::Signal(SignalError::NonFinite {
            signal: body.detail,
            value: f64::NAN,
        }),
        other => ReplicationError::Transport(other.to_string()),
    }
}

impl CloudEndpoint for HttpCloud {
    fn merge(&mut self, sample: &SignalSample) -> Result<MergeOutcome, ReplicationError> {
        self.merge_batch(std::slice::from_ref(sample)).pop().expect("one result per sample")
    }

    fn fetch(&mut self, ids: &[SignalId]) -> Result<Vec<Option<SignalSample>>, ReplicationError> {
        let keys = ids.iter().map(|&id| self.key(id)).collect::<Result<Vec<_>, _>>()?;
        let resp = self.client.fetch_batch(keys).map_err(replication_error)?;
        if resp.samples.len() != ids.len() {
            return Err(ReplicationError::Transport(format!(
                "fetch returned {} samples for {} signals",
                resp.samples.len(),
                ids.len()
            )));
        }
        Ok(ids
            .iter()
            .zip(resp.samples)
            .map(|(&id, w)| {
                w.map(|w| SignalSample {
                    id,
                    value: w.value,
                    timestamp_ms: w.timestamp_ms,
                    origin: w.origin,
                    quality: w.quality,
                })
            })
            .collect())
    }

    /// One request for the whole batch. A failed request fails every sample.
    fn merge_batch(&mut self, samples: &[SignalSample]) -> Vec<Result<MergeOutcome, ReplicationError>> {
        let wire: Result<Vec<_>, _> = samples.iter().map(|s| self.to_wire(s)).collect();
        let result = wire.and_then(|w| self.client.merge_batch(w).map_err(replication_error));
        match result {
            Ok(resp) if resp.results.len() == samples.len() => resp
                .results
                .into_iter()
                .map(|r| {
                    Ok(match r {
                        MergeResult::Applied => MergeOutcome::Applied,
                        MergeResult::Kept => MergeOutcome::Kept,
                    })
                })
                .collect(),
            Ok(resp) => {
                let msg = format!("merge returned {} results for {} samples", resp.results.len(), samples.len());
                samples.iter().map(|_| Err(ReplicationError::Transport(msg.clone()))).collect()
            }
            Err(err) => {
                let msg = err.to_string();
                samples
                    .iter()
                    .map(|_| match &err {
                        ReplicationError::Signal(e) => Err(ReplicationError::Signal(e.clone())),
                        _ => Err(ReplicationError::Transport(msg.clone())),
                    })
                    .collect()
            }
        }
    }
}

/// A lab emulator hosted by another process, driven over the control routes.
pub struct RemoteLab {
    role: Role,
    client: UapiClient,
}

impl RemoteLab {
    pub fn new(role: Role, addr: &str) -> Self {
        Self { role, client: UapiClient::new(addr) }
    }

    pub fn client(&self) -> &UapiClient {
        &self.client
    }

    pub fn init(&self, cfg: &ScenarioConfig) -> Result<InitResponse, SimError> {
        self.client.init(self.role.namespace(), cfg).map_err(|e| self.sim_error(e))
    }

    fn sim_error(&self, err: ClientError) -> SimError {
        let ns = self.role.namespace();
        match err {
            ClientError::Unreachable(e) => SimError::EndpointUnreachable(format!("{ns} at {}: {e}", self.client.base)),
            other => SimError::Remote(format!("{ns}: {other}")),
        }
    }
}

impl LabDriver for RemoteLab {
    fn role(&self) -> Role {
        self.role
    }

    fn advance(&mut self, tick: Tick) -> Result<PhaseOutput, SimError> {
        self.client.advance(self.role.namespace(), tick).map_err(|e| self.sim_error(e))
    }

    fn settle(&mut self, tick: Tick) -> Result<PhaseOutput, SimError> {
        self.client.settle(self.role.namespace(), tick).map_err(|e| self.sim_error(e))
    }
}
