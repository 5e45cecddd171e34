//! The REST façade over one registry.
//!
//! Routes:
//! - `GET /v1/{ns}/signals`, `GET|PUT /v1/{ns}/signals/{name}`, `GET /v1/{ns}/status`
//! - `POST /v1/_replication/merge|fetch`: batched replication binding
//! - `POST /v1/{ns}/control/init|advance|settle`: tick barrier for a hosted lab emulator

use std::net::SocketAddr;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gds_core::config::ScenarioConfig;
use gds_core::node::{PhaseOutput, RiNode, Role};
use gds_core::signal::{SignalError, SignalId, SignalRegistry, SignalSample};
use parking_lot::Mutex;
use thiserror::Error;
use tokio::sync::oneshot;

use crate::client::HttpCloud;
use crate::wire::{
    DescriptorBody, ErrorBody, FetchBatch, FetchBatchResponse, Health, InitResponse, MergeBatch,
    MergeBatchResponse, MergeResult, SampleBody, SetBody, SetResponse, SignalHealth, StatusBody, TickBody,
    WireSample,
};

pub const DEFAULT_STALENESS_HORIZON_MS: i64 = 2000;
/// Namespace under which the cloud node answers for itself.
pub const CLOUD_NAMESPACE: &str = "CLOUD";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("port in use: {0}")]
    PortInUse(String),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
}

/// Which namespaces a service answers for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Scope {
    /// The cloud node: every namespace in the registry.
    All,
    /// One lab.
    Namespace(String),
}

struct Inner {
    registry: Arc<SignalRegistry>,
    scope: Scope,
    node_id: String,
    horizon_ms: AtomicI64,
    /// Simulated time: the latest tick or sample timestamp seen.
    clock_ms: AtomicI64,
    started: Instant,
    lab: Mutex<Option<RiNode>>,
}

#[derive(Clone)]
pub struct ApiState {
    inner: Arc<Inner>,
}

impl ApiState {
    pub fn new(registry: Arc<SignalRegistry>, scope: Scope) -> Self {
        let node_id = match &scope {
            Scope::All => CLOUD_NAMESPACE.to_string(),
            Scope::Namespace(ns) => ns.clone(),
        };
        Self {
            inner: Arc::new(Inner {
                registry,
                scope,
                node_id,
                horizon_ms: AtomicI64::new(DEFAULT_STALENESS_HORIZON_MS),
                clock_ms: AtomicI64::new(0),
                started: Instant::now(),
                lab: Mutex::new(None),
            }),
        }
    }

    pub fn registry(&self) -> &Arc<SignalRegistry> {
        &self.inner.registry
    }

    pub fn set_staleness_horizon(&self, ms: i64) {
        self.inner.horizon_ms.store(ms, Ordering::Relaxed);
    }

    pub fn now_ms(&self) -> i64 {
        self.inner.clock_ms.load(Ordering::Relaxed)
    }

    fn observe_time(&self, t_ms: i64) {
        self.inner.clock_ms.fetch_max(t_ms, Ordering::Relaxed);
    }

    /// Prepare for a run: discard stored samples and adopt the staleness
    /// horizon. A lab service also builds its emulator, replicating through
    /// the cloud at `cfg.deployment.cloud`.
    pub fn init_lab(&self, cfg: &ScenarioConfig) -> Result<String, String> {
        cfg.validate().map_err(|e| e.to_string())?;
        let Scope::Namespace(ns) = &self.inner.scope else {
            self.inner.registry.clear();
            self.inner.clock_ms.store(0, Ordering::Relaxed);
            self.set_staleness_horizon(cfg.staleness_horizon_ms);
            return Ok(cfg.hash());
        };
        let role = Role::from_namespace(ns)
            .filter(|r| *r != Role::Csc)
            .ok_or_else(|| format!("no lab emulator for namespace {ns}"))?;
        let cloud_addr = cfg
            .deployment
            .cloud
            .clone()
            .ok_or_else(|| "deployment.cloud is not set".to_string())?;
        let mut lab = self.inner.lab.lock();
        *lab = None;
        self.inner.registry.clear();
        self.inner.clock_ms.store(0, Ordering::Relaxed);
        let cloud = HttpCloud::new(&cloud_addr);
        let node = RiNode::new(role, cfg, self.inner.registry.clone(), Box::new(cloud)).map_err(|e| e.to_string())?;
        *lab = Some(node);
        self.set_staleness_horizon(cfg.staleness_horizon_ms);
        Ok(cfg.hash())
    }

    fn serves(&self, ns: &str) -> bool {
        match &self.inner.scope {
            Scope::All => {
                ns == self.inner.node_id
                    || self.inner.registry.namespaces().contains(ns)
                    || Role::from_namespace(ns).is_some()
            }
            Scope::Namespace(own) => own == ns,
        }
    }

    /// Signals whose staleness decides the status: the hosted lab's
    /// subscriptions, otherwise every signal of the namespace.
    fn watched(&self, ns: &str) -> Vec<SignalId> {
        if let Some(lab) = self.inner.lab.lock().as_ref() {
            return lab.member.subscriptions().iter().copied().collect();
        }
        self.inner.registry.namespace_signals(ns).into_iter().map(|(id, _)| id).collect()
    }
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, detail: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody { error: error.to_string(), detail: detail.into() },
        }
    }

    fn unknown_namespace(ns: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_namespace", format!("namespace {ns} is not served here"))
    }

    fn unprocessable(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "unprocessable", detail)
    }
}

impl From<SignalError> for ApiError {
    fn from(err: SignalError) -> Self {
        match &err {
            SignalError::UnknownSignal(_) => Self::new(StatusCode::NOT_FOUND, "not_found", err.to_string()),
            SignalError::NonFinite { .. } => Self::unprocessable(err.to_string()),
            SignalError::Superseded { .. } => Self::new(StatusCode::CONFLICT, "superseded", err.to_string()),
            _ => Self::new(StatusCode::BAD_REQUEST, "bad_request", err.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn resolve(state: &ApiState, ns: &str, name: &str) -> Result<SignalId, ApiError> {
    if !state.serves(ns) {
        return Err(ApiError::unknown_namespace(ns));
    }
    Ok(state.inner.registry.require(ns, name)?)
}

async fn handle_list(State(state): State<ApiState>, Path(ns): Path<String>) -> ApiResult<Vec<DescriptorBody>> {
    if !state.serves(&ns) {
        return Err(ApiError::unknown_namespace(&ns));
    }
    let list = state.inner.registry.namespace_signals(&ns);
    Ok(Json(list.iter().map(|(_, d)| DescriptorBody::from(d)).collect()))
}

async fn handle_get(
    State(state): State<ApiState>,
    Path((ns, name)): Path<(String, String)>,
) -> ApiResult<SampleBody> {
    let id = resolve(&state, &ns, &name)?;
    let reg = &state.inner.registry;
    let sample = reg.read(id)?;
    Ok(Json(SampleBody::new(&reg.descriptor(id)?, sample.as_ref())))
}

/// Accepts `{"value": x, ...}` or a bare JSON number.
fn parse_set(body: &[u8]) -> Result<SetBody, ApiError> {
    let json: serde_json::Value =
        serde_json::from_slice(body).map_err(|e| ApiError::unprocessable(format!("body is not JSON: {e}")))?;
    let set = if json.is_number() {
        SetBody { value: json, timestamp_ms: None, origin: None, quality: None }
    } else {
        serde_json::from_value(json).map_err(|e| ApiError::unprocessable(e.to_string()))?
    };
    Ok(set)
}

async fn handle_set(
    State(state): State<ApiState>,
    Path((ns, name)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<SetResponse> {
    let id = resolve(&state, &ns, &name)?;
    let set = parse_set(&body)?;
    let value = set
        .value
        .as_f64()
        .ok_or_else(|| ApiError::unprocessable(format!("value {} is not a number", set.value)))?;
    let reg = &state.inner.registry;
    let descriptor = reg.descriptor(id)?;
    let timestamp_ms = set.timestamp_ms.unwrap_or_else(|| state.now_ms());
    let (sample, merge) = match set.origin {
        Some(origin) => {
            let offered = SignalSample {
                id,
                value,
                timestamp_ms,
                origin,
                quality: set.quality.unwrap_or(gds_core::signal::Quality::Ok),
            };
            let outcome = reg.merge(&offered)?;
            let held = reg.read(id)?.expect("merged slot is populated");
            let result = match outcome {
                gds_core::signal::MergeOutcome::Applied => MergeResult::Applied,
                gds_core::signal::MergeOutcome::Kept => MergeResult::Kept,
            };
            (held, Some(result))
        }
        None => (reg.write(id, value, timestamp_ms, &state.inner.node_id)?, None),
    };
    state.observe_time(timestamp_ms);
    Ok(Json(SetResponse { sample: SampleBody::new(&descriptor, Some(&sample)), merge }))
}

async fn handle_status(State(state): State<ApiState>, Path(ns): Path<String>) -> ApiResult<StatusBody> {
    if !state.serves(&ns) {
        return Err(ApiError::unknown_namespace(&ns));
    }
    let now = state.now_ms();
    let horizon = state.inner.horizon_ms.load(Ordering::Relaxed);
    let reg = &state.inner.registry;
    let mut signals = Vec::new();
    for id in state.watched(&ns) {
        let sample = reg.read(id)?;
        signals.push(SignalHealth {
            signal: reg.descriptor(id)?.key(),
            stale: reg.is_stale(id, now, horizon)?,
            age_ms: sample.map(|s| now - s.timestamp_ms),
        });
    }
    let status = if signals.iter().any(|s| s.stale) { Health::Degraded } else { Health::Ok };
    Ok(Json(StatusBody {
        namespace: ns,
        status,
        now_ms: now,
        uptime_s: state.inner.started.elapsed().as_secs_f64(),
        signals,
    }))
}

fn to_wire(reg: &SignalRegistry, s: &SignalSample) -> Result<WireSample, SignalError> {
    Ok(WireSample {
        signal: reg.descriptor(s.id)?.key(),
        value: s.value,
        timestamp_ms: s.timestamp_ms,
        origin: s.origin.clone(),
        quality: s.quality,
    })
}

async fn handle_merge_batch(State(state): State<ApiState>, Json(batch): Json<MergeBatch>) -> ApiResult<MergeBatchResponse> {
    let reg = &state.inner.registry;
    let mut results = Vec::with_capacity(batch.samples.len());
    for w in batch.samples {
        let id = reg
            .lookup_key(&w.signal)
            .ok_or_else(|| SignalError::UnknownSignal(w.signal.clone()))?;
        let sample = SignalSample {
            id,
            value: w.value,
            timestamp_ms: w.timestamp_ms,
            origin: w.origin,
            quality: w.quality,
        };
        let outcome = reg.merge(&sample)?;
        state.observe_time(sample.timestamp_ms);
        results.push(match outcome {
            gds_core::signal::MergeOutcome::Applied => MergeResult::Applied,
            gds_core::signal::MergeOutcome::Kept => MergeResult::Kept,
        });
    }
    Ok(Json(MergeBatchResponse { results }))
}

async fn handle_fetch_batch(State(state): State<ApiState>, Json(batch): Json<FetchBatch>) -> ApiResult<FetchBatchResponse> {
    let reg = &state.inner.registry;
    let mut samples = Vec::with_capacity(batch.signals.len());
    for key in &batch.signals {
        let id = reg.lookup_key(key).ok_or_else(|| SignalError::UnknownSignal(key.clone()))?;
        samples.push(match reg.read(id)? {
            Some(s) => Some(to_wire(reg, &s)?),
            None => None,
        });
    }
    Ok(Json(FetchBatchResponse { samples }))
}

async fn handle_init(
    State(state): State<ApiState>,
    Path(ns): Path<String>,
    Json(cfg): Json<ScenarioConfig>,
) -> ApiResult<InitResponse> {
    if !state.serves(&ns) {
        return Err(ApiError::unknown_namespace(&ns));
    }
    let st = state.clone();
    let hash = tokio::task::spawn_blocking(move || st.init_lab(&cfg))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "config_invalid", e))?;
    Ok(Json(InitResponse { namespace: ns, config_hash: hash }))
}

#[derive(Clone, Copy)]
enum Phase {
    Advance,
    Settle,
}

async fn run_phase(state: ApiState, ns: String, tick: TickBody, phase: Phase) -> ApiResult<PhaseOutput> {
    if !state.serves(&ns) {
        return Err(ApiError::unknown_namespace(&ns));
    }
    let st = state.clone();
    let out = tokio::task::spawn_blocking(move || {
        let mut guard = st.inner.lab.lock();
        let lab = guard.as_mut().ok_or_else(|| "no lab initialized".to_string())?;
        let out = match phase {
            Phase::Advance => lab.advance(tick.tick),
            Phase::Settle => lab.settle(tick.tick),
        };
        out.map_err(|e| e.to_string())
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
    .map_err(|e| ApiError::new(StatusCode::CONFLICT, "phase_failed", e))?;
    state.observe_time(tick.tick.time_ms);
    Ok(Json(out))
}

async fn handle_advance(
    State(state): State<ApiState>,
    Path(ns): Path<String>,
    Json(tick): Json<TickBody>,
) -> ApiResult<PhaseOutput> {
    run_phase(state, ns, tick, Phase::Advance).await
}

async fn handle_settle(
    State(state): State<ApiState>,
    Path(ns): Path<String>,
    Json(tick): Json<TickBody>,
) -> ApiResult<PhaseOutput> {
    run_phase(state, ns, tick, Phase::Settle).await
}

pub fn router(state: ApiState) -> Router {
    Router::new()
        .route("/v1/_replication/merge", post(handle_merge_batch))
        .route("/v1/_replication/fetch", post(handle_fetch_batch))
        .route("/v1/{ns}/signals", get(handle_list))
        .route("/v1/{ns}/signals/{name}", get(handle_get).put(handle_set))
        .route("/v1/{ns}/status", get(handle_status))
        .route("/v1/{ns}/control/init", post(handle_init))
        .route("/v1/{ns}/control/advance", post(handle_advance))
        .route("/v1/{ns}/control/settle", post(handle_settle))
        .with_state(state)
}

/// Bind synchronously so a taken port is reported to the caller.
pub fn bind(addr: &str) -> Result<std::net::TcpListener, ServiceError> {
    let listener = std::net::TcpListener::bind(addr).map_err(|source| match source.kind() {
        std::io::ErrorKind::AddrInUse => ServiceError::PortInUse(addr.to_string()),
        _ => ServiceError::Bind { addr: addr.to_string(), source },
    })?;
    listener
        .set_nonblocking(true)
        .map_err(|source| ServiceError::Bind { addr: addr.to_string(), source })?;
    Ok(listener)
}

/// Serve until `shutdown` resolves.
pub async fn serve(
    listener: std::net::TcpListener,
    state: ApiState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::from_std(listener)?;
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

/// A service running on its own runtime thread. Dropping the handle stops it.
pub struct ServerHandle {
    pub addr: SocketAddr,
    pub state: ApiState,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn spawn(addr: &str, state: ApiState) -> Result<Self, ServiceError> {
        let listener = bind(addr)?;
        let local = listener
            .local_addr()
            .map_err(|source| ServiceError::Bind { addr: addr.to_string(), source })?;
        let (tx, rx) = oneshot::channel::<()>();
        let st = state.clone();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .expect("tokio runtime");
            rt.block_on(async move {
                let stop = async {
                    let _ = rx.await;
                };
                if let Err(err) = serve(listener, st, stop).await {
                    tracing::error!(%err, "service stopped");
                }
            });
        });
        Ok(Self { addr: local, state, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}
