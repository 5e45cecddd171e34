//! Tick loop shared by in-process and multi-process runs.
//!
//! Per tick: every lab advances (electrical step, publish, push), the
//! controller runs one period on exchange ticks, then every lab settles
//! (pull, thermal step). Row `k` of the record holds each signal as its
//! owner published it at `k·dt`.

use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::config::ScenarioConfig;
use crate::metrics::{compute_metrics, MetricsReport};
use crate::node::{ControllerNode, NodeError, PhaseOutput, RiNode, Role, SignalIds, Tick};
use crate::record::{Cell, RecordRow, RunRecord};
use crate::replication::{end_to_end_lag, CloudStore, LagReport, ReplicationTrace};
use crate::signal::{default_catalog, SignalRegistry};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("endpoint unreachable: {0}")]
    EndpointUnreachable(String),
    #[error("remote node failed: {0}")]
    Remote(String),
}

/// One lab as seen by the orchestrator: a local emulator or a remote
/// process behind the REST control routes.
pub trait LabDriver {
    fn role(&self) -> Role;
    fn advance(&mut self, tick: Tick) -> Result<PhaseOutput, SimError>;
    fn settle(&mut self, tick: Tick) -> Result<PhaseOutput, SimError>;
}

impl LabDriver for RiNode {
    fn role(&self) -> Role {
        RiNode::role(self)
    }

    fn advance(&mut self, tick: Tick) -> Result<PhaseOutput, SimError> {
        Ok(RiNode::advance(self, tick)?)
    }

    fn settle(&mut self, tick: Tick) -> Result<PhaseOutput, SimError> {
        Ok(RiNode::settle(self, tick)?)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Pace ticks to wall-clock time.
    pub realtime: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub metrics: MetricsReport,
    pub lag: LagReport,
    pub cycles: u64,
    /// Mode transitions inside the controller's hysteresis machines.
    pub controller_transitions: usize,
}

/// Ticks between a voltage sample and the first sample reflecting the
/// controller's reaction to it: two hops up to the controller, two hops
/// down to the device, two hops back to the grid node, one cycle of device
/// and one of grid stepping.
pub fn actuation_window_s(cfg: &ScenarioConfig) -> f64 {
    let link = cfg.link_config(0);
    let hop = link.delay_cycles(cfg.link.latency_ms + cfg.link.jitter_ms);
    let cycles = 2 + 6 * hop;
    cycles as f64 * link.period_ms as f64 / 1000.0
}

fn base_record(cfg: &ScenarioConfig, mode: &str) -> RunRecord {
    let mut record = RunRecord::new(&default_catalog());
    let c = &cfg.controller;
    record.set_meta("kind", cfg.kind);
    record.set_meta("seed", cfg.seed);
    record.set_meta("config_hash", cfg.hash());
    record.set_meta("version", env!("CARGO_PKG_VERSION"));
    record.set_meta("mode", mode);
    record.set_meta("dt_s", cfg.dt_s);
    record.set_meta("exchange_rate_hz", cfg.exchange_rate_hz);
    record.set_meta("over_activate_pct", c.over_activate_pct);
    record.set_meta("over_deactivate_pct", c.over_deactivate_pct);
    record.set_meta("under_activate_pct", c.under_activate_pct);
    record.set_meta("under_deactivate_pct", c.under_deactivate_pct);
    record.set_meta("actuation_window_s", actuation_window_s(cfg));
    record
}

/// Drive `labs` and `controller` through the configured duration.
pub fn run_with(
    cfg: &ScenarioConfig,
    labs: &mut [Box<dyn LabDriver + '_>],
    controller: &mut ControllerNode,
    mode: &str,
    opts: RunOptions,
) -> Result<RunOutput, SimError> {
    cfg.validate().map_err(|e| SimError::ConfigInvalid(e.0))?;
    let mut record = base_record(cfg, mode);
    let catalog_len = record.columns.len();
    let ids = controller.member.ids;

    let mut trace = ReplicationTrace::default();
    for role in Role::LABS.into_iter().chain([Role::Csc]) {
        for id in ids.subscriptions(role) {
            trace.add_subscriber(id, role.namespace());
        }
    }

    let started = Instant::now();
    let mut cycles = 0;
    let mut cells: Vec<Option<Cell>> = vec![None; catalog_len];
    for k in 0..cfg.tick_count() {
        let tick = Tick::of(cfg, k);
        if opts.realtime {
            let due = Duration::from_millis(tick.time_ms as u64);
            if let Some(wait) = due.checked_sub(started.elapsed()) {
                std::thread::sleep(wait);
            }
        }
        cycles += u64::from(tick.exchange);
        for lab in labs.iter_mut() {
            trace.extend(lab.advance(tick)?.trace);
        }
        let ctl = controller.step(tick)?;
        trace.extend(ctl.trace);
        let mut owned = ctl.owned;
        for lab in labs.iter_mut() {
            let out = lab.settle(tick)?;
            trace.extend(out.trace);
            owned.extend(out.owned);
        }
        for s in owned {
            cells[s.id.index()] = Some(Cell { value: s.value, quality: s.quality });
        }
        record.rows.push(RecordRow { time_s: tick.time_s(), cells: cells.clone() });
    }

    let lag = end_to_end_lag(&trace);
    record.set_meta("replication_cycles", cycles);
    record.set_meta(
        "replication_max_lag_cycles",
        lag.max_lag().map_or_else(|| "none".to_string(), |v| v.to_string()),
    );
    let metrics = compute_metrics(&record);
    Ok(RunOutput {
        record,
        metrics,
        lag,
        cycles,
        controller_transitions: controller.state.transitions,
    })
}

/// Build every node on one shared in-memory cloud and run.
pub fn run_in_process(cfg: &ScenarioConfig, opts: RunOptions) -> Result<RunOutput, SimError> {
    cfg.validate().map_err(|e| SimError::ConfigInvalid(e.0))?;
    let cloud = CloudStore::new(Arc::new(SignalRegistry::with_default_catalog()));
    let fresh = || Arc::new(SignalRegistry::with_default_catalog());
    let mut labs: Vec<Box<dyn LabDriver>> = Vec::new();
    for role in Role::LABS {
        labs.push(Box::new(RiNode::new(role, cfg, fresh(), Box::new(cloud.clone()))?));
    }
    let mut controller = ControllerNode::new(cfg, fresh(), Box::new(cloud))?;
    run_with(cfg, &mut labs, &mut controller, "in-process", opts)
}

/// Column keys of the signals each role owns, for consumers of the record.
pub fn owner_of(key: &str) -> Option<Role> {
    let reg = SignalRegistry::with_default_catalog();
    let ids = SignalIds::resolve(&reg).ok()?;
    let id = reg.lookup_key(key)?;
    [Role::Tud, Role::Sin, Role::Rse, Role::Cres, Role::Dtu, Role::Csc]
        .into_iter()
        .find(|&r| ids.owned(r).contains(&id))
}
