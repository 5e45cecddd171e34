//! Research-infrastructure emulator nodes and the controller node.
//!
//! A node owns a local registry, a push link and a pull link to the cloud,
//! and the plant models of its lab. Every tick runs in two phases. `advance`
//! steps the electrical side, publishes measurements and pushes. `settle`
//! pulls the node's subscriptions and steps the thermal side. The controller
//! runs between the two phases, so a command issued in a cycle reaches the
//! devices at the end of that same cycle.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ScenarioConfig;
use crate::csc::{control_step, ControllerState, CscError};
use crate::devices::{map_chp_to_dtu, BessState, ChpState, EhpState};
use crate::grid::{deviation_percent, solve_power_flow, GridError, GridModel, Injection};
use crate::profile::{apply_profiles, ScenarioProfile};
use crate::replication::{
    pull_cycle, push_cycle, CloudEndpoint, Direction, NodeStore, ReplicationError, ReplicationLink,
    ReplicationTrace,
};
use crate::signal::{SignalError, SignalId, SignalRegistry, SignalSample};
use crate::thermal::{CresThermalState, DistrictHeating, ThermalError};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Replication(#[from] ReplicationError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Thermal(#[from] ThermalError),
    #[error(transparent)]
    Controller(#[from] CscError),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Tud,
    Sin,
    Rse,
    Cres,
    Dtu,
    Csc,
}

impl Role {
    pub const LABS: [Role; 5] = [Role::Sin, Role::Rse, Role::Cres, Role::Dtu, Role::Tud];

    pub fn namespace(self) -> &'static str {
        match self {
            Role::Tud => "TUD",
            Role::Sin => "SIN",
            Role::Rse => "RSE",
            Role::Cres => "CRES",
            Role::Dtu => "DTU",
            Role::Csc => "CSC",
        }
    }

    pub fn from_namespace(ns: &str) -> Option<Role> {
        [Role::Tud, Role::Sin, Role::Rse, Role::Cres, Role::Dtu, Role::Csc]
            .into_iter()
            .find(|r| r.namespace() == ns)
    }
}

/// Catalog ids the emulators touch, resolved once per registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignalIds {
    pub p_el_sin: SignalId,
    pub q_el_sin: SignalId,
    pub p_el_sin_ref: SignalId,
    pub q_el_sin_ref: SignalId,
    pub soc: SignalId,
    pub v_sin_ref: SignalId,
    pub f_sin_ref: SignalId,
    pub p_th_chp: SignalId,
    pub p_el_rse: SignalId,
    pub q_el_rse: SignalId,
    pub q_el_rse_ref: SignalId,
    pub v_rse_ref: SignalId,
    pub f_rse_ref: SignalId,
    pub on_off: SignalId,
    pub chp_on_off: SignalId,
    pub pbar_dtu: SignalId,
    pub t_dtu: SignalId,
    pub p_th_cres: SignalId,
    pub t_cres: SignalId,
}

impl SignalIds {
    pub fn resolve(reg: &SignalRegistry) -> Result<Self, SignalError> {
        Ok(Self {
            p_el_sin: reg.require("SIN", "P_el_SIN")?,
            q_el_sin: reg.require("SIN", "Q_el_SIN")?,
            p_el_sin_ref: reg.require("SIN", "P_el_SIN_ref")?,
            q_el_sin_ref: reg.require("SIN", "Q_el_SIN_ref")?,
            soc: reg.require("SIN", "SoC")?,
            v_sin_ref: reg.require("SIN", "V_SIN_ref")?,
            f_sin_ref: reg.require("SIN", "f_SIN_ref")?,
            p_th_chp: reg.require("RSE", "P_th_CHP")?,
            p_el_rse: reg.require("RSE", "P_el_RSE")?,
            q_el_rse: reg.require("RSE", "Q_el_RSE")?,
            q_el_rse_ref: reg.require("RSE", "Q_el_RSE_ref")?,
            v_rse_ref: reg.require("RSE", "V_RSE_ref")?,
            f_rse_ref: reg.require("RSE", "f_RSE_ref")?,
            on_off: reg.require("RSE", "ON_OFF")?,
            chp_on_off: reg.require("RSE", "CHP_ON_OFF")?,
            pbar_dtu: reg.require("DTU", "Pbar_DTU")?,
            t_dtu: reg.require("DTU", "T_DTU")?,
            p_th_cres: reg.require("CRES", "P_th_CRES")?,
            t_cres: reg.require("CRES", "T_CRES")?,
        })
    }

    /// Signals a role writes. Every catalog signal has exactly one owner.
    pub fn owned(&self, role: Role) -> Vec<SignalId> {
        match role {
            Role::Tud => vec![self.v_sin_ref, self.f_sin_ref, self.v_rse_ref, self.f_rse_ref],
            Role::Sin => vec![self.p_el_sin, self.q_el_sin, self.soc],
            Role::Rse => vec![self.p_el_rse, self.q_el_rse],
            Role::Cres => vec![self.p_th_cres, self.t_cres],
            Role::Dtu => vec![self.pbar_dtu, self.t_dtu],
            Role::Csc => vec![
                self.p_el_sin_ref,
                self.q_el_sin_ref,
                self.q_el_rse_ref,
                self.on_off,
                self.chp_on_off,
                self.p_th_chp,
            ],
        }
    }

    /// Signals a role pulls from the cloud.
    pub fn subscriptions(&self, role: Role) -> Vec<SignalId> {
        match role {
            Role::Tud => vec![self.p_el_sin, self.q_el_sin, self.p_el_rse, self.q_el_rse],
            Role::Sin => vec![self.p_el_sin_ref, self.q_el_sin_ref, self.v_sin_ref, self.f_sin_ref],
            Role::Rse => vec![
                self.on_off,
                self.chp_on_off,
                self.p_th_chp,
                self.q_el_rse_ref,
                self.v_rse_ref,
                self.f_rse_ref,
            ],
            Role::Cres => vec![self.on_off],
            Role::Dtu => vec![self.p_th_chp],
            Role::Csc => vec![self.v_sin_ref, self.v_rse_ref, self.soc],
        }
    }
}

/// Stable per-link seed from the scenario seed, node id and direction.
pub fn link_seed(seed: u64, node_id: &str, direction: Direction) -> u64 {
    // FNV-1a over the id, then a splitmix64 finalizer
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in node_id.bytes().chain([direction as u8]) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tick {
    pub index: u64,
    pub time_ms: i64,
    /// A replication and control cycle runs on this tick.
    pub exchange: bool,
}

impl Tick {
    pub fn of(cfg: &ScenarioConfig, index: u64) -> Self {
        Self {
            index,
            time_ms: cfg.time_ms(index),
            exchange: cfg.is_exchange_tick(index),
        }
    }

    pub fn time_s(&self) -> f64 {
        self.time_ms as f64 / 1000.0
    }
}

/// What a phase produced: replication events and, after `settle`, the
/// node's owned samples.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PhaseOutput {
    pub trace: ReplicationTrace,
    pub owned: Vec<SignalSample>,
}

/// Registry, links and cloud handle shared by every node kind.
pub struct Member {
    pub role: Role,
    pub store: NodeStore,
    pub push: ReplicationLink,
    pub pull: ReplicationLink,
    cloud: Box<dyn CloudEndpoint + Send>,
    pub ids: SignalIds,
    owned: Vec<SignalId>,
    subscriptions: BTreeSet<SignalId>,
    now_ms: i64,
}

impl std::fmt::Debug for Member {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Member")
            .field("role", &self.role)
            .field("node_id", &self.store.node_id)
            .field("now_ms", &self.now_ms)
            .finish_non_exhaustive()
    }
}

impl Member {
    pub fn new(
        role: Role,
        cfg: &ScenarioConfig,
        registry: Arc<SignalRegistry>,
        cloud: Box<dyn CloudEndpoint + Send>,
    ) -> Result<Self, NodeError> {
        let ids = SignalIds::resolve(&registry)?;
        let node_id = role.namespace();
        let mut store = NodeStore::new(node_id, registry);
        for id in ids.subscriptions(role) {
            store.subscribe(id)?;
        }
        let link = |dir| ReplicationLink::new(cfg.link_config(link_seed(cfg.seed, node_id, dir)), dir);
        Ok(Self {
            role,
            push: link(Direction::LocalToCloud)?,
            pull: link(Direction::CloudToLocal)?,
            subscriptions: store.subscriptions.clone(),
            store,
            cloud,
            owned: ids.owned(role),
            ids,
            now_ms: 0,
        })
    }

    pub fn registry(&self) -> &Arc<SignalRegistry> {
        &self.store.registry
    }

    /// Simulated time of the latest tick this node has seen.
    pub fn now_ms(&self) -> i64 {
        self.now_ms
    }

    pub fn subscriptions(&self) -> &BTreeSet<SignalId> {
        &self.subscriptions
    }

    fn write(&self, trace: &mut ReplicationTrace, id: SignalId, value: f64) -> Result<(), NodeError> {
        let sample = self.store.write(id, value, self.now_ms)?;
        trace.record_write(&sample, self.push.cycle());
        Ok(())
    }

    fn value(&self, id: SignalId) -> Option<f64> {
        self.store.value(id)
    }

    fn push(&mut self, tick: &Tick) {
        if tick.exchange {
            let report = push_cycle(&mut self.store, &mut self.push, self.cloud.as_mut());
            if report.transport_errors > 0 {
                tracing::debug!(node = %self.store.node_id, errors = report.transport_errors, "push incomplete");
            }
        }
    }

    fn pull(&mut self, tick: &Tick, trace: &mut ReplicationTrace) -> Result<(), NodeError> {
        if tick.exchange {
            let report = pull_cycle(self.cloud.as_mut(), &mut self.pull, &mut self.store, &self.subscriptions)?;
            trace.record_pull(&self.store.node_id, &report);
        }
        Ok(())
    }

    fn owned_samples(&self) -> Result<Vec<SignalSample>, NodeError> {
        let mut out = Vec::with_capacity(self.owned.len());
        for &id in &self.owned {
            if let Some(s) = self.store.registry.read(id)? {
                out.push(s);
            }
        }
        Ok(out)
    }

    /// Replication subscriber map for lag accounting.
    pub fn subscriber_trace(&self) -> ReplicationTrace {
        let mut trace = ReplicationTrace::default();
        for &id in &self.subscriptions {
            trace.add_subscriber(id, &self.store.node_id);
        }
        trace
    }
}

#[derive(Debug)]
enum Plant {
    Tud { model: GridModel, profile: ScenarioProfile, pcc2: usize, pcc4: usize, sin_bus: usize, rse_bus: usize },
    Sin { bess: BessState },
    Rse { chp: ChpState, ehp: EhpState },
    Cres { ehp: EhpState, thermal: CresThermalState },
    Dtu { dhn: DistrictHeating, applied_kw: f64 },
}

/// One emulated research infrastructure.
#[derive(Debug)]
pub struct RiNode {
    pub member: Member,
    plant: Plant,
    dt_s: f64,
}

fn on(value: Option<f64>) -> bool {
    value.is_some_and(|v| v >= 0.5)
}

impl RiNode {
    pub fn new(
        role: Role,
        cfg: &ScenarioConfig,
        registry: Arc<SignalRegistry>,
        cloud: Box<dyn CloudEndpoint + Send>,
    ) -> Result<Self, NodeError> {
        let plant = match role {
            Role::Tud => {
                let model = cfg.topology().map_err(|e| NodeError::Config(e.0))?;
                let profile = cfg.profile().map_err(|e| NodeError::Config(e.0))?;
                let bus = |found: Option<usize>, what: &str| {
                    found.ok_or_else(|| NodeError::Config(format!("topology lacks {what}")))
                };
                Plant::Tud {
                    pcc2: bus(model.pcc_bus("PCC2"), "PCC2")?,
                    pcc4: bus(model.pcc_bus("PCC4"), "PCC4")?,
                    sin_bus: bus(model.device_bus("SIN"), "SIN")?,
                    rse_bus: bus(model.device_bus("RSE"), "RSE")?,
                    model,
                    profile,
                }
            }
            Role::Sin => Plant::Sin {
                bess: BessState::new(cfg.devices.bess_capacity_kwh, cfg.devices.bess_initial_soc),
            },
            Role::Rse => Plant::Rse {
                chp: ChpState::new(cfg.devices.chp_el_th_ratio),
                ehp: EhpState::new(cfg.devices.ehp_cop),
            },
            Role::Cres => Plant::Cres {
                ehp: EhpState::new(cfg.devices.ehp_cop),
                thermal: CresThermalState::new(&cfg.thermal.cres),
            },
            Role::Dtu => Plant::Dtu {
                dhn: DistrictHeating::new(&cfg.thermal.dhn)?,
                applied_kw: 0.0,
            },
            Role::Csc => return Err(NodeError::Config("the controller is not a lab node".into())),
        };
        Ok(Self {
            member: Member::new(role, cfg, registry, cloud)?,
            plant,
            dt_s: cfg.dt_s,
        })
    }

    pub fn role(&self) -> Role {
        self.member.role
    }

    /// Electrical step, publish, push.
    pub fn advance(&mut self, tick: Tick) -> Result<PhaseOutput, NodeError> {
        self.member.now_ms = tick.time_ms;
        let mut trace = ReplicationTrace::default();
        let m = &self.member;
        let ids = m.ids;
        match &mut self.plant {
            Plant::Tud { model, profile, pcc2, pcc4, sin_bus, rse_bus } => {
                let mut injections = apply_profiles(model, profile, tick.time_s()).injections;
                let get = |id| m.value(id).unwrap_or(0.0);
                injections.push(Injection::new(*sin_bus, get(ids.p_el_sin), get(ids.q_el_sin)));
                injections.push(Injection::new(*rse_bus, get(ids.p_el_rse), get(ids.q_el_rse)));
                let state = solve_power_flow(model, &injections)?;
                if !state.converged {
                    tracing::warn!(t_ms = tick.time_ms, mismatch = state.max_mismatch_pu, "power flow did not converge");
                }
                let f = model.nominal_frequency_hz;
                m.write(&mut trace, ids.v_sin_ref, state.voltages[*pcc2].norm())?;
                m.write(&mut trace, ids.f_sin_ref, f)?;
                m.write(&mut trace, ids.v_rse_ref, state.voltages[*pcc4].norm())?;
                m.write(&mut trace, ids.f_rse_ref, f)?;
            }
            Plant::Sin { bess } => {
                let p_ref = m.value(ids.p_el_sin_ref).unwrap_or(0.0);
                let q_ref = m.value(ids.q_el_sin_ref).unwrap_or(0.0);
                bess.bess_step(p_ref, q_ref, self.dt_s)
                    .map_err(|e| NodeError::Config(e.to_string()))?;
                m.write(&mut trace, ids.p_el_sin, bess.p_kw)?;
                m.write(&mut trace, ids.q_el_sin, bess.q_kvar)?;
                m.write(&mut trace, ids.soc, bess.soc)?;
            }
            Plant::Rse { chp, ehp } => {
                let chp_on = on(m.value(ids.chp_on_off));
                chp.chp_step(chp_on, m.value(ids.p_th_chp).unwrap_or(0.0));
                ehp.ehp_step(on(m.value(ids.on_off)));
                let q = m.value(ids.q_el_rse_ref).unwrap_or(0.0);
                m.write(&mut trace, ids.p_el_rse, ehp.p_el_kw + chp.pcc_p_kw())?;
                m.write(&mut trace, ids.q_el_rse, q)?;
            }
            Plant::Cres { thermal, .. } => {
                m.write(&mut trace, ids.p_th_cres, thermal.p_th_cres_kw)?;
                m.write(&mut trace, ids.t_cres, thermal.temperature_c)?;
            }
            Plant::Dtu { dhn, applied_kw } => {
                m.write(&mut trace, ids.pbar_dtu, *applied_kw)?;
                m.write(&mut trace, ids.t_dtu, dhn.tank.temperature_c)?;
            }
        }
        self.member.push(&tick);
        Ok(PhaseOutput { trace, owned: Vec::new() })
    }

    /// Pull, then thermal step.
    pub fn settle(&mut self, tick: Tick) -> Result<PhaseOutput, NodeError> {
        self.member.now_ms = tick.time_ms;
        let mut trace = ReplicationTrace::default();
        self.member.pull(&tick, &mut trace)?;
        let m = &self.member;
        let ids = m.ids;
        match &mut self.plant {
            Plant::Cres { ehp, thermal } => {
                ehp.ehp_step(on(m.value(ids.on_off)));
                thermal.step_cres(ehp.on, ehp.p_th_kw, self.dt_s)?;
            }
            Plant::Dtu { dhn, applied_kw } => {
                let p_th = m.value(ids.p_th_chp).unwrap_or(0.0);
                let requested = map_chp_to_dtu(p_th).unwrap_or_else(|err| {
                    tracing::warn!(%err, "CHP setpoint outside mapping domain; heater off");
                    0.0
                });
                *applied_kw = dhn.step(requested, self.dt_s)?.applied_kw;
            }
            _ => {}
        }
        Ok(PhaseOutput {
            trace,
            owned: self.member.owned_samples()?,
        })
    }
}

/// The supervisory controller as a replication participant.
#[derive(Debug)]
pub struct ControllerNode {
    pub member: Member,
    pub state: ControllerState,
    cfg: crate::csc::ControllerConfig,
    horizon_ms: i64,
}

impl ControllerNode {
    pub fn new(
        cfg: &ScenarioConfig,
        registry: Arc<SignalRegistry>,
        cloud: Box<dyn CloudEndpoint + Send>,
    ) -> Result<Self, NodeError> {
        Ok(Self {
            member: Member::new(Role::Csc, cfg, registry, cloud)?,
            state: ControllerState::new(cfg.kind, &cfg.controller)?,
            cfg: cfg.controller,
            horizon_ms: cfg.staleness_horizon_ms,
        })
    }

    fn deviation(&self, id: SignalId) -> Result<Option<f64>, NodeError> {
        let reg = self.member.registry();
        let Some(sample) = reg.read(id)? else { return Ok(None) };
        if reg.is_stale(id, self.member.now_ms, self.horizon_ms)? {
            tracing::warn!(signal = %reg.descriptor(id)?.key(), age_ms = self.member.now_ms - sample.timestamp_ms, "acting on stale voltage");
        }
        Ok(Some(deviation_percent(sample.value)))
    }

    /// On exchange ticks: pull voltages, run one control period, publish
    /// and push the commands.
    pub fn step(&mut self, tick: Tick) -> Result<PhaseOutput, NodeError> {
        self.member.now_ms = tick.time_ms;
        let mut trace = ReplicationTrace::default();
        if !tick.exchange {
            return Ok(PhaseOutput { trace, owned: self.member.owned_samples()? });
        }
        self.member.pull(&tick, &mut trace)?;
        let ids = self.member.ids;
        let dev2 = self.deviation(ids.v_sin_ref)?;
        let dev4 = self.deviation(ids.v_rse_ref)?;
        let cmd = control_step(dev2, dev4, &mut self.state, &self.cfg);
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        let m = &self.member;
        m.write(&mut trace, ids.p_el_sin_ref, cmd.p_sin_ref_kw)?;
        m.write(&mut trace, ids.q_el_sin_ref, cmd.q_sin_ref_kvar)?;
        m.write(&mut trace, ids.q_el_rse_ref, cmd.q_rse_ref_kvar)?;
        m.write(&mut trace, ids.on_off, flag(cmd.ehp_on))?;
        m.write(&mut trace, ids.chp_on_off, flag(cmd.chp_on))?;
        m.write(&mut trace, ids.p_th_chp, cmd.p_th_ref_kw)?;
        self.member.push(&tick);
        Ok(PhaseOutput { trace, owned: self.member.owned_samples()? })
    }
}
