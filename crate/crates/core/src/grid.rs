//! Balanced phasor model of the low-voltage feeder.
//!
//! Powers are three-phase totals in kW/kVAr with positive meaning
//! consumption; voltages are phase-to-neutral phasors in volts. The solver is
//! a backward/forward sweep over the radial tree.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const DEFAULT_TOPOLOGY: &str = include_str!("../data/cigre_lv.toml");

pub const NOMINAL_VOLTAGE_V: f64 = 240.0;
pub const NOMINAL_FREQUENCY_HZ: f64 = 50.0;
/// Per-unit base for the convergence test: 400 V line-to-line, 100 kVA.
pub const BASE_POWER_VA: f64 = 100e3;
pub const BASE_VOLTAGE_LL_V: f64 = 400.0;
pub const MISMATCH_TOLERANCE_PU: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("branch {from}-{to} closes a loop")]
    CyclicTopology { from: String, to: String },
    #[error("unknown bus '{0}'")]
    UnknownBusReference(String),
    #[error("bus '{0}' is not connected to the slack")]
    Disconnected(String),
    #[error("unknown bus index {0}")]
    UnknownBus(usize),
    #[error("invalid topology: {0}")]
    Invalid(String),
    #[error("topology file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub from: String,
    pub to: String,
    pub r_ohm: f64,
    pub x_ohm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadConfig {
    pub name: String,
    pub bus: String,
    /// Rated active power; profiles scale it.
    pub p_kw: f64,
    #[serde(default = "default_power_factor")]
    pub power_factor: f64,
}

fn default_power_factor() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PvConfig {
    pub name: String,
    pub bus: String,
    /// Rated peak generation.
    pub p_kw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceAttachment {
    pub name: String,
    pub bus: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyConfig {
    #[serde(default = "default_nominal_voltage")]
    pub nominal_voltage_v: f64,
    #[serde(default = "default_nominal_frequency")]
    pub nominal_frequency_hz: f64,
    pub slack: String,
    pub buses: Vec<String>,
    #[serde(default)]
    pub branches: Vec<BranchConfig>,
    #[serde(default)]
    pub loads: Vec<LoadConfig>,
    #[serde(default)]
    pub pvs: Vec<PvConfig>,
    #[serde(default)]
    pub devices: Vec<DeviceAttachment>,
    /// PCC label → bus name.
    #[serde(default)]
    pub pcc: BTreeMap<String, String>,
}

fn default_nominal_voltage() -> f64 {
    NOMINAL_VOLTAGE_V
}

fn default_nominal_frequency() -> f64 {
    NOMINAL_FREQUENCY_HZ
}

impl TopologyConfig {
    pub fn parse(text: &str) -> Result<Self, GridError> {
        toml::from_str(text).map_err(|e| GridError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, GridError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GridError::Parse(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn shipped() -> Self {
        Self::parse(DEFAULT_TOPOLOGY).expect("shipped topology parses")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Load {
    pub name: String,
    pub bus: usize,
    pub p_kw: f64,
    pub q_kvar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pv {
    pub name: String,
    pub bus: usize,
    pub p_kw: f64,
}

/// Validated radial feeder. Bus 0 is always the slack.
#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    pub nominal_voltage_v: f64,
    pub nominal_frequency_hz: f64,
    pub bus_names: Vec<String>,
    /// Parent bus per bus; `None` only for the slack.
    pub parent: Vec<Option<usize>>,
    /// Series impedance of the branch feeding each bus (Ω per phase).
    pub impedance: Vec<Complex64>,
    /// Slack first, every bus after its parent.
    pub order: Vec<usize>,
    pub loads: Vec<Load>,
    pub pvs: Vec<Pv>,
    pub devices: BTreeMap<String, usize>,
    pub pcc: BTreeMap<String, usize>,
}

/// Build and validate the radial model.
pub fn load_topology(config: &TopologyConfig) -> Result<GridModel, GridError> {
    let mut names = vec![config.slack.clone()];
    names.extend(config.buses.iter().filter(|b| **b != config.slack).cloned());
    let mut index = HashMap::new();
    for (i, n) in names.iter().enumerate() {
        if index.insert(n.clone(), i).is_some() {
            return Err(GridError::Invalid(format!("bus '{n}' declared twice")));
        }
    }
    let bus = |name: &str| {
        index
            .get(name)
            .copied()
            .ok_or_else(|| GridError::UnknownBusReference(name.to_string()))
    };

    let n = names.len();
    let mut adjacency: Vec<Vec<(usize, Complex64)>> = vec![Vec::new(); n];
    // Union-find to detect loops as branches are added.
    let mut root: Vec<usize> = (0..n).collect();
    fn find(root: &mut [usize], mut i: usize) -> usize {
        while root[i] != i {
            root[i] = root[root[i]];
            i = root[i];
        }
        i
    }
    for br in &config.branches {
        let (a, b) = (bus(&br.from)?, bus(&br.to)?);
        if !(br.r_ohm >= 0.0 && br.x_ohm >= 0.0 && br.r_ohm + br.x_ohm > 0.0) {
            return Err(GridError::Invalid(format!(
                "branch {}-{} needs a positive impedance",
                br.from, br.to
            )));
        }
        let (ra, rb) = (find(&mut root, a), find(&mut root, b));
        if ra == rb {
            return Err(GridError::CyclicTopology {
                from: br.from.clone(),
                to: br.to.clone(),
            });
        }
        root[ra] = rb;
        let z = Complex64::new(br.r_ohm, br.x_ohm);
        adjacency[a].push((b, z));
        adjacency[b].push((a, z));
    }

    let mut parent = vec![None; n];
    let mut impedance = vec![Complex64::new(0.0, 0.0); n];
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::from([0]);
    visited[0] = true;
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for &(v, z) in &adjacency[u] {
            if !visited[v] {
                visited[v] = true;
                parent[v] = Some(u);
                impedance[v] = z;
                queue.push_back(v);
            }
        }
    }
    if let Some(i) = visited.iter().position(|v| !v) {
        return Err(GridError::Disconnected(names[i].clone()));
    }

    let loads = config
        .loads
        .iter()
        .map(|l| {
            if !(l.power_factor > 0.0 && l.power_factor <= 1.0) {
                return Err(GridError::Invalid(format!("load {} power factor", l.name)));
            }
            let tan_phi = (1.0 - l.power_factor.powi(2)).sqrt() / l.power_factor;
            Ok(Load {
                name: l.name.clone(),
                bus: bus(&l.bus)?,
                p_kw: l.p_kw,
                q_kvar: l.p_kw * tan_phi,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let pvs = config
        .pvs
        .iter()
        .map(|p| {
            Ok(Pv {
                name: p.name.clone(),
                bus: bus(&p.bus)?,
                p_kw: p.p_kw,
            })
        })
        .collect::<Result<Vec<_>, GridError>>()?;
    let devices = config
        .devices
        .iter()
        .map(|d| Ok((d.name.clone(), bus(&d.bus)?)))
        .collect::<Result<BTreeMap<_, _>, GridError>>()?;
    let pcc = config
        .pcc
        .iter()
        .map(|(label, b)| Ok((label.clone(), bus(b)?)))
        .collect::<Result<BTreeMap<_, _>, GridError>>()?;

    Ok(GridModel {
        nominal_voltage_v: config.nominal_voltage_v,
        nominal_frequency_hz: config.nominal_frequency_hz,
        bus_names: names,
        parent,
        impedance,
        order,
        loads,
        pvs,
        devices,
        pcc,
    })
}

impl GridModel {
    pub fn bus_count(&self) -> usize {
        self.bus_names.len()
    }

    pub fn bus_index(&self, name: &str) -> Option<usize> {
        self.bus_names.iter().position(|b| b == name)
    }

    pub fn pcc_bus(&self, label: &str) -> Option<usize> {
        self.pcc.get(label).copied()
    }

    pub fn device_bus(&self, name: &str) -> Option<usize> {
        self.devices.get(name).copied()
    }

    /// Indented tree rendering with attachments, for `validate`.
    pub fn render_tree(&self) -> String {
        let mut children = vec![Vec::new(); self.bus_count()];
        for (bus, p) in self.parent.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(bus);
            }
        }
        let mut out = String::new();
        let mut stack = vec![(0usize, 0usize)];
        while let Some((bus, depth)) = stack.pop() {
            let mut line = format!("{}{}", "  ".repeat(depth), self.bus_names[bus]);
            if let Some(p) = self.parent[bus] {
                let z = self.impedance[bus];
                line.push_str(&format!(
                    " <- {} (R={} Ω, X={} Ω)",
                    self.bus_names[p], z.re, z.im
                ));
            } else {
                line.push_str(&format!(" [slack {} V]", self.nominal_voltage_v));
            }
            let mut tags: Vec<String> = Vec::new();
            tags.extend(self.pcc.iter().filter(|(_, b)| **b == bus).map(|(l, _)| l.clone()));
            tags.extend(self.devices.iter().filter(|(_, b)| **b == bus).map(|(d, _)| d.clone()));
            tags.extend(self.loads.iter().filter(|l| l.bus == bus).map(|l| format!("{} {} kW", l.name, l.p_kw)));
            tags.extend(self.pvs.iter().filter(|p| p.bus == bus).map(|p| format!("{} {} kWp", p.name, p.p_kw)));
            if !tags.is_empty() {
                line.push_str(&format!(" {{{}}}", tags.join(", ")));
            }
            out.push_str(&line);
            out.push('\n');
            for &c in children[bus].iter().rev() {
                stack.push((c, depth + 1));
            }
        }
        out
    }
}

/// Power drawn at a bus (three-phase total, positive = consumption).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Injection {
    pub bus: usize,
    pub p_kw: f64,
    pub q_kvar: f64,
}

impl Injection {
    pub fn new(bus: usize, p_kw: f64, q_kvar: f64) -> Self {
        Self { bus, p_kw, q_kvar }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    pub voltages: Vec<Complex64>,
    pub iterations: usize,
    pub converged: bool,
    pub max_mismatch_pu: f64,
    /// Three-phase complex power drawn from the slack, in VA.
    pub slack_power_va: Complex64,
}

impl GridState {
    pub fn magnitude(&self, bus: usize) -> Option<f64> {
        self.voltages.get(bus).map(|v| v.norm())
    }
}

/// Per-phase complex load at every bus, in VA.
pub fn bus_loads(model: &GridModel, injections: &[Injection]) -> Result<Vec<Complex64>, GridError> {
    let mut loads = vec![Complex64::new(0.0, 0.0); model.bus_count()];
    for inj in injections {
        let slot = loads.get_mut(inj.bus).ok_or(GridError::UnknownBus(inj.bus))?;
        if !(inj.p_kw.is_finite() && inj.q_kvar.is_finite()) {
            return Err(GridError::Invalid(format!("non-finite injection at bus {}", inj.bus)));
        }
        *slot += Complex64::new(inj.p_kw, inj.q_kvar) * (1000.0 / 3.0);
    }
    Ok(loads)
}

/// Backward/forward sweep. Stops once the largest per-bus power mismatch is
/// below [`MISMATCH_TOLERANCE_PU`] or after [`MAX_ITERATIONS`]; a
/// non-converged state is still returned with `converged == false`.
pub fn solve_power_flow(model: &GridModel, injections: &[Injection]) -> Result<GridState, GridError> {
    let n = model.bus_count();
    let loads = bus_loads(model, injections)?;
    let slack = Complex64::new(model.nominal_voltage_v, 0.0);
    let mut v = vec![slack; n];
    let mut branch = vec![Complex64::new(0.0, 0.0); n];
    let mut current = vec![Complex64::new(0.0, 0.0); n];
    let mut iterations = 0;
    let mut mismatch = f64::INFINITY;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        for i in 0..n {
            current[i] = (loads[i] / v[i]).conj();
        }
        // backward: branch current into each bus = own load + downstream
        branch.copy_from_slice(&current);
        for &bus in model.order.iter().rev() {
            if let Some(p) = model.parent[bus] {
                let j = branch[bus];
                branch[p] += j;
            }
        }
        // forward
        for &bus in model.order.iter().skip(1) {
            let p = model.parent[bus].expect("non-slack bus has a parent");
            v[bus] = v[p] - model.impedance[bus] * branch[bus];
        }
        mismatch = (1..n)
            .map(|i| (v[i] * current[i].conj() - loads[i]).norm() * 3.0 / BASE_POWER_VA)
            .fold(0.0, f64::max);
        if mismatch < MISMATCH_TOLERANCE_PU {
            break;
        }
    }

    // branch[0] accumulated every downstream current
    let slack_current: Complex64 = branch[0];
    let converged = mismatch < MISMATCH_TOLERANCE_PU;
    if !converged {
        tracing::warn!(iterations, mismatch, "power flow did not converge");
    }
    Ok(GridState {
        voltages: v,
        iterations,
        converged,
        max_mismatch_pu: mismatch,
        slack_power_va: slack * slack_current.conj() * 3.0,
    })
}

/// Deviation of a bus magnitude from the nominal voltage, in percent.
pub fn voltage_rise(state: &GridState, bus: usize) -> Result<f64, GridError> {
    let v = state.magnitude(bus).ok_or(GridError::UnknownBus(bus))?;
    Ok(deviation_percent(v))
}

/// `(|V| − 240) / 240 × 100`.
pub fn deviation_percent(magnitude_v: f64) -> f64 {
    (magnitude_v - NOMINAL_VOLTAGE_V) / NOMINAL_VOLTAGE_V * 100.0
}
