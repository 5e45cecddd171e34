//! Independent oracles shared by the property tests and the acceptance
//! target. Nothing here calls the code it checks.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use gds_core::grid::{load_topology, BranchConfig, GridModel, Injection, TopologyConfig};
use gds_core::replication::{pull_cycle, push_cycle, CloudStore, Direction, LinkConfig, NodeStore, ReplicationLink};
use gds_core::signal::{SignalDescriptor, SignalId, SignalKind, SignalRegistry};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

pub const V_BASE: f64 = 240.0;
/// Per-phase power base.
pub const S_BASE: f64 = 100e3 / 3.0;

/// Newton–Raphson in rectangular coordinates on the bus admittance matrix.
/// Returns per-phase voltages in volts.
pub fn newton_raphson(model: &GridModel, injections: &[Injection]) -> Result<Vec<Complex64>, String> {
    let n = model.bus_names.len();
    let z_base = V_BASE * V_BASE / S_BASE;
    let mut y = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    for bus in 0..n {
        if let Some(p) = model.parent[bus] {
            let yb = Complex64::new(1.0, 0.0) / (model.impedance[bus] / z_base);
            y[bus][bus] += yb;
            y[p][p] += yb;
            y[bus][p] -= yb;
            y[p][bus] -= yb;
        }
    }
    // Specified injection = −load, per phase, per unit.
    let mut s_spec = vec![Complex64::new(0.0, 0.0); n];
    for inj in injections {
        s_spec[inj.bus] -= Complex64::new(inj.p_kw, inj.q_kvar) * 1000.0 / 3.0 / S_BASE;
    }
    let v0 = model.nominal_voltage_v / V_BASE;
    let mut e = vec![v0; n];
    let mut f = vec![0.0; n];
    let m = n - 1;
    for _ in 0..50 {
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                let (g, bb) = (y[i][j].re, y[i][j].im);
                a[i] += g * e[j] - bb * f[j];
                b[i] += g * f[j] + bb * e[j];
            }
        }
        let mut residual = DVector::zeros(2 * m);
        for i in 1..n {
            let p = e[i] * a[i] + f[i] * b[i];
            let q = f[i] * a[i] - e[i] * b[i];
            residual[i - 1] = s_spec[i].re - p;
            residual[m + i - 1] = s_spec[i].im - q;
        }
        if residual.amax() < 1e-12 {
            return Ok((0..n).map(|i| Complex64::new(e[i], f[i]) * V_BASE).collect());
        }
        let mut jac = DMatrix::zeros(2 * m, 2 * m);
        for i in 1..n {
            for j in 1..n {
                let (g, bb) = (y[i][j].re, y[i][j].im);
                let same = i == j;
                let d = |on: f64| if same { on } else { 0.0 };
                jac[(i - 1, j - 1)] = e[i] * g + f[i] * bb + d(a[i]);
                jac[(i - 1, m + j - 1)] = -e[i] * bb + f[i] * g + d(b[i]);
                jac[(m + i - 1, j - 1)] = f[i] * g - e[i] * bb - d(b[i]);
                jac[(m + i - 1, m + j - 1)] = -f[i] * bb - e[i] * g + d(a[i]);
            }
        }
        let step = jac.lu().solve(&residual).ok_or("singular Jacobian")?;
        for i in 1..n {
            e[i] += step[i - 1];
            f[i] += step[m + i - 1];
        }
    }
    Err("Newton–Raphson did not converge".into())
}

/// A random radial feeder of `2..=max_buses` buses with realistic LV cable
/// impedances, and random loads or generation at every non-slack bus.
pub fn random_network(rng: &mut impl Rng, max_buses: usize) -> (GridModel, Vec<Injection>) {
    let n = rng.random_range(2..=max_buses);
    let names: Vec<String> = (0..n).map(|i| format!("B{i}")).collect();
    let branches = (1..n)
        .map(|i| BranchConfig {
            from: names[rng.random_range(0..i)].clone(),
            to: names[i].clone(),
            r_ohm: rng.random_range(0.005..0.15),
            x_ohm: rng.random_range(0.001..0.08),
        })
        .collect();
    let cfg = TopologyConfig {
        nominal_voltage_v: 240.0,
        nominal_frequency_hz: 50.0,
        slack: names[0].clone(),
        buses: names.clone(),
        branches,
        loads: vec![],
        pvs: vec![],
        devices: vec![],
        pcc: BTreeMap::new(),
    };
    let model = load_topology(&cfg).expect("random radial topology is valid");
    let injections = (1..n)
        .map(|bus| Injection::new(bus, rng.random_range(-40.0..60.0), rng.random_range(-15.0..20.0)))
        .collect();
    (model, injections)
}

/// Controller mode after each sample of a deviation trace, for a band that
/// activates past `activate` and releases past `deactivate` (strictly).
pub fn hysteresis_oracle(activate: f64, deactivate: f64, trace: &[f64]) -> Vec<bool> {
    let over = activate > deactivate;
    let mut active = false;
    trace
        .iter()
        .map(|&d| {
            let (beyond_on, beyond_off) = if over { (d > activate, d < deactivate) } else { (d < activate, d > deactivate) };
            if !active && beyond_on {
                active = true;
            } else if active && beyond_off {
                active = false;
            }
            active
        })
        .collect()
}

pub struct Convergence {
    /// Cycles after the last write until every store matched the expected
    /// state, if that happened within the budget.
    pub cycles_after_quiescence: Option<u64>,
    /// Stored samples whose (value, timestamp, origin) no node ever wrote.
    pub fabricated: usize,
    pub writes: usize,
}

fn key_registry(keys: usize) -> SignalRegistry {
    let reg = SignalRegistry::new();
    for k in 0..keys {
        reg.register_signal(SignalDescriptor::new("K", format!("k{k}"), "-", -1e12, 1e12, SignalKind::Measurement))
            .unwrap();
    }
    reg
}

/// Nodes write unique nonces to random keys for `write_cycles` cycles, then
/// stop. Every cycle each node pushes and pulls over its lossy links. The
/// expected final state is the last-write-wins winner over all accepted writes.
pub fn replication_convergence(seed: u64, nodes: usize, keys: usize, drop: f64, write_cycles: u64, budget: u64) -> Convergence {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cloud_reg = Arc::new(key_registry(keys));
    let mut cloud = CloudStore::new(cloud_reg.clone());
    let ids: Vec<SignalId> = (0..keys as u32).map(SignalId).collect();
    let mut members: Vec<(NodeStore, ReplicationLink, ReplicationLink)> = (0..nodes)
        .map(|i| {
            let mut store = NodeStore::new(format!("N{i}"), Arc::new(key_registry(keys)));
            for &id in &ids {
                store.subscribe(id).unwrap();
            }
            let link = |dir, salt: u64| {
                let cfg = LinkConfig { drop_probability: drop, seed: seed ^ (i as u64 * 0x9e37 + salt), ..LinkConfig::default() };
                ReplicationLink::new(cfg, dir).unwrap()
            };
            (store, link(Direction::LocalToCloud, 1), link(Direction::CloudToLocal, 2))
        })
        .collect();

    // Every accepted write, keyed by value bits (values are unique nonces).
    let mut written: HashMap<u64, (SignalId, i64, String)> = HashMap::new();
    let mut nonce = 0u64;
    let mut cycle = 0u64;
    let all_match = |members: &Vec<(NodeStore, ReplicationLink, ReplicationLink)>, written: &HashMap<u64, (SignalId, i64, String)>| {
        let mut best: HashMap<SignalId, (i64, String, u64)> = HashMap::new();
        for (bits, (id, ts, origin)) in written {
            let cand = (*ts, origin.clone(), *bits);
            let e = best.entry(*id).or_insert_with(|| cand.clone());
            if cand.0 > e.0 || (cand.0 == e.0 && cand.1 < e.1) {
                *e = cand;
            }
        }
        let stores = std::iter::once(&cloud_reg).chain(members.iter().map(|m| &m.0.registry));
        for reg in stores {
            for &id in &ids {
                let got = reg.read(id).unwrap().map(|s| (s.timestamp_ms, s.origin, s.value.to_bits()));
                if got != best.get(&id).cloned() {
                    return false;
                }
            }
        }
        true
    };

    let run_cycle = |members: &mut Vec<(NodeStore, ReplicationLink, ReplicationLink)>, cloud: &mut CloudStore| {
        for (store, push, _) in members.iter_mut() {
            push_cycle(store, push, cloud);
        }
        for (store, _, pull) in members.iter_mut() {
            let subs = store.subscriptions.clone();
            pull_cycle(cloud, pull, store, &subs).unwrap();
        }
    };

    while cycle < write_cycles {
        for (i, (store, _, _)) in members.iter().enumerate() {
            for _ in 0..rng.random_range(1..=keys / 4 + 1) {
                let id = ids[rng.random_range(0..keys)];
                nonce += 1;
                let value = (nonce * 1000 + i as u64) as f64;
                // Shared timestamps across nodes exercise the origin tie-break.
                let ts = (cycle * 10 + rng.random_range(0..3)) as i64;
                if store.write(id, value, ts).is_ok() {
                    written.insert(value.to_bits(), (id, ts, store.node_id.clone()));
                }
            }
        }
        run_cycle(&mut members, &mut cloud);
        cycle += 1;
    }
    // Same-origin writes at one timestamp: only the last survives locally,
    // so earlier ones are not candidates.
    let mut last: HashMap<(SignalId, i64, String), u64> = HashMap::new();
    let mut order: Vec<(&u64, &(SignalId, i64, String))> = written.iter().collect();
    order.sort_by_key(|(bits, _)| f64::from_bits(**bits) as u64);
    for (bits, key) in order {
        last.insert(key.clone(), *bits);
    }
    written.retain(|bits, key| last.get(key) == Some(bits));

    let mut converged_after = None;
    for extra in 0..=budget {
        if all_match(&members, &written) {
            converged_after = Some(extra);
            break;
        }
        run_cycle(&mut members, &mut cloud);
    }

    let known: HashMap<u64, (SignalId, i64, String)> = written.clone();
    let mut fabricated = 0;
    let stores = std::iter::once(&cloud_reg).chain(members.iter().map(|m| &m.0.registry));
    for reg in stores {
        for s in reg.snapshot().into_iter().flatten() {
            if known.get(&s.value.to_bits()) != Some(&(s.id, s.timestamp_ms, s.origin.clone())) {
                fabricated += 1;
            }
        }
    }
    Convergence { cycles_after_quiescence: converged_after, fabricated, writes: written.len() }
}
