use std::path::Path;
use std::sync::Arc;

use gds_core::config::ScenarioConfig;
use gds_core::csc::ScenarioKind;
use gds_core::node::{ControllerNode, Role, Tick};
use gds_core::signal::SignalRegistry;
use gds_core::sim::LabDriver;
use gds_uapi::wire::{Health, SetBody};
use gds_uapi::{HttpCloud, RemoteLab, UapiClient, CLOUD_NAMESPACE};
use gds_harness::cluster::NodeProcess;
use gds_harness::{Cluster, READY_TIMEOUT};

fn exe() -> &'static Path {
    Path::new(env!("CARGO_BIN_EXE_gds"))
}

fn start(cfg: &ScenarioConfig) -> (Cluster, ScenarioConfig, Vec<RemoteLab>) {
    let (cluster, resolved) = Cluster::start(exe(), cfg).unwrap();
    let cloud = UapiClient::new(resolved.deployment.cloud.as_ref().unwrap());
    cloud.wait_ready(CLOUD_NAMESPACE, READY_TIMEOUT).unwrap();
    cloud.init(CLOUD_NAMESPACE, &resolved).unwrap();
    let labs = Role::LABS
        .into_iter()
        .map(|role| {
            let lab = RemoteLab::new(role, &resolved.deployment.endpoints[role.namespace()]);
            lab.client().wait_ready(role.namespace(), READY_TIMEOUT).unwrap();
            lab.init(&resolved).unwrap();
            lab
        })
        .collect();
    (cluster, resolved, labs)
}

#[test]
fn served_rse_lists_its_descriptors() {
    let node = NodeProcess::spawn(exe(), "RSE").unwrap();
    let client = UapiClient::new(&node.addr);
    let names: Vec<String> = client.list("RSE").unwrap().into_iter().map(|d| d.name).collect();
    for expected in ["P_th_CHP", "P_el_RSE", "Q_el_RSE", "V_RSE_ref", "f_RSE_ref", "ON_OFF"] {
        assert!(names.iter().any(|n| n == expected), "{expected} missing from {names:?}");
    }
}

#[test]
fn setpoint_from_client_reaches_emulator_next_tick() {
    let cfg = ScenarioConfig { duration_s: Some(10.0), ..Default::default() };
    let (_cluster, resolved, mut labs) = start(&cfg);
    let sin = labs.iter_mut().find(|l| l.role() == Role::Sin).unwrap();
    let body = SetBody { timestamp_ms: Some(0), ..SetBody::value(12.5) };
    sin.client().set("SIN", "P_el_SIN_ref", &body).unwrap();
    sin.advance(Tick::of(&resolved, 0)).unwrap();
    let settled = sin.settle(Tick::of(&resolved, 0)).unwrap();
    let p = settled.owned.iter().find(|s| s.id.0 == 0).unwrap();
    assert_eq!(p.value, 12.5);
}

#[test]
fn losing_the_cloud_degrades_status_but_labs_keep_running() {
    let cfg = ScenarioConfig { kind: ScenarioKind::Undervoltage, duration_s: Some(30.0), ..Default::default() };
    let (mut cluster, resolved, mut labs) = start(&cfg);
    let cloud_addr = resolved.deployment.cloud.clone().unwrap();
    let mut controller = ControllerNode::new(
        &resolved,
        Arc::new(SignalRegistry::with_default_catalog()),
        Box::new(HttpCloud::new(&cloud_addr)),
    )
    .unwrap();

    let step = |k: u64, labs: &mut Vec<RemoteLab>, controller: &mut ControllerNode| {
        let tick = Tick::of(&resolved, k);
        for lab in labs.iter_mut() {
            lab.advance(tick).unwrap();
        }
        controller.step(tick).unwrap();
        for lab in labs.iter_mut() {
            lab.settle(tick).unwrap();
        }
    };
    for k in 0..20 {
        step(k, &mut labs, &mut controller);
    }
    let sin = UapiClient::new(&resolved.deployment.endpoints["SIN"]);
    assert_eq!(sin.status("SIN").unwrap().status, Health::Ok);

    assert!(cluster.kill(CLOUD_NAMESPACE));
    assert_eq!(UapiClient::new(&cloud_addr).health(CLOUD_NAMESPACE), Health::Offline);
    // Past the 2 s horizon on the simulated clock.
    for k in 20..30 {
        step(k, &mut labs, &mut controller);
    }
    let status = sin.status("SIN").unwrap();
    assert_eq!(status.status, Health::Degraded);
    assert!(status.signals.iter().any(|s| s.stale));
    // Local measurements still advance.
    let soc = sin.get("SIN", "SoC").unwrap();
    assert_eq!(soc.timestamp_ms, Some(Tick::of(&resolved, 29).time_ms));
}
