//! Distributed grid-and-heat emulation core: signal registry, cloud
//! replication, LV power flow, thermal plant, device emulators and the
//! supervisory controller.

pub mod config;
pub mod csc;
pub mod devices;
pub mod grid;
pub mod metrics;
pub mod node;
pub mod profile;
pub mod record;
pub mod replication;
pub mod signal;
pub mod sim;
pub mod thermal;
