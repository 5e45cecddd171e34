//! REST façade over a signal registry, and the HTTP bindings that let lab
//! emulators, the cloud node and the controller run as separate processes.

pub mod client;
pub mod service;
pub mod wire;

pub use client::{ClientError, HttpCloud, RemoteLab, UapiClient};
pub use service::{ApiState, Scope, ServerHandle, ServiceError, CLOUD_NAMESPACE};
