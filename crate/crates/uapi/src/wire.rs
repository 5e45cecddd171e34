//! JSON bodies exchanged over the REST interface.
//!
//! Floats are written in their shortest round-trip decimal form, so a value
//! read back over the wire is bit-identical to the stored one.

use gds_core::node::Tick;
use gds_core::signal::{Quality, SignalDescriptor, SignalKind, SignalSample};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorBody {
    pub namespace: String,
    pub name: String,
    pub unit: String,
    pub min: f64,
    pub max: f64,
    pub kind: SignalKind,
}

impl From<&SignalDescriptor> for DescriptorBody {
    fn from(d: &SignalDescriptor) -> Self {
        Self {
            namespace: d.namespace.clone(),
            name: d.name.clone(),
            unit: d.unit.clone(),
            min: d.min,
            max: d.max,
            kind: d.kind,
        }
    }
}

/// A signal reading. `value`, `timestamp_ms` and `quality` are absent when
/// the signal is registered but has never been written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBody {
    pub signal: String,
    pub unit: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_ms: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<Quality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<String>,
    #[serde(default)]
    pub no_data: bool,
}

impl SampleBody {
    pub fn new(descriptor: &SignalDescriptor, sample: Option<&SignalSample>) -> Self {
        Self {
            signal: descriptor.key(),
            unit: descriptor.unit.clone(),
            value: sample.map(|s| s.value),
            timestamp_ms: sample.map(|s| s.timestamp_ms),
            quality: sample.map(|s| s.quality),
            origin: sample.map(|s| s.origin.clone()),
            no_data: sample.is_none(),
        }
    }
}

/// Body of a SET. `value` stays untyped so that a non-numeric payload is
/// reported as unprocessable rather than as a decoding failure. A body that
/// carries `origin` is a replication merge and is resolved last-write-wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetBody {
    pub value: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_ms: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<Quality>,
}

impl SetBody {
    pub fn value(value: f64) -> Self {
        Self {
            value: serde_json::json!(value),
            timestamp_ms: None,
            origin: None,
            quality: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeResult {
    Applied,
    Kept,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetResponse {
    #[serde(flatten)]
    pub sample: SampleBody,
    /// Present for merges only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge: Option<MergeResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Health {
    Ok,
    Degraded,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalHealth {
    pub signal: String,
    pub stale: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_ms: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusBody {
    pub namespace: String,
    pub status: Health,
    pub now_ms: i64,
    pub uptime_s: f64,
    pub signals: Vec<SignalHealth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub detail: String,
}

/// A replicated sample addressed by key rather than registry index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireSample {
    pub signal: String,
    pub value: f64,
    pub timestamp_ms: i64,
    pub origin: String,
    pub quality: Quality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeBatch {
    pub samples: Vec<WireSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeBatchResponse {
    pub results: Vec<MergeResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchBatch {
    pub signals: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchBatchResponse {
    pub samples: Vec<Option<WireSample>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickBody {
    pub tick: Tick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitResponse {
    pub namespace: String,
    pub config_hash: String,
}
