//! Namespaced signal catalog and latest-value registry.
//!
//! Every value exchanged between emulators, the controller and the
//! replication layer goes through a [`SignalRegistry`]. Writes are clamped
//! to the descriptor range and flagged, non-finite values are rejected, and
//! per-signal timestamps never move backwards.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const DEFAULT_CATALOG: &str = include_str!("../data/catalog.csv");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("signal {namespace}/{name} is already registered")]
    DuplicateSignal { namespace: String, name: String },
    #[error("invalid range for {namespace}/{name}: min {min} must be below max {max}")]
    InvalidRange {
        namespace: String,
        name: String,
        min: f64,
        max: f64,
    },
    #[error("unknown signal {0}")]
    UnknownSignal(String),
    #[error("non-finite value {value} for {signal}")]
    NonFinite { signal: String, value: f64 },
    #[error("write to {signal} at t={offered_ms} ms is older than stored t={stored_ms} ms")]
    Superseded {
        signal: String,
        stored_ms: i64,
        offered_ms: i64,
    },
    #[error("catalog: {0}")]
    Catalog(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalKind {
    Measurement,
    Setpoint,
    Status,
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignalKind::Measurement => "measurement",
            SignalKind::Setpoint => "setpoint",
            SignalKind::Status => "status",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Ok,
    Clamped,
    Stale,
}

impl Quality {
    pub fn as_str(self) -> &'static str {
        match self {
            Quality::Ok => "ok",
            Quality::Clamped => "clamped",
            Quality::Stale => "stale",
        }
    }
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Quality {
    type Err = SignalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ok" => Ok(Quality::Ok),
            "clamped" => Ok(Quality::Clamped),
            "stale" => Ok(Quality::Stale),
            other => Err(SignalError::Catalog(format!("unknown quality '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalDescriptor {
    pub namespace: String,
    pub name: String,
    pub unit: String,
    pub min: f64,
    pub max: f64,
    pub kind: SignalKind,
}

impl SignalDescriptor {
    pub fn new(
        namespace: impl Into<String>,
        name: impl Into<String>,
        unit: impl Into<String>,
        min: f64,
        max: f64,
        kind: SignalKind,
    ) -> Self {
        Self {
            namespace: namespace.into(),
            name: name.into(),
            unit: unit.into(),
            min,
            max,
            kind,
        }
    }

    /// `namespace/name`, the form used in logs, CSV headers and routes.
    pub fn key(&self) -> String {
        format!("{}/{}", self.namespace, self.name)
    }

    pub fn clamp(&self, raw: f64) -> (f64, bool) {
        if raw < self.min {
            (self.min, true)
        } else if raw > self.max {
            (self.max, true)
        } else {
            (raw, false)
        }
    }
}

/// Index of a descriptor in its registry. Stable for the registry's lifetime,
/// and identical across registries built from the same catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SignalId(pub u32);

impl SignalId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSample {
    pub id: SignalId,
    pub value: f64,
    pub timestamp_ms: i64,
    pub origin: String,
    pub quality: Quality,
}

impl SignalSample {
    /// Last-write-wins order: newer timestamp wins, equal timestamps go to the
    /// lexicographically smaller origin.
    pub fn supersedes(&self, other: &SignalSample) -> bool {
        self.timestamp_ms > other.timestamp_ms
            || (self.timestamp_ms == other.timestamp_ms && self.origin < other.origin)
    }
}

/// Outcome of a last-write-wins merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeOutcome {
    Applied,
    /// The stored sample wins; nothing changed.
    Kept,
}

/// Parse a catalog in the line-oriented CSV format
/// `namespace,name,unit,min,max,kind`.
pub fn parse_catalog(text: &str) -> Result<Vec<SignalDescriptor>, SignalError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    reader
        .deserialize::<SignalDescriptor>()
        .map(|row| row.map_err(|e| SignalError::Catalog(e.to_string())))
        .collect()
}

pub fn load_catalog(path: &Path) -> Result<Vec<SignalDescriptor>, SignalError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SignalError::Catalog(format!("{}: {e}", path.display())))?;
    parse_catalog(&text)
}

/// The shipped catalog: the fourteen exchanged signals plus the EHP enable,
/// the CRES temperature and the controller's auxiliary command channels.
pub fn default_catalog() -> Vec<SignalDescriptor> {
    parse_catalog(DEFAULT_CATALOG).expect("shipped catalog parses")
}

#[derive(Default)]
struct Catalog {
    descriptors: Vec<SignalDescriptor>,
    index: HashMap<(String, String), SignalId>,
}

/// Latest-sample store over a catalog of descriptors.
///
/// Readers and writers may share it across threads. Each signal has its own
/// lock, so a write to one signal is applied atomically and never blocks
/// writers of other signals.
#[derive(Default)]
pub struct SignalRegistry {
    catalog: RwLock<Catalog>,
    latest: RwLock<Vec<Mutex<Option<SignalSample>>>>,
}

impl fmt::Debug for SignalRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SignalRegistry")
            .field("signals", &self.len())
            .finish()
    }
}

impl SignalRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_catalog(descriptors: &[SignalDescriptor]) -> Result<Self, SignalError> {
        let registry = Self::new();
        for d in descriptors {
            registry.register_signal(d.clone())?;
        }
        Ok(registry)
    }

    pub fn with_default_catalog() -> Self {
        Self::with_catalog(&default_catalog()).expect("shipped catalog is valid")
    }

    pub fn register_signal(&self, descriptor: SignalDescriptor) -> Result<SignalId, SignalError> {
        // NaN bounds fail this test too.
        if !(descriptor.min < descriptor.max) {
            return Err(SignalError::InvalidRange {
                namespace: descriptor.namespace,
                name: descriptor.name,
                min: descriptor.min,
                max: descriptor.max,
            });
        }
        let mut catalog = self.catalog.write();
        let key = (descriptor.namespace.clone(), descriptor.name.clone());
        if catalog.index.contains_key(&key) {
            return Err(SignalError::DuplicateSignal {
                namespace: key.0,
                name: key.1,
            });
        }
        let id = SignalId(catalog.descriptors.len() as u32);
        catalog.descriptors.push(descriptor);
        catalog.index.insert(key, id);
        self.latest.write().push(Mutex::new(None));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.catalog.read().descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookup(&self, namespace: &str, name: &str) -> Option<SignalId> {
        self.catalog
            .read()
            .index
            .get(&(namespace.to_string(), name.to_string()))
            .copied()
    }

    /// Like [`lookup`](Self::lookup) for a `namespace/name` key.
    pub fn lookup_key(&self, key: &str) -> Option<SignalId> {
        let (ns, name) = key.split_once('/')?;
        self.lookup(ns, name)
    }

    pub fn require(&self, namespace: &str, name: &str) -> Result<SignalId, SignalError> {
        self.lookup(namespace, name)
            .ok_or_else(|| SignalError::UnknownSignal(format!("{namespace}/{name}")))
    }

    pub fn descriptor(&self, id: SignalId) -> Result<SignalDescriptor, SignalError> {
        self.catalog
            .read()
            .descriptors
            .get(id.index())
            .cloned()
            .ok_or_else(|| SignalError::UnknownSignal(format!("#{}", id.0)))
    }

    pub fn descriptors(&self) -> Vec<SignalDescriptor> {
        self.catalog.read().descriptors.clone()
    }

    pub fn ids(&self) -> impl Iterator<Item = SignalId> {
        (0..self.len() as u32).map(SignalId)
    }

    pub fn namespace_signals(&self, namespace: &str) -> Vec<(SignalId, SignalDescriptor)> {
        self.catalog
            .read()
            .descriptors
            .iter()
            .enumerate()
            .filter(|(_, d)| d.namespace == namespace)
            .map(|(i, d)| (SignalId(i as u32), d.clone()))
            .collect()
    }

    pub fn namespaces(&self) -> BTreeSet<String> {
        self.catalog
            .read()
            .descriptors
            .iter()
            .map(|d| d.namespace.clone())
            .collect()
    }

    fn with_slot<R>(
        &self,
        id: SignalId,
        f: impl FnOnce(&mut Option<SignalSample>) -> R,
    ) -> Result<R, SignalError> {
        let latest = self.latest.read();
        let slot = latest
            .get(id.index())
            .ok_or_else(|| SignalError::UnknownSignal(format!("#{}", id.0)))?;
        let mut guard = slot.lock();
        Ok(f(&mut guard))
    }

    /// Admit a raw value: clamp to range, flag clamping, reject non-finite
    /// values and writes older than the stored sample.
    pub fn write(
        &self,
        id: SignalId,
        raw_value: f64,
        timestamp_ms: i64,
        origin: &str,
    ) -> Result<SignalSample, SignalError> {
        let descriptor = self.descriptor(id)?;
        if !raw_value.is_finite() {
            return Err(SignalError::NonFinite {
                signal: descriptor.key(),
                value: raw_value,
            });
        }
        let (value, clamped) = descriptor.clamp(raw_value);
        let sample = SignalSample {
            id,
            value,
            timestamp_ms,
            origin: origin.to_string(),
            quality: if clamped { Quality::Clamped } else { Quality::Ok },
        };
        self.with_slot(id, |slot| {
            if let Some(stored) = slot.as_ref() {
                if stored.timestamp_ms > timestamp_ms {
                    return Err(SignalError::Superseded {
                        signal: descriptor.key(),
                        stored_ms: stored.timestamp_ms,
                        offered_ms: timestamp_ms,
                    });
                }
            }
            *slot = Some(sample.clone());
            Ok(sample)
        })?
    }

    /// Last-write-wins merge of a sample produced elsewhere. The sample keeps
    /// its origin, timestamp and quality; its value is re-clamped so a foreign
    /// catalog can never push a value out of range.
    pub fn merge(&self, sample: &SignalSample) -> Result<MergeOutcome, SignalError> {
        let descriptor = self.descriptor(sample.id)?;
        if !sample.value.is_finite() {
            return Err(SignalError::NonFinite {
                signal: descriptor.key(),
                value: sample.value,
            });
        }
        let (value, clamped) = descriptor.clamp(sample.value);
        let incoming = SignalSample {
            value,
            quality: if clamped { Quality::Clamped } else { sample.quality },
            ..sample.clone()
        };
        self.with_slot(sample.id, |slot| {
            let apply = match slot.as_ref() {
                None => true,
                // Same writer at the same instant: the later delivery carries
                // the writer's final value for that instant.
                Some(stored) => {
                    incoming.supersedes(stored)
                        || (stored.timestamp_ms == incoming.timestamp_ms
                            && stored.origin == incoming.origin
                            && stored != &incoming)
                }
            };
            if apply {
                *slot = Some(incoming);
                MergeOutcome::Applied
            } else {
                MergeOutcome::Kept
            }
        })
    }

    pub fn read(&self, id: SignalId) -> Result<Option<SignalSample>, SignalError> {
        self.with_slot(id, |slot| slot.clone())
    }

    pub fn is_stale(&self, id: SignalId, now_ms: i64, horizon_ms: i64) -> Result<bool, SignalError> {
        self.with_slot(id, |slot| match slot {
            None => true,
            Some(s) => now_ms - s.timestamp_ms > horizon_ms,
        })
    }

    /// Forget every stored sample; the catalog is kept.
    pub fn clear(&self) {
        for slot in self.latest.read().iter() {
            *slot.lock() = None;
        }
    }

    pub fn snapshot(&self) -> Vec<Option<SignalSample>> {
        self.latest.read().iter().map(|s| s.lock().clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> SignalRegistry {
        SignalRegistry::with_default_catalog()
    }

    #[test]
    fn register_table_signal() {
        let reg = SignalRegistry::new();
        let id = reg
            .register_signal(SignalDescriptor::new(
                "SIN",
                "P_el_SIN",
                "kW",
                -40.0,
                40.0,
                SignalKind::Measurement,
            ))
            .unwrap();
        assert_eq!(reg.lookup("SIN", "P_el_SIN"), Some(id));
    }

    #[test]
    fn duplicate_and_degenerate_registrations_fail() {
        let reg = SignalRegistry::new();
        let d = SignalDescriptor::new("SIN", "SoC", "%", 0.0, 100.0, SignalKind::Measurement);
        reg.register_signal(d.clone()).unwrap();
        assert!(matches!(
            reg.register_signal(d),
            Err(SignalError::DuplicateSignal { .. })
        ));
        let flat = SignalDescriptor::new("SIN", "X", "-", 0.0, 0.0, SignalKind::Status);
        assert!(matches!(
            reg.register_signal(flat),
            Err(SignalError::InvalidRange { .. })
        ));
    }

    #[test]
    fn write_clamps_and_flags() {
        let reg = registry();
        let p = reg.require("SIN", "P_el_SIN").unwrap();
        let s = reg.write(p, 50.0, 0, "SIN").unwrap();
        assert_eq!((s.value, s.quality), (40.0, Quality::Clamped));

        let soc = reg.require("SIN", "SoC").unwrap();
        let s = reg.write(soc, 50.0, 0, "SIN").unwrap();
        assert_eq!((s.value, s.quality), (50.0, Quality::Ok));

        let f = reg.require("SIN", "f_SIN_ref").unwrap();
        let s = reg.write(f, 47.0, 0, "TUD").unwrap();
        assert_eq!((s.value, s.quality), (48.0, Quality::Clamped));
    }

    #[test]
    fn non_finite_and_unknown_rejected() {
        let reg = registry();
        let soc = reg.require("SIN", "SoC").unwrap();
        assert!(matches!(
            reg.write(soc, f64::NAN, 0, "SIN"),
            Err(SignalError::NonFinite { .. })
        ));
        assert!(matches!(
            reg.write(soc, f64::INFINITY, 0, "SIN"),
            Err(SignalError::NonFinite { .. })
        ));
        assert!(matches!(
            reg.write(SignalId(999), 1.0, 0, "SIN"),
            Err(SignalError::UnknownSignal(_))
        ));
        assert!(reg.read(soc).unwrap().is_none());
    }

    #[test]
    fn read_your_write_and_timestamp_rule() {
        let reg = registry();
        let soc = reg.require("SIN", "SoC").unwrap();
        assert_eq!(reg.read(soc).unwrap(), None);
        reg.write(soc, 10.0, 5, "SIN").unwrap();
        let s = reg.read(soc).unwrap().unwrap();
        assert_eq!((s.value, s.timestamp_ms), (10.0, 5));
        let err = reg.write(soc, 20.0, 3, "SIN").unwrap_err();
        assert!(matches!(err, SignalError::Superseded { stored_ms: 5, offered_ms: 3, .. }));
        assert_eq!(reg.read(soc).unwrap().unwrap().value, 10.0);
    }

    #[test]
    fn staleness() {
        let reg = registry();
        let soc = reg.require("SIN", "SoC").unwrap();
        assert!(reg.is_stale(soc, 10_000, 2_000).unwrap());
        reg.write(soc, 1.0, 5_000, "SIN").unwrap();
        assert!(reg.is_stale(soc, 10_000, 2_000).unwrap());
        assert!(!reg.is_stale(soc, 5_000, 2_000).unwrap());
    }

    #[test]
    fn merge_is_last_write_wins_with_origin_tiebreak() {
        let reg = registry();
        let soc = reg.require("SIN", "SoC").unwrap();
        let sample = |v: f64, t: i64, o: &str| SignalSample {
            id: soc,
            value: v,
            timestamp_ms: t,
            origin: o.into(),
            quality: Quality::Ok,
        };
        assert_eq!(reg.merge(&sample(1.0, 7, "B")).unwrap(), MergeOutcome::Applied);
        assert_eq!(reg.merge(&sample(2.0, 5, "A")).unwrap(), MergeOutcome::Kept);
        assert_eq!(reg.merge(&sample(3.0, 7, "A")).unwrap(), MergeOutcome::Applied);
        assert_eq!(reg.merge(&sample(4.0, 7, "B")).unwrap(), MergeOutcome::Kept);
        assert_eq!(reg.read(soc).unwrap().unwrap().value, 3.0);
    }

    #[test]
    fn shipped_catalog_shape() {
        let catalog = default_catalog();
        let table_one = [
            "P_el_SIN", "Q_el_SIN", "P_th_CHP", "P_el_SIN_ref", "Pbar_DTU", "SoC", "V_SIN_ref",
            "f_SIN_ref", "P_el_RSE", "Q_el_RSE", "V_RSE_ref", "f_RSE_ref", "P_th_CRES", "T_DTU",
        ];
        for name in table_one.iter().chain(["ON_OFF", "T_CRES"].iter()) {
            assert_eq!(catalog.iter().filter(|d| d.name == *name).count(), 1, "{name}");
        }
        let reg = SignalRegistry::with_catalog(&catalog).unwrap();
        let rse = reg.namespace_signals("RSE");
        let p = rse.iter().find(|(_, d)| d.name == "P_el_RSE").unwrap();
        assert_eq!((p.1.min, p.1.max, p.1.unit.as_str()), (-100.0, 100.0, "kW"));
        let q = rse.iter().find(|(_, d)| d.name == "Q_el_RSE").unwrap();
        assert_eq!((q.1.min, q.1.max, q.1.unit.as_str()), (-50.0, 50.0, "kVAr"));
    }
}
