//! Periodic local⇄cloud replication of signal registries.
//!
//! Each research infrastructure keeps a local [`NodeStore`]. Once per
//! exchange period it pushes locally written samples to the shared cloud
//! registry and pulls the keys it subscribes to. Links drop samples with an
//! independent per-key probability and hold delivered samples back by a
//! whole number of cycles to model latency. Conflicts resolve by
//! last-write-wins with the smaller origin id breaking timestamp ties.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{MergeOutcome, SignalError, SignalId, SignalRegistry, SignalSample};

#[derive(Debug, Error)]
pub enum ReplicationError {
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("transport: {0}")]
    Transport(String),
    #[error("invalid link configuration: {0}")]
    InvalidLink(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkConfig {
    pub period_ms: u64,
    pub latency_ms: u64,
    pub jitter_ms: u64,
    pub drop_probability: f64,
    pub seed: u64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            period_ms: 500,
            latency_ms: 0,
            jitter_ms: 0,
            drop_probability: 0.0,
            seed: 0,
        }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<(), ReplicationError> {
        if self.period_ms == 0 {
            return Err(ReplicationError::InvalidLink("period must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.drop_probability) {
            return Err(ReplicationError::InvalidLink(format!(
                "drop probability {} outside [0, 1)",
                self.drop_probability
            )));
        }
        Ok(())
    }

    /// Whole cycles a sample waits in the link for a given extra delay.
    pub fn delay_cycles(&self, delay_ms: u64) -> u64 {
        delay_ms.div_ceil(self.period_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    LocalToCloud,
    CloudToLocal,
}

#[derive(Debug, Clone)]
struct InFlight {
    due_cycle: u64,
    sample: SignalSample,
}

/// One direction of a node⇄cloud connection, with its own drop RNG and
/// in-flight queue.
#[derive(Debug, Clone)]
pub struct ReplicationLink {
    config: LinkConfig,
    direction: Direction,
    drop_probability: f64,
    rng: ChaCha8Rng,
    in_flight: BTreeMap<SignalId, VecDeque<InFlight>>,
    cycle: u64,
}

impl ReplicationLink {
    pub fn new(config: LinkConfig, direction: Direction) -> Result<Self, ReplicationError> {
        config.validate()?;
        Ok(Self {
            config,
            direction,
            drop_probability: config.drop_probability,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            in_flight: BTreeMap::new(),
            cycle: 0,
        })
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn config(&self) -> &LinkConfig {
        &self.config
    }

    /// Index of the next cycle this link will run.
    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    /// Fault injection: override the loss rate for subsequent cycles. Unlike a
    /// configured link this accepts a total outage (`1.0`).
    pub fn set_drop_probability(&mut self, p: f64) {
        self.drop_probability = p.clamp(0.0, 1.0);
    }

    pub fn in_flight_len(&self) -> usize {
        self.in_flight.values().map(VecDeque::len).sum()
    }

    fn newest_in_flight(&self, id: SignalId) -> Option<&SignalSample> {
        self.in_flight
            .get(&id)
            .and_then(|q| q.back())
            .map(|f| &f.sample)
    }

    /// Bernoulli loss then latency. Returns false when the sample is lost.
    fn offer(&mut self, sample: SignalSample) -> bool {
        let lost = self.rng.random::<f64>() < self.drop_probability;
        if lost {
            return false;
        }
        let jitter = if self.config.jitter_ms > 0 {
            self.rng.random_range(0..=self.config.jitter_ms)
        } else {
            0
        };
        let due_cycle = self.cycle + self.config.delay_cycles(self.config.latency_ms + jitter);
        self.in_flight
            .entry(sample.id)
            .or_default()
            .push_back(InFlight { due_cycle, sample });
        true
    }

    fn take_due(&mut self) -> Vec<SignalSample> {
        let now = self.cycle;
        let mut due = Vec::new();
        for queue in self.in_flight.values_mut() {
            while queue.front().is_some_and(|f| f.due_cycle <= now) {
                due.push(queue.pop_front().expect("front checked").sample);
            }
        }
        self.in_flight.retain(|_, q| !q.is_empty());
        due
    }
}

/// A node's local registry plus its replication bookkeeping.
#[derive(Debug, Clone)]
pub struct NodeStore {
    pub node_id: String,
    pub registry: Arc<SignalRegistry>,
    push_cursor: HashMap<SignalId, i64>,
    pub subscriptions: BTreeSet<SignalId>,
}

impl NodeStore {
    pub fn new(node_id: impl Into<String>, registry: Arc<SignalRegistry>) -> Self {
        Self {
            node_id: node_id.into(),
            registry,
            push_cursor: HashMap::new(),
            subscriptions: BTreeSet::new(),
        }
    }

    pub fn subscribe(&mut self, id: SignalId) -> Result<(), ReplicationError> {
        self.registry.descriptor(id)?;
        self.subscriptions.insert(id);
        Ok(())
    }

    pub fn push_cursor(&self, id: SignalId) -> Option<i64> {
        self.push_cursor.get(&id).copied()
    }

    /// Write a value as this node.
    pub fn write(&self, id: SignalId, value: f64, timestamp_ms: i64) -> Result<SignalSample, SignalError> {
        self.registry.write(id, value, timestamp_ms, &self.node_id)
    }

    /// Latest locally visible value, or `None` when never seen.
    pub fn value(&self, id: SignalId) -> Option<f64> {
        self.registry.read(id).ok().flatten().map(|s| s.value)
    }

    pub fn reset(&mut self) {
        self.registry.clear();
        self.push_cursor.clear();
    }
}

/// The remote end of a replication link. Implemented in memory by
/// [`CloudStore`] and over the wire by the REST client.
pub trait CloudEndpoint {
    fn merge(&mut self, sample: &SignalSample) -> Result<MergeOutcome, ReplicationError>;
    fn fetch(&mut self, ids: &[SignalId]) -> Result<Vec<Option<SignalSample>>, ReplicationError>;

    /// Merge several samples; one result per sample, in order.
    fn merge_batch(&mut self, samples: &[SignalSample]) -> Vec<Result<MergeOutcome, ReplicationError>> {
        samples.iter().map(|s| self.merge(s)).collect()
    }
}

/// The shared registry holding the union of every namespace.
#[derive(Debug, Clone)]
pub struct CloudStore {
    pub registry: Arc<SignalRegistry>,
}

impl CloudStore {
    pub fn new(registry: Arc<SignalRegistry>) -> Self {
        Self { registry }
    }
}

impl CloudEndpoint for CloudStore {
    fn merge(&mut self, sample: &SignalSample) -> Result<MergeOutcome, ReplicationError> {
        Ok(self.registry.merge(sample)?)
    }

    fn fetch(&mut self, ids: &[SignalId]) -> Result<Vec<Option<SignalSample>>, ReplicationError> {
        ids.iter()
            .map(|&id| self.registry.read(id).map_err(Into::into))
            .collect()
    }
}

/// What one push or pull cycle moved.
#[derive(Debug, Clone, Default)]
pub struct CycleReport {
    pub cycle: u64,
    /// Samples that reached the far end this cycle, whether or not they won
    /// the merge there.
    pub delivered: Vec<SignalSample>,
    /// Delivered samples that changed the far end.
    pub applied: Vec<SignalSample>,
    pub dropped: usize,
    pub transport_errors: usize,
}

impl CycleReport {
    pub fn transferred(&self) -> usize {
        self.delivered.len()
    }
}

/// Offer every locally written key newer than its push cursor to the link,
/// then deliver whatever the link has due this cycle into the cloud.
/// Transport failures count as losses; the key is offered again next cycle.
pub fn push_cycle(
    local: &mut NodeStore,
    link: &mut ReplicationLink,
    cloud: &mut dyn CloudEndpoint,
) -> CycleReport {
    debug_assert_eq!(link.direction, Direction::LocalToCloud);
    let mut report = CycleReport {
        cycle: link.cycle,
        ..Default::default()
    };
    for (index, sample) in local.registry.snapshot().into_iter().enumerate() {
        let Some(sample) = sample else { continue };
        if sample.origin != local.node_id {
            continue;
        }
        let id = SignalId(index as u32);
        if local.push_cursor.get(&id).is_some_and(|&c| sample.timestamp_ms <= c) {
            continue;
        }
        if link
            .newest_in_flight(id)
            .is_some_and(|f| f.timestamp_ms >= sample.timestamp_ms)
        {
            continue;
        }
        if !link.offer(sample) {
            report.dropped += 1;
        }
    }
    let due = link.take_due();
    let results = if due.is_empty() { Vec::new() } else { cloud.merge_batch(&due) };
    for (sample, result) in due.into_iter().zip(results) {
        match result {
            Ok(outcome) => {
                let cursor = local.push_cursor.entry(sample.id).or_insert(i64::MIN);
                *cursor = (*cursor).max(sample.timestamp_ms);
                if outcome == MergeOutcome::Applied {
                    report.applied.push(sample.clone());
                }
                report.delivered.push(sample);
            }
            Err(ReplicationError::Signal(err)) => {
                tracing::warn!(node = %local.node_id, %err, "cloud rejected sample");
                report.transport_errors += 1;
            }
            Err(err) => {
                tracing::debug!(node = %local.node_id, %err, "push failed");
                report.transport_errors += 1;
            }
        }
    }
    link.cycle += 1;
    report
}

/// Fetch the subscribed keys from the cloud and merge the ones newer than the
/// local copy, subject to the link's loss and latency.
pub fn pull_cycle(
    cloud: &mut dyn CloudEndpoint,
    link: &mut ReplicationLink,
    local: &mut NodeStore,
    subscriptions: &BTreeSet<SignalId>,
) -> Result<CycleReport, ReplicationError> {
    debug_assert_eq!(link.direction, Direction::CloudToLocal);
    for &id in subscriptions {
        local.registry.descriptor(id)?;
    }
    let mut report = CycleReport {
        cycle: link.cycle,
        ..Default::default()
    };
    let ids: Vec<SignalId> = subscriptions.iter().copied().collect();
    let fetched = if ids.is_empty() {
        Vec::new()
    } else {
        match cloud.fetch(&ids) {
            Ok(samples) => samples,
            Err(ReplicationError::Signal(err)) => return Err(err.into()),
            Err(err) => {
                tracing::debug!(node = %local.node_id, %err, "pull failed");
                report.transport_errors += 1;
                Vec::new()
            }
        }
    };
    for sample in fetched.into_iter().flatten() {
        let newer_than_local = match local.registry.read(sample.id)? {
            None => true,
            Some(held) => sample.supersedes(&held),
        };
        let newer_than_queued = link
            .newest_in_flight(sample.id)
            .is_none_or(|queued| sample.supersedes(queued));
        if newer_than_local && newer_than_queued && !link.offer(sample) {
            report.dropped += 1;
        }
    }
    for sample in link.take_due() {
        if local.registry.merge(&sample)? == MergeOutcome::Applied {
            report.applied.push(sample.clone());
        }
        report.delivered.push(sample);
    }
    link.cycle += 1;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriteEvent {
    pub id: SignalId,
    pub origin: String,
    pub timestamp_ms: i64,
    pub cycle: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibleEvent {
    pub id: SignalId,
    pub node: String,
    pub timestamp_ms: i64,
    pub cycle: u64,
}

/// Record of local writes and of samples becoming visible at subscribers.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReplicationTrace {
    pub subscribers: BTreeMap<SignalId, BTreeSet<String>>,
    pub writes: Vec<WriteEvent>,
    pub visible: Vec<VisibleEvent>,
}

impl ReplicationTrace {
    pub fn add_subscriber(&mut self, id: SignalId, node: &str) {
        self.subscribers.entry(id).or_default().insert(node.to_string());
    }

    pub fn record_write(&mut self, sample: &SignalSample, cycle: u64) {
        self.writes.push(WriteEvent {
            id: sample.id,
            origin: sample.origin.clone(),
            timestamp_ms: sample.timestamp_ms,
            cycle,
        });
    }

    pub fn record_pull(&mut self, node: &str, report: &CycleReport) {
        for s in &report.applied {
            self.visible.push(VisibleEvent {
                id: s.id,
                node: node.to_string(),
                timestamp_ms: s.timestamp_ms,
                cycle: report.cycle,
            });
        }
    }

    pub fn extend(&mut self, other: ReplicationTrace) {
        for (id, nodes) in other.subscribers {
            self.subscribers.entry(id).or_default().extend(nodes);
        }
        self.writes.extend(other.writes);
        self.visible.extend(other.visible);
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LagReport {
    /// Worst write→visible-everywhere lag, in cycles, per key.
    pub per_key: BTreeMap<SignalId, u64>,
    /// Keys with a write some subscriber never caught up with.
    pub unresolved: BTreeSet<SignalId>,
}

impl LagReport {
    pub fn max_lag(&self) -> Option<u64> {
        self.per_key.values().copied().max()
    }
}

/// Per key, the largest number of cycles between a local write and the
/// moment every subscriber holds that write or a newer one.
pub fn end_to_end_lag(trace: &ReplicationTrace) -> LagReport {
    // (key, node) -> visibility events in delivery order.
    let mut seen: BTreeMap<(SignalId, &str), Vec<(i64, u64)>> = BTreeMap::new();
    for v in &trace.visible {
        seen.entry((v.id, v.node.as_str()))
            .or_default()
            .push((v.timestamp_ms, v.cycle));
    }
    // Sorted by timestamp, paired with the earliest cycle at which that
    // timestamp or any newer one became visible.
    for events in seen.values_mut() {
        events.sort_unstable();
        let mut earliest = u64::MAX;
        for e in events.iter_mut().rev() {
            earliest = earliest.min(e.1);
            e.1 = earliest;
        }
    }
    let mut report = LagReport::default();
    for w in &trace.writes {
        let Some(subscribers) = trace.subscribers.get(&w.id) else {
            continue;
        };
        let mut worst = 0;
        for node in subscribers.iter().filter(|n| **n != w.origin) {
            let first = seen.get(&(w.id, node.as_str())).and_then(|events| {
                let k = events.partition_point(|(ts, _)| *ts < w.timestamp_ms);
                events.get(k).map(|(_, cycle)| *cycle)
            });
            match first {
                Some(cycle) => worst = worst.max(cycle.saturating_sub(w.cycle)),
                None => {
                    report.unresolved.insert(w.id);
                }
            }
        }
        let entry = report.per_key.entry(w.id).or_insert(0);
        *entry = (*entry).max(worst);
    }
    report
}
