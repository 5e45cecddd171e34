//! Scenario metrics computed from a run record alone.

use std::collections::BTreeMap;

use crate::csc::{hysteresis_step, ControllerConfig, HysteresisBand, Mode, ScenarioKind};
use crate::grid::deviation_percent;
use crate::record::RunRecord;

/// Voltage columns watched by the controller, keyed by PCC label.
pub const PCC_VOLTAGES: [(&str, &str); 2] = [("PCC2", "SIN/V_SIN_ref"), ("PCC4", "RSE/V_RSE_ref")];

/// Command columns whose value changes count as actuation toggles.
pub const COMMAND_UNITS: [(&str, &str); 3] = [
    ("BESS", "SIN/P_el_SIN_ref"),
    ("EHP", "RSE/ON_OFF"),
    ("CHP", "RSE/CHP_ON_OFF"),
];

/// Deviation band counted as recovered.
pub const RECOVERY_BAND_PCT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PccMetrics {
    pub max_rise_pct: f64,
    pub min_rise_pct: f64,
    pub activations: usize,
    pub deactivations: usize,
    pub first_activation_s: Option<f64>,
    /// Worst deviation up to and including the first activation (max for
    /// overvoltage, min for undervoltage).
    pub pre_activation_extreme_pct: Option<f64>,
    /// Worst deviation once the actuation window after the first activation
    /// has elapsed.
    pub post_activation_extreme_pct: Option<f64>,
    pub recovery_time_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub kind: Option<ScenarioKind>,
    pub rows: usize,
    pub pcc: BTreeMap<String, PccMetrics>,
    pub toggles: BTreeMap<String, usize>,
    pub soc_delta_pct: Option<f64>,
    pub dtu_energy_kwh: f64,
    pub replication_max_lag_cycles: Option<u64>,
}

impl MetricsReport {
    /// `key=value` lines, sorted by key.
    pub fn to_kv(&self) -> String {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| x.to_string());
        if let Some(k) = self.kind {
            kv.insert("kind".into(), k.to_string());
        }
        kv.insert("rows".into(), self.rows.to_string());
        for (label, m) in &self.pcc {
            let p = label.to_lowercase();
            kv.insert(format!("{p}.max_rise_pct"), m.max_rise_pct.to_string());
            kv.insert(format!("{p}.min_rise_pct"), m.min_rise_pct.to_string());
            kv.insert(format!("{p}.activations"), m.activations.to_string());
            kv.insert(format!("{p}.deactivations"), m.deactivations.to_string());
            kv.insert(format!("{p}.first_activation_s"), opt(m.first_activation_s));
            kv.insert(format!("{p}.pre_activation_extreme_pct"), opt(m.pre_activation_extreme_pct));
            kv.insert(format!("{p}.post_activation_extreme_pct"), opt(m.post_activation_extreme_pct));
            kv.insert(format!("{p}.recovery_time_s"), opt(m.recovery_time_s));
        }
        for (unit, n) in &self.toggles {
            kv.insert(format!("toggles.{}", unit.to_lowercase()), n.to_string());
        }
        kv.insert("soc_delta_pct".into(), opt(self.soc_delta_pct));
        kv.insert("dtu_energy_kwh".into(), self.dtu_energy_kwh.to_string());
        kv.insert(
            "replication_max_lag_cycles".into(),
            self.replication_max_lag_cycles.map_or_else(|| "none".into(), |v| v.to_string()),
        );
        kv.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

fn band_from(record: &RunRecord, kind: ScenarioKind) -> HysteresisBand {
    let defaults = ControllerConfig::default();
    let get = |key: &str, fallback: f64| record.meta_f64(key).unwrap_or(fallback);
    let band = match kind {
        ScenarioKind::Overvoltage => HysteresisBand::over(
            get("over_activate_pct", defaults.over_activate_pct),
            get("over_deactivate_pct", defaults.over_deactivate_pct),
        ),
        ScenarioKind::Undervoltage => HysteresisBand::under(
            get("under_activate_pct", defaults.under_activate_pct),
            get("under_deactivate_pct", defaults.under_deactivate_pct),
        ),
    };
    band.unwrap_or_else(|_| defaults.band(kind).expect("default bands are valid"))
}

fn pcc_metrics(record: &RunRecord, key: &str, band: &HysteresisBand, window_s: f64) -> Option<PccMetrics> {
    let series = record.series(key)?;
    let times = record.times();
    let rises: Vec<(f64, f64)> = times
        .iter()
        .zip(&series)
        .filter_map(|(&t, v)| v.map(|v| (t, deviation_percent(v))))
        .collect();
    if rises.is_empty() {
        return Some(PccMetrics::default());
    }
    let mut m = PccMetrics {
        max_rise_pct: rises.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max),
        min_rise_pct: rises.iter().map(|r| r.1).fold(f64::INFINITY, f64::min),
        ..Default::default()
    };
    let mut mode = Mode::Inactive;
    for &(t, dev) in &rises {
        let next = hysteresis_step(band, mode, dev);
        if next != mode {
            if next == Mode::Active {
                m.activations += 1;
                m.first_activation_s.get_or_insert(t);
            } else {
                m.deactivations += 1;
            }
        }
        mode = next;
    }
    let Some(t_act) = m.first_activation_s else { return Some(m) };
    let worst = |a: f64, b: f64| match band.activate > band.deactivate {
        true => a.max(b),
        false => a.min(b),
    };
    m.pre_activation_extreme_pct = rises.iter().filter(|r| r.0 <= t_act).map(|r| r.1).reduce(worst);
    m.post_activation_extreme_pct = rises
        .iter()
        .filter(|r| r.0 > t_act + window_s)
        .map(|r| r.1)
        .reduce(worst);
    m.recovery_time_s = rises
        .iter()
        .find(|r| r.0 > t_act && r.1.abs() < RECOVERY_BAND_PCT)
        .map(|r| r.0 - t_act);
    Some(m)
}

/// Metrics from the record's columns and metadata. The hysteresis band and
/// scenario kind come from the metadata, falling back to defaults.
pub fn compute_metrics(record: &RunRecord) -> MetricsReport {
    let kind = record.meta("kind").and_then(|k| k.parse().ok());
    let mut report = MetricsReport {
        kind,
        rows: record.rows.len(),
        replication_max_lag_cycles: record.meta("replication_max_lag_cycles").and_then(|v| v.parse().ok()),
        ..Default::default()
    };
    if record.is_empty() {
        return report;
    }
    let band = band_from(record, kind.unwrap_or(ScenarioKind::Overvoltage));
    let window_s = record.meta_f64("actuation_window_s").unwrap_or(0.0);
    for (label, key) in PCC_VOLTAGES {
        if let Some(m) = pcc_metrics(record, key, &band, window_s) {
            report.pcc.insert(label.to_string(), m);
        }
    }
    for (unit, key) in COMMAND_UNITS {
        if let Some(series) = record.series(key) {
            let values: Vec<f64> = series.into_iter().flatten().collect();
            let n = values.windows(2).filter(|w| w[0] != w[1]).count();
            report.toggles.insert(unit.to_string(), n);
        }
    }
    if let Some(soc) = record.series("SIN/SoC") {
        let known: Vec<f64> = soc.into_iter().flatten().collect();
        if let (Some(first), Some(last)) = (known.first(), known.last()) {
            report.soc_delta_pct = Some(last - first);
        }
    }
    if let Some(p) = record.series("DTU/Pbar_DTU") {
        let times = record.times();
        let dt = record
            .meta_f64("dt_s")
            .unwrap_or_else(|| if times.len() > 1 { times[1] - times[0] } else { 0.0 });
        report.dtu_energy_kwh = p.iter().flatten().map(|kw| kw * dt).sum::<f64>() / 3600.0;
    }
    report
}
