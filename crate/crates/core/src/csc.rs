//! Centralized supervisory controller.
//!
//! One hysteresis machine per controlled PCC turns voltage deviations into
//! bang-bang device commands. The overvoltage case adds load (battery
//! charging, heat pump on); the undervoltage case sheds it and starts the
//! CHP. An optional proportional droop adds reactive support.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devices::{BESS_P_LIMIT_KW, BESS_Q_LIMIT_KVAR, CHP_TH_MAX_KW, RSE_Q_LIMIT_KVAR};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CscError {
    #[error("invalid hysteresis band: activate {activate} / deactivate {deactivate} for {sense:?} sense")]
    InvalidBand { activate: f64, deactivate: f64, sense: Sense },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Overvoltage,
    Undervoltage,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Overvoltage => "overvoltage",
            ScenarioKind::Undervoltage => "undervoltage",
        }
    }

    pub fn default_duration_s(self) -> f64 {
        match self {
            ScenarioKind::Overvoltage => 960.0,
            ScenarioKind::Undervoltage => 1680.0,
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "overvoltage" => Ok(ScenarioKind::Overvoltage),
            "undervoltage" => Ok(ScenarioKind::Undervoltage),
            other => Err(format!("unknown scenario '{other}'")),
        }
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    Over,
    Under,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HysteresisBand {
    pub activate: f64,
    pub deactivate: f64,
    pub sense: Sense,
}

impl HysteresisBand {
    pub fn new(activate: f64, deactivate: f64, sense: Sense) -> Result<Self, CscError> {
        let ok = match sense {
            Sense::Over => activate > deactivate,
            Sense::Under => activate < deactivate,
        };
        if !ok {
            return Err(CscError::InvalidBand { activate, deactivate, sense });
        }
        Ok(Self { activate, deactivate, sense })
    }

    pub fn over(activate: f64, deactivate: f64) -> Result<Self, CscError> {
        Self::new(activate, deactivate, Sense::Over)
    }

    pub fn under(activate: f64, deactivate: f64) -> Result<Self, CscError> {
        Self::new(activate, deactivate, Sense::Under)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Mode {
    Active,
    #[default]
    Inactive,
}

/// One hysteresis update. Over-sense activates strictly above `activate` and
/// releases strictly below `deactivate`; under-sense mirrors both tests.
pub fn hysteresis_step(band: &HysteresisBand, mode: Mode, deviation: f64) -> Mode {
    match (band.sense, mode) {
        (Sense::Over, Mode::Inactive) if deviation > band.activate => Mode::Active,
        (Sense::Over, Mode::Active) if deviation < band.deactivate => Mode::Inactive,
        (Sense::Under, Mode::Inactive) if deviation < band.activate => Mode::Active,
        (Sense::Under, Mode::Active) if deviation > band.deactivate => Mode::Inactive,
        _ => mode,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub over_activate_pct: f64,
    pub over_deactivate_pct: f64,
    pub under_activate_pct: f64,
    pub under_deactivate_pct: f64,
    pub reactive_support: bool,
    pub droop_gain_kvar_per_pct: f64,
    pub droop_deadband_pct: f64,
    /// Battery charging setpoint held outside undervoltage events.
    pub bess_charge_kw: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            over_activate_pct: 5.0,
            over_deactivate_pct: 0.0,
            under_activate_pct: -5.0,
            under_deactivate_pct: 0.0,
            reactive_support: true,
            droop_gain_kvar_per_pct: 2.0,
            droop_deadband_pct: 0.5,
            bess_charge_kw: 20.0,
        }
    }
}

impl ControllerConfig {
    pub fn band(&self, kind: ScenarioKind) -> Result<HysteresisBand, CscError> {
        match kind {
            ScenarioKind::Overvoltage => HysteresisBand::over(self.over_activate_pct, self.over_deactivate_pct),
            ScenarioKind::Undervoltage => {
                HysteresisBand::under(self.under_activate_pct, self.under_deactivate_pct)
            }
        }
    }
}

/// Proportional reactive droop. The result is in the generator convention:
/// positive means reactive injection.
pub fn reactive_support(deviation_pct: f64, limit_kvar: f64, gain_kvar_per_pct: f64, deadband_pct: f64) -> f64 {
    if !deviation_pct.is_finite() || deviation_pct.abs() <= deadband_pct {
        return 0.0;
    }
    // `+ 0.0` normalizes a negative zero
    (-gain_kvar_per_pct * deviation_pct).clamp(-limit_kvar, limit_kvar) + 0.0
}

/// Setpoints issued in one control period. Reactive references use the
/// consumption convention of the PCC signals.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CommandSet {
    pub p_sin_ref_kw: f64,
    pub q_sin_ref_kvar: f64,
    pub q_rse_ref_kvar: f64,
    pub chp_on: bool,
    pub p_th_ref_kw: f64,
    pub ehp_on: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub kind: ScenarioKind,
    pub band: HysteresisBand,
    pub pcc2: Mode,
    pub pcc4: Mode,
    pub last: CommandSet,
    pub transitions: usize,
    /// Control periods in which an input was missing and the mode was held.
    pub missing_inputs: usize,
}

impl ControllerState {
    pub fn new(kind: ScenarioKind, cfg: &ControllerConfig) -> Result<Self, CscError> {
        let band = cfg.band(kind)?;
        let mut state = Self {
            kind,
            band,
            pcc2: Mode::Inactive,
            pcc4: Mode::Inactive,
            last: CommandSet::default(),
            transitions: 0,
            missing_inputs: 0,
        };
        state.last = state.commands(cfg, None, None);
        Ok(state)
    }

    fn update(&mut self, dev_pcc2: Option<f64>, dev_pcc4: Option<f64>) {
        for (mode, dev) in [(&mut self.pcc2, dev_pcc2), (&mut self.pcc4, dev_pcc4)] {
            match dev {
                Some(d) if d.is_finite() => {
                    let next = hysteresis_step(&self.band, *mode, d);
                    if next != *mode {
                        self.transitions += 1;
                        *mode = next;
                    }
                }
                _ => self.missing_inputs += 1,
            }
        }
    }

    fn commands(&self, cfg: &ControllerConfig, dev_pcc2: Option<f64>, dev_pcc4: Option<f64>) -> CommandSet {
        let droop = |dev: Option<f64>, limit: f64, previous: f64| match dev {
            _ if !cfg.reactive_support => 0.0,
            Some(d) => -reactive_support(d, limit, cfg.droop_gain_kvar_per_pct, cfg.droop_deadband_pct) + 0.0,
            None => previous,
        };
        let q_sin = droop(dev_pcc2, BESS_Q_LIMIT_KVAR, self.last.q_sin_ref_kvar);
        let q_rse = droop(dev_pcc4, RSE_Q_LIMIT_KVAR, self.last.q_rse_ref_kvar);
        let active2 = self.pcc2 == Mode::Active;
        let active4 = self.pcc4 == Mode::Active;
        match self.kind {
            ScenarioKind::Overvoltage => CommandSet {
                p_sin_ref_kw: if active2 { BESS_P_LIMIT_KW } else { 0.0 },
                q_sin_ref_kvar: q_sin,
                q_rse_ref_kvar: q_rse,
                chp_on: false,
                p_th_ref_kw: 0.0,
                ehp_on: active4,
            },
            ScenarioKind::Undervoltage => CommandSet {
                p_sin_ref_kw: if active2 { 0.0 } else { cfg.bess_charge_kw },
                q_sin_ref_kvar: q_sin,
                q_rse_ref_kvar: q_rse,
                chp_on: active4,
                p_th_ref_kw: if active4 { CHP_TH_MAX_KW } else { 0.0 },
                ehp_on: !active4,
            },
        }
    }
}

/// Overvoltage control period: PCC2 active charges the battery at full
/// power, PCC4 active switches the heat pump on. The CHP stays off with a
/// zero thermal setpoint. `None` inputs hold the corresponding mode.
pub fn step_case1(
    rise_pcc2: Option<f64>,
    rise_pcc4: Option<f64>,
    state: &mut ControllerState,
    cfg: &ControllerConfig,
) -> CommandSet {
    debug_assert_eq!(state.kind, ScenarioKind::Overvoltage);
    state.update(rise_pcc2, rise_pcc4);
    state.last = state.commands(cfg, rise_pcc2, rise_pcc4);
    state.last
}

/// Undervoltage control period: PCC4 active switches the heat pump off and
/// runs the CHP at full thermal output; PCC2 active stops battery charging.
/// Releasing a machine restores the pre-event commands.
pub fn step_case2(
    dev_pcc2: Option<f64>,
    dev_pcc4: Option<f64>,
    state: &mut ControllerState,
    cfg: &ControllerConfig,
) -> CommandSet {
    debug_assert_eq!(state.kind, ScenarioKind::Undervoltage);
    state.update(dev_pcc2, dev_pcc4);
    state.last = state.commands(cfg, dev_pcc2, dev_pcc4);
    state.last
}

/// Dispatch on the scenario kind.
pub fn control_step(
    dev_pcc2: Option<f64>,
    dev_pcc4: Option<f64>,
    state: &mut ControllerState,
    cfg: &ControllerConfig,
) -> CommandSet {
    match state.kind {
        ScenarioKind::Overvoltage => step_case1(dev_pcc2, dev_pcc4, state, cfg),
        ScenarioKind::Undervoltage => step_case2(dev_pcc2, dev_pcc4, state, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_droop() -> ControllerConfig {
        ControllerConfig { reactive_support: false, ..Default::default() }
    }

    #[test]
    fn band_invariants() {
        assert!(HysteresisBand::over(5.0, 0.0).is_ok());
        assert!(HysteresisBand::over(0.0, 5.0).is_err());
        assert!(HysteresisBand::under(-5.0, 0.0).is_ok());
        assert!(HysteresisBand::under(0.0, -5.0).is_err());
    }

    #[test]
    fn over_band_examples() {
        let band = HysteresisBand::over(5.0, 0.0).unwrap();
        assert_eq!(hysteresis_step(&band, Mode::Inactive, 5.5), Mode::Active);
        assert_eq!(hysteresis_step(&band, Mode::Active, 2.0), Mode::Active);
        assert_eq!(hysteresis_step(&band, Mode::Active, -0.1), Mode::Inactive);
        // thresholds themselves do not trigger
        assert_eq!(hysteresis_step(&band, Mode::Inactive, 5.0), Mode::Inactive);
        assert_eq!(hysteresis_step(&band, Mode::Active, 0.0), Mode::Active);
    }

    #[test]
    fn under_band_mirrors() {
        let band = HysteresisBand::under(-5.0, 0.0).unwrap();
        assert_eq!(hysteresis_step(&band, Mode::Inactive, -5.5), Mode::Active);
        assert_eq!(hysteresis_step(&band, Mode::Active, -2.0), Mode::Active);
        assert_eq!(hysteresis_step(&band, Mode::Active, 0.5), Mode::Inactive);
    }

    #[test]
    fn case1_actions() {
        let cfg = no_droop();
        let mut st = ControllerState::new(ScenarioKind::Overvoltage, &cfg).unwrap();
        let idle = step_case1(Some(3.0), Some(3.0), &mut st, &cfg);
        assert_eq!(idle, CommandSet::default());
        let c = step_case1(Some(6.0), Some(6.0), &mut st, &cfg);
        assert_eq!(c.p_sin_ref_kw, 40.0);
        assert!(c.ehp_on && !c.chp_on);
        assert_eq!(c.p_th_ref_kw, 0.0);
        let c = step_case1(Some(-1.0), Some(-1.0), &mut st, &cfg);
        assert_eq!(c.p_sin_ref_kw, 0.0);
        assert!(!c.ehp_on);
        assert_eq!(st.transitions, 4);
    }

    #[test]
    fn case2_actions() {
        let cfg = no_droop();
        let mut st = ControllerState::new(ScenarioKind::Undervoltage, &cfg).unwrap();
        assert!(st.last.ehp_on);
        let hold = step_case2(Some(-2.0), Some(-2.0), &mut st, &cfg);
        assert!(hold.ehp_on && !hold.chp_on);
        assert_eq!(hold.p_sin_ref_kw, cfg.bess_charge_kw);
        let c = step_case2(Some(-6.0), Some(-6.0), &mut st, &cfg);
        assert!(!c.ehp_on && c.chp_on);
        assert_eq!(c.p_th_ref_kw, 81.0);
        assert_eq!(c.p_sin_ref_kw, 0.0);
        let c = step_case2(Some(0.5), Some(0.5), &mut st, &cfg);
        assert!(c.ehp_on && !c.chp_on);
        assert_eq!(c.p_sin_ref_kw, cfg.bess_charge_kw);
    }

    #[test]
    fn missing_input_holds_mode() {
        let cfg = no_droop();
        let mut st = ControllerState::new(ScenarioKind::Overvoltage, &cfg).unwrap();
        step_case1(Some(6.0), Some(6.0), &mut st, &cfg);
        let c = step_case1(None, None, &mut st, &cfg);
        assert_eq!(c.p_sin_ref_kw, 40.0);
        assert_eq!(st.missing_inputs, 2);
    }

    #[test]
    fn droop() {
        assert_eq!(reactive_support(-5.0, 50.0, 2.0, 0.5), 10.0);
        assert_eq!(reactive_support(0.0, 50.0, 2.0, 0.5), 0.0);
        assert_eq!(reactive_support(0.4, 50.0, 2.0, 0.5), 0.0);
        assert_eq!(reactive_support(-50.0, 5.0, 2.0, 0.5), 5.0);
        let cfg = ControllerConfig::default();
        let mut st = ControllerState::new(ScenarioKind::Undervoltage, &cfg).unwrap();
        let c = step_case2(Some(-5.0), Some(-5.0), &mut st, &cfg);
        // injection is negative consumption
        assert_eq!(c.q_rse_ref_kvar, -10.0);
        assert_eq!(c.q_sin_ref_kvar, -5.0);
    }
}
