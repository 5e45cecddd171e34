//! Electrical-side device emulators: SINTEF battery, RSE CHP and the CRES
//! heat pump, plus the CHP→DTU thermal setpoint mapping.
//!
//! Sign convention everywhere: positive active/reactive power is consumption
//! at the PCC, generation is negative.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::thermal::{quantize_heat, EHP_HEAT_MAX_KW};

pub const BESS_P_LIMIT_KW: f64 = 40.0;
pub const BESS_Q_LIMIT_KVAR: f64 = 5.0;
pub const CHP_TH_MIN_KW: f64 = 46.0;
pub const CHP_TH_MAX_KW: f64 = 81.0;
pub const RSE_Q_LIMIT_KVAR: f64 = 50.0;
pub const EHP_RATED_KW: f64 = 16.0;
/// Full span of the DTU heater bank.
pub const DTU_HEAT_MAX_KW: f64 = 22.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error("time step must be positive, got {0} s")]
    NonPositiveDt(f64),
    #[error("CHP thermal power {0} kW is neither 0 nor within 46–81 kW")]
    OutOfDomain(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceConfig {
    pub bess_capacity_kwh: f64,
    pub bess_initial_soc: f64,
    pub chp_el_th_ratio: f64,
    pub ehp_cop: f64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            bess_capacity_kwh: 100.0,
            bess_initial_soc: 50.0,
            chp_el_th_ratio: 0.55,
            ehp_cop: 1.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BessState {
    pub soc: f64,
    pub capacity_kwh: f64,
    pub p_kw: f64,
    pub q_kvar: f64,
}

impl BessState {
    pub fn new(capacity_kwh: f64, soc: f64) -> Self {
        Self {
            soc: soc.clamp(0.0, 100.0),
            capacity_kwh,
            p_kw: 0.0,
            q_kvar: 0.0,
        }
    }

    /// SoC percentage points per kW·s.
    fn soc_per_kws(&self) -> f64 {
        1.0 / (36.0 * self.capacity_kwh)
    }

    /// Apply a power reference for `dt_s`. The applied power is limited to
    /// ±40 kW and to what the remaining headroom can absorb, so the SoC
    /// change always equals the integral of applied power.
    pub fn bess_step(&mut self, p_ref_kw: f64, q_ref_kvar: f64, dt_s: f64) -> Result<f64, DeviceError> {
        if !(dt_s > 0.0) {
            return Err(DeviceError::NonPositiveDt(dt_s));
        }
        let mut p = p_ref_kw.clamp(-BESS_P_LIMIT_KW, BESS_P_LIMIT_KW);
        if !p.is_finite() {
            p = 0.0;
        }
        let k = self.soc_per_kws() * dt_s;
        if p > 0.0 {
            p = p.min((100.0 - self.soc) / k);
        } else if p < 0.0 {
            p = p.max(-self.soc / k);
        }
        self.soc = (self.soc + p * k).clamp(0.0, 100.0);
        self.p_kw = p;
        self.q_kvar = if q_ref_kvar.is_finite() {
            q_ref_kvar.clamp(-BESS_Q_LIMIT_KVAR, BESS_Q_LIMIT_KVAR)
        } else {
            0.0
        };
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChpState {
    pub on: bool,
    pub p_th_kw: f64,
    /// Electrical output as a positive generation figure.
    pub p_el_kw: f64,
    pub q_kvar: f64,
    pub el_th_ratio: f64,
}

impl ChpState {
    pub fn new(el_th_ratio: f64) -> Self {
        Self {
            on: false,
            p_th_kw: 0.0,
            p_el_kw: 0.0,
            q_kvar: 0.0,
            el_th_ratio,
        }
    }

    pub fn chp_step(&mut self, on_cmd: bool, p_th_ref_kw: f64) {
        self.on = on_cmd;
        if on_cmd {
            let reference = if p_th_ref_kw.is_finite() { p_th_ref_kw } else { CHP_TH_MIN_KW };
            self.p_th_kw = reference.clamp(CHP_TH_MIN_KW, CHP_TH_MAX_KW);
            self.p_el_kw = self.el_th_ratio * self.p_th_kw;
        } else {
            self.p_th_kw = 0.0;
            self.p_el_kw = 0.0;
        }
    }

    /// Contribution to the RSE active power in the consumption convention.
    pub fn pcc_p_kw(&self) -> f64 {
        -self.p_el_kw
    }
}

/// Offset-and-scale map from the CHP's 46–81 kW thermal range onto the DTU
/// heater bank's 0–22.5 kW, quantized to the bank's 2.5 kW steps.
pub fn map_chp_to_dtu(p_th_chp_kw: f64) -> Result<f64, DeviceError> {
    if p_th_chp_kw == 0.0 {
        return Ok(0.0);
    }
    if !(CHP_TH_MIN_KW..=CHP_TH_MAX_KW).contains(&p_th_chp_kw) {
        return Err(DeviceError::OutOfDomain(p_th_chp_kw));
    }
    let raw = (p_th_chp_kw - CHP_TH_MIN_KW) / (CHP_TH_MAX_KW - CHP_TH_MIN_KW) * DTU_HEAT_MAX_KW;
    Ok(quantize_heat(raw).1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EhpState {
    pub on: bool,
    pub p_el_kw: f64,
    pub p_th_kw: f64,
    pub cop: f64,
}

impl EhpState {
    pub fn new(cop: f64) -> Self {
        Self {
            on: false,
            p_el_kw: 0.0,
            p_th_kw: 0.0,
            cop,
        }
    }

    pub fn ehp_step(&mut self, on_cmd: bool) {
        self.on = on_cmd;
        if on_cmd {
            self.p_el_kw = EHP_RATED_KW;
            self.p_th_kw = (self.cop * EHP_RATED_KW).clamp(0.0, EHP_HEAT_MAX_KW);
        } else {
            self.p_el_kw = 0.0;
            self.p_th_kw = 0.0;
        }
    }
}
