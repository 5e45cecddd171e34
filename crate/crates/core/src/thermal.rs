//! District-heating loop and CRES heat node.
//!
//! The DTU network is a quantized electrical heater bank feeding an
//! accumulator tank, an 880 m plug-flow pipe loop (two 440 m legs joined at
//! a pass-through substation) and a consumer that cools the returning water
//! to a fixed return temperature. All steps are explicit Euler on the
//! co-simulation tick.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const WATER_CP_J_PER_KG_K: f64 = 4186.0;
pub const WATER_DENSITY_KG_PER_M3: f64 = 1000.0;
pub const HEATER_COUNT: u32 = 9;
pub const HEATER_STEP_KW: f64 = 2.5;
pub const TANK_T_MIN_C: f64 = 0.0;
pub const TANK_T_MAX_C: f64 = 100.0;
pub const EHP_HEAT_MAX_KW: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ThermalError {
    #[error("time step must be positive, got {0} s")]
    NonPositiveDt(f64),
    #[error("invalid thermal parameter: {0}")]
    InvalidParameter(String),
}

fn check_dt(dt_s: f64) -> Result<(), ThermalError> {
    if dt_s > 0.0 && dt_s.is_finite() {
        Ok(())
    } else {
        Err(ThermalError::NonPositiveDt(dt_s))
    }
}

/// Quantize a power request to the nearest multiple of 2.5 kW (ties up),
/// limited to the bank's nine heaters.
pub fn quantize_heat(requested_kw: f64) -> (u32, f64) {
    let steps = if requested_kw.is_finite() {
        (requested_kw / HEATER_STEP_KW + 0.5).floor().clamp(0.0, HEATER_COUNT as f64) as u32
    } else {
        0
    };
    (steps, steps as f64 * HEATER_STEP_KW)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HeaterBank {
    pub active_count: u32,
}

impl HeaterBank {
    pub fn set_heat_source(&mut self, requested_kw: f64) -> f64 {
        let (count, applied) = quantize_heat(requested_kw);
        self.active_count = count;
        applied
    }

    pub fn output_kw(&self) -> f64 {
        self.active_count as f64 * HEATER_STEP_KW
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccumulatorTank {
    pub temperature_c: f64,
    pub heat_capacity_j_per_k: f64,
    pub ua_w_per_k: f64,
    pub ambient_c: f64,
    /// The last step hit the 0–100 °C limits.
    #[serde(skip)]
    pub clamped: bool,
}

impl AccumulatorTank {
    pub fn from_volume(volume_l: f64, temperature_c: f64, ua_w_per_k: f64, ambient_c: f64) -> Self {
        let mass = volume_l / 1000.0 * WATER_DENSITY_KG_PER_M3;
        Self {
            temperature_c,
            heat_capacity_j_per_k: mass * WATER_CP_J_PER_KG_K,
            ua_w_per_k,
            ambient_c,
            clamped: false,
        }
    }

    pub fn step_tank(&mut self, p_in_kw: f64, p_draw_kw: f64, dt_s: f64) -> Result<(), ThermalError> {
        check_dt(dt_s)?;
        let loss_w = self.ua_w_per_k * (self.temperature_c - self.ambient_c);
        let net_w = (p_in_kw - p_draw_kw) * 1000.0 - loss_w;
        let t = self.temperature_c + net_w * dt_s / self.heat_capacity_j_per_k;
        self.clamped = !(TANK_T_MIN_C..=TANK_T_MAX_C).contains(&t);
        self.temperature_c = t.clamp(TANK_T_MIN_C, TANK_T_MAX_C);
        Ok(())
    }

    pub fn energy_j(&self) -> f64 {
        self.heat_capacity_j_per_k * self.temperature_c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Parcel {
    pub temperature_c: f64,
    pub mass_kg: f64,
}

/// Plug-flow pipe: a FIFO of fluid parcels. Parcels relax toward ambient at
/// a rate set by the per-metre loss coefficient, independent of flow.
#[derive(Debug, Clone, PartialEq)]
pub struct PipeLoop {
    pub length_m: f64,
    pub area_m2: f64,
    pub mass_flow_kg_s: f64,
    pub loss_w_per_m_k: f64,
    pub ambient_c: f64,
    parcels: VecDeque<Parcel>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipeOutlet {
    pub temperature_c: f64,
    pub mass_kg: f64,
}

impl PipeLoop {
    pub fn new(
        length_m: f64,
        area_m2: f64,
        mass_flow_kg_s: f64,
        loss_w_per_m_k: f64,
        ambient_c: f64,
        initial_c: f64,
    ) -> Result<Self, ThermalError> {
        if !(length_m > 0.0 && area_m2 > 0.0) {
            return Err(ThermalError::InvalidParameter("pipe length and area must be positive".into()));
        }
        if !(mass_flow_kg_s >= 0.0) || !(loss_w_per_m_k >= 0.0) {
            return Err(ThermalError::InvalidParameter("mass flow and loss must be non-negative".into()));
        }
        let mut pipe = Self {
            length_m,
            area_m2,
            mass_flow_kg_s,
            loss_w_per_m_k,
            ambient_c,
            parcels: VecDeque::new(),
        };
        pipe.parcels.push_back(Parcel {
            temperature_c: initial_c,
            mass_kg: pipe.capacity_kg(),
        });
        Ok(pipe)
    }

    pub fn capacity_kg(&self) -> f64 {
        WATER_DENSITY_KG_PER_M3 * self.area_m2 * self.length_m
    }

    pub fn velocity_m_s(&self) -> f64 {
        self.mass_flow_kg_s / (WATER_DENSITY_KG_PER_M3 * self.area_m2)
    }

    /// Residence time of a parcel, `length / velocity`.
    pub fn transport_delay_s(&self) -> f64 {
        self.length_m / self.velocity_m_s()
    }

    /// Exponential relaxation rate toward ambient, 1/s.
    pub fn decay_rate(&self) -> f64 {
        self.loss_w_per_m_k / (WATER_DENSITY_KG_PER_M3 * self.area_m2 * WATER_CP_J_PER_KG_K)
    }

    pub fn parcels(&self) -> impl Iterator<Item = &Parcel> {
        self.parcels.iter()
    }

    pub fn total_mass_kg(&self) -> f64 {
        self.parcels.iter().map(|p| p.mass_kg).sum()
    }

    pub fn energy_j(&self) -> f64 {
        self.parcels
            .iter()
            .map(|p| p.mass_kg * WATER_CP_J_PER_KG_K * p.temperature_c)
            .sum()
    }

    pub fn step_pipe(&mut self, inlet_c: f64, dt_s: f64) -> Result<PipeOutlet, ThermalError> {
        check_dt(dt_s)?;
        let decay = (-self.decay_rate() * dt_s).exp();
        for p in &mut self.parcels {
            p.temperature_c = self.ambient_c + (p.temperature_c - self.ambient_c) * decay;
        }
        let moved = self.mass_flow_kg_s * dt_s;
        if moved <= 0.0 {
            let t = self.parcels.front().map_or(self.ambient_c, |p| p.temperature_c);
            return Ok(PipeOutlet { temperature_c: t, mass_kg: 0.0 });
        }
        self.parcels.push_back(Parcel { temperature_c: inlet_c, mass_kg: moved });

        let mut remaining = moved;
        let mut heat = 0.0;
        while remaining > 0.0 {
            let Some(front) = self.parcels.front_mut() else { break };
            if front.mass_kg <= remaining {
                remaining -= front.mass_kg;
                heat += front.mass_kg * front.temperature_c;
                self.parcels.pop_front();
            } else {
                front.mass_kg -= remaining;
                heat += remaining * front.temperature_c;
                remaining = 0.0;
            }
        }
        Ok(PipeOutlet {
            temperature_c: heat / moved,
            mass_kg: moved,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DhnConfig {
    pub tank_volume_l: f64,
    pub tank_initial_c: f64,
    pub tank_ua_w_per_k: f64,
    pub ambient_c: f64,
    pub pipe_length_m: f64,
    pub pipe_area_m2: f64,
    pub mass_flow_kg_s: f64,
    pub pipe_loss_w_per_m_k: f64,
    pub pipe_initial_c: f64,
    /// The consumer cools the loop water down to this temperature.
    pub return_setpoint_c: f64,
}

impl Default for DhnConfig {
    fn default() -> Self {
        Self {
            tank_volume_l: 200.0,
            tank_initial_c: 50.0,
            tank_ua_w_per_k: 5.0,
            ambient_c: 15.0,
            pipe_length_m: 880.0,
            // 180 kg of water in the loop: 30 min residence at 0.1 kg/s
            pipe_area_m2: 180.0 / (WATER_DENSITY_KG_PER_M3 * 880.0),
            mass_flow_kg_s: 0.1,
            pipe_loss_w_per_m_k: 0.1,
            pipe_initial_c: 40.0,
            return_setpoint_c: 35.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DhnStep {
    pub applied_kw: f64,
    pub outlet_c: f64,
    pub return_c: f64,
    pub consumer_kw: f64,
    pub tank_c: f64,
}

/// Heater bank → tank → pipe loop → consumer → back to the tank.
#[derive(Debug, Clone, PartialEq)]
pub struct DistrictHeating {
    pub heater: HeaterBank,
    pub tank: AccumulatorTank,
    pub pipe: PipeLoop,
    pub return_setpoint_c: f64,
}

impl DistrictHeating {
    pub fn new(cfg: &DhnConfig) -> Result<Self, ThermalError> {
        if !(cfg.tank_volume_l > 0.0) {
            return Err(ThermalError::InvalidParameter("tank volume must be positive".into()));
        }
        Ok(Self {
            heater: HeaterBank::default(),
            tank: AccumulatorTank::from_volume(
                cfg.tank_volume_l,
                cfg.tank_initial_c,
                cfg.tank_ua_w_per_k,
                cfg.ambient_c,
            ),
            pipe: PipeLoop::new(
                cfg.pipe_length_m,
                cfg.pipe_area_m2,
                cfg.mass_flow_kg_s,
                cfg.pipe_loss_w_per_m_k,
                cfg.ambient_c,
                cfg.pipe_initial_c,
            )?,
            return_setpoint_c: cfg.return_setpoint_c,
        })
    }

    pub fn step(&mut self, requested_kw: f64, dt_s: f64) -> Result<DhnStep, ThermalError> {
        check_dt(dt_s)?;
        let applied_kw = self.heater.set_heat_source(requested_kw);
        let supply_c = self.tank.temperature_c;
        let outlet = self.pipe.step_pipe(supply_c, dt_s)?;
        let return_c = outlet.temperature_c.min(self.return_setpoint_c);
        let consumer_kw =
            outlet.mass_kg * WATER_CP_J_PER_KG_K * (outlet.temperature_c - return_c) / dt_s / 1000.0;
        let draw_kw = outlet.mass_kg * WATER_CP_J_PER_KG_K * (supply_c - return_c) / dt_s / 1000.0;
        self.tank.step_tank(applied_kw, draw_kw, dt_s)?;
        Ok(DhnStep {
            applied_kw,
            outlet_c: outlet.temperature_c,
            return_c,
            consumer_kw,
            tank_c: self.tank.temperature_c,
        })
    }

    pub fn energy_j(&self) -> f64 {
        self.tank.energy_j() + self.pipe.energy_j()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CresConfig {
    pub initial_c: f64,
    pub heat_capacity_j_per_k: f64,
    pub ua_w_per_k: f64,
    pub ambient_c: f64,
    /// Thermal load L1.
    pub demand_kw: f64,
}

impl Default for CresConfig {
    fn default() -> Self {
        Self {
            initial_c: 20.0,
            heat_capacity_j_per_k: 2.0e6,
            ua_w_per_k: 150.0,
            ambient_c: 10.0,
            demand_kw: 5.0,
        }
    }
}

/// Single-node thermal model of the CRES loop fed by the heat pump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CresThermalState {
    pub temperature_c: f64,
    pub demand_kw: f64,
    pub p_th_cres_kw: f64,
    pub heat_capacity_j_per_k: f64,
    pub ua_w_per_k: f64,
    pub ambient_c: f64,
}

impl CresThermalState {
    pub fn new(cfg: &CresConfig) -> Self {
        Self {
            temperature_c: cfg.initial_c,
            demand_kw: cfg.demand_kw,
            p_th_cres_kw: 0.0,
            heat_capacity_j_per_k: cfg.heat_capacity_j_per_k,
            ua_w_per_k: cfg.ua_w_per_k,
            ambient_c: cfg.ambient_c,
        }
    }

    pub fn step_cres(&mut self, ehp_on: bool, ehp_heat_kw: f64, dt_s: f64) -> Result<(), ThermalError> {
        check_dt(dt_s)?;
        self.p_th_cres_kw = if ehp_on {
            ehp_heat_kw.clamp(0.0, EHP_HEAT_MAX_KW)
        } else {
            0.0
        };
        let loss_w = self.ua_w_per_k * (self.temperature_c - self.ambient_c);
        let net_w = (self.p_th_cres_kw - self.demand_kw) * 1000.0 - loss_w;
        self.temperature_c = (self.temperature_c + net_w * dt_s / self.heat_capacity_j_per_k)
            .clamp(TANK_T_MIN_C, TANK_T_MAX_C);
        Ok(())
    }

    pub fn energy_j(&self) -> f64 {
        self.heat_capacity_j_per_k * self.temperature_c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heater_quantization() {
        let mut bank = HeaterBank::default();
        assert_eq!(bank.set_heat_source(9.0), 10.0);
        assert_eq!(bank.active_count, 4);
        assert_eq!(bank.set_heat_source(0.0), 0.0);
        assert_eq!(bank.set_heat_source(30.0), 22.5);
        assert_eq!(bank.set_heat_source(3.75), 5.0); // tie rounds up
        assert_eq!(bank.set_heat_source(-4.0), 0.0);
        assert_eq!(bank.set_heat_source(f64::NAN), 0.0);
    }

    #[test]
    fn tank_zero_net_flux() {
        let mut tank = AccumulatorTank::from_volume(200.0, 60.0, 0.0, 15.0);
        tank.step_tank(10.0, 10.0, 60.0).unwrap();
        assert_eq!(tank.temperature_c, 60.0);
    }

    #[test]
    fn tank_euler_step() {
        let mut tank = AccumulatorTank::from_volume(200.0, 50.0, 0.0, 15.0);
        assert_eq!(tank.heat_capacity_j_per_k, 837_200.0);
        tank.step_tank(22.5, 0.0, 60.0).unwrap();
        // 22 500 W · 60 s / 837 200 J/K
        assert!((tank.temperature_c - 50.0 - 1.612_517_916_8).abs() < 1e-6);
    }

    #[test]
    fn tank_clamps_and_rejects_bad_dt() {
        let mut tank = AccumulatorTank::from_volume(200.0, 99.9, 0.0, 15.0);
        tank.step_tank(22.5, 0.0, 600.0).unwrap();
        assert_eq!(tank.temperature_c, 100.0);
        assert!(tank.clamped);
        assert_eq!(tank.step_tank(1.0, 0.0, 0.0), Err(ThermalError::NonPositiveDt(0.0)));
    }

    #[test]
    fn tank_equilibrium() {
        let (p_kw, ua, amb) = (3.0, 50.0, 15.0);
        let mut tank = AccumulatorTank::from_volume(200.0, 20.0, ua, amb);
        let tau = tank.heat_capacity_j_per_k / ua;
        let dt = 10.0;
        for _ in 0..((10.0 * tau / dt) as usize) {
            tank.step_tank(p_kw, 0.0, dt).unwrap();
        }
        assert!((tank.temperature_c - (amb + p_kw * 1000.0 / ua)).abs() < 0.1);
    }

    #[test]
    fn pipe_without_flow_relaxes_in_place() {
        let mut pipe = PipeLoop::new(880.0, 2e-4, 0.0, 0.5, 10.0, 60.0).unwrap();
        let mut last = 60.0;
        for _ in 0..100 {
            let out = pipe.step_pipe(90.0, 1.0).unwrap();
            assert_eq!(out.mass_kg, 0.0);
            assert!(out.temperature_c < last && out.temperature_c > 10.0);
            last = out.temperature_c;
        }
    }

    #[test]
    fn pipe_conserves_mass() {
        let mut pipe = PipeLoop::new(880.0, 2e-4, 0.13, 0.0, 10.0, 40.0).unwrap();
        let cap = pipe.capacity_kg();
        for k in 0..5000 {
            pipe.step_pipe(40.0 + (k % 7) as f64, 0.7).unwrap();
            assert!((pipe.total_mass_kg() - cap).abs() < 1e-9 * cap);
        }
    }

    #[test]
    fn cres_signs() {
        let mut s = CresThermalState::new(&CresConfig { ua_w_per_k: 0.0, demand_kw: 0.0, ..Default::default() });
        s.step_cres(false, 0.0, 1.0).unwrap();
        assert_eq!(s.temperature_c, 20.0);

        let mut s = CresThermalState::new(&CresConfig { ua_w_per_k: 0.0, ..Default::default() });
        let before = s.temperature_c;
        s.step_cres(true, 28.8, 1.0).unwrap();
        assert!(s.temperature_c > before);
        assert_eq!(s.p_th_cres_kw, 28.8);

        let before = s.temperature_c;
        s.step_cres(false, 28.8, 1.0).unwrap();
        assert!(s.temperature_c < before);
        assert_eq!(s.p_th_cres_kw, 0.0);
        assert!(s.step_cres(true, 1.0, -1.0).is_err());
    }
}
