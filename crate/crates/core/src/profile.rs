//! Synthetic load and PV profiles as piecewise-linear scale factors.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridModel, Injection};

const DEFAULT_PROFILES: &str = include_str!("../data/profiles.toml");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("profile '{0}' has no points")]
    Empty(String),
    #[error("profile '{0}' times must be strictly increasing and finite")]
    Unordered(String),
    #[error("profile for unknown element '{0}'")]
    UnknownElement(String),
    #[error("profile file: {0}")]
    Parse(String),
}

/// `(time_s, value)` breakpoints with linear interpolation between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PiecewiseLinear {
    pub points: Vec<(f64, f64)>,
}

impl PiecewiseLinear {
    pub fn constant(value: f64) -> Self {
        Self { points: vec![(0.0, value)] }
    }

    fn validate(&self, label: &str) -> Result<(), ProfileError> {
        if self.points.is_empty() {
            return Err(ProfileError::Empty(label.to_string()));
        }
        let ordered = self.points.windows(2).all(|w| w[0].0 < w[1].0);
        let finite = self.points.iter().all(|(t, v)| t.is_finite() && v.is_finite());
        if !ordered || !finite {
            return Err(ProfileError::Unordered(label.to_string()));
        }
        Ok(())
    }

    pub fn end(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.0)
    }

    /// Value at `t`; the flag is set when `t` lies past the last breakpoint
    /// and the final value was held.
    pub fn eval(&self, t: f64) -> (f64, bool) {
        let first = self.points[0];
        if t <= first.0 {
            return (first.1, false);
        }
        let last = *self.points.last().expect("validated non-empty");
        if t > last.0 {
            return (last.1, true);
        }
        let k = self.points.partition_point(|p| p.0 <= t);
        let (t0, v0) = self.points[k - 1];
        if k == self.points.len() {
            return (v0, false);
        }
        let (t1, v1) = self.points[k];
        (v0 + (v1 - v0) * (t - t0) / (t1 - t0), false)
    }
}

/// Scale factors for one scenario. `load` and `pv` apply to every load/PV
/// unless the element has its own entry in `elements`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioProfile {
    pub load: PiecewiseLinear,
    pub pv: PiecewiseLinear,
    #[serde(default)]
    pub elements: BTreeMap<String, PiecewiseLinear>,
}

impl ScenarioProfile {
    pub fn validate(&self, model: &GridModel) -> Result<(), ProfileError> {
        self.load.validate("load")?;
        self.pv.validate("pv")?;
        for (name, series) in &self.elements {
            let known = model.loads.iter().any(|l| &l.name == name)
                || model.pvs.iter().any(|p| &p.name == name);
            if !known {
                return Err(ProfileError::UnknownElement(name.clone()));
            }
            series.validate(name)?;
        }
        Ok(())
    }

    fn series<'a>(&'a self, element: &str, fallback: &'a PiecewiseLinear) -> &'a PiecewiseLinear {
        self.elements.get(element).unwrap_or(fallback)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    pub overvoltage: ScenarioProfile,
    pub undervoltage: ScenarioProfile,
}

impl ProfileSet {
    pub fn parse(text: &str) -> Result<Self, ProfileError> {
        toml::from_str(text).map_err(|e| ProfileError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ProfileError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProfileError::Parse(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn shipped() -> Self {
        Self::parse(DEFAULT_PROFILES).expect("shipped profiles parse")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileInjections {
    pub injections: Vec<Injection>,
    /// Some series was evaluated past its end and held its last value.
    pub time_clamped: bool,
}

/// Load and PV injections at simulated time `t_s`.
pub fn apply_profiles(model: &GridModel, profile: &ScenarioProfile, t_s: f64) -> ProfileInjections {
    let mut time_clamped = false;
    let mut injections = Vec::with_capacity(model.loads.len() + model.pvs.len());
    for load in &model.loads {
        let (scale, held) = profile.series(&load.name, &profile.load).eval(t_s);
        time_clamped |= held;
        injections.push(Injection::new(load.bus, scale * load.p_kw, scale * load.q_kvar));
    }
    for pv in &model.pvs {
        let (scale, held) = profile.series(&pv.name, &profile.pv).eval(t_s);
        time_clamped |= held;
        injections.push(Injection::new(pv.bus, -scale * pv.p_kw, 0.0));
    }
    if time_clamped {
        tracing::warn!(t_s, "profile time beyond last breakpoint; holding final values");
    }
    ProfileInjections { injections, time_clamped }
}
