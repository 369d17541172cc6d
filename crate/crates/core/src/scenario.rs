//! Scenario configuration and the end-to-end pipeline.
//!
//! A scenario is TOML in which every dimensional value is a string carrying
//! its unit (`y = "-1.11um"`). Keys left out take their values from a preset
//! (`paper-default` unless the file names another with `preset = "..."`).

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::{IntegratorSettings, MaterialParams, SpinCoupling};
use crate::entanglement::{
    phase_integral, sweep_decoherence, sweep_distance, DecoherenceSweep, DipoleField, DistanceSweep, Interaction,
};
use crate::error::{Error, Result};
use crate::fields::{find_equilibrium, trap_frequencies, EquilibriumOptions, TrapCoefficients};
use crate::interferometry::{
    build_schedule, eta_for_pulse_time, pair_interferometers, pulse_time, simulate_interferometer, tune_closure,
    ClosureReport, ClosureTolerances, FreeParameter, Interferometer, InterferometerConfig, PairGeometry, PulseSchedule,
    TuneOptions, TuneOutcome,
};
use crate::output::{self, key_values, Manifest, ManifestStatus};
use crate::units::{format_quantity, parse_quantity, Dimension};

/// Environment variable that overrides the scenario's output directory.
pub const OUT_DIR_ENV: &str = "SGSIM_OUT_DIR";

pub const PRESETS: [&str; 2] = ["paper-default", "paper-two-oscillation"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Spacing {
    Linear,
    Log,
}

/// `points` values from `min` to `max` inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub min: f64,
    pub max: f64,
    pub points: usize,
    pub spacing: Spacing,
}

impl Grid {
    pub fn values(&self) -> Vec<f64> {
        let n = self.points;
        if n == 1 {
            return vec![self.min];
        }
        (0..n)
            .map(|k| {
                if k + 1 == n {
                    return self.max;
                }
                let f = k as f64 / (n - 1) as f64;
                match self.spacing {
                    Spacing::Linear => self.min + (self.max - self.min) * f,
                    Spacing::Log => (self.min.ln() + (self.max / self.min).ln() * f).exp(),
                }
            })
            .collect()
    }

    fn validate(&self, key: &str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min <= self.max) {
            return Err(Error::validation(key, "need finite min <= max"));
        }
        if self.points == 0 {
            return Err(Error::validation(format!("{key}.points"), "must be at least 1"));
        }
        if self.spacing == Spacing::Log && !(self.min > 0.0) {
            return Err(Error::validation(
                format!("{key}.min"),
                "log spacing needs a positive minimum",
            ));
        }
        Ok(())
    }
}

/// Which closure knob to tune, within which interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuningSpec {
    pub free: FreeParameter,
    /// Defaults: `t_T` within 10% of the nearest closing half z period;
    /// `a3` and `eta` within 20% of their configured values.
    pub bracket: Option<(f64, f64)>,
    pub max_iterations: usize,
}

impl TuningSpec {
    pub fn new(free: FreeParameter) -> Self {
        Self {
            free,
            bracket: None,
            max_iterations: 100,
        }
    }
}

/// Phase fed into the decoherence sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WitnessSource {
    /// Whichever interaction has the larger phase magnitude at the pair distance.
    Dominant,
    Only(Interaction),
}

/// A fully specified, validated run, in SI units.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub material: MaterialParams,
    pub trap: TrapCoefficients,
    /// T/m
    pub eta: f64,
    /// Pulse duration, s. Derived from `eta` unless configured.
    pub t_p: f64,
    /// m/s^2, along -y
    pub gravity: f64,
    pub spin_in_trap: bool,
    pub dt: f64,
    pub initial_y: f64,
    pub n_z_oscillations: u32,
    /// Overrides the `n` z-period trap time when set.
    pub t_trap: Option<f64>,
    pub tolerances: ClosureTolerances,
    pub tuning: Option<TuningSpec>,
    pub pair_distance: f64,
    pub dd_field: DipoleField,
    pub distance_grid: Grid,
    pub gamma_grid: Grid,
    pub damping_fraction: f64,
    pub witness: WitnessSource,
    pub output_dir: PathBuf,
    pub trajectory_stride: usize,
}

impl Scenario {
    pub fn preset(name: &str) -> Result<Self> {
        let material = MaterialParams::paper_default();
        let t_p = 160e-6;
        let base = Scenario {
            name: name.to_string(),
            material,
            trap: TrapCoefficients::paper_default(),
            eta: eta_for_pulse_time(t_p, &material),
            t_p,
            gravity: crate::constants::G_ACCEL,
            spin_in_trap: true,
            dt: 80e-9,
            initial_y: -1.11e-6,
            n_z_oscillations: 1,
            t_trap: None,
            tolerances: ClosureTolerances::default(),
            tuning: Some(TuningSpec::new(FreeParameter::TrapTime)),
            pair_distance: 20e-6,
            dd_field: DipoleField::TimeDependent,
            distance_grid: Grid {
                min: 2e-6,
                max: 50e-6,
                points: 64,
                spacing: Spacing::Log,
            },
            gamma_grid: Grid {
                min: 0.0,
                max: 2.0,
                points: 128,
                spacing: Spacing::Linear,
            },
            damping_fraction: 0.0,
            witness: WitnessSource::Dominant,
            output_dir: PathBuf::from("out"),
            trajectory_stride: 100,
        };
        match name {
            "paper-default" => Ok(base),
            "paper-two-oscillation" => Ok(Scenario {
                n_z_oscillations: 2,
                ..base
            }),
            other => Err(Error::validation(
                "preset",
                format!("unknown preset `{other}` (known: {})", PRESETS.join(", ")),
            )),
        }
    }

    /// Parse TOML. `default_preset` is the base when the text names none.
    pub fn from_toml(text: &str, default_preset: Option<&str>) -> Result<Self> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| Error::Parse(e.message().to_string()))?;
        let named = raw.preset.clone();
        let preset = match (named.as_deref(), default_preset) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::validation(
                    "preset",
                    format!("file says `{a}` but `{b}` was requested"),
                ))
            }
            (Some(a), _) => a,
            (None, Some(b)) => b,
            (None, None) => "paper-default",
        };
        let base = Scenario::preset(preset)?;
        let s = raw.apply(base)?;
        s.validate()?;
        Ok(s)
    }

    /// Serialize every field explicitly; [`from_toml`](Self::from_toml) reads it back unchanged.
    pub fn to_toml(&self) -> String {
        self.to_toml_inner(true)
    }

    /// As [`to_toml`](Self::to_toml) but without the output directory, so
    /// the text does not depend on where a run was written.
    pub fn to_toml_portable(&self) -> String {
        self.to_toml_inner(false)
    }

    fn to_toml_inner(&self, with_output: bool) -> String {
        let raw = RawScenario::from_scenario(self, with_output);
        toml::to_string(&raw).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.material.validate()?;
        if !(1e-22..=1e-14).contains(&self.material.mass) {
            return Err(Error::validation("material.mass", "must lie in [1e-22, 1e-14] kg"));
        }
        TrapCoefficients::new(self.trap.a2, self.trap.a3, self.trap.a4, self.trap.y0)?;
        if !(self.eta > 0.0 && self.eta <= 1e7) {
            return Err(Error::validation("pulse.eta", "must lie in (0, 1e7] T/m"));
        }
        if !(self.t_p > 0.0 && self.t_p.is_finite()) {
            return Err(Error::validation("pulse.t_p", "must be positive"));
        }
        if !(self.gravity.is_finite()) {
            return Err(Error::validation("dynamics.gravity", "must be finite"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::validation("dynamics.dt", "must be positive"));
        }
        if !(self.initial_y.abs() < self.trap.y0) {
            return Err(Error::validation("initial.y", "must lie inside the trap (|y| < y0)"));
        }
        if self.n_z_oscillations == 0 {
            return Err(Error::validation("schedule.n_z_oscillations", "must be at least 1"));
        }
        if let Some(t) = self.t_trap {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::validation("schedule.t_trap", "must be non-negative"));
            }
        }
        let tol = &self.tolerances;
        if !(tol.tol_r > 0.0) {
            return Err(Error::validation("closure.tol_r", "must be positive"));
        }
        if !(tol.tol_v > 0.0) {
            return Err(Error::validation("closure.tol_v", "must be positive"));
        }
        if !(tol.weight >= 0.0 && tol.weight.is_finite()) {
            return Err(Error::validation("closure.weight", "must be non-negative"));
        }
        if let Some(t) = &self.tuning {
            if let Some((lo, hi)) = t.bracket {
                if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                    return Err(Error::validation("closure.bracket", "need finite lo < hi"));
                }
            }
            if t.max_iterations == 0 {
                return Err(Error::validation("closure.max_iterations", "must be at least 1"));
            }
        }
        if !(self.pair_distance > 0.0 && self.pair_distance.is_finite()) {
            return Err(Error::validation("pair.d", "must be positive"));
        }
        if let DipoleField::Frozen(b) = self.dd_field {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::validation("pair.frozen_field", "must be non-negative"));
            }
        }
        self.distance_grid.validate("sweep.distance")?;
        if !(self.distance_grid.min > 0.0) {
            return Err(Error::validation("sweep.distance.min", "must be positive"));
        }
        self.gamma_grid.validate("sweep.gamma")?;
        if !(self.gamma_grid.min >= 0.0) {
            return Err(Error::validation("sweep.gamma.min", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.damping_fraction) {
            return Err(Error::validation("sweep.gamma.damping_fraction", "must lie in [0, 1]"));
        }
        if self.trajectory_stride == 0 {
            return Err(Error::validation("trajectory_stride", "must be at least 1"));
        }
        Ok(())
    }

    /// Output directory after applying the environment override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }
}

/// Read and validate a scenario file.
pub fn load_scenario(path: &Path, default_preset: Option<&str>) -> Result<Scenario> {
    let text = fs::read_to_string(path)?;
    Scenario::from_toml(&text, default_preset)
}

// TOML representation: every field optional, dimensional values as strings.

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(skip_serializing_if = "Option::is_none")]
    preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    output_dir: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trajectory_stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    material: Option<RawMaterial>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trap: Option<RawTrap>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pulse: Option<RawPulse>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dynamics: Option<RawDynamics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    initial: Option<RawInitial>,
    #[serde(skip_serializing_if = "Option::is_none")]
    schedule: Option<RawSchedule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    closure: Option<RawClosure>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pair: Option<RawPair>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<RawSweep>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMaterial {
    mass: Option<String>,
    density: Option<String>,
    chi_rho: Option<String>,
    epsilon: Option<f64>,
    g_s: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrap {
    a2: Option<String>,
    a3: Option<String>,
    a4: Option<String>,
    y0: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPulse {
    eta: Option<String>,
    t_p: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDynamics {
    gravity: Option<String>,
    spin_in_trap: Option<bool>,
    dt: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitial {
    y: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    n_z_oscillations: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    t_trap: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClosure {
    tol_r: Option<String>,
    tol_v: Option<String>,
    weight: Option<String>,
    /// `t_T`, `a3`, `eta` or `none`.
    tune: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bracket: Option<[String; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_iterations: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPair {
    d: Option<String>,
    /// `time_dependent` or `frozen`.
    dd_field: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    frozen_field: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    distance: Option<RawDistanceGrid>,
    gamma: Option<RawGammaGrid>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDistanceGrid {
    min: Option<String>,
    max: Option<String>,
    points: Option<usize>,
    /// `log` or `linear`.
    spacing: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGammaGrid {
    min: Option<f64>,
    max: Option<f64>,
    points: Option<usize>,
    damping_fraction: Option<f64>,
    /// `dominant`, `cp` or `dd`.
    interaction: Option<String>,
}

fn quantity(key: &str, raw: &Option<String>, dim: Dimension, target: &mut f64) -> Result<()> {
    if let Some(s) = raw {
        *target = parse_quantity(s, dim).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{key}: {msg}")),
            other => other,
        })?;
    }
    Ok(())
}

fn free_dimension(free: FreeParameter) -> Dimension {
    match free {
        FreeParameter::TrapTime => Dimension::Time,
        FreeParameter::A3 => Dimension::Field,
        FreeParameter::Eta => Dimension::Gradient,
    }
}

fn interaction_label(w: WitnessSource) -> &'static str {
    match w {
        WitnessSource::Dominant => "dominant",
        WitnessSource::Only(i) => i.label(),
    }
}

impl RawScenario {
    fn apply(self, mut s: Scenario) -> Result<Scenario> {
        if let Some(n) = self.name {
            s.name = n;
        }
        if let Some(d) = self.output_dir {
            s.output_dir = PathBuf::from(d);
        }
        if let Some(k) = self.trajectory_stride {
            s.trajectory_stride = k;
        }
        if let Some(m) = self.material {
            quantity("material.mass", &m.mass, Dimension::Mass, &mut s.material.mass)?;
            quantity(
                "material.density",
                &m.density,
                Dimension::Density,
                &mut s.material.density,
            )?;
            quantity(
                "material.chi_rho",
                &m.chi_rho,
                Dimension::Susceptibility,
                &mut s.material.chi_rho,
            )?;
            if let Some(e) = m.epsilon {
                s.material.epsilon = e;
            }
            if let Some(g) = m.g_s {
                s.material.g_s = g;
            }
        }
        if let Some(t) = self.trap {
            quantity("trap.a2", &t.a2, Dimension::Field, &mut s.trap.a2)?;
            quantity("trap.a3", &t.a3, Dimension::Field, &mut s.trap.a3)?;
            quantity("trap.a4", &t.a4, Dimension::Field, &mut s.trap.a4)?;
            quantity("trap.y0", &t.y0, Dimension::Length, &mut s.trap.y0)?;
        }
        // The pulse duration is the quarter period of the pulse trap unless
        // both are given; the preset's t_p is kept when neither is.
        s.material.validate()?;
        let pulse = self.pulse.unwrap_or_default();
        match (&pulse.eta, &pulse.t_p) {
            (Some(_), Some(_)) => {
                quantity("pulse.eta", &pulse.eta, Dimension::Gradient, &mut s.eta)?;
                quantity("pulse.t_p", &pulse.t_p, Dimension::Time, &mut s.t_p)?;
            }
            (Some(_), None) => {
                quantity("pulse.eta", &pulse.eta, Dimension::Gradient, &mut s.eta)?;
                if s.eta > 0.0 {
                    s.t_p = pulse_time(s.eta, &s.material);
                }
            }
            (None, t_p) => {
                quantity("pulse.t_p", t_p, Dimension::Time, &mut s.t_p)?;
                if s.t_p > 0.0 {
                    s.eta = eta_for_pulse_time(s.t_p, &s.material);
                }
            }
        }
        if let Some(d) = self.dynamics {
            quantity("dynamics.gravity", &d.gravity, Dimension::Acceleration, &mut s.gravity)?;
            quantity("dynamics.dt", &d.dt, Dimension::Time, &mut s.dt)?;
            if let Some(b) = d.spin_in_trap {
                s.spin_in_trap = b;
            }
        }
        if let Some(i) = self.initial {
            quantity("initial.y", &i.y, Dimension::Length, &mut s.initial_y)?;
        }
        if let Some(sc) = self.schedule {
            if let Some(n) = sc.n_z_oscillations {
                s.n_z_oscillations = n;
            }
            if sc.t_trap.is_some() {
                let mut t = 0.0;
                quantity("schedule.t_trap", &sc.t_trap, Dimension::Time, &mut t)?;
                s.t_trap = Some(t);
            }
        }
        if let Some(c) = self.closure {
            quantity("closure.tol_r", &c.tol_r, Dimension::Length, &mut s.tolerances.tol_r)?;
            quantity("closure.tol_v", &c.tol_v, Dimension::Velocity, &mut s.tolerances.tol_v)?;
            quantity(
                "closure.weight",
                &c.weight,
                Dimension::TimeSquared,
                &mut s.tolerances.weight,
            )?;
            if let Some(t) = c.tune.as_deref() {
                s.tuning = match t {
                    "none" => None,
                    other => {
                        let free = FreeParameter::parse(other)
                            .map_err(|_| Error::validation("closure.tune", format!("unknown parameter `{other}`")))?;
                        Some(TuningSpec::new(free))
                    }
                };
            }
            if let Some(spec) = s.tuning.as_mut() {
                if let Some([lo, hi]) = &c.bracket {
                    let dim = free_dimension(spec.free);
                    let (mut a, mut b) = (0.0, 0.0);
                    quantity("closure.bracket", &Some(lo.clone()), dim, &mut a)?;
                    quantity("closure.bracket", &Some(hi.clone()), dim, &mut b)?;
                    spec.bracket = Some((a, b));
                }
                if let Some(n) = c.max_iterations {
                    spec.max_iterations = n;
                }
            } else if c.bracket.is_some() {
                return Err(Error::validation("closure.bracket", "given but tuning is off"));
            }
        }
        if let Some(p) = self.pair {
            quantity("pair.d", &p.d, Dimension::Length, &mut s.pair_distance)?;
            let mut frozen = match s.dd_field {
                DipoleField::Frozen(b) => b,
                DipoleField::TimeDependent => 0.0,
            };
            quantity("pair.frozen_field", &p.frozen_field, Dimension::Field, &mut frozen)?;
            match p.dd_field.as_deref() {
                None => {
                    if p.frozen_field.is_some() {
                        s.dd_field = DipoleField::Frozen(frozen);
                    }
                }
                Some("time_dependent") => s.dd_field = DipoleField::TimeDependent,
                Some("frozen") => {
                    if p.frozen_field.is_none() && !matches!(s.dd_field, DipoleField::Frozen(_)) {
                        return Err(Error::validation(
                            "pair.frozen_field",
                            "required when dd_field = \"frozen\"",
                        ));
                    }
                    s.dd_field = DipoleField::Frozen(frozen);
                }
                Some(other) => {
                    return Err(Error::validation(
                        "pair.dd_field",
                        format!("`{other}` is not `time_dependent` or `frozen`"),
                    ))
                }
            }
        }
        if let Some(sw) = self.sweep {
            if let Some(d) = sw.distance {
                quantity(
                    "sweep.distance.min",
                    &d.min,
                    Dimension::Length,
                    &mut s.distance_grid.min,
                )?;
                quantity(
                    "sweep.distance.max",
                    &d.max,
                    Dimension::Length,
                    &mut s.distance_grid.max,
                )?;
                if let Some(n) = d.points {
                    s.distance_grid.points = n;
                }
                match d.spacing.as_deref() {
                    None => {}
                    Some("log") => s.distance_grid.spacing = Spacing::Log,
                    Some("linear") => s.distance_grid.spacing = Spacing::Linear,
                    Some(other) => {
                        return Err(Error::validation(
                            "sweep.distance.spacing",
                            format!("`{other}` is not `log` or `linear`"),
                        ))
                    }
                }
            }
            if let Some(g) = sw.gamma {
                if let Some(v) = g.min {
                    s.gamma_grid.min = v;
                }
                if let Some(v) = g.max {
                    s.gamma_grid.max = v;
                }
                if let Some(n) = g.points {
                    s.gamma_grid.points = n;
                }
                if let Some(f) = g.damping_fraction {
                    s.damping_fraction = f;
                }
                match g.interaction.as_deref() {
                    None => {}
                    Some("dominant") => s.witness = WitnessSource::Dominant,
                    Some("cp") => s.witness = WitnessSource::Only(Interaction::CasimirPolder),
                    Some("dd") => s.witness = WitnessSource::Only(Interaction::DipoleDipole),
                    Some(other) => {
                        return Err(Error::validation(
                            "sweep.gamma.interaction",
                            format!("`{other}` is not `dominant`, `cp` or `dd`"),
                        ))
                    }
                }
            }
        }
        Ok(s)
    }

    fn from_scenario(s: &Scenario, with_output: bool) -> Self {
        use Dimension::*;
        let q = |v: f64, d: Dimension| Some(format_quantity(v, d));
        RawScenario {
            preset: None,
            name: Some(s.name.clone()),
            output_dir: with_output.then(|| s.output_dir.to_string_lossy().into_owned()),
            trajectory_stride: Some(s.trajectory_stride),
            material: Some(RawMaterial {
                mass: q(s.material.mass, Mass),
                density: q(s.material.density, Density),
                chi_rho: q(s.material.chi_rho, Susceptibility),
                epsilon: Some(s.material.epsilon),
                g_s: Some(s.material.g_s),
            }),
            trap: Some(RawTrap {
                a2: q(s.trap.a2, Field),
                a3: q(s.trap.a3, Field),
                a4: q(s.trap.a4, Field),
                y0: q(s.trap.y0, Length),
            }),
            pulse: Some(RawPulse {
                eta: q(s.eta, Gradient),
                t_p: q(s.t_p, Time),
            }),
            dynamics: Some(RawDynamics {
                gravity: q(s.gravity, Acceleration),
                spin_in_trap: Some(s.spin_in_trap),
                dt: q(s.dt, Time),
            }),
            initial: Some(RawInitial {
                y: q(s.initial_y, Length),
            }),
            schedule: Some(RawSchedule {
                n_z_oscillations: Some(s.n_z_oscillations),
                t_trap: s.t_trap.map(|t| format_quantity(t, Time)),
            }),
            closure: Some(RawClosure {
                tol_r: q(s.tolerances.tol_r, Length),
                tol_v: q(s.tolerances.tol_v, Velocity),
                weight: q(s.tolerances.weight, TimeSquared),
                tune: Some(match &s.tuning {
                    None => "none".to_string(),
                    Some(t) => free_label(t.free).to_string(),
                }),
                bracket: s.tuning.and_then(|t| {
                    let d = free_dimension(t.free);
                    t.bracket.map(|(a, b)| [format_quantity(a, d), format_quantity(b, d)])
                }),
                max_iterations: s.tuning.map(|t| t.max_iterations),
            }),
            pair: Some(RawPair {
                d: q(s.pair_distance, Length),
                dd_field: Some(
                    match s.dd_field {
                        DipoleField::TimeDependent => "time_dependent",
                        DipoleField::Frozen(_) => "frozen",
                    }
                    .to_string(),
                ),
                frozen_field: match s.dd_field {
                    DipoleField::Frozen(b) => q(b, Field),
                    DipoleField::TimeDependent => None,
                },
            }),
            sweep: Some(RawSweep {
                distance: Some(RawDistanceGrid {
                    min: q(s.distance_grid.min, Length),
                    max: q(s.distance_grid.max, Length),
                    points: Some(s.distance_grid.points),
                    spacing: Some(
                        match s.distance_grid.spacing {
                            Spacing::Log => "log",
                            Spacing::Linear => "linear",
                        }
                        .to_string(),
                    ),
                }),
                gamma: Some(RawGammaGrid {
                    min: Some(s.gamma_grid.min),
                    max: Some(s.gamma_grid.max),
                    points: Some(s.gamma_grid.points),
                    damping_fraction: Some(s.damping_fraction),
                    interaction: Some(interaction_label(s.witness).to_string()),
                }),
            }),
        }
    }
}

fn free_label(free: FreeParameter) -> &'static str {
    match free {
        FreeParameter::TrapTime => "t_T",
        FreeParameter::A3 => "a3",
        FreeParameter::Eta => "eta",
    }
}

// Pipeline stages.

/// Static characterization and the initial schedule.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub equilibrium: Vector3<f64>,
    /// rad/s
    pub omega: Vector3<f64>,
    pub config: InterferometerConfig,
}

/// Equilibrium, trap frequencies and the untuned schedule.
pub fn prepare(s: &Scenario) -> Result<Prepared> {
    let guess = Vector3::new(0.0, s.initial_y, 0.0);
    let equilibrium = find_equilibrium(&s.trap, &s.material, s.gravity, &guess, &EquilibriumOptions::default())
        .map_err(|e| e.at_stage("equilibrium"))?;
    let omega = trap_frequencies(&s.trap, &s.material, &equilibrium).map_err(|e| e.at_stage("frequencies"))?;
    let schedule = match s.t_trap {
        Some(t) => PulseSchedule::new(s.t_p, t),
        // t_p comes from the scenario; it equals pulse_time(eta) unless set explicitly.
        None => build_schedule(s.eta, &s.material, s.n_z_oscillations, omega.z)
            .and_then(|b| PulseSchedule::new(s.t_p, b.t_trap)),
    }
    .map_err(|e| e.at_stage("schedule"))?;
    let config = InterferometerConfig {
        trap: s.trap,
        material: s.material,
        gravity: s.gravity,
        spin: SpinCoupling {
            in_trap: s.spin_in_trap,
            ..SpinCoupling::default()
        },
        eta: s.eta,
        initial_y: s.initial_y,
        schedule,
        integrator: IntegratorSettings { dt: s.dt },
        tolerances: s.tolerances,
    };
    Ok(Prepared {
        equilibrium,
        omega,
        config,
    })
}

/// Trap time of the `n`-th classical closure: an odd number of half z periods.
pub fn closing_trap_time(n_z_oscillations: u32, omega_z: f64) -> f64 {
    (f64::from(n_z_oscillations) - 0.5) * TAU / omega_z
}

/// Tune closure as configured: `t_T` first, then the joint search when the
/// free parameter is `a3` or `eta`.
pub fn tune(s: &Scenario, prepared: &Prepared, spec: &TuningSpec) -> Result<TuneOutcome> {
    let t_close = closing_trap_time(s.n_z_oscillations, prepared.omega.z);
    let t_bracket = match (spec.free, spec.bracket) {
        (FreeParameter::TrapTime, Some(b)) => b,
        _ => (0.9 * t_close, 1.1 * t_close),
    };
    let first = tune_closure(
        &prepared.config,
        FreeParameter::TrapTime,
        &TuneOptions {
            bracket: t_bracket,
            max_iterations: spec.max_iterations,
        },
    )?;
    if spec.free == FreeParameter::TrapTime || first.humpty_dumpty_ok {
        return Ok(first);
    }
    let value = spec.free.get(&first.config);
    let bracket = spec.bracket.unwrap_or_else(|| {
        let (a, b) = (0.8 * value, 1.2 * value);
        (a.min(b), a.max(b))
    });
    let mut out = tune_closure(
        &first.config,
        spec.free,
        &TuneOptions {
            bracket,
            max_iterations: spec.max_iterations,
        },
    )?;
    out.iterations += first.iterations;
    Ok(out)
}

/// Simulate the scheduled interferometer and, if requested, the tuned one.
pub struct Solved {
    pub scheduled: ClosureReport,
    pub tuned: Option<TuneOutcome>,
    pub interferometer: Arc<Interferometer>,
}

pub fn solve(s: &Scenario, prepared: &Prepared) -> Result<Solved> {
    let first = simulate_interferometer(&prepared.config).map_err(|e| e.at_stage("simulate"))?;
    let scheduled = first.closure;
    let Some(spec) = &s.tuning else {
        return Ok(Solved {
            scheduled,
            tuned: None,
            interferometer: Arc::new(first),
        });
    };
    drop(first);
    let outcome = tune(s, prepared, spec).map_err(|e| e.at_stage("tune"))?;
    let tuned = simulate_interferometer(&outcome.config).map_err(|e| e.at_stage("simulate"))?;
    Ok(Solved {
        scheduled,
        tuned: Some(outcome),
        interferometer: Arc::new(tuned),
    })
}

/// Entanglement phases at one separation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairPhases {
    pub d: f64,
    pub cp: f64,
    pub dd: f64,
}

impl PairPhases {
    /// The phase the witness uses and which interaction it came from.
    ///
    /// The sign of each phase only records which arm pairing is closer, so
    /// the witness is evaluated on the magnitude.
    pub fn witness_phase(&self, source: WitnessSource) -> (Interaction, f64) {
        let pick = match source {
            WitnessSource::Only(i) => i,
            WitnessSource::Dominant if self.dd.abs() > self.cp.abs() => Interaction::DipoleDipole,
            WitnessSource::Dominant => Interaction::CasimirPolder,
        };
        match pick {
            Interaction::CasimirPolder => (pick, self.cp.abs()),
            Interaction::DipoleDipole => (pick, self.dd.abs()),
        }
    }
}

pub fn pair_phases(one: &Arc<Interferometer>, d: f64, dd_field: DipoleField) -> Result<PairPhases> {
    let pair = pair_interferometers(one.clone(), d, PairGeometry::ParallelXOffset).map_err(|e| e.at_stage("pair"))?;
    let phase = |i| {
        phase_integral(&pair, i, dd_field)
            .map(|p| p.delta_phi)
            .map_err(|e| e.at_stage("phases"))
    };
    Ok(PairPhases {
        d,
        cp: phase(Interaction::CasimirPolder)?,
        dd: phase(Interaction::DipoleDipole)?,
    })
}

pub fn run_distance_sweep(s: &Scenario, one: &Arc<Interferometer>) -> Result<DistanceSweep> {
    sweep_distance(one, &s.distance_grid.values(), s.dd_field).map_err(|e| e.at_stage("sweeps"))
}

pub fn run_gamma_sweep(s: &Scenario, phases: &PairPhases) -> Result<(Interaction, DecoherenceSweep)> {
    let (interaction, dphi) = phases.witness_phase(s.witness);
    let sweep =
        sweep_decoherence(dphi, &s.gamma_grid.values(), s.damping_fraction).map_err(|e| e.at_stage("sweeps"))?;
    Ok((interaction, sweep))
}

/// Headline numbers of a pipeline run.
#[derive(Debug, Clone)]
pub struct Summary {
    pub scenario: String,
    pub equilibrium: Vector3<f64>,
    pub omega: Vector3<f64>,
    pub scheduled: PulseSchedule,
    pub scheduled_closure: ClosureReport,
    pub tuned_free: Option<FreeParameter>,
    pub tune_iterations: usize,
    pub schedule: PulseSchedule,
    pub eta: f64,
    pub closure: ClosureReport,
    pub phases: PairPhases,
    pub witness_interaction: Interaction,
    pub witness_phase: f64,
    pub crossover: Option<f64>,
    pub gamma_star: Option<f64>,
    pub damping_fraction: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

impl Summary {
    pub fn render(&self) -> String {
        key_values(&[
            ("scenario", self.scenario.clone()),
            ("equilibrium_y", self.equilibrium.y.to_string()),
            ("omega_x", self.omega.x.to_string()),
            ("omega_y", self.omega.y.to_string()),
            ("omega_z", self.omega.z.to_string()),
            ("scheduled_t_T", self.scheduled.t_trap.to_string()),
            ("scheduled_T_total", self.scheduled.t_total.to_string()),
            ("scheduled_dr", self.scheduled_closure.dr.to_string()),
            ("scheduled_dv", self.scheduled_closure.dv.to_string()),
            ("tuned_free", self.tuned_free.map_or("none", free_label).to_string()),
            ("tune_iterations", self.tune_iterations.to_string()),
            ("t_p", self.schedule.t_p.to_string()),
            ("t_T", self.schedule.t_trap.to_string()),
            ("T_total", self.schedule.t_total.to_string()),
            ("eta", self.eta.to_string()),
            ("dr", self.closure.dr.to_string()),
            ("dv", self.closure.dv.to_string()),
            ("max_split", self.closure.max_split.to_string()),
            ("humpty_dumpty_ok", self.closure.humpty_dumpty_ok.to_string()),
            ("d", self.phases.d.to_string()),
            ("dphi_cp", self.phases.cp.to_string()),
            ("dphi_dd", self.phases.dd.to_string()),
            ("witness_interaction", self.witness_interaction.label().to_string()),
            ("witness_dphi", self.witness_phase.to_string()),
            ("d_star", opt(self.crossover)),
            ("gamma_star", opt(self.gamma_star)),
            ("damping_fraction", self.damping_fraction.to_string()),
        ])
    }
}

pub fn closure_report_text(schedule: &PulseSchedule, eta: f64, c: &ClosureReport) -> String {
    key_values(&[
        ("dr", c.dr.to_string()),
        ("dv", c.dv.to_string()),
        ("max_split", c.max_split.to_string()),
        ("T_total", schedule.t_total.to_string()),
        ("t_p", schedule.t_p.to_string()),
        ("t_T", schedule.t_trap.to_string()),
        ("eta", eta.to_string()),
        ("return_dr", c.return_dr.to_string()),
        ("min_trap_field", c.min_trap_field.to_string()),
        ("humpty_dumpty_ok", c.humpty_dumpty_ok.to_string()),
    ])
}

/// Everything a pipeline run produced.
pub struct PipelineOutput {
    pub manifest: Manifest,
    pub summary: Summary,
    pub interferometer: Arc<Interferometer>,
    pub distance_sweep: DistanceSweep,
    pub gamma_sweep: DecoherenceSweep,
}

/// Run every stage and write all artifacts into `out_dir`.
///
/// Artifacts are written as soon as their stage finishes. If a later stage
/// fails, the manifest is still written, marked partial with the stage name.
pub fn run_pipeline(s: &Scenario, out_dir: &Path) -> Result<PipelineOutput> {
    s.validate()?;
    let mut manifest = Manifest::new(out_dir)?;
    match run_stages(s, &mut manifest) {
        Ok((summary, interferometer, distance_sweep, gamma_sweep)) => {
            manifest.finalize()?;
            Ok(PipelineOutput {
                manifest,
                summary,
                interferometer,
                distance_sweep,
                gamma_sweep,
            })
        }
        Err(e) => {
            let stage = match &e {
                Error::Stage { stage, .. } => stage.to_string(),
                _ => "emit".to_string(),
            };
            manifest.status = ManifestStatus::Partial { failed_stage: stage };
            manifest.finalize()?;
            Err(e)
        }
    }
}

type StageResults = (Summary, Arc<Interferometer>, DistanceSweep, DecoherenceSweep);

fn run_stages(s: &Scenario, manifest: &mut Manifest) -> Result<StageResults> {
    manifest.emit("scenario.toml", s.to_toml_portable().as_bytes())?;
    let prepared = prepare(s)?;
    let solved = solve(s, &prepared)?;
    let one = solved.interferometer.clone();
    let cfg = &one.config;

    let stride = s.trajectory_stride;
    manifest.emit_with("trajectory_plus.csv", |b| {
        output::write_trajectory(b, &one.plus_arm, stride)
    })?;
    manifest.emit_with("trajectory_minus.csv", |b| {
        output::write_trajectory(b, &one.minus_arm, stride)
    })?;
    manifest.emit(
        "closure.txt",
        closure_report_text(&one.schedule, cfg.eta, &one.closure).as_bytes(),
    )?;

    let pair = pair_interferometers(one.clone(), s.pair_distance, PairGeometry::ParallelXOffset)
        .map_err(|e| e.at_stage("pair"))?;
    manifest.emit_with("separation.csv", |b| {
        output::write_separations(b, &pair.separations, stride)
    })?;
    drop(pair);

    let phases = pair_phases(&one, s.pair_distance, s.dd_field)?;
    manifest.emit(
        "phases.csv",
        format!(
            "interaction,d_um,delta_phi_rad\ncp,{d},{cp}\ndd,{d},{dd}\n",
            d = phases.d * 1e6,
            cp = phases.cp,
            dd = phases.dd
        )
        .as_bytes(),
    )?;

    let distance_sweep = run_distance_sweep(s, &one)?;
    manifest.emit_with("sweep_distance.csv", |b| {
        output::write_distance_sweep(b, &distance_sweep)
    })?;
    let (interaction, gamma_sweep) = run_gamma_sweep(s, &phases)?;
    manifest.emit_with("sweep_gamma.csv", |b| output::write_gamma_sweep(b, &gamma_sweep))?;

    let summary = Summary {
        scenario: s.name.clone(),
        equilibrium: prepared.equilibrium,
        omega: prepared.omega,
        scheduled: prepared.config.schedule,
        scheduled_closure: solved.scheduled,
        tuned_free: solved.tuned.as_ref().map(|t| t.free),
        tune_iterations: solved.tuned.as_ref().map_or(0, |t| t.iterations),
        schedule: one.schedule,
        eta: cfg.eta,
        closure: one.closure,
        phases,
        witness_interaction: interaction,
        witness_phase: gamma_sweep.delta_phi,
        crossover: distance_sweep.crossover,
        gamma_star: gamma_sweep.threshold,
        damping_fraction: s.damping_fraction,
    };
    manifest.emit("summary.txt", summary.render().as_bytes())?;
    Ok((summary, one, distance_sweep, gamma_sweep))
}
