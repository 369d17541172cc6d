//! Classical spin-dependent equations of motion and their integration.
//!
//! The force on one spin branch follows from the Hamiltonian
//!
//! ```text
//! H = p^2/2m + g_s mu_B S.B + m g y - (chi_rho m / 2 mu0) B^2
//! ```
//!
//! with the spin pinned to a fixed quantization axis (`S = s n`, `s = +-1`),
//! so the spin energy is `s g_s mu_B (B . n)` and its force is
//! `-s g_s mu_B J^T n`. The zero-field splitting term is a constant per
//! branch and exerts no force, so it is dropped.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::constants::{MU_0, MU_B};
use crate::error::{Error, Result};
use crate::fields::{total_jet, FieldJet, PulseConfig, TrapCoefficients};

/// Nanocrystal material properties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    /// kg
    pub mass: f64,
    /// kg / m^3
    pub density: f64,
    /// Mass magnetic susceptibility, m^3 / kg (negative for a diamagnet).
    pub chi_rho: f64,
    /// Relative permittivity.
    pub epsilon: f64,
    /// Electron spin g-factor.
    pub g_s: f64,
}

impl MaterialParams {
    pub fn new(mass: f64, density: f64, chi_rho: f64, epsilon: f64, g_s: f64) -> Result<Self> {
        let m = Self {
            mass,
            density,
            chi_rho,
            epsilon,
            g_s,
        };
        m.validate()?;
        Ok(m)
    }

    /// Nanodiamond used for the published trajectories. Density and
    /// permittivity are bulk diamond values.
    pub fn paper_default() -> Self {
        Self {
            mass: 3.8e-19,
            density: 3500.0,
            chi_rho: -6.2e-9,
            epsilon: 5.7,
            g_s: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(Error::validation("material.mass", "must be positive"));
        }
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(Error::validation("material.density", "must be positive"));
        }
        if !(self.chi_rho < 0.0 && self.chi_rho.is_finite()) {
            return Err(Error::validation("material.chi_rho", "must be negative (diamagnetic)"));
        }
        if !(self.epsilon > 1.0 && self.epsilon.is_finite()) {
            return Err(Error::validation("material.epsilon", "must exceed 1"));
        }
        if !self.g_s.is_finite() {
            return Err(Error::validation("material.g_s", "must be finite"));
        }
        Ok(())
    }

    /// Sphere radius implied by mass and density.
    pub fn radius(&self) -> f64 {
        (3.0 * self.mass / (4.0 * std::f64::consts::PI * self.density)).cbrt()
    }
}

/// NV spin projection carried by one interferometer arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpinBranch {
    PlusOne,
    MinusOne,
}

impl SpinBranch {
    pub const BOTH: [SpinBranch; 2] = [SpinBranch::PlusOne, SpinBranch::MinusOne];

    pub fn sign(self) -> f64 {
        match self {
            SpinBranch::PlusOne => 1.0,
            SpinBranch::MinusOne => -1.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SpinBranch::PlusOne => "plus",
            SpinBranch::MinusOne => "minus",
        }
    }
}

/// Phase-space point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub t: f64,
}

impl ParticleState {
    pub fn at_rest(position: Vector3<f64>) -> Self {
        Self {
            position,
            velocity: Vector3::zeros(),
            t: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().chain(self.velocity.iter()).all(|c| c.is_finite()) && self.t.is_finite()
    }
}

/// How the spin couples to the field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinCoupling {
    /// Unit quantization axis of the NV spin.
    pub axis: Vector3<f64>,
    /// Whether the Zeeman force also acts between pulses.
    pub in_trap: bool,
}

impl Default for SpinCoupling {
    fn default() -> Self {
        Self {
            axis: Vector3::z(),
            in_trap: true,
        }
    }
}

/// Everything needed to evaluate the force on one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceModel {
    pub trap: TrapCoefficients,
    pub pulse: PulseConfig,
    pub material: MaterialParams,
    /// Gravitational acceleration along -y, m/s^2.
    pub gravity: f64,
    pub spin: SpinCoupling,
}

impl ForceModel {
    fn jet(&self, position: &Vector3<f64>, pulse_on: bool) -> FieldJet {
        total_jet(position, &self.trap, &self.pulse, pulse_on)
    }

    fn spin_active(&self, pulse_on: bool) -> bool {
        pulse_on || self.spin.in_trap
    }

    /// Acceleration with the pulse explicitly on or off.
    pub fn acceleration(&self, position: &Vector3<f64>, branch: SpinBranch, pulse_on: bool) -> Vector3<f64> {
        let jet = self.jet(position, pulse_on);
        let m = &self.material;
        let mut a = jet.grad_b_squared() * (m.chi_rho / (2.0 * MU_0));
        if self.spin_active(pulse_on) {
            a -= jet.grad_projection(&self.spin.axis) * (branch.sign() * m.g_s * MU_B / m.mass);
        }
        a.y -= self.gravity;
        a
    }

    /// Acceleration with the pulse state taken from the state's time.
    pub fn acceleration_at(&self, state: &ParticleState, branch: SpinBranch) -> Vector3<f64> {
        self.acceleration(&state.position, branch, self.pulse.is_active(state.t))
    }

    /// Kinetic + gravitational + diamagnetic + spin Zeeman energy, J.
    pub fn energy(&self, state: &ParticleState, branch: SpinBranch, pulse_on: bool) -> f64 {
        let m = &self.material;
        let b = self.jet(&state.position, pulse_on).b;
        let mut e = 0.5 * m.mass * state.velocity.norm_squared() + m.mass * self.gravity * state.position.y
            - m.chi_rho * m.mass / (2.0 * MU_0) * b.norm_squared();
        if self.spin_active(pulse_on) {
            e += branch.sign() * m.g_s * MU_B * b.dot(&self.spin.axis);
        }
        e
    }
}

/// Fixed-step integrator settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorSettings {
    /// Largest allowed step, s. Each constant-field segment is split into
    /// the fewest equal steps not exceeding this.
    pub dt: f64,
}

/// Time series of one spin branch.
#[derive(Debug, Clone)]
pub struct ArmTrajectory {
    pub branch: SpinBranch,
    pub samples: Vec<ParticleState>,
    pub settings: IntegratorSettings,
}

impl ArmTrajectory {
    pub fn first(&self) -> &ParticleState {
        &self.samples[0]
    }

    pub fn last(&self) -> &ParticleState {
        self.samples.last().expect("trajectory is never empty")
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.t)
    }
}

/// One interval of constant field configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub t0: f64,
    pub t1: f64,
    pub pulse_on: bool,
}

impl Segment {
    /// Number of equal steps and their size for a nominal `dt`.
    pub fn steps(&self, dt: f64) -> (usize, f64) {
        let len = self.t1 - self.t0;
        let n = ((len / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        (n, len / n as f64)
    }
}

/// Split `[0, t_total]` at every pulse switch.
pub fn segments(pulse: &PulseConfig, t_total: f64) -> Result<Vec<Segment>> {
    if !(t_total > 0.0 && t_total.is_finite()) {
        return Err(Error::ScheduleMisaligned(format!(
            "total time {t_total} must be positive"
        )));
    }
    let mut out = Vec::with_capacity(2 * pulse.windows.len() + 1);
    let mut cursor = 0.0;
    for &(on, off) in &pulse.windows {
        if on < cursor || off > t_total || !(on < off) {
            return Err(Error::ScheduleMisaligned(format!(
                "window ({on}, {off}) does not fit in [{cursor}, {t_total}]"
            )));
        }
        if on > cursor {
            out.push(Segment {
                t0: cursor,
                t1: on,
                pulse_on: false,
            });
        }
        out.push(Segment {
            t0: on,
            t1: off,
            pulse_on: true,
        });
        cursor = off;
    }
    if cursor < t_total {
        out.push(Segment {
            t0: cursor,
            t1: t_total,
            pulse_on: false,
        });
    }
    Ok(out)
}

/// One classical fourth-order Runge-Kutta step with the field frozen in
/// its on/off configuration.
pub fn step(
    state: &ParticleState,
    branch: SpinBranch,
    model: &ForceModel,
    pulse_on: bool,
    dt: f64,
) -> Result<ParticleState> {
    let accel = |r: &Vector3<f64>| model.acceleration(r, branch, pulse_on);
    let (r, v) = (state.position, state.velocity);
    let half = 0.5 * dt;

    let a1 = accel(&r);
    let v2 = v + a1 * half;
    let a2 = accel(&(r + v * half));
    let v3 = v + a2 * half;
    let a3 = accel(&(r + v2 * half));
    let v4 = v + a3 * dt;
    let a4 = accel(&(r + v3 * dt));

    let next = ParticleState {
        position: r + (v + v2 * 2.0 + v3 * 2.0 + v4) * (dt / 6.0),
        velocity: v + (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (dt / 6.0),
        t: state.t + dt,
    };
    if !next.is_finite() {
        return Err(Error::NonFinite { t: next.t });
    }
    Ok(next)
}

/// Integrate piecewise over `[initial.t, t_total]`, calling `observe` on
/// every grid point including the first. Field switches land exactly on
/// segment boundaries.
pub fn integrate_with<F>(
    initial: &ParticleState,
    branch: SpinBranch,
    model: &ForceModel,
    t_total: f64,
    settings: &IntegratorSettings,
    mut observe: F,
) -> Result<ParticleState>
where
    F: FnMut(&ParticleState, &Segment),
{
    if !(settings.dt > 0.0) {
        return Err(Error::Domain("dt must be positive".into()));
    }
    if initial.t != 0.0 {
        return Err(Error::ScheduleMisaligned("integration starts at t = 0".into()));
    }
    let segs = segments(&model.pulse, t_total)?;
    let mut state = *initial;
    observe(&state, &segs[0]);
    for seg in &segs {
        let (n, h) = seg.steps(settings.dt);
        for k in 1..=n {
            state = step(&state, branch, model, seg.pulse_on, h)?;
            // Land exactly on the grid instead of accumulating rounding.
            state.t = if k == n { seg.t1 } else { seg.t0 + k as f64 * h };
            observe(&state, seg);
        }
    }
    Ok(state)
}

/// Full trajectory of one spin branch.
pub fn integrate(
    initial: &ParticleState,
    branch: SpinBranch,
    model: &ForceModel,
    t_total: f64,
    settings: &IntegratorSettings,
) -> Result<ArmTrajectory> {
    let segs = segments(&model.pulse, t_total)?;
    let capacity: usize = segs
        .iter()
        .map(|s| s.steps(settings.dt.max(f64::MIN_POSITIVE)).0)
        .sum::<usize>()
        + 1;
    let mut samples = Vec::with_capacity(capacity);
    integrate_with(initial, branch, model, t_total, settings, |s, _| samples.push(*s))?;
    Ok(ArmTrajectory {
        branch,
        samples,
        settings: *settings,
    })
}

/// Largest relative energy drift within any constant-field segment.
///
/// Drift is measured against the segment's scale `max |E_k - E_0|` relative
/// to the largest term magnitude so that a near-zero total energy does not
/// blow up the ratio.
pub fn segment_energy_drift(traj: &ArmTrajectory, model: &ForceModel, pulse_on_only: Option<bool>) -> Result<f64> {
    let t_total = traj.last().t;
    let segs = segments(&model.pulse, t_total)?;
    let mut worst: f64 = 0.0;
    for seg in segs.iter().filter(|s| pulse_on_only.is_none_or(|on| s.pulse_on == on)) {
        let inside = traj.samples.iter().filter(|s| s.t >= seg.t0 && s.t <= seg.t1);
        let mut e0 = None;
        let mut scale: f64 = 0.0;
        let mut dev: f64 = 0.0;
        for s in inside {
            let e = model.energy(s, traj.branch, seg.pulse_on);
            scale = scale.max(energy_scale(s, traj.branch, model, seg.pulse_on));
            match e0 {
                None => e0 = Some(e),
                Some(e0) => dev = dev.max((e - e0).abs()),
            }
        }
        if scale > 0.0 {
            worst = worst.max(dev / scale);
        }
    }
    Ok(worst)
}

fn energy_scale(state: &ParticleState, branch: SpinBranch, model: &ForceModel, pulse_on: bool) -> f64 {
    let m = &model.material;
    let b = model.jet(&state.position, pulse_on).b;
    let mut terms = vec![
        0.5 * m.mass * state.velocity.norm_squared(),
        (m.mass * model.gravity * state.position.y).abs(),
        (m.chi_rho * m.mass / (2.0 * MU_0) * b.norm_squared()).abs(),
    ];
    if model.spin_active(pulse_on) {
        terms.push((branch.sign() * m.g_s * MU_B * b.dot(&model.spin.axis)).abs());
    }
    terms.into_iter().fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn no_field_model(gravity: f64) -> ForceModel {
        ForceModel {
            trap: TrapCoefficients::new(0.0, 0.0, 0.0, 75e-6).unwrap(),
            pulse: PulseConfig::new(1e5, 0.0, vec![]).unwrap(),
            material: MaterialParams::paper_default(),
            gravity,
            spin: SpinCoupling::default(),
        }
    }

    #[test]
    fn material_validation_names_key() {
        let err = MaterialParams::new(-1.0, 3500.0, -6.2e-9, 5.7, 2.0).unwrap_err();
        assert!(matches!(err, Error::Validation { ref key, .. } if key == "material.mass"));
        assert!(MaterialParams::new(1e-19, 3500.0, 6.2e-9, 5.7, 2.0).is_err());
        assert!(MaterialParams::new(1e-19, 3500.0, -6.2e-9, 1.0, 2.0).is_err());
    }

    #[test]
    fn gravity_only_without_field() {
        let model = no_field_model(9.8);
        for b in SpinBranch::BOTH {
            let a = model.acceleration(&Vector3::new(1e-6, 2e-6, 3e-6), b, false);
            assert_eq!(a, Vector3::new(0.0, -9.8, 0.0));
        }
    }

    #[test]
    fn pulse_only_diamagnetic_force() {
        let mut model = no_field_model(9.8);
        model.spin.in_trap = false;
        model.pulse = PulseConfig::new(1e5, 1e-6, vec![(0.0, 1.0)]).unwrap();
        // Spin term removed by using a zero g-factor.
        model.material.g_s = 0.0;
        let p = Vector3::new(0.0, -2e-6, 0.5e-6);
        let a = model.acceleration(&p, SpinBranch::PlusOne, true);
        let k = model.material.chi_rho / MU_0 * 1e10;
        assert_relative_eq!(a.y, -k * (model.pulse.y_ref - p.y) - 9.8, max_relative = 1e-12);
        assert_relative_eq!(a.z, k * p.z, max_relative = 1e-12);
    }

    #[test]
    fn spin_force_opposite_between_branches() {
        let mut model = no_field_model(0.0);
        model.pulse = PulseConfig::new(1e5, 0.0, vec![(0.0, 1.0)]).unwrap();
        let p = Vector3::zeros();
        let plus = model.acceleration(&p, SpinBranch::PlusOne, true);
        let minus = model.acceleration(&p, SpinBranch::MinusOne, true);
        assert_eq!(plus, -minus);
        let expected = model.material.g_s * MU_B * 1e5 / model.material.mass;
        assert_relative_eq!(minus.z, expected, max_relative = 1e-12);
    }

    #[test]
    fn free_particle_step() {
        let model = no_field_model(0.0);
        let s = ParticleState {
            position: Vector3::new(1.0, 2.0, 3.0),
            velocity: Vector3::new(0.5, -0.25, 2.0),
            t: 0.0,
        };
        let next = step(&s, SpinBranch::PlusOne, &model, false, 0.125).unwrap();
        assert_eq!(next.position, s.position + s.velocity * 0.125);
        assert_eq!(next.velocity, s.velocity);
    }

    #[test]
    fn energy_of_rest_states() {
        let model = no_field_model(9.8);
        let origin = ParticleState::at_rest(Vector3::zeros());
        assert_eq!(model.energy(&origin, SpinBranch::PlusOne, false), 0.0);
        let up = ParticleState::at_rest(Vector3::new(0.0, 2e-6, 0.0));
        assert_relative_eq!(
            model.energy(&up, SpinBranch::MinusOne, false),
            model.material.mass * 9.8 * 2e-6,
            max_relative = 1e-15
        );
    }

    #[test]
    fn segments_cover_schedule() {
        let pulse = PulseConfig::new(1.0, 0.0, vec![(0.0, 1.0), (3.0, 4.0)]).unwrap();
        let segs = segments(&pulse, 4.0).unwrap();
        assert_eq!(segs.len(), 3);
        assert!(segs[0].pulse_on && !segs[1].pulse_on && segs[2].pulse_on);
        assert!(segments(&pulse, 3.5).is_err());
        let (n, h) = Segment {
            t0: 0.0,
            t1: 1.0,
            pulse_on: false,
        }
        .steps(0.1);
        assert_eq!(n, 10);
        assert_relative_eq!(h, 0.1);
    }

    #[test]
    fn trajectory_grid_hits_switches() {
        let mut model = no_field_model(9.8);
        model.pulse = PulseConfig::new(1e5, 0.0, vec![(0.0, 1.3e-4), (2.0e-3, 2.13e-3)]).unwrap();
        let traj = integrate(
            &ParticleState::at_rest(Vector3::zeros()),
            SpinBranch::PlusOne,
            &model,
            2.13e-3,
            &IntegratorSettings { dt: 1e-5 },
        )
        .unwrap();
        for boundary in [1.3e-4, 2.0e-3, 2.13e-3] {
            assert!(traj.samples.iter().any(|s| s.t == boundary));
        }
        assert!(traj.samples.windows(2).all(|w| w[1].t > w[0].t));
        assert_eq!(traj.first().t, 0.0);
    }

    #[test]
    fn nonfinite_is_reported() {
        let mut model = no_field_model(9.8);
        model.gravity = f64::INFINITY;
        let r = step(
            &ParticleState::at_rest(Vector3::zeros()),
            SpinBranch::PlusOne,
            &model,
            false,
            1e-6,
        );
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }
}
