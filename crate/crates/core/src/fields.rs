//! Static trap field, pulsed linear-gradient field, and derived quantities.
//!
//! The trap is a low-order multipole expansion that is polynomial in the
//! coordinates, so its Jacobian and second derivatives are written out in
//! closed form here. The integrator only ever needs `B` and `dB_i/dx_j`;
//! `grad(B^2) = 2 J^T B` and the Hessian of `B^2` follow from those plus the
//! per-component second derivatives.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::constants::MU_0;
use crate::dynamics::MaterialParams;
use crate::error::{Error, Result};

/// Coefficients of the trap multipole expansion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapCoefficients {
    /// Quadrupole strength, T.
    pub a2: f64,
    /// Octupole-like strength that sets the weak (z) confinement, T.
    pub a3: f64,
    /// Hexadecapole strength, T.
    pub a4: f64,
    /// Distance from trap centre to the pole pieces, m.
    pub y0: f64,
}

impl TrapCoefficients {
    pub fn new(a2: f64, a3: f64, a4: f64, y0: f64) -> Result<Self> {
        if !(y0 > 0.0 && y0.is_finite()) {
            return Err(Error::validation("trap.y0", "must be positive"));
        }
        if ![a2, a3, a4].iter().all(|a| a.is_finite()) {
            return Err(Error::validation("trap", "coefficients must be finite"));
        }
        Ok(Self { a2, a3, a4, y0 })
    }

    /// The levitation trap used for the published trajectories.
    pub fn paper_default() -> Self {
        Self {
            a2: -1.3,
            a3: 0.0183,
            a4: 0.72,
            y0: 75e-6,
        }
    }

    /// All three strengths multiplied by `factor`; `y0` unchanged.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            a2: self.a2 * factor,
            a3: self.a3 * factor,
            a4: self.a4 * factor,
            y0: self.y0,
        }
    }

    fn poly(&self) -> TrapPoly {
        let y0 = self.y0;
        TrapPoly {
            k2: self.a2 * (15.0 / PI).sqrt() / (4.0 * y0),
            k3: self.a3 * (7.0 / (6.0 * PI)).sqrt() / (y0 * y0),
            k4: 3.0 * self.a4 * (35.0 / PI).sqrt() / (y0 * y0 * y0),
            kz: 2.0 * self.a3 * (14.0 / (3.0 * PI)).sqrt() / (y0 * y0),
        }
    }
}

/// Reduced polynomial coefficients of the trap field.
#[derive(Debug, Clone, Copy)]
struct TrapPoly {
    k2: f64,
    k3: f64,
    k4: f64,
    kz: f64,
}

impl TrapPoly {
    fn field(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let (x, y, z) = (p.x, p.y, p.z);
        let TrapPoly { k2, k3, k4, kz } = *self;
        let bx = -(k4 * x * x * y / 8.0 + k4 * y * (x * x - y * y) / 16.0 - k3 * x * x
            + k2 * y
            + k3 * (-x * x - y * y + 4.0 * z * z) / 2.0);
        let by = -(-k4 * x * y * y / 8.0 + k4 * x * (x * x - y * y) / 16.0 - k3 * x * y + k2 * x);
        let bz = -(kz * x * z);
        Vector3::new(bx, by, bz)
    }

    /// `jac[(i, j)] = dB_i / dx_j`.
    fn jacobian(&self, p: &Vector3<f64>) -> Matrix3<f64> {
        let (x, y, z) = (p.x, p.y, p.z);
        let TrapPoly { k2, k3, k4, kz } = *self;
        // dBx/dy and dBy/dx coincide (curl-free in the x-y block).
        let shear = -(3.0 * k4 * (x * x - y * y) / 16.0 - k3 * y + k2);
        Matrix3::new(
            -(3.0 * k4 * x * y / 8.0 - 3.0 * k3 * x),
            shear,
            -4.0 * k3 * z,
            shear,
            3.0 * k4 * x * y / 8.0 + k3 * x,
            0.0,
            -kz * z,
            0.0,
            -kz * x,
        )
    }

    /// Hessians of the three field components, `h[i][(j, k)] = d^2 B_i / dx_j dx_k`.
    fn second_derivatives(&self, p: &Vector3<f64>) -> [Matrix3<f64>; 3] {
        let (x, y) = (p.x, p.y);
        let TrapPoly { k3, k4, kz, .. } = *self;
        let bx_xx = -(3.0 * k4 * y / 8.0 - 3.0 * k3);
        let bx_xy = -3.0 * k4 * x / 8.0;
        let bx_yy = 3.0 * k4 * y / 8.0 + k3;
        let bx_zz = -4.0 * k3;
        let hx = Matrix3::new(bx_xx, bx_xy, 0.0, bx_xy, bx_yy, 0.0, 0.0, 0.0, bx_zz);

        let by_xx = -3.0 * k4 * x / 8.0;
        let by_xy = 3.0 * k4 * y / 8.0 + k3;
        let by_yy = 3.0 * k4 * x / 8.0;
        let hy = Matrix3::new(by_xx, by_xy, 0.0, by_xy, by_yy, 0.0, 0.0, 0.0, 0.0);

        let hz = Matrix3::new(0.0, 0.0, -kz, 0.0, 0.0, 0.0, -kz, 0.0, 0.0);
        [hx, hy, hz]
    }
}

/// Linear-gradient pulse field and its on/off windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseConfig {
    /// Field gradient, T/m.
    pub eta: f64,
    /// y coordinate where the pulse field vanishes (the particle's initial y), m.
    pub y_ref: f64,
    /// Disjoint, ordered `(t_on, t_off)` intervals, s.
    pub windows: Vec<(f64, f64)>,
}

impl PulseConfig {
    pub fn new(eta: f64, y_ref: f64, windows: Vec<(f64, f64)>) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::validation("pulse.eta", "must be positive"));
        }
        let mut prev_off = f64::NEG_INFINITY;
        for &(on, off) in &windows {
            if !(on < off) {
                return Err(Error::validation("pulse.windows", "t_on must precede t_off"));
            }
            if on < prev_off {
                return Err(Error::validation(
                    "pulse.windows",
                    "windows must be disjoint and ordered",
                ));
            }
            prev_off = off;
        }
        Ok(Self { eta, y_ref, windows })
    }

    /// Pulse on for `t_on <= t < t_off`.
    pub fn is_active(&self, t: f64) -> bool {
        self.windows.iter().any(|&(on, off)| t >= on && t < off)
    }

    fn field(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(0.0, self.eta * (self.y_ref - p.y), self.eta * p.z)
    }

    fn jacobian(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(0.0, -self.eta, self.eta))
    }
}

/// Field value together with its Jacobian at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldJet {
    pub b: Vector3<f64>,
    /// `jac[(i, j)] = dB_i / dx_j`, T/m.
    pub jac: Matrix3<f64>,
}

impl FieldJet {
    pub fn b_squared(&self) -> f64 {
        self.b.norm_squared()
    }

    pub fn grad_b_squared(&self) -> Vector3<f64> {
        2.0 * self.jac.transpose() * self.b
    }

    /// Gradient of the projection `B . axis`.
    pub fn grad_projection(&self, axis: &Vector3<f64>) -> Vector3<f64> {
        self.jac.transpose() * axis
    }
}

/// `B`, `B^2` and `grad(B^2)` at one point and time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub b: Vector3<f64>,
    pub b_squared: f64,
    pub grad_b_squared: Vector3<f64>,
}

impl From<FieldJet> for FieldSample {
    fn from(jet: FieldJet) -> Self {
        Self {
            b: jet.b,
            b_squared: jet.b_squared(),
            grad_b_squared: jet.grad_b_squared(),
        }
    }
}

pub fn eval_trap(point: &Vector3<f64>, coeffs: &TrapCoefficients) -> Vector3<f64> {
    coeffs.poly().field(point)
}

pub fn trap_jet(point: &Vector3<f64>, coeffs: &TrapCoefficients) -> FieldJet {
    let poly = coeffs.poly();
    FieldJet {
        b: poly.field(point),
        jac: poly.jacobian(point),
    }
}

/// Pulse field at `point`; zero outside the pulse windows.
pub fn eval_pulse(point: &Vector3<f64>, pulse: &PulseConfig, t: f64) -> Vector3<f64> {
    if pulse.is_active(t) {
        pulse.field(point)
    } else {
        Vector3::zeros()
    }
}

/// Trap plus pulse, with the pulse forced on or off regardless of time.
pub fn total_jet(point: &Vector3<f64>, coeffs: &TrapCoefficients, pulse: &PulseConfig, pulse_on: bool) -> FieldJet {
    let mut jet = trap_jet(point, coeffs);
    if pulse_on {
        jet.b += pulse.field(point);
        jet.jac += pulse.jacobian();
    }
    jet
}

pub fn eval_total(point: &Vector3<f64>, coeffs: &TrapCoefficients, pulse: &PulseConfig, t: f64) -> FieldSample {
    total_jet(point, coeffs, pulse, pulse.is_active(t)).into()
}

/// Analytic Hessian of `B^2`. `pulse` adds the (switched-on) pulse field.
pub fn b_squared_hessian(point: &Vector3<f64>, coeffs: &TrapCoefficients, pulse: Option<&PulseConfig>) -> Matrix3<f64> {
    let poly = coeffs.poly();
    let jet = match pulse {
        Some(p) => total_jet(point, coeffs, p, true),
        None => trap_jet(point, coeffs),
    };
    // The pulse is linear, so only the trap contributes second derivatives.
    let second = poly.second_derivatives(point);
    let mut h = jet.jac.transpose() * jet.jac;
    for (i, hi) in second.iter().enumerate() {
        h += hi * jet.b[i];
    }
    2.0 * h
}

/// `omega_k = sqrt(-(chi_rho / 2 mu0) d^2(B^2)/dk^2)` for each axis.
pub fn frequencies_from_curvature(curvature: &Vector3<f64>, chi_rho: f64) -> Result<Vector3<f64>> {
    let omega_sq = curvature.map(|c| -chi_rho / (2.0 * MU_0) * c);
    if omega_sq.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::NonConfining {
            omega_sq: [omega_sq.x, omega_sq.y, omega_sq.z],
        });
    }
    Ok(omega_sq.map(f64::sqrt))
}

/// Trap angular frequencies `(omega_x, omega_y, omega_z)` at `equilibrium`.
pub fn trap_frequencies(
    coeffs: &TrapCoefficients,
    material: &MaterialParams,
    equilibrium: &Vector3<f64>,
) -> Result<Vector3<f64>> {
    let h = b_squared_hessian(equilibrium, coeffs, None);
    frequencies_from_curvature(&h.diagonal(), material.chi_rho)
}

/// Settings for [`find_equilibrium`].
#[derive(Debug, Clone, Copy)]
pub struct EquilibriumOptions {
    pub max_iterations: usize,
    /// Converged once the net force magnitude is below this, N.
    pub force_tolerance: f64,
    /// ...or once a Newton step is shorter than this, m.
    pub step_tolerance: f64,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            force_tolerance: 1e-30,
            step_tolerance: 1e-18,
        }
    }
}

/// Potential energy of the particle in the static trap plus gravity (spin excluded).
pub fn trap_potential(point: &Vector3<f64>, coeffs: &TrapCoefficients, material: &MaterialParams, gravity: f64) -> f64 {
    let b2 = eval_trap(point, coeffs).norm_squared();
    -material.chi_rho * material.mass / (2.0 * MU_0) * b2 + material.mass * gravity * point.y
}

fn trap_potential_gradient(
    point: &Vector3<f64>,
    coeffs: &TrapCoefficients,
    material: &MaterialParams,
    gravity: f64,
) -> Vector3<f64> {
    let scale = -material.chi_rho * material.mass / (2.0 * MU_0);
    trap_jet(point, coeffs).grad_b_squared() * scale + Vector3::new(0.0, material.mass * gravity, 0.0)
}

/// Rest position in the static trap under gravity along -y.
///
/// Levenberg-Marquardt on the potential: the z curvature vanishes at the
/// field zero, so a plain Newton step can be singular there.
pub fn find_equilibrium(
    coeffs: &TrapCoefficients,
    material: &MaterialParams,
    gravity: f64,
    initial_guess: &Vector3<f64>,
    opts: &EquilibriumOptions,
) -> Result<Vector3<f64>> {
    if !(initial_guess.y.abs() < coeffs.y0) {
        return Err(Error::Domain("initial guess must satisfy |y| < y0".into()));
    }
    let scale = -material.chi_rho * material.mass / (2.0 * MU_0);
    let potential = |p: &Vector3<f64>| trap_potential(p, coeffs, material, gravity);

    let mut p = *initial_guess;
    let mut u = potential(&p);
    let mut lambda = 1e-3;
    for _ in 0..opts.max_iterations {
        let grad = trap_potential_gradient(&p, coeffs, material, gravity);
        if grad.norm() < opts.force_tolerance {
            return Ok(p);
        }
        let hess = b_squared_hessian(&p, coeffs, None) * scale;
        let damping = hess.diagonal().abs().max().max(f64::MIN_POSITIVE);
        let mut accepted = false;
        while lambda < 1e12 {
            let lhs = hess + Matrix3::identity() * (lambda * damping);
            let Some(step) = lhs.lu().solve(&(-grad)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = p + step;
            let u_trial = potential(&trial);
            if u_trial <= u {
                p = trial;
                u = u_trial;
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                if step.norm() < opts.step_tolerance {
                    return Ok(p);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No descent direction left: we sit at the floating-point minimum.
            return Ok(p);
        }
    }
    Err(Error::NoConvergence {
        what: "find_equilibrium",
        iterations: opts.max_iterations,
    })
}

/// Divergence and curl of the trap field by analytic differentiation.
pub fn maxwell_residuals(point: &Vector3<f64>, coeffs: &TrapCoefficients) -> (f64, Vector3<f64>) {
    div_curl(&trap_jet(point, coeffs).jac)
}

/// Divergence and curl of the pulse field.
pub fn pulse_maxwell_residuals(pulse: &PulseConfig) -> (f64, Vector3<f64>) {
    div_curl(&pulse.jacobian())
}

fn div_curl(j: &Matrix3<f64>) -> (f64, Vector3<f64>) {
    let div = j.trace();
    let curl = Vector3::new(j[(2, 1)] - j[(1, 2)], j[(0, 2)] - j[(2, 0)], j[(1, 0)] - j[(0, 1)]);
    (div, curl)
}
