#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use nalgebra::Vector3;
use sgsim::dynamics::{ForceModel, MaterialParams, ParticleState, SpinCoupling};
use sgsim::fields::{PulseConfig, TrapCoefficients};
use sgsim::interferometry::Interferometer;
use sgsim::scenario::{prepare, solve, Prepared, Scenario};

/// Trap switched off, pulse always on, no spin or gravity: a pure 3-D
/// harmonic oscillator in y and z with angular frequency `omega`.
pub fn harmonic_model(omega: f64, t_total: f64) -> ForceModel {
    let material = MaterialParams {
        g_s: 0.0,
        ..MaterialParams::paper_default()
    };
    let eta = omega / (-material.chi_rho / sgsim::constants::MU_0).sqrt();
    ForceModel {
        trap: TrapCoefficients::new(0.0, 0.0, 0.0, 75e-6).unwrap(),
        pulse: PulseConfig::new(eta, 0.0, vec![(0.0, t_total)]).unwrap(),
        material,
        gravity: 0.0,
        spin: SpinCoupling::default(),
    }
}

/// Start displaced in y and z; the exact state at `t` is a cosine in each.
pub fn harmonic_start() -> ParticleState {
    ParticleState::at_rest(Vector3::new(0.0, 1e-6, -0.5e-6))
}

pub fn harmonic_exact(omega: f64, t: f64) -> (Vector3<f64>, Vector3<f64>) {
    let r0 = harmonic_start().position;
    let (c, s) = ((omega * t).cos(), (omega * t).sin());
    (r0 * c, -r0 * (omega * s))
}

/// The paper-default interferometer, simulated and tuned once per test binary.
pub fn paper_default() -> &'static (Scenario, Prepared, Arc<Interferometer>) {
    static CELL: OnceLock<(Scenario, Prepared, Arc<Interferometer>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let s = Scenario::preset("paper-default").unwrap();
        let p = prepare(&s).unwrap();
        let solved = solve(&s, &p).unwrap();
        (s, p, solved.interferometer)
    })
}
