//! Frozen reference values. The arbitrary-precision ones come from
//! `tests/oracle/golden.py`; the regression ones from this implementation.

// Oracle digits are kept as printed.
#![allow(clippy::excessive_precision)]

use std::f64::consts::PI;

use approx::assert_relative_eq;
use nalgebra::Vector3;
use sgsim::dynamics::MaterialParams;
use sgsim::entanglement::{u_cp, witness_threshold};
use sgsim::fields::{
    b_squared_hessian, eval_trap, find_equilibrium, frequencies_from_curvature, trap_frequencies, trap_potential,
    EquilibriumOptions, TrapCoefficients,
};
use sgsim::interferometry::{eta_for_pulse_time, pulse_time};

const TRAP_FIELD_AT_PROBE: [f64; 3] = [
    -0.010_504_064_358_314_423_162_342_07,
    0.009_469_432_319_201_542_860_384_735,
    -7.930_252_449_374_552_150_937_39e-7,
];
const U_CP_AT_6UM: f64 = -8.476_510_449_559_815_831_678_998e-35;
const GAMMA_STAR_HALF_PI: f64 = 2.780_296_544_622_385_375_677_159;
const ETA_FOR_160US: f64 = 98_831.180_738_457_550_123_377_45;

// Regression values for the default trap under g = 9.8 m/s^2.
const EQUILIBRIUM_Y: f64 = -1.905_720_875_958_72e-5;
const OMEGA: [f64; 3] = [659.800_740_154_423_4, 815.439_584_304_259_9, 85.647_043_475_243_4];

#[test]
fn trap_field_at_probe_point() {
    let p = Vector3::new(1e-6, -1.11e-6, 0.1e-6);
    let b = eval_trap(&p, &TrapCoefficients::paper_default());
    for i in 0..3 {
        assert_relative_eq!(b[i], TRAP_FIELD_AT_PROBE[i], max_relative = 1e-13);
    }
}

#[test]
fn casimir_polder_at_6um() {
    assert_relative_eq!(
        u_cp(6e-6, &MaterialParams::paper_default()).unwrap(),
        U_CP_AT_6UM,
        max_relative = 1e-13
    );
}

#[test]
fn witness_threshold_at_half_pi() {
    let g = witness_threshold(PI / 2.0, 0.0).unwrap().unwrap();
    assert!((g - GAMMA_STAR_HALF_PI).abs() < 1e-10, "{g}");
}

#[test]
fn pulse_gradient_for_160us() {
    let m = MaterialParams::paper_default();
    assert_relative_eq!(eta_for_pulse_time(160e-6, &m), ETA_FOR_160US, max_relative = 1e-14);
    assert_relative_eq!(pulse_time(ETA_FOR_160US, &m), 160e-6, max_relative = 1e-14);
    let unit = PI / 2.0 * (-sgsim::constants::MU_0 / (2.0 * m.chi_rho)).sqrt();
    assert_relative_eq!(pulse_time(unit, &m), 1.0, max_relative = 1e-15);
}

fn equilibrium(g: f64) -> Vector3<f64> {
    find_equilibrium(
        &TrapCoefficients::paper_default(),
        &MaterialParams::paper_default(),
        g,
        &Vector3::new(0.0, -1.11e-6, 0.0),
        &EquilibriumOptions::default(),
    )
    .unwrap()
}

#[test]
fn default_trap_regression() {
    let eq = equilibrium(9.8);
    assert_relative_eq!(eq.y, EQUILIBRIUM_Y, max_relative = 1e-9);
    assert!(eq.x.abs() < 1e-15 && eq.z.abs() < 1e-15);
    let w = trap_frequencies(
        &TrapCoefficients::paper_default(),
        &MaterialParams::paper_default(),
        &eq,
    )
    .unwrap();
    for i in 0..3 {
        assert_relative_eq!(w[i], OMEGA[i], max_relative = 1e-9);
    }
    assert_relative_eq!(w.y / w.z, OMEGA[1] / OMEGA[2], max_relative = 1e-9);
}

/// Minimum of the on-axis potential by dense scan, refined by golden section.
fn scan_minimum(g: f64) -> f64 {
    let trap = TrapCoefficients::paper_default();
    let m = MaterialParams::paper_default();
    let u = |y: f64| trap_potential(&Vector3::new(0.0, y, 0.0), &trap, &m, g);
    let n = 20_000;
    let ys: Vec<f64> = (1..n).map(|k| -trap.y0 + 2.0 * trap.y0 * k as f64 / n as f64).collect();
    let k = (0..ys.len()).min_by(|&a, &b| u(ys[a]).total_cmp(&u(ys[b]))).unwrap();
    let (mut a, mut b) = (ys[k.saturating_sub(1)], ys[(k + 1).min(ys.len() - 1)]);
    let r = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..200 {
        let c = b - r * (b - a);
        let d = a + r * (b - a);
        if u(c) < u(d) {
            b = d;
        } else {
            a = c;
        }
    }
    0.5 * (a + b)
}

#[test]
fn equilibrium_matches_axis_scan() {
    for g in [0.0, 9.8] {
        let y = scan_minimum(g);
        assert!(
            (equilibrium(g).y - y).abs() < 1e-11,
            "g = {g}: {} vs {y}",
            equilibrium(g).y
        );
    }
    assert!(equilibrium(9.8).y < equilibrium(0.0).y);
}

#[test]
fn equilibrium_unchanged_by_uniform_scaling_without_gravity() {
    let m = MaterialParams::paper_default();
    let guess = Vector3::new(0.0, -1.11e-6, 0.0);
    let opts = EquilibriumOptions::default();
    let base = find_equilibrium(&TrapCoefficients::paper_default(), &m, 0.0, &guess, &opts).unwrap();
    let scaled = find_equilibrium(&TrapCoefficients::paper_default().scaled(2.0), &m, 0.0, &guess, &opts).unwrap();
    assert!((base - scaled).norm() < 1e-12);
}

#[test]
fn analytic_and_numeric_hessian_frequencies_agree() {
    let trap = TrapCoefficients::paper_default();
    let m = MaterialParams::paper_default();
    let eq = equilibrium(9.8);
    let b2 = |p: Vector3<f64>| eval_trap(&p, &trap).norm_squared();
    let second = |i: usize, h: f64| {
        let mut e = Vector3::zeros();
        e[i] = h;
        (b2(eq + e) - 2.0 * b2(eq) + b2(eq - e)) / (h * h)
    };
    // Richardson-extrapolated central differences, O(h^4).
    let numeric = Vector3::from_fn(|i, _| (4.0 * second(i, 5e-8) - second(i, 1e-7)) / 3.0);
    let analytic = b_squared_hessian(&eq, &trap, None).diagonal();
    let w_num = frequencies_from_curvature(&numeric, m.chi_rho).unwrap();
    let w_ana = frequencies_from_curvature(&analytic, m.chi_rho).unwrap();
    for i in 0..3 {
        assert_relative_eq!(w_num[i], w_ana[i], max_relative = 1e-8);
    }
}
