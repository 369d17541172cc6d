mod common;

use std::sync::Arc;

use sgsim::constants::HBAR;
use sgsim::dynamics::{IntegratorSettings, SpinBranch};
use sgsim::entanglement::{phase_integral, phases_at, u_cp, u_dd, DipoleField, Interaction};
use sgsim::interferometry::{
    endpoints, pair_interferometers, simulate_interferometer, tune_closure, FreeParameter, InterferometerConfig,
    InterferometerPair, PairGeometry, Separation, TuneOptions,
};
use sgsim::scenario::{closing_trap_time, Scenario};
use sgsim::solve::linear_fit;
use sgsim::Error;

fn quiet_config(eta: f64) -> InterferometerConfig {
    // Fixed 160 us pulses, no spin force from the static trap.
    let (_, prepared, _) = common::paper_default();
    let mut cfg = prepared.config.clone();
    cfg.eta = eta;
    cfg.spin.in_trap = false;
    cfg
}

#[test]
fn vanishing_gradient_keeps_arms_together() {
    let one = simulate_interferometer(&quiet_config(1e-3)).unwrap();
    assert!(one.closure.max_split < 1e-12, "{}", one.closure.max_split);
    assert!(one.closure.dr < 1e-12);
}

#[test]
fn split_is_linear_in_small_gradient() {
    let etas = [100.0, 200.0, 400.0, 700.0, 1000.0];
    let splits: Vec<f64> = etas
        .iter()
        .map(|&eta| simulate_interferometer(&quiet_config(eta)).unwrap().closure.max_split)
        .collect();
    let (slope, intercept, r2) = linear_fit(&etas, &splits);
    assert!(r2 > 0.999, "r2 {r2}, splits {splits:?}");
    assert!(slope > 0.0 && intercept.abs() < 0.01 * slope * etas[4]);
}

#[test]
fn mismatch_confirmed_by_refined_integration() {
    let (_, prepared, _) = common::paper_default();
    let cfg = &prepared.config;
    let coarse = simulate_interferometer(cfg).unwrap().closure.dr;
    let mut fine = cfg.clone();
    fine.integrator = IntegratorSettings {
        dt: cfg.integrator.dt / 4.0,
    };
    let (p, m) = endpoints(&fine).unwrap();
    let refined = (p.position - m.position).norm();
    assert!((coarse - refined).abs() < 0.1 * refined, "{coarse} vs {refined}");
}

#[test]
fn tuned_closure_is_stable_under_retuning() {
    let (_, _, one) = common::paper_default();
    let closed = &one.config;
    assert!(one.closure.humpty_dumpty_ok);
    let t = closed.schedule.t_trap;

    let unchanged = tune_closure(
        closed,
        FreeParameter::TrapTime,
        &TuneOptions {
            bracket: (0.9 * t, 1.1 * t),
            max_iterations: 100,
        },
    )
    .unwrap();
    assert_eq!(unchanged.iterations, 0);
    assert_eq!(&unchanged.config, closed);

    let perturbed = FreeParameter::TrapTime.set(closed, 1.01 * t).unwrap();
    assert!(!simulate_interferometer(&perturbed).unwrap().closure.humpty_dumpty_ok);
    let restored = tune_closure(
        &perturbed,
        FreeParameter::TrapTime,
        &TuneOptions {
            bracket: (0.9 * t, 1.1 * t),
            max_iterations: 100,
        },
    )
    .unwrap();
    assert!(restored.humpty_dumpty_ok, "dr {} dv {}", restored.dr, restored.dv);
}

#[test]
fn objective_is_locally_convex_and_smooth() {
    let (_, _, one) = common::paper_default();
    let t = one.config.schedule.t_trap;
    let h = 1e-5 * t;
    let z_mismatch = |dt: f64| {
        let cfg = FreeParameter::TrapTime.set(&one.config, t + dt).unwrap();
        let (p, m) = endpoints(&cfg).unwrap();
        let tol = cfg.tolerances;
        let dr = (p.position - m.position).norm();
        let dv = (p.velocity - m.velocity).norm();
        (tol.objective(dr, dv), p.position.z - m.position.z)
    };
    let (fm, zm) = z_mismatch(-h);
    let (f0, z0) = z_mismatch(0.0);
    let (fp, zp) = z_mismatch(h);
    assert!(fm + fp - 2.0 * f0 > 0.0);
    // The signed mismatch is smooth: its second difference is far below its first.
    assert!((zp - 2.0 * z0 + zm).abs() < 1e-3 * (zp - zm).abs());
}

#[test]
fn trap_shape_and_gradient_can_close_jointly() {
    let (_, prepared, _) = common::paper_default();
    let start = closing_trap_time(1, prepared.omega.z) * 1.01;
    let cfg = FreeParameter::TrapTime.set(&prepared.config, start).unwrap();
    for free in [FreeParameter::A3, FreeParameter::Eta] {
        let v = free.get(&cfg);
        let out = tune_closure(
            &cfg,
            free,
            &TuneOptions {
                bracket: (0.8 * v, 1.2 * v),
                max_iterations: 50,
            },
        )
        .unwrap();
        assert!(out.humpty_dumpty_ok, "{free:?}: dr {} dv {}", out.dr, out.dv);
        assert!((0.8 * v..=1.2 * v).contains(&out.value));
    }
}

#[test]
fn bad_brackets_rejected() {
    let (_, prepared, _) = common::paper_default();
    let opts = |bracket| TuneOptions {
        bracket,
        max_iterations: 10,
    };
    let e = tune_closure(&prepared.config, FreeParameter::TrapTime, &opts((0.05, 0.04))).unwrap_err();
    assert!(matches!(e, Error::BracketInvalid { .. }));
    let e = tune_closure(&prepared.config, FreeParameter::A3, &opts((0.5, 0.6))).unwrap_err();
    assert!(matches!(e, Error::BracketInvalid { .. }));
}

#[test]
fn pair_geometry_invariants() {
    let (_, _, one) = common::paper_default();
    let d = 20e-6;
    let pair = pair_interferometers(one.clone(), d, PairGeometry::ParallelXOffset).unwrap();
    let max_split = one.closure.max_split;
    let mut peak_gap = (0, 0.0);
    let mut peak_split = (0, 0.0);
    for (k, s) in pair.separations.iter().enumerate() {
        assert!(s.d_close <= s.d_far);
        assert!(s.d_close >= d - max_split);
        let dz = one.plus_arm.samples[k].position.z - one.minus_arm.samples[k].position.z;
        let expected = (d * d + dz * dz).sqrt();
        let pm = pair.arm_distance(SpinBranch::PlusOne, SpinBranch::MinusOne, k);
        assert!((pm - expected).abs() <= 1e-12 * d);
        assert!((pair.arm_distance(SpinBranch::PlusOne, SpinBranch::PlusOne, k) - d).abs() <= 1e-12 * d);
        if s.d_far - s.d_close > peak_gap.1 {
            peak_gap = (k, s.d_far - s.d_close);
        }
        if dz.abs() > peak_split.1 {
            peak_split = (k, dz.abs());
        }
    }
    assert_eq!(peak_gap.0, peak_split.0);
    assert!(pair_interferometers(one.clone(), 0.0, PairGeometry::ParallelXOffset).is_err());
}

#[test]
fn zero_split_pair_has_no_phase() {
    let one = Arc::new(simulate_interferometer(&quiet_config(1e-6)).unwrap());
    let pair = pair_interferometers(one, 10e-6, PairGeometry::ParallelXOffset).unwrap();
    for s in &pair.separations {
        assert!((s.d_close - 10e-6).abs() < 1e-15 && (s.d_far - 10e-6).abs() < 1e-15);
    }
    for i in Interaction::ALL {
        let r = phase_integral(&pair, i, DipoleField::TimeDependent).unwrap();
        assert!(r.delta_phi.abs() < 1e-12, "{i:?}: {}", r.delta_phi);
    }
}

#[test]
fn constant_separations_integrate_exactly() {
    let (s, _, one) = common::paper_default();
    let mut pair = pair_interferometers(one.clone(), 20e-6, PairGeometry::ParallelXOffset).unwrap();
    let (d1, d2, b) = (21e-6, 20e-6, 0.3);
    for sep in &mut pair.separations {
        *sep = Separation {
            t: sep.t,
            d_close: d2,
            d_far: d1,
        };
    }
    let t_total = one.schedule.t_total;
    let m = &s.material;
    let cp = phase_integral(&pair, Interaction::CasimirPolder, DipoleField::TimeDependent).unwrap();
    let expected = t_total * (u_cp(d1, m).unwrap() - u_cp(d2, m).unwrap()) / HBAR;
    assert!((cp.delta_phi - expected).abs() < 1e-10 * expected.abs());
    let dd = phase_integral(&pair, Interaction::DipoleDipole, DipoleField::Frozen(b)).unwrap();
    let expected = t_total * (u_dd(d1, b, m).unwrap() - u_dd(d2, b, m).unwrap()) / HBAR;
    assert!((dd.delta_phi - expected).abs() < 1e-10 * expected.abs());
}

#[test]
fn swapping_devices_keeps_phases() {
    let (_, _, one) = common::paper_default();
    let pair = pair_interferometers(one.clone(), 20e-6, PairGeometry::ParallelXOffset).unwrap();
    let swapped = pair.swapped().unwrap();
    for i in Interaction::ALL {
        let a = phase_integral(&pair, i, DipoleField::TimeDependent).unwrap().delta_phi;
        let b = phase_integral(&swapped, i, DipoleField::TimeDependent)
            .unwrap()
            .delta_phi;
        assert!((a - b).abs() <= 1e-12 * a.abs(), "{i:?}: {a} vs {b}");
    }
}

#[test]
fn mismatched_grids_rejected() {
    let (_, _, one) = common::paper_default();
    let mut other_cfg = one.config.clone();
    other_cfg.schedule = sgsim::interferometry::PulseSchedule::new(other_cfg.schedule.t_p, 1e-3).unwrap();
    let other = Arc::new(simulate_interferometer(&other_cfg).unwrap());
    let pair = InterferometerPair {
        left: other.clone(),
        right: one.clone(),
        d: 20e-6,
        geometry: PairGeometry::ParallelXOffset,
        separations: pair_interferometers(other, 20e-6, PairGeometry::ParallelXOffset)
            .unwrap()
            .separations,
    };
    let e = phase_integral(&pair, Interaction::CasimirPolder, DipoleField::TimeDependent).unwrap_err();
    assert!(matches!(e, Error::GridMismatch));
}

#[test]
fn phases_converge_under_grid_refinement() {
    let (s, _, one) = common::paper_default();
    let mut fine = one.config.clone();
    fine.integrator.dt /= 2.0;
    let fine = Arc::new(simulate_interferometer(&fine).unwrap());
    let a = phases_at(one, s.pair_distance, DipoleField::TimeDependent).unwrap();
    let b = phases_at(&fine, s.pair_distance, DipoleField::TimeDependent).unwrap();
    assert!((a.dphi_cp - b.dphi_cp).abs() < 1e-4 * a.dphi_cp.abs());
    assert!((a.dphi_dd - b.dphi_dd).abs() < 1e-4 * a.dphi_dd.abs());
}

#[test]
fn dipole_dominates_at_preset_distance() {
    let (s, _, one) = common::paper_default();
    let r = phases_at(one, s.pair_distance, DipoleField::TimeDependent).unwrap();
    assert!(r.dphi_dd.abs() > r.dphi_cp.abs());
    assert!(r.dphi_cp > 0.0 && r.dphi_dd < 0.0);
    // A frozen representative field lands in the same range.
    let frozen = phases_at(one, s.pair_distance, DipoleField::Frozen(one.closure.min_trap_field)).unwrap();
    assert!(frozen.dphi_dd < 0.0 && frozen.dphi_dd.abs() < 10.0 * r.dphi_dd.abs());
}

#[test]
fn casimir_phase_decreases_with_distance() {
    let (_, _, one) = common::paper_default();
    let ds: Vec<f64> = (0..12).map(|k| 2e-6 * 1.3f64.powi(k)).collect();
    let sweep = sgsim::entanglement::sweep_distance(one, &ds, DipoleField::TimeDependent).unwrap();
    assert!(sweep.rows.windows(2).all(|w| w[1].dphi_cp.abs() < w[0].dphi_cp.abs()));
    assert!(sweep.rows.windows(2).all(|w| w[1].dphi_dd.abs() < w[0].dphi_dd.abs()));
    assert!(sweep.crossover.is_some());
}

#[test]
fn contact_distance_rejected() {
    let (_, _, one) = common::paper_default();
    let e = phases_at(one, 1e-8, DipoleField::TimeDependent).unwrap_err();
    assert!(matches!(e, Error::Domain(_)));
}

#[test]
fn two_oscillation_preset_doubles_trap_time() {
    let one = sgsim::scenario::prepare(&Scenario::preset("paper-default").unwrap()).unwrap();
    let two = sgsim::scenario::prepare(&Scenario::preset("paper-two-oscillation").unwrap()).unwrap();
    assert!((two.config.schedule.t_trap - 2.0 * one.config.schedule.t_trap).abs() < 1e-15);
}
