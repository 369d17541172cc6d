//! Pulse schedule, two-arm interferometer, closure tuning, and pairing.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::constants::MU_0;
use crate::dynamics::{
    integrate, integrate_with, ArmTrajectory, ForceModel, IntegratorSettings, MaterialParams, ParticleState,
    SpinBranch, SpinCoupling,
};
use crate::error::{Error, Result};
use crate::fields::{eval_trap, PulseConfig, TrapCoefficients};
use crate::solve::minimize_brent;

/// Quarter period of the pulse-induced harmonic trap,
/// `t_p = (pi / 2 eta) sqrt(-mu0 / (2 chi_rho))`.
pub fn pulse_time(eta: f64, material: &MaterialParams) -> f64 {
    PI / (2.0 * eta) * (-MU_0 / (2.0 * material.chi_rho)).sqrt()
}

/// Gradient that produces pulse duration `t_p` (inverse of [`pulse_time`]).
pub fn eta_for_pulse_time(t_p: f64, material: &MaterialParams) -> f64 {
    PI / (2.0 * t_p) * (-MU_0 / (2.0 * material.chi_rho)).sqrt()
}

/// Two equal pulses separated by a free trap evolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseSchedule {
    pub t_p: f64,
    pub t_trap: f64,
    pub t_total: f64,
}

impl PulseSchedule {
    pub fn new(t_p: f64, t_trap: f64) -> Result<Self> {
        if !(t_p > 0.0 && t_p.is_finite()) {
            return Err(Error::validation("schedule.t_p", "must be positive"));
        }
        if !(t_trap >= 0.0 && t_trap.is_finite()) {
            return Err(Error::validation("schedule.t_trap", "must be non-negative"));
        }
        Ok(Self {
            t_p,
            t_trap,
            t_total: 2.0 * t_p + t_trap,
        })
    }

    pub fn windows(&self) -> Vec<(f64, f64)> {
        let second_on = self.t_p + self.t_trap;
        if self.t_trap == 0.0 {
            return vec![(0.0, self.t_total)];
        }
        vec![(0.0, self.t_p), (second_on, self.t_total)]
    }
}

/// Schedule with `n` full z periods of trap evolution.
pub fn build_schedule(
    eta: f64,
    material: &MaterialParams,
    n_z_oscillations: u32,
    omega_z: f64,
) -> Result<PulseSchedule> {
    if !(omega_z > 0.0) {
        return Err(Error::Domain("omega_z must be positive".into()));
    }
    if n_z_oscillations == 0 {
        return Err(Error::Domain("need at least one z oscillation".into()));
    }
    PulseSchedule::new(pulse_time(eta, material), f64::from(n_z_oscillations) * TAU / omega_z)
}

/// Closure acceptance thresholds and the position/velocity weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosureTolerances {
    /// m
    pub tol_r: f64,
    /// m/s
    pub tol_v: f64,
    /// `lambda` in `dr^2 + lambda dv^2`, s^2.
    pub weight: f64,
}

impl Default for ClosureTolerances {
    fn default() -> Self {
        Self {
            tol_r: 1e-10,
            tol_v: 1e-7,
            // 1 nm of position mismatch counts as much as 10 nm/s of velocity mismatch.
            weight: (1e-9_f64 / 1e-8).powi(2),
        }
    }
}

impl ClosureTolerances {
    pub fn objective(&self, dr: f64, dv: f64) -> f64 {
        dr * dr + self.weight * dv * dv
    }
}

/// Everything needed to run one interferometer.
#[derive(Debug, Clone, PartialEq)]
pub struct InterferometerConfig {
    pub trap: TrapCoefficients,
    pub material: MaterialParams,
    pub gravity: f64,
    pub spin: SpinCoupling,
    /// Pulse gradient, T/m.
    pub eta: f64,
    /// Initial y displacement; also the pulse field's zero crossing.
    pub initial_y: f64,
    pub schedule: PulseSchedule,
    pub integrator: IntegratorSettings,
    pub tolerances: ClosureTolerances,
}

impl InterferometerConfig {
    pub fn force_model(&self) -> Result<ForceModel> {
        Ok(ForceModel {
            trap: self.trap,
            pulse: PulseConfig::new(self.eta, self.initial_y, self.schedule.windows())?,
            material: self.material,
            gravity: self.gravity,
            spin: self.spin,
        })
    }

    pub fn initial_state(&self) -> ParticleState {
        ParticleState::at_rest(Vector3::new(0.0, self.initial_y, 0.0))
    }
}

/// Final mismatch and excursion summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosureReport {
    /// `|r+(T) - r-(T)|`, m.
    pub dr: f64,
    /// `|v+(T) - v-(T)|`, m/s.
    pub dv: f64,
    /// `max_t |z+ - z-|`, m.
    pub max_split: f64,
    /// Largest `|r(T) - r(0)|` over both arms, m.
    pub return_dr: f64,
    /// Smallest trap field magnitude met along either arm, T.
    pub min_trap_field: f64,
    pub humpty_dumpty_ok: bool,
}

impl ClosureReport {
    fn from_endpoints(plus: &ParticleState, minus: &ParticleState, tol: &ClosureTolerances) -> (f64, f64, bool) {
        let dr = (plus.position - minus.position).norm();
        let dv = (plus.velocity - minus.velocity).norm();
        (dr, dv, dr < tol.tol_r && dv < tol.tol_v)
    }
}

/// Both arms of one interferometer.
#[derive(Debug, Clone)]
pub struct Interferometer {
    pub plus_arm: ArmTrajectory,
    pub minus_arm: ArmTrajectory,
    pub schedule: PulseSchedule,
    pub closure: ClosureReport,
    pub config: InterferometerConfig,
}

impl Interferometer {
    pub fn arm(&self, branch: SpinBranch) -> &ArmTrajectory {
        match branch {
            SpinBranch::PlusOne => &self.plus_arm,
            SpinBranch::MinusOne => &self.minus_arm,
        }
    }
}

fn validate_initial(cfg: &InterferometerConfig) -> Result<()> {
    if !(cfg.initial_y.abs() < cfg.trap.y0) {
        return Err(Error::validation("initial.y", "must lie inside the trap (|y| < y0)"));
    }
    Ok(())
}

/// Run both spin branches over the schedule and summarize closure.
pub fn simulate_interferometer(cfg: &InterferometerConfig) -> Result<Interferometer> {
    validate_initial(cfg)?;
    let model = cfg.force_model()?;
    let initial = cfg.initial_state();
    let t_total = cfg.schedule.t_total;
    let (plus, minus) = rayon::join(
        || integrate(&initial, SpinBranch::PlusOne, &model, t_total, &cfg.integrator),
        || integrate(&initial, SpinBranch::MinusOne, &model, t_total, &cfg.integrator),
    );
    let (plus, minus) = (plus?, minus?);

    let (dr, dv, ok) = ClosureReport::from_endpoints(plus.last(), minus.last(), &cfg.tolerances);
    let max_split = plus
        .samples
        .iter()
        .zip(&minus.samples)
        .map(|(p, m)| (p.position.z - m.position.z).abs())
        .fold(0.0, f64::max);
    let return_dr = [&plus, &minus]
        .iter()
        .map(|a| (a.last().position - a.first().position).norm())
        .fold(0.0, f64::max);
    let min_trap_field = plus
        .samples
        .iter()
        .chain(&minus.samples)
        .map(|s| eval_trap(&s.position, &cfg.trap).norm())
        .fold(f64::INFINITY, f64::min);

    Ok(Interferometer {
        plus_arm: plus,
        minus_arm: minus,
        schedule: cfg.schedule,
        closure: ClosureReport {
            dr,
            dv,
            max_split,
            return_dr,
            min_trap_field,
            humpty_dumpty_ok: ok,
        },
        config: cfg.clone(),
    })
}

/// Final states of both arms without storing trajectories.
pub fn endpoints(cfg: &InterferometerConfig) -> Result<(ParticleState, ParticleState)> {
    validate_initial(cfg)?;
    let model = cfg.force_model()?;
    let initial = cfg.initial_state();
    let t_total = cfg.schedule.t_total;
    let run = |b| integrate_with(&initial, b, &model, t_total, &cfg.integrator, |_, _| {});
    let (plus, minus) = rayon::join(|| run(SpinBranch::PlusOne), || run(SpinBranch::MinusOne));
    Ok((plus?, minus?))
}

/// Knob adjusted by [`tune_closure`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreeParameter {
    #[serde(rename = "t_T")]
    TrapTime,
    #[serde(rename = "a3")]
    A3,
    #[serde(rename = "eta")]
    Eta,
}

impl FreeParameter {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "t_T" | "t_trap" => Ok(Self::TrapTime),
            "a3" => Ok(Self::A3),
            "eta" => Ok(Self::Eta),
            other => Err(Error::Parse(format!(
                "unknown free parameter `{other}` (expected t_T, a3, eta)"
            ))),
        }
    }

    pub fn get(self, cfg: &InterferometerConfig) -> f64 {
        match self {
            Self::TrapTime => cfg.schedule.t_trap,
            Self::A3 => cfg.trap.a3,
            Self::Eta => cfg.eta,
        }
    }

    pub fn set(self, cfg: &InterferometerConfig, value: f64) -> Result<InterferometerConfig> {
        let mut out = cfg.clone();
        match self {
            Self::TrapTime => out.schedule = PulseSchedule::new(cfg.schedule.t_p, value)?,
            Self::A3 => out.trap.a3 = value,
            Self::Eta => {
                if !(value > 0.0) {
                    return Err(Error::Domain("eta must stay positive".into()));
                }
                out.eta = value
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TuneOptions {
    /// Search interval for the free parameter.
    pub bracket: (f64, f64),
    pub max_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub config: InterferometerConfig,
    pub free: FreeParameter,
    pub value: f64,
    pub dr: f64,
    pub dv: f64,
    pub humpty_dumpty_ok: bool,
    /// Trajectory evaluations beyond the initial verification run.
    pub iterations: usize,
}

/// Adjust `free` to minimize `dr^2 + lambda dv^2`.
///
/// Tuning `t_T` is a bracketed 1-D minimization. Closure has two
/// conditions (position and velocity), so when `a3` or `eta` is the free
/// parameter `t_T` is co-tuned: a Gauss-Newton shooting iteration on the
/// weighted end-point mismatch over `(parameter, t_T)`, with the parameter
/// confined to the bracket.
pub fn tune_closure(cfg: &InterferometerConfig, free: FreeParameter, opts: &TuneOptions) -> Result<TuneOutcome> {
    let (lo, hi) = opts.bracket;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::BracketInvalid {
            lo,
            hi,
            reason: "need finite lo < hi".into(),
        });
    }
    let tol = cfg.tolerances;
    let (p, m) = endpoints(cfg)?;
    let (dr, dv, ok) = ClosureReport::from_endpoints(&p, &m, &tol);
    if ok {
        return Ok(TuneOutcome {
            config: cfg.clone(),
            free,
            value: free.get(cfg),
            dr,
            dv,
            humpty_dumpty_ok: true,
            iterations: 0,
        });
    }
    match free {
        FreeParameter::TrapTime => tune_trap_time(cfg, opts),
        _ => tune_jointly(cfg, free, opts),
    }
}

fn mismatch(cfg: &InterferometerConfig) -> Result<(f64, f64)> {
    let (p, m) = endpoints(cfg)?;
    let (dr, dv, _) = ClosureReport::from_endpoints(&p, &m, &cfg.tolerances);
    Ok((dr, dv))
}

fn finish(cfg: InterferometerConfig, free: FreeParameter, iterations: usize) -> Result<TuneOutcome> {
    let (dr, dv) = mismatch(&cfg)?;
    let tol = cfg.tolerances;
    Ok(TuneOutcome {
        value: free.get(&cfg),
        free,
        dr,
        dv,
        humpty_dumpty_ok: dr < tol.tol_r && dv < tol.tol_v,
        iterations: iterations + 1,
        config: cfg,
    })
}

fn tune_trap_time(cfg: &InterferometerConfig, opts: &TuneOptions) -> Result<TuneOutcome> {
    let (lo, hi) = opts.bracket;
    if lo < 0.0 {
        return Err(Error::BracketInvalid {
            lo,
            hi,
            reason: "trap time cannot be negative".into(),
        });
    }
    let objective = |t: f64| -> Result<f64> {
        let trial = FreeParameter::TrapTime.set(cfg, t)?;
        let (dr, dv) = mismatch(&trial)?;
        Ok(cfg.tolerances.objective(dr, dv))
    };
    let x_tol = (hi - lo) * 1e-12;
    let best = minimize_brent(objective, lo, hi, x_tol, opts.max_iterations)?;
    finish(
        FreeParameter::TrapTime.set(cfg, best.x)?,
        FreeParameter::TrapTime,
        best.evaluations,
    )
}

fn weighted_residual(cfg: &InterferometerConfig) -> Result<DVector<f64>> {
    let (p, m) = endpoints(cfg)?;
    let dr = p.position - m.position;
    let dv = (p.velocity - m.velocity) * cfg.tolerances.weight.sqrt();
    Ok(DVector::from_iterator(6, dr.iter().chain(dv.iter()).copied()))
}

fn tune_jointly(cfg: &InterferometerConfig, free: FreeParameter, opts: &TuneOptions) -> Result<TuneOutcome> {
    let (lo, hi) = opts.bracket;
    let start = free.get(cfg);
    if !(lo..=hi).contains(&start) {
        return Err(Error::BracketInvalid {
            lo,
            hi,
            reason: format!("starting value {start} outside bracket"),
        });
    }
    let apply = |x: &[f64; 2]| -> Result<InterferometerConfig> {
        let with_param = free.set(cfg, x[0])?;
        FreeParameter::TrapTime.set(&with_param, x[1])
    };
    let scales = [
        start.abs().max(f64::MIN_POSITIVE),
        cfg.schedule.t_trap.max(cfg.schedule.t_p),
    ];
    let mut x = [start, cfg.schedule.t_trap];
    let mut r = weighted_residual(&apply(&x)?)?;
    let mut evaluations = 1;

    for _ in 0..opts.max_iterations {
        // Forward-difference Jacobian in the two unknowns.
        let mut jac = DMatrix::zeros(6, 2);
        for k in 0..2 {
            let h = scales[k] * 1e-7;
            let mut xk = x;
            xk[k] += h;
            let rk = weighted_residual(&apply(&xk)?)?;
            evaluations += 1;
            jac.set_column(k, &((rk - &r) / h));
        }
        let jt = jac.transpose();
        let Some(delta) = (&jt * &jac).lu().solve(&(-(&jt * &r))) else {
            break;
        };
        // Backtrack until the residual shrinks.
        let mut alpha = 1.0;
        let mut improved = false;
        while alpha > 1e-4 {
            let mut trial = [x[0] + alpha * delta[0], x[1] + alpha * delta[1]];
            trial[0] = trial[0].clamp(lo, hi);
            trial[1] = trial[1].max(0.0);
            let rt = weighted_residual(&apply(&trial)?)?;
            evaluations += 1;
            if rt.norm() < r.norm() {
                x = trial;
                r = rt;
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        let tuned = apply(&x)?;
        let (dr, dv) = mismatch(&tuned)?;
        evaluations += 1;
        if dr < cfg.tolerances.tol_r && dv < cfg.tolerances.tol_v {
            return finish(tuned, free, evaluations);
        }
        if !improved {
            // Converged as far as the integrator resolution allows.
            return finish(tuned, free, evaluations);
        }
    }
    let tuned = apply(&x)?;
    let (dr, dv) = mismatch(&tuned)?;
    if dr < cfg.tolerances.tol_r && dv < cfg.tolerances.tol_v {
        return finish(tuned, free, evaluations);
    }
    Err(Error::NoConvergence {
        what: "closure shooting",
        iterations: opts.max_iterations,
    })
}

/// How two interferometers are placed relative to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairGeometry {
    /// Identical devices offset along x, splitting directions parallel.
    ParallelXOffset,
}

/// Arm separations at one sample time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Separation {
    pub t: f64,
    /// Same-branch arms (`++` and `--`).
    pub d_close: f64,
    /// Opposite-branch arms (`+-` and `-+`).
    pub d_far: f64,
}

/// Two interferometers separated by `d`.
#[derive(Debug, Clone)]
pub struct InterferometerPair {
    pub left: Arc<Interferometer>,
    pub right: Arc<Interferometer>,
    pub d: f64,
    pub geometry: PairGeometry,
    pub separations: Vec<Separation>,
}

impl InterferometerPair {
    pub fn right_offset(&self) -> Vector3<f64> {
        match self.geometry {
            PairGeometry::ParallelXOffset => Vector3::new(self.d, 0.0, 0.0),
        }
    }

    /// Distance between arm `i` of the left and arm `j` of the right device at sample `k`.
    pub fn arm_distance(&self, i: SpinBranch, j: SpinBranch, k: usize) -> f64 {
        let a = self.left.arm(i).samples[k].position;
        let b = self.right.arm(j).samples[k].position + self.right_offset();
        (a - b).norm()
    }

    /// Same pair with left and right exchanged (the right device now sits at -d).
    pub fn swapped(&self) -> Result<Self> {
        let mut swapped = build_pair(self.right.clone(), self.left.clone(), -self.d, self.geometry)?;
        swapped.d = self.d;
        Ok(swapped)
    }
}

/// Relative tolerance on the `++`/`--` and `+-`/`-+` distance symmetry.
const PAIRING_SYMMETRY_TOL: f64 = 1e-9;

fn build_pair(
    left: Arc<Interferometer>,
    right: Arc<Interferometer>,
    offset_x: f64,
    geometry: PairGeometry,
) -> Result<InterferometerPair> {
    use SpinBranch::{MinusOne as M, PlusOne as P};
    let n = left.plus_arm.samples.len();
    if right.plus_arm.samples.len() != n || left.minus_arm.samples.len() != n || right.minus_arm.samples.len() != n {
        return Err(Error::GridMismatch);
    }
    let offset = Vector3::new(offset_x, 0.0, 0.0);
    let dist = |i: SpinBranch, j: SpinBranch, k: usize| {
        let a = left.arm(i).samples[k].position;
        let b = right.arm(j).samples[k].position + offset;
        (a - b).norm()
    };
    let mut separations = Vec::with_capacity(n);
    for k in 0..n {
        let t = left.plus_arm.samples[k].t;
        if right.plus_arm.samples[k].t != t {
            return Err(Error::GridMismatch);
        }
        let (pp, mm, pm, mp) = (dist(P, P, k), dist(M, M, k), dist(P, M, k), dist(M, P, k));
        let scale = offset_x.abs();
        if (pp - mm).abs() > PAIRING_SYMMETRY_TOL * scale || (pm - mp).abs() > PAIRING_SYMMETRY_TOL * scale {
            return Err(Error::Domain(format!(
                "arm pairings not symmetric at t = {t}: ++ {pp}, -- {mm}, +- {pm}, -+ {mp}"
            )));
        }
        let same = 0.5 * (pp + mm);
        let cross = 0.5 * (pm + mp);
        separations.push(Separation {
            t,
            d_close: same.min(cross),
            d_far: same.max(cross),
        });
    }
    Ok(InterferometerPair {
        left,
        right,
        d: offset_x,
        geometry,
        separations,
    })
}

/// Place two copies of `one` a distance `d` apart.
pub fn pair_interferometers(one: Arc<Interferometer>, d: f64, geometry: PairGeometry) -> Result<InterferometerPair> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::Domain("pair distance must be positive".into()));
    }
    build_pair(one.clone(), one, d, geometry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pulse_time_examples() {
        let m = MaterialParams::paper_default();
        let eta = eta_for_pulse_time(160e-6, &m);
        assert!((eta - 9.9e4).abs() / 9.9e4 < 0.01, "{eta}");
        assert_relative_eq!(pulse_time(eta, &m), 160e-6, max_relative = 1e-14);
        assert_relative_eq!(pulse_time(2.0 * eta, &m), 80e-6, max_relative = 1e-14);
        let unit = PI / 2.0 * (-MU_0 / (2.0 * m.chi_rho)).sqrt();
        assert_relative_eq!(pulse_time(unit, &m), 1.0, max_relative = 1e-15);
    }

    #[test]
    fn schedule_identity() {
        let s = PulseSchedule::new(1.6e-4, 0.0731).unwrap();
        assert_eq!(s.t_total - (2.0 * s.t_p + s.t_trap), 0.0);
        let w = s.windows();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0], (0.0, s.t_p));
        assert_eq!(w[1].1, s.t_total);
        assert_eq!(w[1].1 - w[1].0 - s.t_p, (s.t_total - (s.t_p + s.t_trap)) - s.t_p);
    }

    #[test]
    fn schedule_scaling() {
        let m = MaterialParams::paper_default();
        let eta = 1e5;
        let one = build_schedule(eta, &m, 1, 80.0).unwrap();
        let two = build_schedule(eta, &m, 2, 80.0).unwrap();
        let fast = build_schedule(eta, &m, 1, 160.0).unwrap();
        assert_relative_eq!(two.t_trap, 2.0 * one.t_trap, max_relative = 1e-15);
        assert_relative_eq!(fast.t_trap, 0.5 * one.t_trap, max_relative = 1e-15);
        assert!(build_schedule(eta, &m, 1, 0.0).is_err());
    }

    #[test]
    fn free_parameter_parse() {
        assert_eq!(FreeParameter::parse("t_T").unwrap(), FreeParameter::TrapTime);
        assert_eq!(FreeParameter::parse("a3").unwrap(), FreeParameter::A3);
        assert!(FreeParameter::parse("a5").is_err());
    }

    #[test]
    fn objective_weight_default() {
        let t = ClosureTolerances::default();
        assert_relative_eq!(t.objective(1e-9, 0.0), t.objective(0.0, 1e-8), max_relative = 1e-12);
    }
}
