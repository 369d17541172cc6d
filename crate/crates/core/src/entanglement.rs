//! Interaction potentials, trajectory-integrated entanglement phases, and the
//! decoherence-dependent entanglement witness.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{C_LIGHT, HBAR, MU_0};
use crate::dynamics::{segments, MaterialParams};
use crate::error::{Error, Result};
use crate::fields::total_jet;
use crate::interferometry::{pair_interferometers, Interferometer, InterferometerPair, PairGeometry};
use crate::solve::bisect;

/// Casimir-Polder potential between two dielectric spheres, J.
pub fn u_cp(d: f64, material: &MaterialParams) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::Domain(format!("separation must be positive, got {d}")));
    }
    let eps = material.epsilon;
    let volume = 3.0 * material.mass / (4.0 * PI * material.density);
    Ok(-(23.0 * HBAR * C_LIGHT / (4.0 * PI)) * ((eps - 1.0) / (eps + 2.0)) * volume * volume / d.powi(7))
}

/// Interaction of the two field-induced magnetic dipoles, J.
pub fn u_dd(d: f64, b_mag: f64, material: &MaterialParams) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::Domain(format!("separation must be positive, got {d}")));
    }
    if !(b_mag >= 0.0) {
        return Err(Error::Domain(format!(
            "field magnitude must be non-negative, got {b_mag}"
        )));
    }
    let chi_m = material.chi_rho * material.mass;
    Ok(2.0 * chi_m * chi_m * b_mag * b_mag / (4.0 * PI * MU_0 * d.powi(3)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    CasimirPolder,
    DipoleDipole,
}

impl Interaction {
    pub const ALL: [Interaction; 2] = [Interaction::CasimirPolder, Interaction::DipoleDipole];

    pub fn label(self) -> &'static str {
        match self {
            Interaction::CasimirPolder => "cp",
            Interaction::DipoleDipole => "dd",
        }
    }
}

/// Field magnitude fed to the dipole-dipole potential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DipoleField {
    /// `|B|` at the particles' centres of mass at every sample.
    TimeDependent,
    /// One representative magnitude for the whole run, T.
    Frozen(f64),
}

/// Entanglement phase of one interaction.
#[derive(Debug, Clone)]
pub struct PhaseResult {
    pub interaction: Interaction,
    /// rad
    pub delta_phi: f64,
    /// `(t, [U(d_far) - U(d_close)] / hbar)` in rad/s. Pulse switch times
    /// appear twice, once with each one-sided limit.
    pub breakdown: Vec<(f64, f64)>,
}

impl PhaseResult {
    /// Trapezoidal sum of the breakdown over `t_a <= t <= t_b`.
    pub fn partial(&self, t_a: f64, t_b: f64) -> f64 {
        trapezoid(self.breakdown.iter().filter(|(t, _)| *t >= t_a && *t <= t_b))
    }
}

fn trapezoid<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> f64 {
    let mut sum = 0.0;
    let mut prev: Option<&(f64, f64)> = None;
    for p in points {
        if let Some(q) = prev {
            sum += 0.5 * (p.1 + q.1) * (p.0 - q.0);
        }
        prev = Some(p);
    }
    sum
}

/// `(1/hbar) int_0^T [U(d_far(t)) - U(d_close(t))] dt` by the trapezoid rule
/// on the shared trajectory grid.
pub fn phase_integral(
    pair: &InterferometerPair,
    interaction: Interaction,
    dd_field: DipoleField,
) -> Result<PhaseResult> {
    let left = &pair.left;
    let material = left.config.material;
    let model = left.config.force_model()?;
    let right_model = pair.right.config.force_model()?;
    let t_total = left.plus_arm.last().t;
    if pair.right.plus_arm.last().t != t_total {
        return Err(Error::GridMismatch);
    }

    let field_at = |k: usize, pulse_on: bool| -> f64 {
        let p = left.plus_arm.samples[k].position;
        let m = right_b(pair, k);
        let b_plus = total_jet(&p, &model.trap, &model.pulse, pulse_on).b.norm();
        let b_minus = total_jet(&m, &right_model.trap, &right_model.pulse, pulse_on).b.norm();
        0.5 * (b_plus + b_minus)
    };
    let integrand = |k: usize, pulse_on: bool| -> Result<f64> {
        let s = &pair.separations[k];
        let du = match interaction {
            Interaction::CasimirPolder => u_cp(s.d_far, &material)? - u_cp(s.d_close, &material)?,
            Interaction::DipoleDipole => {
                let b = match dd_field {
                    DipoleField::TimeDependent => field_at(k, pulse_on),
                    DipoleField::Frozen(b) => b,
                };
                u_dd(s.d_far, b, &material)? - u_dd(s.d_close, b, &material)?
            }
        };
        Ok(du / HBAR)
    };

    let mut breakdown = Vec::with_capacity(pair.separations.len() + 4);
    let mut k = 0;
    for seg in segments(&model.pulse, t_total)? {
        // Step back onto the shared boundary sample for the new segment.
        while k > 0 && pair.separations[k - 1].t >= seg.t0 {
            k -= 1;
        }
        while k < pair.separations.len() && pair.separations[k].t <= seg.t1 {
            breakdown.push((pair.separations[k].t, integrand(k, seg.pulse_on)?));
            k += 1;
        }
    }
    let delta_phi = trapezoid(breakdown.iter());
    Ok(PhaseResult {
        interaction,
        delta_phi,
        breakdown,
    })
}

/// Position of the right device's minus arm in its own trap frame.
fn right_b(pair: &InterferometerPair, k: usize) -> nalgebra::Vector3<f64> {
    pair.right.minus_arm.samples[k].position
}

/// Noise and damping decoherence, each a rate times the interferometer time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoherenceParams {
    pub gamma_n: f64,
    pub gamma_d: f64,
}

impl DecoherenceParams {
    pub fn new(gamma_n: f64, gamma_d: f64) -> Result<Self> {
        if !(gamma_n >= 0.0 && gamma_d >= 0.0) {
            return Err(Error::Domain("decoherence must be non-negative".into()));
        }
        Ok(Self { gamma_n, gamma_d })
    }

    pub fn none() -> Self {
        Self {
            gamma_n: 0.0,
            gamma_d: 0.0,
        }
    }

    /// Split a total `Gamma` with fraction `damping_fraction` assigned to damping.
    pub fn from_total(gamma: f64, damping_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&damping_fraction) {
            return Err(Error::Domain("damping fraction must lie in [0, 1]".into()));
        }
        Self::new(gamma * (1.0 - damping_fraction), gamma * damping_fraction)
    }

    pub fn total(&self) -> f64 {
        self.gamma_n + self.gamma_d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WitnessResult {
    pub delta_phi: f64,
    pub gamma: DecoherenceParams,
    pub w: f64,
}

impl WitnessResult {
    pub fn entangled(&self) -> bool {
        self.w < 0.0
    }
}

/// `W = 1 - (2 e^{-(Gn+Gd)/2} sin(dphi) + (e^{-2Gn-Gd} + 1)/2)`.
pub fn witness(delta_phi: f64, gamma: DecoherenceParams) -> WitnessResult {
    let DecoherenceParams { gamma_n, gamma_d } = gamma;
    let w = 1.0
        - (2.0 * (-0.5 * (gamma_n + gamma_d)).exp() * delta_phi.sin() + 0.5 * ((-2.0 * gamma_n - gamma_d).exp() + 1.0));
    WitnessResult { delta_phi, gamma, w }
}

/// Decoherence at which the witness turns non-negative, if it starts negative.
///
/// The witness tends to 1/2 for large decoherence, so any negative start has
/// a crossing; the first one on `[0, 64]` is located by a scan and bisection.
pub fn witness_threshold(delta_phi: f64, damping_fraction: f64) -> Result<Option<f64>> {
    let w = |g: f64| -> Result<f64> { Ok(witness(delta_phi, DecoherenceParams::from_total(g, damping_fraction)?).w) };
    if w(0.0)? >= 0.0 {
        return Ok(None);
    }
    let mut lo = 0.0;
    let mut hi = 1e-12_f64;
    while w(hi)? < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 64.0 {
            return Ok(None);
        }
    }
    bisect(w, lo, hi, 0.0, 400).map(Some)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WitnessRow {
    pub gamma: f64,
    pub w: f64,
    pub entangled: bool,
}

#[derive(Debug, Clone)]
pub struct DecoherenceSweep {
    pub delta_phi: f64,
    pub damping_fraction: f64,
    pub rows: Vec<WitnessRow>,
    /// Gamma* where the witness crosses zero.
    pub threshold: Option<f64>,
}

pub fn sweep_decoherence(delta_phi: f64, gamma_grid: &[f64], damping_fraction: f64) -> Result<DecoherenceSweep> {
    let rows = gamma_grid
        .iter()
        .map(|&g| {
            let r = witness(delta_phi, DecoherenceParams::from_total(g, damping_fraction)?);
            Ok(WitnessRow {
                gamma: g,
                w: r.w,
                entangled: r.entangled(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DecoherenceSweep {
        delta_phi,
        damping_fraction,
        rows,
        threshold: witness_threshold(delta_phi, damping_fraction)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistanceRow {
    pub d: f64,
    pub dphi_cp: f64,
    pub dphi_dd: f64,
}

#[derive(Debug, Clone)]
pub struct DistanceSweep {
    pub rows: Vec<DistanceRow>,
    /// Separation where `|dphi_dd| = |dphi_cp|`.
    pub crossover: Option<f64>,
}

/// Both phases at one separation.
pub fn phases_at(one: &Arc<Interferometer>, d: f64, dd_field: DipoleField) -> Result<DistanceRow> {
    let min_d = 2.0 * one.config.material.radius();
    if !(d > min_d) {
        return Err(Error::Domain(format!(
            "separation {d} m does not clear the particle diameter {min_d} m"
        )));
    }
    let pair = pair_interferometers(one.clone(), d, PairGeometry::ParallelXOffset)?;
    Ok(DistanceRow {
        d,
        dphi_cp: phase_integral(&pair, Interaction::CasimirPolder, dd_field)?.delta_phi,
        dphi_dd: phase_integral(&pair, Interaction::DipoleDipole, dd_field)?.delta_phi,
    })
}

/// Re-pair the same interferometer at every `d` and integrate both phases.
pub fn sweep_distance(one: &Arc<Interferometer>, d_values: &[f64], dd_field: DipoleField) -> Result<DistanceSweep> {
    let rows = d_values
        .par_iter()
        .map(|&d| phases_at(one, d, dd_field))
        .collect::<Result<Vec<_>>>()?;

    let dominance = |r: &DistanceRow| (r.dphi_dd.abs() / r.dphi_cp.abs()).ln();
    let mut crossover = None;
    for w in rows.windows(2) {
        let (a, b) = (dominance(&w[0]), dominance(&w[1]));
        if a.is_finite() && b.is_finite() && a.signum() != b.signum() {
            let f = |d: f64| phases_at(one, d, dd_field).map(|r| dominance(&r));
            crossover = Some(bisect(f, w[0].d, w[1].d, w[0].d * 1e-9, 200)?);
            break;
        }
    }
    Ok(DistanceSweep { rows, crossover })
}
