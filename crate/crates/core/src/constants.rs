//! Physical constants (CODATA 2018, SI).

/// Vacuum permeability, T m / A.
pub const MU_0: f64 = 1.256_637_062_12e-6;
/// Bohr magneton, J / T.
pub const MU_B: f64 = 9.274_010_078_3e-24;
/// Reduced Planck constant, J s.
pub const HBAR: f64 = 1.054_571_817e-34;
/// Speed of light, m / s.
pub const C_LIGHT: f64 = 299_792_458.0;
/// Standard gravitational acceleration used throughout, m / s^2.
pub const G_ACCEL: f64 = 9.8;
