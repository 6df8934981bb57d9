//! Physical constants (CODATA, 9 significant digits).

/// Elementary charge in coulombs.
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_63e-19;

/// Planck constant in joule-seconds.
pub const PLANCK: f64 = 6.626_070_15e-34;

/// Boltzmann constant in joules per kelvin.
pub const BOLTZMANN: f64 = 1.380_649_00e-23;
