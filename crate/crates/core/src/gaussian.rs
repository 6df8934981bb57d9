//! Two-mode Gaussian state algebra.
//!
//! States are described by their 4×4 covariance matrix over the quadratures
//! `(x_s, p_s, x_i, p_i)`, normalized so that the two-mode vacuum is the identity.
//! Losses follow the beam-splitter model: each mode is mixed with vacuum with
//! transmission `η`.

use std::f64::consts::TAU;
use std::fmt;

use nalgebra::{Matrix2, Matrix4, SMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Absolute tolerance for the symmetry invariant of [`CovMatrix4`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Discriminants of the symplectic eigenvalue formula above `-DISCRIMINANT_TOL` are
/// clamped to zero. Pure states sit exactly on this boundary.
pub const DISCRIMINANT_TOL: f64 = 1e-9;

/// Variance of a collective quadrature for the two-mode vacuum.
pub const VACUUM_COLLECTIVE_VARIANCE: f64 = 0.5;

/// Squeezing amplitude and phase of `ξ = r e^{iφ}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqueezeSpec {
    r: f64,
    phi: f64,
}

impl SqueezeSpec {
    pub fn new(r: f64, phi: f64) -> Result<Self> {
        if !(r >= 0.0) || !r.is_finite() {
            return Err(Error::Domain {
                what: "squeezing amplitude r",
                value: r,
            });
        }
        if !phi.is_finite() {
            return Err(Error::Domain {
                what: "squeezing phase",
                value: phi,
            });
        }
        Ok(Self {
            r,
            phi: reduce_angle(phi),
        })
    }

    /// Squeezing from the amplifier power gain, `r = arcosh(√G)`.
    pub fn from_gain(gain: f64, phi: f64) -> Result<Self> {
        Self::new(gain_to_r(gain)?, phi)
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    /// Phase in `[0, 2π)`.
    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn gain(&self) -> f64 {
        r_to_gain(self.r)
    }
}

fn reduce_angle(phi: f64) -> f64 {
    let reduced = phi.rem_euclid(TAU);
    // rem_euclid rounds tiny negative inputs up to exactly TAU
    if reduced >= TAU {
        0.0
    } else {
        reduced
    }
}

/// Affine map from the pump input phase to the squeezing phase, `φ = k·θ_p + φ₀`.
///
/// For four-wave mixing `k = 2` is the usual assumption. Nothing in the toolkit depends
/// on this mapping; sweeps are expressed directly in `φ`.
pub fn squeeze_phase_from_pump(theta_p: f64, multiplier: f64, offset: f64) -> f64 {
    reduce_angle(multiplier * theta_p + offset)
}

/// Beam-splitter loss model with per-mode transmissions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    eta_s: f64,
    eta_i: f64,
}

impl LossModel {
    pub fn new(eta_s: f64, eta_i: f64) -> Result<Self> {
        for (what, eta) in [("signal transmission", eta_s), ("idler transmission", eta_i)] {
            if !(0.0..=1.0).contains(&eta) {
                return Err(Error::Domain { what, value: eta });
            }
        }
        Ok(Self { eta_s, eta_i })
    }

    pub fn lossless() -> Self {
        Self { eta_s: 1.0, eta_i: 1.0 }
    }

    /// Equal loss `ε̄` on both modes.
    pub fn symmetric(epsilon_bar: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon_bar) {
            return Err(Error::Domain {
                what: "average loss",
                value: epsilon_bar,
            });
        }
        Self::new(1.0 - epsilon_bar, 1.0 - epsilon_bar)
    }

    /// Build from average loss `ε̄` and asymmetry `δ`, i.e. `η_{s,i} = 1 − ε̄ ∓ ε̄δ`.
    pub fn from_average(epsilon_bar: f64, delta: f64) -> Result<Self> {
        let half_diff = epsilon_bar * delta;
        Self::new(1.0 - epsilon_bar - half_diff, 1.0 - epsilon_bar + half_diff)
    }

    pub fn eta_s(&self) -> f64 {
        self.eta_s
    }

    pub fn eta_i(&self) -> f64 {
        self.eta_i
    }

    /// Average loss `ε̄ = 1 − (η_s + η_i)/2`.
    pub fn epsilon_bar(&self) -> f64 {
        1.0 - 0.5 * (self.eta_s + self.eta_i)
    }

    /// Loss asymmetry `δ = (η_i − η_s)/(2ε̄)`, zero when there is no loss.
    pub fn delta(&self) -> f64 {
        let eps = self.epsilon_bar();
        if eps == 0.0 {
            0.0
        } else {
            (self.eta_i - self.eta_s) / (2.0 * eps)
        }
    }

    /// Average power loss in dB, `−10 log10((η_s + η_i)/2)`.
    pub fn loss_db(&self) -> f64 {
        -10.0 * (0.5 * (self.eta_s + self.eta_i)).log10()
    }
}

/// Symmetric 4×4 covariance matrix over `(x_s, p_s, x_i, p_i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovMatrix4(Matrix4<f64>);

impl CovMatrix4 {
    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    /// Wrap a matrix, rejecting it if it is not symmetric to [`SYMMETRY_TOL`].
    pub fn new(m: Matrix4<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("covariance matrix has non-finite entries".into()));
        }
        let asym = max_asymmetry(&m);
        if asym > SYMMETRY_TOL {
            return Err(Error::NotSymmetric(asym));
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: [[f64; 4]; 4]) -> Result<Self> {
        Self::new(Matrix4::from_fn(|i, j| rows[i][j]))
    }

    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 16 {
            return Err(Error::Invalid(format!(
                "covariance matrix needs 16 values, got {}",
                values.len()
            )));
        }
        Self::new(Matrix4::from_row_slice(values))
    }

    pub(crate) fn from_matrix_unchecked(m: Matrix4<f64>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                out[4 * i + j] = self.0[(i, j)];
            }
        }
        out
    }

    /// Row-major CSV line with 17 significant digits per value.
    pub fn to_csv_row(&self) -> String {
        self.to_row_major()
            .iter()
            .map(|v| format!("{v:.16e}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn signal_block(&self) -> Matrix2<f64> {
        self.0.fixed_view::<2, 2>(0, 0).into_owned()
    }

    pub fn idler_block(&self) -> Matrix2<f64> {
        self.0.fixed_view::<2, 2>(2, 2).into_owned()
    }

    pub fn correlation_block(&self) -> Matrix2<f64> {
        self.0.fixed_view::<2, 2>(0, 2).into_owned()
    }

    /// Determinant via the Schur complement of the signal block, which keeps the
    /// cancellation between the large diagonal and correlation entries of strongly
    /// squeezed states under control.
    pub fn determinant(&self) -> f64 {
        let a = self.signal_block();
        let b = self.idler_block();
        let c = self.correlation_block();
        let det_a = a.determinant();
        match a.try_inverse() {
            Some(a_inv) if det_a.abs() > f64::MIN_POSITIVE => det_a * (b - c.transpose() * a_inv * c).determinant(),
            _ => self.0.determinant(),
        }
    }

    pub fn max_abs_diff(&self, other: &CovMatrix4) -> f64 {
        (self.0 - other.0).amax()
    }

    /// Smallest eigenvalue of the Hermitian matrix `σ + iΩ`.
    ///
    /// Physical states have a non-negative value; pure states sit at zero.
    pub fn min_uncertainty_eigenvalue(&self) -> f64 {
        let omega = symplectic_form();
        // real representation of the Hermitian matrix S + iΩ
        let mut real = SMatrix::<f64, 8, 8>::zeros();
        real.fixed_view_mut::<4, 4>(0, 0).copy_from(&self.0);
        real.fixed_view_mut::<4, 4>(4, 4).copy_from(&self.0);
        real.fixed_view_mut::<4, 4>(0, 4).copy_from(&(-omega));
        real.fixed_view_mut::<4, 4>(4, 0).copy_from(&omega);
        SymmetricEigen::new(real).eigenvalues.min()
    }

    /// Whether `σ + iΩ ≥ 0` holds to within `tol`.
    pub fn is_physical(&self, tol: f64) -> bool {
        self.min_uncertainty_eigenvalue() >= -tol
    }
}

impl fmt::Display for CovMatrix4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..4 {
            for j in 0..4 {
                if j > 0 {
                    write!(f, " ")?;
                }
                write!(f, "{:>10.6}", self.0[(i, j)])?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

impl Serialize for CovMatrix4 {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for CovMatrix4 {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(deserializer)?;
        CovMatrix4::from_row_major(&values).map_err(serde::de::Error::custom)
    }
}

fn max_asymmetry(m: &Matrix4<f64>) -> f64 {
    (m - m.transpose()).amax()
}

/// Two-mode symplectic form `Ω = ω ⊕ ω`, `ω = [[0, 1], [−1, 0]]`.
pub fn symplectic_form() -> Matrix4<f64> {
    let mut omega = Matrix4::zeros();
    omega[(0, 1)] = 1.0;
    omega[(1, 0)] = -1.0;
    omega[(2, 3)] = 1.0;
    omega[(3, 2)] = -1.0;
    omega
}

/// `r = arcosh(√G)` for a linear power gain `G ≥ 1`.
pub fn gain_to_r(gain: f64) -> Result<f64> {
    if !(gain >= 1.0) || !gain.is_finite() {
        return Err(Error::Domain {
            what: "linear power gain",
            value: gain,
        });
    }
    Ok(gain.sqrt().acosh())
}

/// `G = cosh²r`.
pub fn r_to_gain(r: f64) -> f64 {
    let c = r.cosh();
    c * c
}

/// Covariance matrix of a two-mode squeezed vacuum after beam-splitter loss.
pub fn tms_covariance(sq: &SqueezeSpec, loss: &LossModel) -> CovMatrix4 {
    let (ch, sh) = ((2.0 * sq.r).cosh(), (2.0 * sq.r).sinh());
    let (es, ei) = (loss.eta_s, loss.eta_i);
    let a = es * ch + (1.0 - es);
    let b = ei * ch + (1.0 - ei);
    let c = (es * ei).sqrt() * sh;
    let (cc, cs) = (c * sq.phi.cos(), c * sq.phi.sin());
    CovMatrix4(Matrix4::new(
        a, 0.0, cc, cs, //
        0.0, a, cs, -cc, //
        cc, cs, b, 0.0, //
        cs, -cc, 0.0, b,
    ))
}

/// Flip the sign of the idler momentum: negates the `p_i` row and column.
pub fn partial_transpose(sigma: &CovMatrix4) -> CovMatrix4 {
    let mut m = sigma.0;
    for k in 0..4 {
        m[(3, k)] = -m[(3, k)];
        m[(k, 3)] = -m[(k, 3)];
    }
    CovMatrix4(m)
}

/// Smaller symplectic eigenvalue of a two-mode covariance matrix.
///
/// Uses the seralian `Δ = det A + det B + 2 det C`. Applied to a partially transposed
/// matrix this is the PPT statistic: the state is entangled iff the result is below 1.
pub fn symplectic_nu_minus(sigma: &CovMatrix4) -> Result<f64> {
    let asym = max_asymmetry(&sigma.0);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    let seralian = sigma.signal_block().determinant()
        + sigma.idler_block().determinant()
        + 2.0 * sigma.correlation_block().determinant();
    let det = sigma.determinant();
    let mut disc = seralian * seralian - 4.0 * det;
    if disc < 0.0 {
        if disc >= -DISCRIMINANT_TOL {
            disc = 0.0;
        } else {
            return Err(Error::NegativeDiscriminant(disc));
        }
    }
    let root = disc.sqrt();
    // (Δ − √disc)/2 rewritten as 2·det/(Δ + √disc) to avoid cancellation
    let denom = seralian + root;
    if !(denom > 0.0) || det < -DISCRIMINANT_TOL {
        return Err(Error::Domain {
            what: "squared symplectic eigenvalue",
            value: 0.5 * (seralian - root),
        });
    }
    let nu_sq = (2.0 * det / denom).max(0.0);
    Ok(nu_sq.sqrt())
}

/// `−ln ν₋` of the partially transposed state, without clipping at zero.
pub fn log_negativity_unclipped(sigma: &CovMatrix4) -> Result<f64> {
    Ok(-symplectic_nu_minus(&partial_transpose(sigma))?.ln())
}

/// Logarithmic negativity `E_N = max(−ln ν₋, 0)`.
pub fn log_negativity(sigma: &CovMatrix4) -> Result<f64> {
    Ok(log_negativity_unclipped(sigma)?.max(0.0))
}

/// Lumped-model closed form
/// `E_N = −ln[e^{−2r} + (1 − e^{−2r}) ε̄ + tanh(r) ε̄² δ²]`, clipped at zero.
///
/// Exact for symmetric loss. For asymmetric loss it approximates the matrix result;
/// see the crate tests for the measured agreement region.
pub fn log_negativity_closed_form(sq: &SqueezeSpec, loss: &LossModel) -> f64 {
    let e2r = (-2.0 * sq.r).exp();
    let eps = loss.epsilon_bar();
    // ε̄δ = (η_i − η_s)/2 stays finite when ε̄ → 0
    let eps_delta = 0.5 * (loss.eta_i - loss.eta_s);
    let arg = e2r + (1.0 - e2r) * eps + sq.r.tanh() * eps_delta * eps_delta;
    (-arg.ln()).max(0.0)
}

/// Variances of the collective quadratures `x± = x_s ± x_i`, `p± = p_s ± p_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollectiveVariances {
    pub x_plus: f64,
    pub p_plus: f64,
    pub x_minus: f64,
    pub p_minus: f64,
}

impl CollectiveVariances {
    pub fn as_array(&self) -> [f64; 4] {
        [self.x_plus, self.p_plus, self.x_minus, self.p_minus]
    }

    pub fn min(&self) -> f64 {
        self.as_array().into_iter().fold(f64::INFINITY, f64::min)
    }
}

pub fn collective_variances(sigma: &CovMatrix4) -> CollectiveVariances {
    let s = |i: usize, j: usize| sigma.0[(i, j)];
    CollectiveVariances {
        x_plus: (s(0, 0) + s(2, 2) + 2.0 * s(0, 2)) / 4.0,
        p_plus: (s(1, 1) + s(3, 3) + 2.0 * s(1, 3)) / 4.0,
        x_minus: (s(0, 0) + s(2, 2) - 2.0 * s(0, 2)) / 4.0,
        p_minus: (s(1, 1) + s(3, 3) - 2.0 * s(1, 3)) / 4.0,
    }
}

/// Squeezing in dB relative to the vacuum collective variance, `10 log10(var/0.5)`.
pub fn squeezing_db(variance: f64) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(Error::Domain {
            what: "collective variance",
            value: variance,
        });
    }
    Ok(10.0 * (variance / VACUUM_COLLECTIVE_VARIANCE).log10())
}

/// Entropy of formation in ebits from the logarithmic negativity.
///
/// `E_F = c₊ log₂ c₊ − c₋ log₂ c₋` with `c± = (δ^{−1/2} ± δ^{1/2})²/4`, `δ = 2^{E_N}`.
/// Negative inputs are treated as zero.
pub fn entropy_formation(log_neg: f64) -> f64 {
    let d = log_neg.max(0.0).exp2();
    let (lo, hi) = (d.sqrt().recip(), d.sqrt());
    let c_plus = (lo + hi).powi(2) / 4.0;
    let c_minus = (lo - hi).powi(2) / 4.0;
    xlog2x(c_plus) - xlog2x(c_minus)
}

fn xlog2x(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.log2()
    }
}

/// Entangled-bit rate in ebit/s.
pub fn ebit_rate(entropy_formation: f64, bandwidth_hz: f64) -> f64 {
    entropy_formation * bandwidth_hz
}

/// Symmetric loss accumulated over `n_cells` cells, `η = (1 − ε_cell)^N`.
pub fn loss_from_cells(n_cells: u32, eps_cell: f64) -> Result<LossModel> {
    if !(0.0..1.0).contains(&eps_cell) {
        return Err(Error::Domain {
            what: "per-cell loss",
            value: eps_cell,
        });
    }
    let eta = (1.0 - eps_cell).powi(n_cells as i32);
    LossModel::new(eta, eta)
}

/// Figures of merit of a two-mode state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntanglementReport {
    /// Smaller symplectic eigenvalue of the partially transposed state.
    pub nu_minus: f64,
    pub log_negativity: f64,
    /// `−ln ν₋` before clipping.
    pub log_negativity_raw: f64,
    /// Entropy of formation in ebits.
    pub entropy_formation: f64,
    pub var_x_plus: f64,
    pub var_p_plus: f64,
    pub var_x_minus: f64,
    pub var_p_minus: f64,
    /// Headline squeezing `Sq₊` from the `x₊` variance.
    pub squeezing_db_x_plus: f64,
    /// Best squeezing over the four collective quadratures.
    pub squeezing_db_best: f64,
}

pub fn entanglement_report(sigma: &CovMatrix4) -> Result<EntanglementReport> {
    let nu_minus = symplectic_nu_minus(&partial_transpose(sigma))?;
    let raw = -nu_minus.ln();
    let log_negativity = raw.max(0.0);
    let vars = collective_variances(sigma);
    let mut best = f64::INFINITY;
    for v in vars.as_array() {
        best = best.min(squeezing_db(v)?);
    }
    Ok(EntanglementReport {
        nu_minus,
        log_negativity,
        log_negativity_raw: raw,
        entropy_formation: entropy_formation(log_negativity),
        var_x_plus: vars.x_plus,
        var_p_plus: vars.p_plus,
        var_x_minus: vars.x_minus,
        var_p_minus: vars.p_minus,
        squeezing_db_x_plus: squeezing_db(vars.x_plus)?,
        squeezing_db_best: best,
    })
}
