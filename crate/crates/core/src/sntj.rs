//! Shot-noise tunnel junction (SNTJ) calibration of the detection chain.
//!
//! The junction's output noise as a function of DC bias is fitted for the electron
//! temperature `T`, the chain noise temperature `T_sys` and the system gain `G_sys`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::constants::{BOLTZMANN, ELEMENTARY_CHARGE, PLANCK};
use crate::{Error, Result};

pub const MIN_POINTS: usize = 7;
pub const MAX_ITERATIONS: usize = 200;
pub const PARAM_TOL: f64 = 1e-10;
/// Converged once an accepted step lowers the cost by less than this fraction.
pub const COST_TOL: f64 = 1e-12;
/// Insertion loss between junction and device planes assumed by default, in dB.
pub const DEFAULT_INSERTION_LOSS_DB: f64 = 2.0;
/// Uncertainty attached to the corrected system gain, in dB.
pub const GAIN_UNCERTAINTY_DB: f64 = 1.0;

/// Below this `|x| = |u|/(2 k_B T)` the bracket terms use their Taylor expansion.
const SERIES_THRESHOLD: f64 = 1e-6;
/// Lower bound on the fitted electron temperature, kelvin.
const T_FLOOR: f64 = 1e-6;
const INITIAL_DAMPING: f64 = 1e-3;
const MAX_DAMPING: f64 = 1e20;
const T_SHRINK_LIMIT: f64 = 0.1;
/// Curvature below this fraction of the largest diagonal entry counts as none.
const DEGENERATE_CURVATURE: f64 = 1e-14;

/// Fitted model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SntjParams {
    /// Electron temperature of the junction in kelvin.
    pub t: f64,
    /// System noise temperature in kelvin.
    pub t_sys: f64,
    /// Linear system gain.
    pub g_sys: f64,
}

/// Measured noise-versus-bias curve at one frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SntjDataset {
    pub frequency_hz: f64,
    pub tau_s: f64,
    /// `(bias voltage in V, noise power in W)`.
    pub points: Vec<(f64, f64)>,
}

impl SntjDataset {
    pub fn new(frequency_hz: f64, tau_s: f64, points: Vec<(f64, f64)>) -> Result<Self> {
        if !(frequency_hz > 0.0) || !frequency_hz.is_finite() {
            return Err(Error::Domain {
                what: "SNTJ frequency",
                value: frequency_hz,
            });
        }
        if !(tau_s > 0.0) || !tau_s.is_finite() {
            return Err(Error::Domain {
                what: "SNTJ acquisition time",
                value: tau_s,
            });
        }
        if points.len() < MIN_POINTS {
            return Err(Error::InsufficientSamples {
                needed: MIN_POINTS,
                got: points.len(),
            });
        }
        if points.iter().any(|(v, n)| !v.is_finite() || !n.is_finite()) {
            return Err(Error::Invalid("SNTJ data contains non-finite values".into()));
        }
        let mut biases: Vec<f64> = points.iter().map(|p| p.0).collect();
        biases.sort_by(f64::total_cmp);
        if let Some(w) = biases.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Invalid(format!("duplicate bias voltage {} V", w[0])));
        }
        Ok(Self {
            frequency_hz,
            tau_s,
            points,
        })
    }

    /// Noise-free data from the model at `n_points` biases spread evenly over
    /// `[−v_max, v_max]`.
    pub fn synthetic(params: &SntjParams, frequency_hz: f64, tau_s: f64, v_max: f64, n_points: usize) -> Result<Self> {
        let step = 2.0 * v_max / (n_points.max(2) - 1) as f64;
        let points = (0..n_points)
            .map(|k| {
                let v = -v_max + k as f64 * step;
                sntj_model(v, params.t, params.t_sys, params.g_sys, frequency_hz, tau_s).map(|n| (v, n))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(frequency_hz, tau_s, points)
    }

    /// Parse `V_volts,N_watts` rows preceded by `# f_hz=` and `# tau_s=` metadata.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let (mut freq, mut tau) = (None, None);
        let mut points = Vec::new();
        let mut seen_header = false;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((key, value)) = meta.split_once('=') {
                    let parsed = || {
                        value.trim().parse::<f64>().map_err(|e| Error::Parse {
                            line: line_no,
                            msg: format!("bad value for {}: {e}", key.trim()),
                        })
                    };
                    match key.trim() {
                        "f_hz" => freq = Some(parsed()?),
                        "tau_s" => tau = Some(parsed()?),
                        _ => {}
                    }
                }
                continue;
            }
            if !seen_header {
                if freq.is_none() || tau.is_none() {
                    let missing = if freq.is_none() { "f_hz" } else { "tau_s" };
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("missing `# {missing}=` metadata before data"),
                    });
                }
                if line != "V_volts,N_watts" {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("expected header `V_volts,N_watts`, found `{line}`"),
                    });
                }
                seen_header = true;
                continue;
            }
            let mut fields = line.split(',');
            let mut next = |name: &str| -> Result<f64> {
                fields
                    .next()
                    .ok_or_else(|| Error::Parse {
                        line: line_no,
                        msg: format!("missing {name} column"),
                    })?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse {
                        line: line_no,
                        msg: format!("bad {name}: {e}"),
                    })
            };
            let v = next("V_volts")?;
            let n = next("N_watts")?;
            points.push((v, n));
        }
        let (Some(f), Some(t)) = (freq, tau) else {
            return Err(Error::Parse {
                line: text.lines().count().max(1),
                msg: "missing `# f_hz=` / `# tau_s=` metadata".into(),
            });
        };
        Self::new(f, t, points)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = format!(
            "# f_hz={:e}\n# tau_s={:e}\nV_volts,N_watts\n",
            self.frequency_hz, self.tau_s
        );
        for (v, n) in &self.points {
            writeln!(out, "{v:e},{n:e}").unwrap();
        }
        out
    }
}

/// `(u/2k_B) coth(u/(2k_B T))` in kelvin with its first and second `T` derivatives.
fn bracket_term(u: f64, t: f64) -> (f64, f64, f64) {
    let x = u / (2.0 * BOLTZMANN * t);
    let x2 = x * x;
    if x.abs() < SERIES_THRESHOLD {
        return (t * (1.0 + x2 / 3.0), 1.0 - x2 / 3.0, 2.0 * x2 / (3.0 * t));
    }
    let value = (u / (2.0 * BOLTZMANN)) / x.tanh();
    let ax = x.abs();
    // d/dT = (x / sinh x)², d²/dT² = 2x²(x cosh x − sinh x)/(T sinh³ x); the large-|x|
    // forms avoid overflow
    let (d_t, d2_t) = if ax > 20.0 {
        let e = (-2.0 * ax).exp();
        (4.0 * x2 * e / ((1.0 - e) * (1.0 - e)), 8.0 * x2 * (ax - 1.0) * e / t)
    } else if ax < 1e-2 {
        // x cosh x − sinh x cancels at small x: (x cosh x − sinh x)/sinh³x = 1/3 − 2x²/15 + O(x⁴)
        ((x / x.sinh()).powi(2), 2.0 * x2 * (1.0 / 3.0 - 2.0 * x2 / 15.0) / t)
    } else {
        let sh = ax.sinh();
        (
            (x / x.sinh()).powi(2),
            2.0 * x2 * (ax * ax.cosh() - sh) / (t * sh * sh * sh),
        )
    };
    (value, d_t, d2_t)
}

/// Junction noise in kelvin, `½[g(eV + hf) + g(eV − hf)]`, with its first and second
/// `T` derivatives.
fn junction_noise(v: f64, t: f64, f: f64) -> (f64, f64, f64) {
    let ev = ELEMENTARY_CHARGE * v;
    let hf = PLANCK * f;
    let a = bracket_term(ev + hf, t);
    let b = bracket_term(ev - hf, t);
    (0.5 * (a.0 + b.0), 0.5 * (a.1 + b.1), 0.5 * (a.2 + b.2))
}

/// Output noise power in watts for bias `v`.
pub fn sntj_model(v: f64, t: f64, t_sys: f64, g_sys: f64, f: f64, tau: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain {
            what: "electron temperature",
            value: t,
        });
    }
    if !(f > 0.0) {
        return Err(Error::Domain {
            what: "frequency",
            value: f,
        });
    }
    if !(tau > 0.0) {
        return Err(Error::Domain {
            what: "acquisition time",
            value: tau,
        });
    }
    let (noise, _, _) = junction_noise(v, t, f);
    Ok((noise + t_sys) * g_sys * BOLTZMANN / tau)
}

/// Result of a junction fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SntjFitResult {
    pub t: f64,
    pub t_sys: f64,
    pub g_sys: f64,
    /// Residual sum of squares in W².
    pub rss: f64,
    /// Standard errors of `(T, T_sys, G_sys)`; infinite (`null` in JSON) for a
    /// parameter the data do not constrain.
    pub stderr: [f64; 3],
    pub iterations: usize,
    pub insertion_loss_db: f64,
    /// Gain referred to the device plane after the insertion-loss correction.
    pub corrected_g_sys: f64,
    /// `corrected_g_sys` shifted by ∓[`GAIN_UNCERTAINTY_DB`].
    pub corrected_g_sys_low: f64,
    pub corrected_g_sys_high: f64,
}

impl SntjFitResult {
    pub fn params(&self) -> SntjParams {
        SntjParams {
            t: self.t,
            t_sys: self.t_sys,
            g_sys: self.g_sys,
        }
    }

    /// Attach an insertion-loss correction.
    pub fn with_insertion_loss(mut self, loss_db: f64) -> Result<Self> {
        self.corrected_g_sys = correct_insertion_loss(&self, loss_db)?;
        let band = 10f64.powf(GAIN_UNCERTAINTY_DB / 10.0);
        self.corrected_g_sys_low = self.corrected_g_sys / band;
        self.corrected_g_sys_high = self.corrected_g_sys * band;
        self.insertion_loss_db = loss_db;
        Ok(self)
    }
}

/// Gain at the device plane, `G_sys / 10^{loss/10}`.
///
/// Attributing the whole fitted gain downstream of the device gives an upper bound on
/// the device-plane gain, and hence a lower bound on the inferred entanglement.
pub fn correct_insertion_loss(fit: &SntjFitResult, loss_db: f64) -> Result<f64> {
    if !(loss_db >= 0.0) || !loss_db.is_finite() {
        return Err(Error::Domain {
            what: "insertion loss (dB)",
            value: loss_db,
        });
    }
    Ok(fit.g_sys / 10f64.powf(loss_db / 10.0))
}

/// Internal parameters: `[T, T_sys, ln G_sys]`.
type Internal = Vector3<f64>;

fn project(p: Internal) -> Internal {
    Vector3::new(p[0].max(T_FLOOR), p[1].max(0.0), p[2].max(0.0))
}

/// Take `step` from `p`, letting `T` shrink by at most [`T_SHRINK_LIMIT`] per step: at
/// very low `T` the model loses all sensitivity to it and the fit could not recover.
fn advance(p: &Internal, step: &Internal) -> Internal {
    let mut next = p + step;
    next[0] = next[0].max(p[0] * T_SHRINK_LIMIT);
    project(next)
}

struct Problem<'a> {
    data: &'a SntjDataset,
    scale: f64,
}

impl Problem<'_> {
    /// Scaled residuals, Jacobian rows and the residual curvature `Σ rᵢ ∇²rᵢ`.
    fn evaluate(&self, p: &Internal) -> (Vec<f64>, Vec<Vector3<f64>>, Matrix3<f64>) {
        let (t, t_sys, g) = (p[0], p[1], p[2].exp());
        let pref = g * BOLTZMANN / self.data.tau_s / self.scale;
        let mut res = Vec::with_capacity(self.data.points.len());
        let mut jac = Vec::with_capacity(self.data.points.len());
        let mut curvature = Matrix3::zeros();
        for &(v, n) in &self.data.points {
            let (noise, d_t, d2_t) = junction_noise(v, t, self.data.frequency_hz);
            let model = (noise + t_sys) * pref;
            let r = model - n / self.scale;
            // model = (noise(T) + T_sys)·e^{ln G}·k_B/τ
            #[rustfmt::skip]
            let hess = Matrix3::new(
                d2_t * pref, 0.0,  d_t * pref,
                0.0,         0.0,  pref,
                d_t * pref,  pref, model,
            );
            curvature += hess * r;
            res.push(r);
            jac.push(Vector3::new(d_t * pref, pref, model));
        }
        (res, jac, curvature)
    }

    fn cost(&self, p: &Internal) -> f64 {
        self.evaluate(p).0.iter().map(|r| r * r).sum()
    }
}

fn normal_equations(res: &[f64], jac: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let mut jtj = Matrix3::zeros();
    let mut jtr = Vector3::zeros();
    for (r, j) in res.iter().zip(jac) {
        jtj += j * j.transpose();
        jtr += j * *r;
    }
    (jtj, jtr)
}

fn relative_change(old: &Internal, new: &Internal) -> f64 {
    // floors keep parameters that sit at zero from dominating the test
    let floors = [T_FLOOR, 1e-6, 1.0];
    (0..3)
        .map(|k| (new[k] - old[k]).abs() / old[k].abs().max(floors[k]))
        .fold(0.0, f64::max)
}

/// Diagonal of `(JᵀJ)⁻¹` over the parameters the data constrain. A parameter with no
/// curvature gets infinite variance.
fn parameter_variances(jtj: &Matrix3<f64>) -> Result<[f64; 3]> {
    let floor = jtj.diagonal().max() * DEGENERATE_CURVATURE;
    let free: Vec<usize> = (0..3).filter(|&k| jtj[(k, k)] > floor).collect();
    let sub = DMatrix::from_fn(free.len(), free.len(), |i, j| jtj[(free[i], free[j])]);
    let inv = sub.try_inverse().ok_or(Error::SingularJacobian)?;
    let mut out = [f64::INFINITY; 3];
    for (i, &k) in free.iter().enumerate() {
        out[k] = inv[(i, i)];
    }
    Ok(out)
}

/// Least-squares fit of `(T, T_sys, G_sys)` by damped Newton iteration.
///
/// Damping starts at 1e-3 and moves by ×10 / ÷10 on rejected / accepted steps.
/// `G_sys` is fitted in log space and bounds are enforced by projection. Residuals
/// are unweighted.
pub fn fit_sntj(data: &SntjDataset, initial: &SntjParams) -> Result<SntjFitResult> {
    if !(initial.t > 0.0) || !(initial.t_sys >= 0.0) || !(initial.g_sys >= 1.0) {
        return Err(Error::Invalid(format!(
            "initial guess {initial:?} outside physical bounds (T > 0, T_sys ≥ 0, G_sys ≥ 1)"
        )));
    }
    let scale = data.points.iter().map(|p| p.1.abs()).sum::<f64>() / data.points.len() as f64;
    if !(scale > 0.0) {
        return Err(Error::Invalid("SNTJ noise data are all zero".into()));
    }
    let problem = Problem { data, scale };

    let mut p = project(Vector3::new(initial.t, initial.t_sys, initial.g_sys.ln()));
    let (mut res, mut jac, mut curvature) = problem.evaluate(&p);
    let mut cost: f64 = res.iter().map(|r| r * r).sum();
    let mut lambda = INITIAL_DAMPING;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let (jtj, jtr) = normal_equations(&res, &jac);
        let floor = jtj.diagonal().max() * DEGENERATE_CURVATURE;
        if !(floor > 0.0) {
            return Err(Error::SingularJacobian);
        }
        if jtr.amax() == 0.0 {
            converged = true;
            break;
        }
        // full Newton Hessian: with noisy data the residual term is comparable to JᵀJ
        // along the weakly determined T direction, where Gauss–Newton alone crawls.
        // A direction with no curvature (T deep in the quantum regime) gets a floor
        // on its scaling so the damped system stays solvable
        let scaling = jtj.diagonal().map(|d| d.max(floor));
        let damped = jtj + curvature + Matrix3::from_diagonal(&(scaling * lambda));
        let Some(step) = damped.cholesky().map(|c| c.solve(&(-jtr))) else {
            lambda *= 10.0;
            if lambda > MAX_DAMPING {
                return Err(Error::SingularJacobian);
            }
            continue;
        };
        let trial = advance(&p, &step);
        let change = relative_change(&p, &trial);
        let trial_cost = problem.cost(&trial);
        if trial_cost <= cost {
            let reduction = (cost - trial_cost) / cost.max(f64::MIN_POSITIVE);
            p = trial;
            cost = trial_cost;
            (res, jac, curvature) = problem.evaluate(&p);
            lambda = (lambda / 10.0).max(1e-12);
            if change < PARAM_TOL || reduction < COST_TOL {
                converged = true;
                break;
            }
        } else {
            if change < PARAM_TOL {
                // no representable improvement left
                converged = true;
                break;
            }
            lambda *= 10.0;
            if lambda > MAX_DAMPING {
                break;
            }
        }
    }

    let rss = cost * scale * scale;
    if !converged {
        return Err(Error::NoConvergence {
            iterations,
            params: [p[0], p[1], p[2].exp()],
            rss,
        });
    }

    let (jtj, _) = normal_equations(&res, &jac);
    let dof = data.points.len().saturating_sub(3).max(1) as f64;
    let s2 = cost / dof;
    let g_sys = p[2].exp();
    let mut var = parameter_variances(&jtj)?.map(|v| v * s2);
    var[2] *= g_sys * g_sys;
    let stderr = var.map(|v| v.max(0.0).sqrt());

    SntjFitResult {
        t: p[0],
        t_sys: p[1],
        g_sys,
        rss,
        stderr,
        iterations,
        insertion_loss_db: 0.0,
        corrected_g_sys: g_sys,
        corrected_g_sys_low: g_sys,
        corrected_g_sys_high: g_sys,
    }
    .with_insertion_loss(0.0)
}

/// Rough starting point read off the data: gain from the high-bias slope
/// `dN/dV → e G_sys / (2τ)`, system temperature from the zero-bias level.
pub fn initial_guess(data: &SntjDataset) -> SntjParams {
    let mut pts = data.points.clone();
    pts.sort_by(|a, b| a.0.abs().total_cmp(&b.0.abs()));
    let outer = &pts[pts.len() / 2..];
    let n = outer.len() as f64;
    let mx = outer.iter().map(|p| p.0.abs()).sum::<f64>() / n;
    let my = outer.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = outer.iter().map(|p| (p.0.abs() - mx) * (p.1 - my)).sum();
    let sxx: f64 = outer.iter().map(|p| (p.0.abs() - mx).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let g_sys = (2.0 * data.tau_s * slope / ELEMENTARY_CHARGE).max(1.0);
    let floor_k = PLANCK * data.frequency_hz / (2.0 * BOLTZMANN);
    let t_sys = (pts[0].1 * data.tau_s / (g_sys * BOLTZMANN) - floor_k).max(0.0);
    SntjParams {
        t: floor_k.max(0.01),
        t_sys,
        g_sys,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const F: f64 = 4.6e9;
    const TAU: f64 = 6e-6;
    const TRUE: SntjParams = SntjParams {
        t: 0.05,
        t_sys: 3.0,
        g_sys: 1e9,
    };

    fn rel(a: f64, b: f64) -> f64 {
        (a / b - 1.0).abs()
    }

    #[test]
    fn zero_bias_low_temperature_limit() {
        // coth → 1 as T → 0: bracket → hf/(2k_B)
        let n = sntj_model(0.0, 1e-4, 3.0, 1e9, F, TAU).unwrap();
        let expected = (PLANCK * F / (2.0 * BOLTZMANN) + 3.0) * 1e9 * BOLTZMANN / TAU;
        assert!(rel(n, expected) < 1e-12);
    }

    #[test]
    fn high_bias_slope() {
        let v = 100.0 * PLANCK * F / ELEMENTARY_CHARGE;
        let h = 1e-3 * v;
        let n = |v| sntj_model(v, 0.05, 3.0, 1e9, F, TAU).unwrap();
        let slope = (n(v + h) - n(v - h)) / (2.0 * h);
        assert!(rel(slope, ELEMENTARY_CHARGE * 1e9 / (2.0 * TAU)) < 1e-6);
    }

    #[test]
    fn even_in_bias() {
        for v in [1e-6, 1.9e-5, 3e-5, 2.5e-4] {
            let a = sntj_model(v, 0.05, 3.0, 1e9, F, TAU).unwrap();
            let b = sntj_model(-v, 0.05, 3.0, 1e9, F, TAU).unwrap();
            assert!(rel(a, b) < 1e-14);
        }
    }

    #[test]
    fn continuous_through_the_removable_singularity() {
        // the singular term alone, on both sides of the series threshold
        let t = 0.05;
        for x in [1e-8, 9.9e-7, 1.01e-6, 3e-6, 1e-5] {
            for sign in [1.0, -1.0] {
                let u = sign * x * 2.0 * BOLTZMANN * t;
                let limit = t * (1.0 + x * x / 3.0);
                assert!(rel(bracket_term(u, t).0, limit) < 1e-9, "x={x}");
            }
        }
        assert_eq!(bracket_term(0.0, t), (t, 1.0, 0.0));

        // full model: left/right limits around eV = ±hf agree with the value there
        let v0 = PLANCK * F / ELEMENTARY_CHARGE;
        let n = |v| sntj_model(v, t, 3.0, 1e9, F, TAU).unwrap();
        for sign in [1.0, -1.0] {
            let center = n(sign * v0);
            assert!(center.is_finite());
            for eps in [1e-11, 1e-9, 4.5e-7, 4.6e-7] {
                let left = n(sign * v0 * (1.0 - eps));
                let right = n(sign * v0 * (1.0 + eps));
                assert!(rel(0.5 * (left + right), center) < 1e-9, "eps={eps}");
                assert!(rel(left, center) < 1e-6 && rel(right, center) < 1e-6);
            }
        }
    }

    #[test]
    fn model_rejects_nonpositive_temperature() {
        assert!(sntj_model(0.0, 0.0, 3.0, 1e9, F, TAU).is_err());
        assert!(sntj_model(0.0, -1.0, 3.0, 1e9, F, TAU).is_err());
    }

    #[test]
    fn temperature_derivative_matches_finite_difference() {
        for v in [0.0, 1e-5, 2e-5, 4e-5, 3e-4] {
            let t = 0.05;
            let h = 1e-7;
            let (_, d, _) = junction_noise(v, t, F);
            let fd = (junction_noise(v, t + h, F).0 - junction_noise(v, t - h, F).0) / (2.0 * h);
            assert!((d - fd).abs() < 1e-6, "v={v} d={d} fd={fd}");
        }
    }

    #[test]
    fn second_temperature_derivative_matches_finite_difference() {
        for v in [0.0, 1e-5, 1.9e-5, 4e-5, 3e-4, -2e-4] {
            for t in [0.02, 0.05, 0.3] {
                let h = 1e-6 * t;
                let (_, _, d2) = junction_noise(v, t, F);
                let fd = (junction_noise(v, t + h, F).1 - junction_noise(v, t - h, F).1) / (2.0 * h);
                assert!((d2 - fd).abs() < 1e-5 * (1.0 + fd.abs()), "v={v} t={t} d2={d2} fd={fd}");
            }
        }
        // each branch joins the next; g'' scales as x², so compare g''/x²
        let t = 0.05;
        let at = |x: f64| bracket_term(2.0 * BOLTZMANN * t * x, t).2 / (x * x);
        for edge in [SERIES_THRESHOLD, 1e-2] {
            let (below, above) = (at(edge * 0.99), at(edge * 1.01));
            assert!((below - above).abs() < 1e-5 * above, "edge {edge}: {below} vs {above}");
        }
    }

    #[test]
    fn noiseless_fit_recovers_parameters() {
        let data = SntjDataset::synthetic(&TRUE, F, TAU, 0.5e-3, 41).unwrap();
        let guess = SntjParams {
            t: 0.1,
            t_sys: 2.0,
            g_sys: 3e8,
        };
        let fit = fit_sntj(&data, &guess).unwrap();
        assert!(rel(fit.t, 0.05) < 1e-3);
        assert!(rel(fit.t_sys, 3.0) < 1e-3);
        assert!(rel(fit.g_sys, 1e9) < 1e-3);
        assert!(fit.stderr.iter().all(|s| *s >= 0.0));
    }

    #[test]
    fn refit_is_idempotent() {
        let data = SntjDataset::synthetic(&TRUE, F, TAU, 0.5e-3, 41).unwrap();
        let fit = fit_sntj(&data, &initial_guess(&data)).unwrap();
        let again = fit_sntj(&data, &fit.params()).unwrap();
        assert!(rel(again.t, fit.t) < 1e-12);
        assert!(rel(again.t_sys, fit.t_sys) < 1e-12);
        assert!(rel(again.g_sys, fit.g_sys) < 1e-12);
    }

    #[test]
    fn scale_equivariance() {
        let data = SntjDataset::synthetic(&TRUE, F, TAU, 0.5e-3, 41).unwrap();
        let mut scaled = data.clone();
        let c = 7.3;
        for p in scaled.points.iter_mut() {
            p.1 *= c;
        }
        let guess = initial_guess(&data);
        let a = fit_sntj(&data, &guess).unwrap();
        let b = fit_sntj(
            &scaled,
            &SntjParams {
                g_sys: guess.g_sys * c,
                ..guess
            },
        )
        .unwrap();
        assert!(rel(b.g_sys, c * a.g_sys) < 1e-9);
        assert!(rel(b.t, a.t) < 1e-9);
        assert!(rel(b.t_sys, a.t_sys) < 1e-9);
    }

    #[test]
    fn zero_system_temperature_stays_at_bound() {
        let params = SntjParams { t_sys: 0.0, ..TRUE };
        let data = SntjDataset::synthetic(&params, F, TAU, 0.5e-3, 41).unwrap();
        let fit = fit_sntj(
            &data,
            &SntjParams {
                t: 0.08,
                t_sys: 1.0,
                g_sys: 5e8,
            },
        )
        .unwrap();
        assert!(fit.t_sys >= 0.0 && fit.t_sys < 0.05, "{}", fit.t_sys);
        assert!(rel(fit.g_sys, 1e9) < 1e-3);
    }

    #[test]
    fn insertion_loss_correction() {
        let data = SntjDataset::synthetic(&TRUE, F, TAU, 0.5e-3, 41).unwrap();
        let fit = fit_sntj(&data, &initial_guess(&data)).unwrap();
        assert_eq!(correct_insertion_loss(&fit, 0.0).unwrap(), fit.g_sys);
        assert!((fit.g_sys / correct_insertion_loss(&fit, 2.0).unwrap() - 1.585).abs() < 1e-3);
        assert!((fit.g_sys / correct_insertion_loss(&fit, 3.0103).unwrap() - 2.0).abs() < 1e-4);
        assert!(correct_insertion_loss(&fit, -1.0).is_err());
        let corrected = fit.clone().with_insertion_loss(2.0).unwrap();
        assert!(corrected.corrected_g_sys <= corrected.g_sys);
        assert!(corrected.corrected_g_sys_low < corrected.corrected_g_sys);
    }

    #[test]
    fn dataset_validation() {
        let pts: Vec<_> = (0..6).map(|k| (k as f64 * 1e-5, 1e-12)).collect();
        assert!(SntjDataset::new(F, TAU, pts).is_err());
        let mut pts: Vec<_> = (0..8).map(|k| (k as f64 * 1e-5, 1e-12)).collect();
        pts[3].0 = pts[2].0;
        assert!(SntjDataset::new(F, TAU, pts).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let data = SntjDataset::synthetic(&TRUE, F, TAU, 0.5e-3, 11).unwrap();
        let parsed = SntjDataset::from_csv_str(&data.to_csv_string()).unwrap();
        assert_eq!(parsed, data);

        let no_meta = "# tau_s=6e-6\nV_volts,N_watts\n0,1\n";
        match SntjDataset::from_csv_str(no_meta) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("f_hz"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let bad_row = "# f_hz=4.6e9\n# tau_s=6e-6\nV_volts,N_watts\n0,abc\n";
        assert!(matches!(
            SntjDataset::from_csv_str(bad_row),
            Err(Error::Parse { line: 4, .. })
        ));
    }

    #[test]
    fn bad_initial_guess_rejected() {
        let data = SntjDataset::synthetic(&TRUE, F, TAU, 0.5e-3, 41).unwrap();
        assert!(fit_sntj(
            &data,
            &SntjParams {
                t: -1.0,
                t_sys: 1.0,
                g_sys: 1e9
            }
        )
        .is_err());
        assert!(fit_sntj(
            &data,
            &SntjParams {
                t: 0.1,
                t_sys: 1.0,
                g_sys: 0.5
            }
        )
        .is_err());
    }
}
