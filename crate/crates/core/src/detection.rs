//! Heterodyne detection chain: added amplifier noise, system gain, volt-to-photon
//! conversion and Monte-Carlo sampling of pump-on/pump-off acquisitions.

use std::io::{Read, Write};

use nalgebra::{Matrix4, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{BOLTZMANN, PLANCK};
use crate::gaussian::CovMatrix4;
use crate::{Error, Result};

/// Magic bytes at the start of a binary acquisition file.
pub const BATCH_MAGIC: &[u8; 4] = b"TWPA";
pub const BATCH_FORMAT_VERSION: u32 = 1;

/// Samples drawn per RNG substream. Fixed so that output does not depend on the
/// number of worker threads.
const SAMPLE_CHUNK: usize = 1 << 14;

/// Header of the CSV sample export.
pub const BATCH_CSV_HEADER: &str = "x_s,p_s,x_i,p_i,pump";

/// Parameters of the amplification and acquisition chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    /// Linear system power gain at the signal frequency.
    pub g_sys_s: f64,
    /// Linear system power gain at the idler frequency.
    pub g_sys_i: f64,
    /// Added thermal noise quanta, signal mode.
    pub n_add_s: f64,
    /// Added thermal noise quanta, idler mode.
    pub n_add_i: f64,
    /// Acquisition time in seconds.
    pub tau: f64,
    /// Line impedance in ohms.
    pub z: f64,
    /// Pump frequency in Hz.
    pub f_p: f64,
    /// Detuning in Hz; the signal sits at `f_p + delta`, the idler at `f_p − delta`.
    pub delta: f64,
}

impl ChainSpec {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("signal system gain", self.g_sys_s, self.g_sys_s >= 1.0),
            ("idler system gain", self.g_sys_i, self.g_sys_i >= 1.0),
            ("signal added noise", self.n_add_s, self.n_add_s >= 0.0),
            ("idler added noise", self.n_add_i, self.n_add_i >= 0.0),
            ("acquisition time", self.tau, self.tau > 0.0),
            ("line impedance", self.z, self.z > 0.0),
            ("pump frequency", self.f_p, self.f_p > 0.0),
            ("detuning", self.delta, self.delta > 0.0 && self.delta < self.f_p),
        ];
        for (what, value, ok) in checks {
            if !ok || !value.is_finite() {
                return Err(Error::Domain { what, value });
            }
        }
        Ok(())
    }

    pub fn f_signal(&self) -> f64 {
        self.f_p + self.delta
    }

    pub fn f_idler(&self) -> f64 {
        self.f_p - self.delta
    }

    /// Conversion factor `γ_s = τ / (Z h f_s)` in V⁻².
    pub fn gamma_signal(&self) -> f64 {
        conversion_factor(self.z, self.tau, self.f_signal())
    }

    /// Conversion factor `γ_i = τ / (Z h f_i)` in V⁻².
    pub fn gamma_idler(&self) -> f64 {
        conversion_factor(self.z, self.tau, self.f_idler())
    }

    /// Diagonal covariance of the chain's added thermal noise, `2·n_add` per quadrature.
    pub fn thermal_covariance(&self) -> CovMatrix4 {
        let (s, i) = (2.0 * self.n_add_s, 2.0 * self.n_add_i);
        CovMatrix4::from_matrix_unchecked(Matrix4::from_diagonal(&Vector4::new(s, s, i, i)))
    }
}

/// `γ = τ / (Z h f)`: converts squared volts integrated over `τ` into photon units.
pub fn conversion_factor(z: f64, tau: f64, freq: f64) -> f64 {
    tau / (z * PLANCK * freq)
}

/// Added noise quanta for a chain noise temperature, `k_B T_sys / (h f)`.
///
/// Rayleigh–Jeans approximation; adequate for the HEMT-limited chains this models.
pub fn n_add_from_temperature(t_sys: f64, freq: f64) -> f64 {
    BOLTZMANN * t_sys / (PLANCK * freq)
}

/// Added noise quanta for a detection sensitivity quoted in √photons, taken as
/// `n_add = s²/2`. This mapping is an assumption; override `n_add` when the chain
/// noise is known directly.
pub fn n_add_from_sensitivity(sensitivity: f64) -> f64 {
    0.5 * sensitivity * sensitivity
}

/// Pump-on and pump-off covariances seen after the chain:
/// `σ_on = σ + σ_th + 𝟙`, `σ_off = σ_th + 2·𝟙`.
pub fn measured_covariances(state: &CovMatrix4, chain: &ChainSpec) -> (CovMatrix4, CovMatrix4) {
    let thermal = *chain.thermal_covariance().matrix();
    let id = Matrix4::identity();
    let on = state.matrix() + thermal + id;
    let off = thermal + id * 2.0;
    (
        CovMatrix4::from_matrix_unchecked(on),
        CovMatrix4::from_matrix_unchecked(off),
    )
}

/// Paired pump-on/pump-off quadrature samples in calibrated units.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionBatch {
    pub on: Vec<[f64; 4]>,
    pub off: Vec<[f64; 4]>,
    pub seed: u64,
    pub chain: ChainSpec,
}

impl AcquisitionBatch {
    pub fn n_rep(&self) -> usize {
        self.on.len()
    }

    /// Samples as they would have been calibrated with system gains `α_s·G_sys,s`
    /// and `α_i·G_sys,i`.
    pub fn with_gain_error(&self, alpha_s: f64, alpha_i: f64) -> Self {
        let (ks, ki) = (alpha_s.sqrt().recip(), alpha_i.sqrt().recip());
        let scale = |v: &[f64; 4]| [v[0] * ks, v[1] * ks, v[2] * ki, v[3] * ki];
        let mut chain = self.chain;
        chain.g_sys_s *= alpha_s;
        chain.g_sys_i *= alpha_i;
        Self {
            on: self.on.iter().map(scale).collect(),
            off: self.off.iter().map(scale).collect(),
            seed: self.seed,
            chain,
        }
    }

    /// Write the little-endian binary record format.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BATCH_MAGIC)?;
        w.write_all(&BATCH_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_rep() as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for v in chain_fields(&self.chain) {
            w.write_all(&v.to_le_bytes())?;
        }
        for block in [&self.on, &self.off] {
            for sample in block.iter() {
                for v in sample {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BATCH_MAGIC {
            return Err(Error::Invalid(format!("bad batch magic {magic:?}")));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != BATCH_FORMAT_VERSION {
            return Err(Error::Invalid(format!("unsupported batch format version {version}")));
        }
        let n_rep = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let seed = u64::from_le_bytes(read_array(&mut r)?);
        let mut fields = [0.0; 8];
        for f in fields.iter_mut() {
            *f = f64::from_le_bytes(read_array(&mut r)?);
        }
        let chain = ChainSpec {
            g_sys_s: fields[0],
            g_sys_i: fields[1],
            n_add_s: fields[2],
            n_add_i: fields[3],
            tau: fields[4],
            z: fields[5],
            f_p: fields[6],
            delta: fields[7],
        };
        let mut read_block = || -> Result<Vec<[f64; 4]>> {
            let mut block = Vec::with_capacity(n_rep);
            for _ in 0..n_rep {
                let mut s = [0.0; 4];
                for v in s.iter_mut() {
                    *v = f64::from_le_bytes(read_array(&mut r)?);
                }
                block.push(s);
            }
            Ok(block)
        };
        let on = read_block()?;
        let off = read_block()?;
        Ok(Self { on, off, seed, chain })
    }

    /// CSV export, one row per sample with the pump state in the last column.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{BATCH_CSV_HEADER}")?;
        for (block, tag) in [(&self.on, "on"), (&self.off, "off")] {
            for s in block.iter() {
                writeln!(w, "{:e},{:e},{:e},{:e},{tag}", s[0], s[1], s[2], s[3])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn chain_fields(c: &ChainSpec) -> [f64; 8] {
    [c.g_sys_s, c.g_sys_i, c.n_add_s, c.n_add_i, c.tau, c.z, c.f_p, c.delta]
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Draw `n_rep` zero-mean samples for each of the pump-on and pump-off states.
///
/// Each sample has covariance `σ/4`, matching `σ_jk = 4·cov(R_j, R_k)`. Output is a
/// deterministic function of `(seed, n_rep, σ_on, σ_off)`: every chunk of samples has
/// its own ChaCha stream derived from the seed, with on and off streams interleaved.
pub fn sample_batch(
    sigma_on: &CovMatrix4,
    sigma_off: &CovMatrix4,
    chain: &ChainSpec,
    n_rep: usize,
    seed: u64,
) -> Result<AcquisitionBatch> {
    if n_rep == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let l_on = sample_factor(sigma_on, "sigma_on")?;
    let l_off = sample_factor(sigma_off, "sigma_off")?;
    Ok(AcquisitionBatch {
        on: draw(&l_on, n_rep, seed, 0),
        off: draw(&l_off, n_rep, seed, 1),
        seed,
        chain: *chain,
    })
}

fn sample_factor(sigma: &CovMatrix4, name: &'static str) -> Result<Matrix4<f64>> {
    (sigma.matrix() * 0.25)
        .cholesky()
        .map(|c| c.unpack())
        .ok_or(Error::NotPositiveDefinite { name })
}

fn draw(factor: &Matrix4<f64>, n_rep: usize, seed: u64, parity: u64) -> Vec<[f64; 4]> {
    let mut out = vec![[0.0; 4]; n_rep];
    out.par_chunks_mut(SAMPLE_CHUNK)
        .enumerate()
        .for_each(|(chunk, samples)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(2 * chunk as u64 + parity);
            for s in samples.iter_mut() {
                let z = Vector4::from_fn(|_, _| StandardNormal.sample(&mut rng));
                let x = factor * z;
                *s = [x[0], x[1], x[2], x[3]];
            }
        });
    out
}

/// Convert raw volt quadratures `(X_s, P_s, X_i, P_i)` to calibrated units:
/// `x = raw·√γ / √G_sys` with each mode's own frequency and gain.
pub fn raw_to_calibrated(raw: [f64; 4], chain: &ChainSpec) -> [f64; 4] {
    let (ks, ki) = calibration_scales(chain);
    [raw[0] * ks, raw[1] * ks, raw[2] * ki, raw[3] * ki]
}

pub fn calibrated_to_raw(cal: [f64; 4], chain: &ChainSpec) -> [f64; 4] {
    let (ks, ki) = calibration_scales(chain);
    [cal[0] / ks, cal[1] / ks, cal[2] / ki, cal[3] / ki]
}

fn calibration_scales(chain: &ChainSpec) -> (f64, f64) {
    (
        (chain.gamma_signal() / chain.g_sys_s).sqrt(),
        (chain.gamma_idler() / chain.g_sys_i).sqrt(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{tms_covariance, LossModel, SqueezeSpec};

    fn chain(n_add: f64) -> ChainSpec {
        ChainSpec {
            g_sys_s: 1e9,
            g_sys_i: 1e9,
            n_add_s: n_add,
            n_add_i: n_add,
            tau: 6e-6,
            z: 50.0,
            f_p: 4.415e9,
            delta: 200e6,
        }
    }

    fn sample_cov(samples: &[[f64; 4]]) -> Matrix4<f64> {
        let n = samples.len() as f64;
        let mean = samples.iter().fold(Vector4::zeros(), |acc, s| acc + Vector4::from(*s)) / n;
        samples.iter().fold(Matrix4::zeros(), |acc, s| {
            let d = Vector4::from(*s) - mean;
            acc + d * d.transpose()
        }) / (n - 1.0)
    }

    #[test]
    fn chain_validation() {
        assert!(chain(2.645).validate().is_ok());
        let mut c = chain(0.0);
        c.delta = c.f_p;
        assert!(c.validate().is_err());
        let mut c = chain(0.0);
        c.g_sys_i = 0.5;
        assert!(c.validate().is_err());
        let mut c = chain(0.0);
        c.n_add_s = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn vacuum_through_noiseless_chain() {
        let (on, off) = measured_covariances(&CovMatrix4::identity(), &chain(0.0));
        assert_eq!(*on.matrix(), Matrix4::identity() * 2.0);
        assert_eq!(*off.matrix(), Matrix4::identity() * 2.0);
    }

    #[test]
    fn sensitivity_noise_floor() {
        let n_add = n_add_from_sensitivity(2.3);
        assert!((n_add - 2.645).abs() < 1e-12);
        let (_, off) = measured_covariances(&CovMatrix4::identity(), &chain(n_add));
        for k in 0..4 {
            assert!((off.get(k, k) - 7.29).abs() < 1e-12);
        }
    }

    #[test]
    fn on_off_subtraction_recovers_state() {
        let state = tms_covariance(
            &SqueezeSpec::new(0.5235, 0.3).unwrap(),
            &LossModel::new(0.7, 0.55).unwrap(),
        );
        let mut c = chain(2.645);
        c.n_add_i = 4.1;
        let (on, off) = measured_covariances(&state, &c);
        let back = on.matrix() - off.matrix() + Matrix4::identity();
        assert!((back - state.matrix()).amax() < 1e-12);
        assert!(on.matrix().cholesky().is_some() && off.matrix().cholesky().is_some());

        let (on, _) = measured_covariances(
            &tms_covariance(&SqueezeSpec::new(0.5235, 0.0).unwrap(), &LossModel::lossless()),
            &chain(0.0),
        );
        assert_eq!(on.get(0, 2), (2.0 * 0.5235f64).sinh());
    }

    #[test]
    fn gamma_value_and_scaling() {
        let c = chain(0.0);
        assert!((c.f_signal() - 4.615e9).abs() < 1.0);
        let expected = (1.0 / 50.0) * (6e-6 / (6.626_070_15e-34 * 4.615e9));
        assert!((c.gamma_signal() / expected - 1.0).abs() < 1e-12);
        assert!((c.gamma_signal() / 3.92e16 - 1.0).abs() < 2e-3);

        let base = conversion_factor(50.0, 6e-6, 4.6e9);
        assert!((conversion_factor(50.0, 12e-6, 4.6e9) / base - 2.0).abs() < 1e-12);
        assert!((conversion_factor(100.0, 6e-6, 4.6e9) / base - 0.5).abs() < 1e-12);
        assert!((conversion_factor(50.0, 6e-6, 9.2e9) / base - 0.5).abs() < 1e-12);
    }

    #[test]
    fn raw_calibration_round_trip() {
        let c = chain(0.0);
        assert_eq!(raw_to_calibrated([0.0; 4], &c), [0.0; 4]);
        let v = [1.3e-5, -2.2e-6, 7.7e-6, 4.0e-7];
        let back = calibrated_to_raw(raw_to_calibrated(v, &c), &c);
        for k in 0..4 {
            assert!((back[k] / v[k] - 1.0).abs() < 1e-12);
        }
        // signal and idler use their own frequency
        let cal = raw_to_calibrated([1.0; 4], &c);
        assert!((cal[2] / cal[0] - (c.f_signal() / c.f_idler()).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn thermal_noise_helper() {
        let f = 4.6e9;
        let n = n_add_from_temperature(3.0, f);
        assert!((n * PLANCK * f / BOLTZMANN - 3.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_and_streams_differ() {
        let id = CovMatrix4::identity();
        let a = sample_batch(&id, &id, &chain(0.0), 40_000, 7).unwrap();
        let b = sample_batch(&id, &id, &chain(0.0), 40_000, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.on, a.off);
        let c = sample_batch(&id, &id, &chain(0.0), 40_000, 8).unwrap();
        assert_ne!(a.on, c.on);
        // a shorter run is a prefix of a longer one
        let d = sample_batch(&id, &id, &chain(0.0), 100, 7).unwrap();
        assert_eq!(&a.on[..100], &d.on[..]);
    }

    #[test]
    fn sampling_rejects_non_positive_definite() {
        let bad = CovMatrix4::from_matrix_unchecked(Matrix4::from_diagonal(&Vector4::new(1.0, -1.0, 1.0, 1.0)));
        let err = sample_batch(&CovMatrix4::identity(), &bad, &chain(0.0), 10, 1).unwrap_err();
        assert!(err.to_string().contains("sigma_off"), "{err}");
        assert!(sample_batch(&CovMatrix4::identity(), &CovMatrix4::identity(), &chain(0.0), 0, 1).is_err());
    }

    #[test]
    fn vacuum_sample_variance() {
        let n = 1_000_000;
        let id = CovMatrix4::identity();
        let batch = sample_batch(&id, &id, &chain(0.0), n, 11).unwrap();
        let se = (2.0 / n as f64).sqrt() * 0.25;
        for block in [&batch.on, &batch.off] {
            let cov = sample_cov(block);
            for k in 0..4 {
                assert!((cov[(k, k)] - 0.25).abs() < 5.0 * se, "var {}", cov[(k, k)]);
            }
        }
    }

    #[test]
    fn tms_sample_correlation() {
        let n = 200_000;
        let state = tms_covariance(&SqueezeSpec::new(0.5235, 0.0).unwrap(), &LossModel::lossless());
        let batch = sample_batch(&state, &state, &chain(0.0), n, 3).unwrap();
        let cov = sample_cov(&batch.on);
        let corr = cov[(0, 2)] / (cov[(0, 0)] * cov[(2, 2)]).sqrt();
        let rho = (2.0 * 0.5235f64).tanh();
        assert!((rho - 0.7807).abs() < 1e-4);
        // standard error of a sample correlation, (1 − ρ²)/√n
        let se = (1.0 - rho * rho) / (n as f64).sqrt();
        assert!((corr - rho).abs() < 5.0 * se, "corr {corr}");
    }

    #[test]
    fn binary_round_trip_and_header() {
        let id = CovMatrix4::identity();
        let batch = sample_batch(&id, &id, &chain(2.645), 33, 99).unwrap();
        let mut buf = Vec::new();
        batch.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TWPA");
        assert_eq!(buf.len(), 4 + 4 + 8 + 8 + 64 + 2 * 33 * 32);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 33);
        assert_eq!(AcquisitionBatch::read_binary(&buf[..]).unwrap(), batch);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(AcquisitionBatch::read_binary(&bad[..]).is_err());
        assert!(AcquisitionBatch::read_binary(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn csv_export_layout() {
        let id = CovMatrix4::identity();
        let batch = sample_batch(&id, &id, &chain(0.0), 3, 1).unwrap();
        let mut buf = Vec::new();
        batch.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "x_s,p_s,x_i,p_i,pump");
        assert_eq!(lines.len(), 7);
        assert!(lines[1].ends_with(",on") && lines[6].ends_with(",off"));
        let first: Vec<f64> = lines[1].split(',').take(4).map(|v| v.parse().unwrap()).collect();
        assert_eq!(first, batch.on[0].to_vec());
    }

    #[test]
    fn gain_error_rescales_samples() {
        let id = CovMatrix4::identity();
        let batch = sample_batch(&id, &id, &chain(0.0), 5, 1).unwrap();
        let scaled = batch.with_gain_error(4.0, 1.0);
        assert_eq!(scaled.on[2][0], batch.on[2][0] * 0.5);
        assert_eq!(scaled.on[2][2], batch.on[2][2]);
        assert_eq!(scaled.chain.g_sys_s, 4e9);
    }
}
