//! End-to-end experiment commands.
//!
//! Configuration is flat `key = value` text; every default is the quoted operating
//! point of the reference device (pump 4.415 GHz, detuning 200 MHz, τ = 6 μs,
//! G = 1.30, 8.2e-4 loss per cell, 2 dB insertion loss). Outputs are CSV and JSON
//! files whose contents depend only on the configuration and seed.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::detection::{measured_covariances, n_add_from_sensitivity, sample_batch, AcquisitionBatch, ChainSpec};
use crate::estimator::{
    self, diff_histograms, estimate_covariance, report_metrics, stability_study, CovEstimate, MetricsReport,
    StabilityReport,
};
use crate::gaussian::{
    self, collective_variances, entropy_formation, gain_to_r, loss_from_cells, squeezing_db, tms_covariance,
    CovMatrix4, LossModel, SqueezeSpec,
};
use crate::sntj::{self, fit_sntj, initial_guess, SntjDataset, SntjFitResult, SntjParams};
use crate::{Error, Result};

pub const DEFAULT_PUMP_HZ: f64 = 4.415e9;
pub const DEFAULT_DETUNING_HZ: f64 = 200e6;
pub const DEFAULT_GAIN: f64 = 1.30;
pub const DEFAULT_TAU_S: f64 = 6e-6;
pub const DEFAULT_IMPEDANCE: f64 = 50.0;
pub const DEFAULT_SENSITIVITY: f64 = 2.3;
pub const DEFAULT_SYSTEM_GAIN: f64 = 1e9;
pub const DEFAULT_EPS_CELL: f64 = 8.2e-4;
pub const DEVICE_CELLS: u32 = 250;
/// Symmetric average loss at which the lumped model gives `E_N = 0.4` for `G = 1.30`.
pub const DEFAULT_EFFECTIVE_LOSS: f64 = 0.492;
pub const DEFAULT_N_REP: usize = 1_000_000;
pub const DEFAULT_SEED: u64 = 20_221;
/// Runs above this many repetitions get a memory warning from the CLI.
pub const LARGE_N_REP: usize = 10_000_000;
/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "TWPA_OUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum SqueezeInput {
    Gain(f64),
    R(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum LossInput {
    Transmissions { eta_s: f64, eta_i: f64 },
    Symmetric { eps_bar: f64 },
    Cells { n_cells: u32, eps_cell: f64 },
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub f_p: f64,
    pub delta: f64,
    pub squeeze: SqueezeInput,
    pub phi: f64,
    pub loss: LossInput,
    pub g_sys_s: f64,
    pub g_sys_i: f64,
    pub n_add_s: f64,
    pub n_add_i: f64,
    pub tau: f64,
    pub z: f64,
    pub n_rep: usize,
    pub seed: u64,
    pub n_batches: usize,
    pub hist_bins: usize,
    pub hist_range: f64,
    pub insertion_loss_db: f64,
    pub write_samples_csv: bool,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let n_add = n_add_from_sensitivity(DEFAULT_SENSITIVITY);
        Self {
            f_p: DEFAULT_PUMP_HZ,
            delta: DEFAULT_DETUNING_HZ,
            squeeze: SqueezeInput::Gain(DEFAULT_GAIN),
            phi: PI,
            loss: LossInput::Symmetric {
                eps_bar: DEFAULT_EFFECTIVE_LOSS,
            },
            g_sys_s: DEFAULT_SYSTEM_GAIN,
            g_sys_i: DEFAULT_SYSTEM_GAIN,
            n_add_s: n_add,
            n_add_i: n_add,
            tau: DEFAULT_TAU_S,
            z: DEFAULT_IMPEDANCE,
            n_rep: DEFAULT_N_REP,
            seed: DEFAULT_SEED,
            n_batches: estimator::DEFAULT_N_BATCHES,
            hist_bins: estimator::DEFAULT_HIST_BINS,
            hist_range: estimator::DEFAULT_HIST_RANGE,
            insertion_loss_db: sntj::DEFAULT_INSERTION_LOSS_DB,
            write_samples_csv: false,
            out_dir: std::env::var_os(OUT_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("twpa-out")),
        }
    }
}

const SQUEEZE_KEYS: [&str; 2] = ["gain", "r"];
const LOSS_FORMS: [&[&str]; 3] = [&["eta_s", "eta_i"], &["eps_bar"], &["n_cells", "eps_cell"]];

const KNOWN_KEYS: &[&str] = &[
    "f_p",
    "delta",
    "gain",
    "r",
    "phi",
    "eta_s",
    "eta_i",
    "eps_bar",
    "n_cells",
    "eps_cell",
    "g_sys",
    "g_sys_s",
    "g_sys_i",
    "n_add",
    "n_add_s",
    "n_add_i",
    "sensitivity",
    "tau",
    "z",
    "n_rep",
    "seed",
    "n_batches",
    "hist_bins",
    "hist_range",
    "insertion_loss_db",
    "write_samples_csv",
    "out_dir",
];

/// Raw `key = value` settings, later entries overriding earlier ones.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    /// Parse flat config text. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("expected `key = value`, found `{line}`"),
                });
            };
            s.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: idx + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(s)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn merge(&mut self, other: &Settings) {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
        }
    }

    fn has(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("bad value `{v}` for `{key}`: {e}")))
            })
            .transpose()
    }

    /// Resolve against the defaults and validate physical bounds.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();

        let squeeze_given: Vec<_> = SQUEEZE_KEYS.iter().filter(|k| self.has(k)).collect();
        if squeeze_given.len() > 1 {
            return Err(Error::Config("give exactly one of `gain` and `r`".into()));
        }
        if let Some(g) = self.get("gain")? {
            cfg.squeeze = SqueezeInput::Gain(g);
        }
        if let Some(r) = self.get("r")? {
            cfg.squeeze = SqueezeInput::R(r);
        }

        let forms: Vec<usize> = (0..LOSS_FORMS.len())
            .filter(|&f| LOSS_FORMS[f].iter().any(|k| self.has(k)))
            .collect();
        if forms.len() > 1 {
            return Err(Error::Config(
                "give exactly one loss form: `eta_s`+`eta_i`, `eps_bar`, or `n_cells`+`eps_cell`".into(),
            ));
        }
        match forms.first() {
            Some(0) => {
                let (Some(eta_s), Some(eta_i)) = (self.get("eta_s")?, self.get("eta_i")?) else {
                    return Err(Error::Config("`eta_s` and `eta_i` must be given together".into()));
                };
                cfg.loss = LossInput::Transmissions { eta_s, eta_i };
            }
            Some(1) => {
                cfg.loss = LossInput::Symmetric {
                    eps_bar: self.get("eps_bar")?.unwrap(),
                }
            }
            Some(_) => {
                cfg.loss = LossInput::Cells {
                    n_cells: self.get("n_cells")?.unwrap_or(DEVICE_CELLS),
                    eps_cell: self.get("eps_cell")?.unwrap_or(DEFAULT_EPS_CELL),
                }
            }
            None => {}
        }

        macro_rules! take {
            ($field:ident, $key:literal) => {
                if let Some(v) = self.get($key)? {
                    cfg.$field = v;
                }
            };
        }
        take!(f_p, "f_p");
        take!(delta, "delta");
        take!(phi, "phi");
        if let Some(g) = self.get::<f64>("g_sys")? {
            cfg.g_sys_s = g;
            cfg.g_sys_i = g;
        }
        take!(g_sys_s, "g_sys_s");
        take!(g_sys_i, "g_sys_i");
        if let Some(s) = self.get::<f64>("sensitivity")? {
            let n = n_add_from_sensitivity(s);
            cfg.n_add_s = n;
            cfg.n_add_i = n;
        }
        if let Some(n) = self.get::<f64>("n_add")? {
            cfg.n_add_s = n;
            cfg.n_add_i = n;
        }
        take!(n_add_s, "n_add_s");
        take!(n_add_i, "n_add_i");
        take!(tau, "tau");
        take!(z, "z");
        take!(n_rep, "n_rep");
        take!(seed, "seed");
        take!(n_batches, "n_batches");
        take!(hist_bins, "hist_bins");
        take!(hist_range, "hist_range");
        take!(insertion_loss_db, "insertion_loss_db");
        take!(write_samples_csv, "write_samples_csv");
        take!(out_dir, "out_dir");

        cfg.validate()?;
        Ok(cfg)
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Domain { what, value } => Error::Config(format!("{what} out of range: {value}")),
        other => other,
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.squeeze_spec().map_err(config_err)?;
        self.loss_model().map_err(config_err)?;
        self.chain().validate().map_err(config_err)?;
        if self.n_rep < 2 * self.n_batches {
            return Err(Error::Config(format!(
                "n_rep = {} is too small for n_batches = {} (need at least {})",
                self.n_rep,
                self.n_batches,
                2 * self.n_batches
            )));
        }
        if self.n_batches < 2 {
            return Err(Error::Config("n_batches must be at least 2".into()));
        }
        if self.hist_bins < 2 || !(self.hist_range > 0.0) {
            return Err(Error::Config("histograms need ≥ 2 bins and a positive range".into()));
        }
        if !(self.insertion_loss_db >= 0.0) {
            return Err(Error::Config("insertion_loss_db must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn squeeze_spec(&self) -> Result<SqueezeSpec> {
        match self.squeeze {
            SqueezeInput::Gain(g) => SqueezeSpec::from_gain(g, self.phi),
            SqueezeInput::R(r) => SqueezeSpec::new(r, self.phi),
        }
    }

    pub fn loss_model(&self) -> Result<LossModel> {
        match self.loss {
            LossInput::Transmissions { eta_s, eta_i } => LossModel::new(eta_s, eta_i),
            LossInput::Symmetric { eps_bar } => LossModel::symmetric(eps_bar),
            LossInput::Cells { n_cells, eps_cell } => loss_from_cells(n_cells, eps_cell),
        }
    }

    pub fn chain(&self) -> ChainSpec {
        ChainSpec {
            g_sys_s: self.g_sys_s,
            g_sys_i: self.g_sys_i,
            n_add_s: self.n_add_s,
            n_add_i: self.n_add_i,
            tau: self.tau,
            z: self.z,
            f_p: self.f_p,
            delta: self.delta,
        }
    }

    /// `# key = value` lines echoing every resolved setting.
    pub fn comment_block(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| writeln!(out, "# {k} = {v}").unwrap();
        line("f_p", format!("{:e}", self.f_p));
        line("delta", format!("{:e}", self.delta));
        match self.squeeze {
            SqueezeInput::Gain(g) => line("gain", g.to_string()),
            SqueezeInput::R(r) => line("r", r.to_string()),
        }
        line("phi", self.phi.to_string());
        match self.loss {
            LossInput::Transmissions { eta_s, eta_i } => {
                line("eta_s", eta_s.to_string());
                line("eta_i", eta_i.to_string());
            }
            LossInput::Symmetric { eps_bar } => line("eps_bar", eps_bar.to_string()),
            LossInput::Cells { n_cells, eps_cell } => {
                line("n_cells", n_cells.to_string());
                line("eps_cell", eps_cell.to_string());
            }
        }
        line("g_sys_s", format!("{:e}", self.g_sys_s));
        line("g_sys_i", format!("{:e}", self.g_sys_i));
        line("n_add_s", self.n_add_s.to_string());
        line("n_add_i", self.n_add_i.to_string());
        line("tau", format!("{:e}", self.tau));
        line("z", self.z.to_string());
        line("n_rep", self.n_rep.to_string());
        line("seed", self.seed.to_string());
        line("n_batches", self.n_batches.to_string());
        line("hist_bins", self.hist_bins.to_string());
        line("hist_range", self.hist_range.to_string());
        line("insertion_loss_db", self.insertion_loss_db.to_string());
        out
    }
}

/// Seed of sweep point `k`. Point 0 uses the master seed itself so a one-point sweep
/// reproduces `simulate`.
pub fn point_seed(master: u64, k: usize) -> u64 {
    if k == 0 {
        master
    } else {
        estimator::sub_seeds(master, k)[k - 1]
    }
}

/// Write through a temporary file and rename, so readers never see partial output.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn csv_preamble(command: &str, cfg: &ExperimentConfig) -> String {
    format!("# twpa {command}\n{}", cfg.comment_block())
}

/// Lumped-model predictions for the configured state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelPrediction {
    pub log_negativity: f64,
    pub var_x_plus: f64,
    pub squeezing_db_x_plus: f64,
    pub entropy_formation: f64,
}

pub fn model_prediction(sq: &SqueezeSpec, loss: &LossModel) -> Result<ModelPrediction> {
    let state = tms_covariance(sq, loss);
    let var = collective_variances(&state).x_plus;
    let en = gaussian::log_negativity(&state)?;
    Ok(ModelPrediction {
        log_negativity: en,
        var_x_plus: var,
        squeezing_db_x_plus: squeezing_db(var)?,
        entropy_formation: entropy_formation(en),
    })
}

/// One simulated acquisition and its reconstruction.
#[derive(Debug, Clone)]
pub struct PointRun {
    pub batch: AcquisitionBatch,
    pub estimate: CovEstimate,
    pub metrics: MetricsReport,
}

pub fn run_point(state: &CovMatrix4, chain: &ChainSpec, n_rep: usize, n_batches: usize, seed: u64) -> Result<PointRun> {
    let (on, off) = measured_covariances(state, chain);
    let batch = sample_batch(&on, &off, chain, n_rep, seed)?;
    let estimate = estimate_covariance(&batch, n_batches)?;
    let metrics = report_metrics(&estimate)?;
    Ok(PointRun {
        batch,
        estimate,
        metrics,
    })
}

/// Metrics re-evaluated with the system gain shifted by ±`db`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GainBand {
    pub db: f64,
    /// Gain assumed `db` lower: more entanglement inferred.
    pub log_negativity_gain_low: f64,
    /// Gain assumed `db` higher: less entanglement inferred.
    pub log_negativity_gain_high: f64,
    pub squeezing_db_gain_low: f64,
    pub squeezing_db_gain_high: f64,
}

pub fn gain_band(est: &CovEstimate, db: f64) -> Result<GainBand> {
    let alpha = 10f64.powf(db / 10.0);
    let low = gaussian::entanglement_report(&est.with_gain_factor(1.0 / alpha))?;
    let high = gaussian::entanglement_report(&est.with_gain_factor(alpha))?;
    Ok(GainBand {
        db,
        log_negativity_gain_low: low.log_negativity,
        log_negativity_gain_high: high.log_negativity,
        squeezing_db_gain_low: low.squeezing_db_x_plus,
        squeezing_db_gain_high: high.squeezing_db_x_plus,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateReport {
    pub config: ExperimentConfig,
    pub r: f64,
    pub epsilon_bar: f64,
    pub metrics: MetricsReport,
    pub model: ModelPrediction,
    pub gain_band: GainBand,
    pub bandwidth_hz: f64,
    pub ebit_rate: f64,
    pub ebit_rate_err: f64,
}

#[derive(Debug, Clone)]
pub struct SimulateOutput {
    pub report: SimulateReport,
    pub files: Vec<PathBuf>,
}

/// Single operating point: batch file, covariance estimate, differential histograms
/// and the metrics report.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<SimulateOutput> {
    cfg.validate()?;
    let sq = cfg.squeeze_spec()?;
    let loss = cfg.loss_model()?;
    let chain = cfg.chain();
    let run = run_point(&tms_covariance(&sq, &loss), &chain, cfg.n_rep, cfg.n_batches, cfg.seed)?;
    let dir = &cfg.out_dir;
    let mut files = Vec::new();

    let mut buf = Vec::new();
    run.batch.write_binary(&mut buf)?;
    files.push(dir.join("batch.bin"));
    write_atomic(files.last().unwrap(), &buf)?;
    if cfg.write_samples_csv {
        let mut buf = Vec::new();
        run.batch.write_csv(&mut buf)?;
        files.push(dir.join("batch.csv"));
        write_atomic(files.last().unwrap(), &buf)?;
    }

    files.push(dir.join("estimate.json"));
    write_atomic(
        files.last().unwrap(),
        serde_json::to_string_pretty(&run.estimate)?.as_bytes(),
    )?;

    let mut cov = csv_preamble("simulate", cfg);
    cov.push_str("matrix,");
    cov.push_str(
        &(0..16)
            .map(|k| format!("s{}{}", k / 4, k % 4))
            .collect::<Vec<_>>()
            .join(","),
    );
    cov.push('\n');
    for (name, m) in [
        ("sigma", &run.estimate.sigma),
        ("sigma_on", &run.estimate.sigma_on),
        ("sigma_off", &run.estimate.sigma_off),
    ] {
        writeln!(cov, "{name},{}", m.to_csv_row()).unwrap();
    }
    writeln!(
        cov,
        "stderr,{}",
        run.estimate
            .stderr
            .iter()
            .map(|v| format!("{v:.16e}"))
            .collect::<Vec<_>>()
            .join(",")
    )
    .unwrap();
    files.push(dir.join("covariance.csv"));
    write_atomic(files.last().unwrap(), cov.as_bytes())?;

    for h in diff_histograms(&run.batch, cfg.hist_bins, cfg.hist_range)? {
        let mut text = csv_preamble("simulate", cfg);
        writeln!(
            text,
            "# on_overflow = {}\n# off_overflow = {}",
            h.on_overflow, h.off_overflow
        )
        .unwrap();
        text.push_str(&h.to_csv());
        files.push(dir.join(format!("{}.csv", h.file_stem())));
        write_atomic(files.last().unwrap(), text.as_bytes())?;
    }

    let bandwidth = 2.0 * cfg.delta;
    let report = SimulateReport {
        config: cfg.clone(),
        r: sq.r(),
        epsilon_bar: loss.epsilon_bar(),
        model: model_prediction(&sq, &loss)?,
        gain_band: gain_band(&run.estimate, sntj::GAIN_UNCERTAINTY_DB)?,
        bandwidth_hz: bandwidth,
        ebit_rate: gaussian::ebit_rate(run.metrics.report.entropy_formation, bandwidth),
        ebit_rate_err: gaussian::ebit_rate(run.metrics.entropy_formation_err, bandwidth),
        metrics: run.metrics,
    };
    files.push(dir.join("report.json"));
    write_atomic(files.last().unwrap(), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(SimulateOutput { report, files })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseRow {
    pub phi: f64,
    pub var_x_plus: f64,
    pub var_x_plus_err: f64,
    pub var_p_plus: f64,
    pub sq_plus_db: f64,
    pub sq_plus_err: f64,
    pub log_negativity: f64,
    pub log_negativity_err: f64,
    pub model_var_x_plus: f64,
    pub model_log_negativity: f64,
}

fn var_x_plus_err(est: &CovEstimate) -> f64 {
    let values: Vec<f64> = est
        .block_sigmas
        .iter()
        .map(|s| collective_variances(s).x_plus)
        .collect();
    let m = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    (var / values.len() as f64).sqrt()
}

/// Sweep `φ` over `n_points` evenly spaced values in `[0, 2π)`.
pub fn sweep_phase(cfg: &ExperimentConfig, n_points: usize) -> Result<Vec<PhaseRow>> {
    cfg.validate()?;
    if n_points == 0 {
        return Err(Error::Config("phase sweep needs at least one point".into()));
    }
    let loss = cfg.loss_model()?;
    let chain = cfg.chain();
    let r = cfg.squeeze_spec()?.r();
    let mut rows = Vec::with_capacity(n_points);
    for k in 0..n_points {
        let phi = TAU * k as f64 / n_points as f64;
        let sq = SqueezeSpec::new(r, phi)?;
        let run = run_point(
            &tms_covariance(&sq, &loss),
            &chain,
            cfg.n_rep,
            cfg.n_batches,
            point_seed(cfg.seed, k),
        )?;
        let rep = &run.metrics.report;
        let model = model_prediction(&sq, &loss)?;
        rows.push(PhaseRow {
            phi: sq.phi(),
            var_x_plus: rep.var_x_plus,
            var_x_plus_err: var_x_plus_err(&run.estimate),
            var_p_plus: rep.var_p_plus,
            sq_plus_db: rep.squeezing_db_x_plus,
            sq_plus_err: run.metrics.squeezing_db_x_plus_err,
            log_negativity: rep.log_negativity,
            log_negativity_err: run.metrics.log_negativity_err,
            model_var_x_plus: model.var_x_plus,
            model_log_negativity: model.log_negativity,
        });
    }
    rows.sort_by(|a, b| a.phi.total_cmp(&b.phi));
    Ok(rows)
}

pub fn phase_csv(cfg: &ExperimentConfig, rows: &[PhaseRow]) -> String {
    let mut out = csv_preamble("sweep-phase", cfg);
    out.push_str(
        "phi,var_x_plus,var_x_plus_err,var_p_plus,sq_plus_db,sq_plus_err,e_n,e_n_err,model_var_x_plus,model_e_n\n",
    );
    for r in rows {
        writeln!(
            out,
            "{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10}",
            r.phi,
            r.var_x_plus,
            r.var_x_plus_err,
            r.var_p_plus,
            r.sq_plus_db,
            r.sq_plus_err,
            r.log_negativity,
            r.log_negativity_err,
            r.model_var_x_plus,
            r.model_log_negativity
        )
        .unwrap();
    }
    out
}

pub fn cmd_sweep_phase(cfg: &ExperimentConfig, n_points: usize) -> Result<(Vec<PhaseRow>, PathBuf)> {
    let rows = sweep_phase(cfg, n_points)?;
    let path = cfg.out_dir.join("sweep_phase.csv");
    write_atomic(&path, phase_csv(cfg, &rows).as_bytes())?;
    Ok((rows, path))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetuningRow {
    pub delta_hz: f64,
    pub sq_plus_db: f64,
    pub sq_plus_err: f64,
    pub log_negativity: f64,
    pub log_negativity_err: f64,
    pub entropy_formation: f64,
    pub ebit_rate: f64,
    pub ebit_rate_err: f64,
    pub model_log_negativity: f64,
    pub model_entropy_formation: f64,
    pub model_ebit_rate: f64,
}

/// Metrics per detuning. The ebit rate uses the bandwidth `B = 2Δ`.
pub fn sweep_detuning(cfg: &ExperimentConfig, deltas: &[f64]) -> Result<Vec<DetuningRow>> {
    cfg.validate()?;
    if deltas.is_empty() {
        return Err(Error::Config("detuning sweep needs at least one value".into()));
    }
    if let Some(d) = deltas.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::Config(format!("detuning must be positive, got {d}")));
    }
    let sq = cfg.squeeze_spec()?;
    let loss = cfg.loss_model()?;
    let state = tms_covariance(&sq, &loss);
    let model = model_prediction(&sq, &loss)?;
    let mut rows = Vec::with_capacity(deltas.len());
    for (k, &delta) in deltas.iter().enumerate() {
        let chain = ChainSpec { delta, ..cfg.chain() };
        chain.validate().map_err(config_err)?;
        let run = run_point(&state, &chain, cfg.n_rep, cfg.n_batches, point_seed(cfg.seed, k))?;
        let rep = &run.metrics.report;
        let bandwidth = 2.0 * delta;
        rows.push(DetuningRow {
            delta_hz: delta,
            sq_plus_db: rep.squeezing_db_x_plus,
            sq_plus_err: run.metrics.squeezing_db_x_plus_err,
            log_negativity: rep.log_negativity,
            log_negativity_err: run.metrics.log_negativity_err,
            entropy_formation: rep.entropy_formation,
            ebit_rate: gaussian::ebit_rate(rep.entropy_formation, bandwidth),
            ebit_rate_err: gaussian::ebit_rate(run.metrics.entropy_formation_err, bandwidth),
            model_log_negativity: model.log_negativity,
            model_entropy_formation: model.entropy_formation,
            model_ebit_rate: gaussian::ebit_rate(model.entropy_formation, bandwidth),
        });
    }
    rows.sort_by(|a, b| a.delta_hz.total_cmp(&b.delta_hz));
    Ok(rows)
}

pub fn detuning_csv(cfg: &ExperimentConfig, rows: &[DetuningRow]) -> String {
    let mut out = csv_preamble("sweep-detuning", cfg);
    out.push_str(
        "delta_hz,sq_plus_db,sq_plus_err,e_n,e_n_err,e_f,ebit_rate,ebit_rate_err,model_e_n,model_e_f,model_ebit_rate\n",
    );
    for r in rows {
        writeln!(
            out,
            "{:e},{:.10},{:.10},{:.10},{:.10},{:.10},{:.6e},{:.6e},{:.10},{:.10},{:.6e}",
            r.delta_hz,
            r.sq_plus_db,
            r.sq_plus_err,
            r.log_negativity,
            r.log_negativity_err,
            r.entropy_formation,
            r.ebit_rate,
            r.ebit_rate_err,
            r.model_log_negativity,
            r.model_entropy_formation,
            r.model_ebit_rate
        )
        .unwrap();
    }
    out
}

pub fn cmd_sweep_detuning(cfg: &ExperimentConfig, deltas: &[f64]) -> Result<(Vec<DetuningRow>, PathBuf)> {
    let rows = sweep_detuning(cfg, deltas)?;
    let path = cfg.out_dir.join("sweep_detuning.csv");
    write_atomic(&path, detuning_csv(cfg, &rows).as_bytes())?;
    Ok((rows, path))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GainRow {
    pub gain: f64,
    pub r: f64,
    pub sq_plus_db: f64,
    pub sq_plus_err: f64,
    pub log_negativity: f64,
    pub log_negativity_err: f64,
    pub model_sq_plus_db: f64,
    pub model_log_negativity: f64,
}

/// Metrics per amplifier gain, the stand-in for pump power.
///
/// The lumped model only knows squeezing and loss, so its entanglement keeps rising
/// with gain. Measured devices turn over at high pump power; that is not modeled.
pub fn sweep_gain(cfg: &ExperimentConfig, gains: &[f64]) -> Result<Vec<GainRow>> {
    cfg.validate()?;
    if gains.is_empty() {
        return Err(Error::Config("gain sweep needs at least one value".into()));
    }
    if let Some(g) = gains.iter().find(|g| !(**g >= 1.0)) {
        return Err(Error::Config(format!("gain must be ≥ 1, got {g}")));
    }
    let loss = cfg.loss_model()?;
    let chain = cfg.chain();
    let mut rows = Vec::with_capacity(gains.len());
    for (k, &gain) in gains.iter().enumerate() {
        let sq = SqueezeSpec::new(gain_to_r(gain)?, cfg.phi)?;
        let run = run_point(
            &tms_covariance(&sq, &loss),
            &chain,
            cfg.n_rep,
            cfg.n_batches,
            point_seed(cfg.seed, k),
        )?;
        let model = model_prediction(&sq, &loss)?;
        rows.push(GainRow {
            gain,
            r: sq.r(),
            sq_plus_db: run.metrics.report.squeezing_db_x_plus,
            sq_plus_err: run.metrics.squeezing_db_x_plus_err,
            log_negativity: run.metrics.report.log_negativity,
            log_negativity_err: run.metrics.log_negativity_err,
            model_sq_plus_db: model.squeezing_db_x_plus,
            model_log_negativity: model.log_negativity,
        });
    }
    rows.sort_by(|a, b| a.gain.total_cmp(&b.gain));
    Ok(rows)
}

pub fn gain_csv(cfg: &ExperimentConfig, rows: &[GainRow]) -> String {
    let mut out = csv_preamble("sweep-gain", cfg);
    out.push_str("# gain is a proxy for pump power; high-power spurious processes are not modeled\n");
    out.push_str("gain,r,sq_plus_db,sq_plus_err,e_n,e_n_err,model_sq_plus_db,model_e_n\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10}",
            r.gain,
            r.r,
            r.sq_plus_db,
            r.sq_plus_err,
            r.log_negativity,
            r.log_negativity_err,
            r.model_sq_plus_db,
            r.model_log_negativity
        )
        .unwrap();
    }
    out
}

pub fn cmd_sweep_gain(cfg: &ExperimentConfig, gains: &[f64]) -> Result<(Vec<GainRow>, PathBuf)> {
    let rows = sweep_gain(cfg, gains)?;
    let path = cfg.out_dir.join("sweep_gain.csv");
    write_atomic(&path, gain_csv(cfg, &rows).as_bytes())?;
    Ok((rows, path))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellsRow {
    pub n_cells: u32,
    pub epsilon_bar: f64,
    pub transmission: f64,
    pub loss_db: f64,
    pub sq_plus_db: f64,
    pub is_device: bool,
}

/// Model squeezing at phase π as a function of device length.
pub fn cells_curve(eps_cell: f64, max_cells: u32, gain: f64) -> Result<Vec<CellsRow>> {
    let r = gain_to_r(gain).map_err(config_err)?;
    let sq = SqueezeSpec::new(r, PI)?;
    (0..=max_cells)
        .map(|n| {
            let loss = loss_from_cells(n, eps_cell).map_err(config_err)?;
            let var = collective_variances(&tms_covariance(&sq, &loss)).x_plus;
            Ok(CellsRow {
                n_cells: n,
                epsilon_bar: loss.epsilon_bar(),
                transmission: loss.eta_s(),
                loss_db: loss.loss_db(),
                sq_plus_db: squeezing_db(var)?,
                is_device: n == DEVICE_CELLS,
            })
        })
        .collect()
}

pub fn cells_csv(eps_cell: f64, gain: f64, rows: &[CellsRow]) -> String {
    let mut out =
        format!("# twpa cells-curve\n# eps_cell = {eps_cell}\n# gain = {gain}\n# device_cells = {DEVICE_CELLS}\n");
    out.push_str("n_cells,eps_bar,transmission,loss_db,sq_plus_db,device\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.10},{:.10},{:.10},{:.10},{}",
            r.n_cells,
            r.epsilon_bar,
            r.transmission,
            r.loss_db,
            r.sq_plus_db,
            u8::from(r.is_device)
        )
        .unwrap();
    }
    out
}

pub fn cmd_cells_curve(out_dir: &Path, eps_cell: f64, max_cells: u32, gain: f64) -> Result<(Vec<CellsRow>, PathBuf)> {
    let rows = cells_curve(eps_cell, max_cells, gain)?;
    let path = out_dir.join("cells_curve.csv");
    write_atomic(&path, cells_csv(eps_cell, gain, &rows).as_bytes())?;
    Ok((rows, path))
}

/// Fit a junction curve read from `csv_path` and apply the insertion-loss correction.
/// Without an explicit guess one is read off the data.
pub fn cmd_calibrate(
    csv_path: &Path,
    insertion_loss_db: f64,
    guess: Option<SntjParams>,
    out_path: Option<&Path>,
) -> Result<SntjFitResult> {
    let text = fs::read_to_string(csv_path)?;
    let data = SntjDataset::from_csv_str(&text)?;
    let guess = guess.unwrap_or_else(|| initial_guess(&data));
    let fit = fit_sntj(&data, &guess)?.with_insertion_loss(insertion_loss_db)?;
    if let Some(path) = out_path {
        write_atomic(path, serde_json::to_string_pretty(&fit)?.as_bytes())?;
    }
    Ok(fit)
}

pub fn stability_csv(cfg: &ExperimentConfig, report: &StabilityReport) -> String {
    let mut out = csv_preamble("stability", cfg);
    writeln!(
        out,
        "# reps = {}\n# n_rep_each = {}\n# mean = {:.10}\n# std = {:.10}",
        report.values.len(),
        report.n_rep_each,
        report.mean,
        report.std
    )
    .unwrap();
    out.push_str(&report.histogram.to_csv("e_n"));
    out
}

/// Repeat the configured experiment and histogram `E_N`.
pub fn cmd_stability(
    cfg: &ExperimentConfig,
    reps: usize,
    n_rep_each: usize,
) -> Result<(StabilityReport, Vec<PathBuf>)> {
    cfg.validate()?;
    let state = tms_covariance(&cfg.squeeze_spec()?, &cfg.loss_model()?);
    let report = stability_study(&state, &cfg.chain(), reps, n_rep_each, cfg.seed)?;
    let hist = cfg.out_dir.join("stability_hist.csv");
    write_atomic(&hist, stability_csv(cfg, &report).as_bytes())?;
    let mut values = csv_preamble("stability", cfg);
    values.push_str("rep,e_n,e_n_raw\n");
    for (k, (v, raw)) in report.values.iter().zip(&report.raw_values).enumerate() {
        writeln!(values, "{k},{v:.10},{raw:.10}").unwrap();
    }
    let vals = cfg.out_dir.join("stability_values.csv");
    write_atomic(&vals, values.as_bytes())?;
    Ok((report, vec![hist, vals]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = Settings::default().resolve().unwrap();
        assert_eq!(cfg.f_p, 4.415e9);
        assert_eq!(cfg.delta, 200e6);
        assert_eq!(cfg.tau, 6e-6);
        assert_eq!(cfg.squeeze, SqueezeInput::Gain(1.30));
        assert_eq!(cfg.insertion_loss_db, 2.0);
        assert!((cfg.n_add_s - 2.645).abs() < 1e-12);
    }

    #[test]
    fn config_text_and_overrides() {
        let mut s = Settings::parse("# comment\nr = 0.4\nphi = 0.5  # trailing\n\nn_cells = 100\n").unwrap();
        let mut cli = Settings::default();
        cli.set("seed", "7").unwrap();
        s.merge(&cli);
        let cfg = s.resolve().unwrap();
        assert_eq!(cfg.squeeze, SqueezeInput::R(0.4));
        assert_eq!(cfg.seed, 7);
        assert_eq!(
            cfg.loss,
            LossInput::Cells {
                n_cells: 100,
                eps_cell: DEFAULT_EPS_CELL
            }
        );
    }

    #[test]
    fn config_exclusivity_and_bounds() {
        assert!(Settings::parse("gain = 1.3\nr = 0.5").unwrap().resolve().is_err());
        assert!(Settings::parse("eta_s = 0.9\neta_i = 0.9\neps_bar = 0.1")
            .unwrap()
            .resolve()
            .is_err());
        assert!(Settings::parse("eta_s = 0.9").unwrap().resolve().is_err());
        assert!(Settings::parse("gain = 0.5").unwrap().resolve().is_err());
        assert!(Settings::parse("eps_bar = 1.5").unwrap().resolve().is_err());
        assert!(Settings::parse("delta = 5e9").unwrap().resolve().is_err());
        assert!(Settings::parse("n_rep = 10").unwrap().resolve().is_err());
        assert!(matches!(
            Settings::parse("bogus = 1"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(Settings::parse("a\n"), Err(Error::Parse { line: 1, .. })));
        assert!(Settings::parse("gain = abc")
            .unwrap()
            .resolve()
            .unwrap_err()
            .is_config());
    }

    #[test]
    fn point_seeds() {
        assert_eq!(point_seed(5, 0), 5);
        assert_ne!(point_seed(5, 1), point_seed(5, 2));
        assert_eq!(point_seed(5, 3), point_seed(5, 3));
    }

    #[test]
    fn cells_curve_shape() {
        let rows = cells_curve(DEFAULT_EPS_CELL, 400, 1.3).unwrap();
        let r = gain_to_r(1.3).unwrap();
        assert!((rows[0].sq_plus_db - 10.0 * (-2.0 * r).exp().log10()).abs() < 1e-12);
        let dev = &rows[250];
        assert!(dev.is_device);
        assert!((dev.epsilon_bar - 0.185).abs() < 1e-3);
        assert!((dev.sq_plus_db - (-3.3)).abs() < 0.05, "{}", dev.sq_plus_db);
        assert!(rows.windows(2).all(|w| w[1].sq_plus_db > w[0].sq_plus_db));
        let far = cells_curve(DEFAULT_EPS_CELL, 20_000, 1.3).unwrap();
        assert!(far.last().unwrap().sq_plus_db > -1e-3);
    }

    #[test]
    fn model_entanglement_rises_with_gain() {
        let loss = LossModel::symmetric(DEFAULT_EFFECTIVE_LOSS).unwrap();
        let mut last = -1.0;
        for g in [1.0, 1.1, 1.3, 1.6, 2.0, 3.0] {
            let m = model_prediction(&SqueezeSpec::from_gain(g, PI).unwrap(), &loss).unwrap();
            if g == 1.0 {
                assert_eq!(m.log_negativity, 0.0);
                assert!(m.squeezing_db_x_plus.abs() < 1e-12);
            }
            assert!(m.log_negativity > last || g == 1.0);
            last = m.log_negativity;
        }
    }

    #[test]
    fn comment_block_lists_settings() {
        let cfg = Settings::default().resolve().unwrap();
        let block = cfg.comment_block();
        assert!(block.lines().all(|l| l.starts_with("# ")));
        assert!(block.contains("# gain = 1.3"));
        assert!(block.contains("# seed = 20221"));
    }
}
