//! `twpa`: simulate, sweep and calibrate two-mode squeezing measurements.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical failure, 3 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use twpa_core::experiment::{self, ExperimentConfig, Settings, DEFAULT_EPS_CELL, DEVICE_CELLS, LARGE_N_REP};
use twpa_core::sntj::{SntjParams, DEFAULT_INSERTION_LOSS_DB};
use twpa_core::{Error, Result};

#[derive(Parser)]
#[command(name = "twpa", version, about = "Two-mode squeezing simulator and analysis toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one operating point and reconstruct its covariance.
    Simulate(Common),
    /// Sweep the squeezing phase over [0, 2π).
    SweepPhase {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 16)]
        points: usize,
    },
    /// Sweep the detuning; reports the ebit rate at bandwidth 2Δ.
    SweepDetuning {
        #[command(flatten)]
        common: Common,
        /// Detunings in Hz.
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        values: Vec<f64>,
    },
    /// Sweep the amplifier gain.
    SweepGain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        values: Vec<f64>,
    },
    /// Model squeezing against device length.
    CellsCurve {
        #[arg(long, default_value_t = DEFAULT_EPS_CELL)]
        eps_cell: f64,
        #[arg(long, default_value_t = 2 * DEVICE_CELLS)]
        max_cells: u32,
        #[arg(long, default_value_t = experiment::DEFAULT_GAIN)]
        gain: f64,
        #[arg(long, env = "TWPA_OUT_DIR", default_value = "twpa-out")]
        out_dir: PathBuf,
    },
    /// Fit a shot-noise junction curve (CSV with `V_volts,N_watts`).
    Calibrate {
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_INSERTION_LOSS_DB)]
        insertion_loss_db: f64,
        /// Initial guess `T,T_sys,G_sys`; read off the data when omitted.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        guess: Option<Vec<f64>>,
        /// Write the fit as JSON here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Repeat an operating point and histogram the log-negativity.
    Stability {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        reps: usize,
        #[arg(long, default_value_t = 200_000)]
        n_rep_each: usize,
    },
}

/// Options shared by the sampling commands. Flags override the config file.
#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    gain: Option<f64>,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long)]
    eps_bar: Option<f64>,
    #[arg(long)]
    eta_s: Option<f64>,
    #[arg(long)]
    eta_i: Option<f64>,
    #[arg(long)]
    n_cells: Option<u32>,
    #[arg(long)]
    eps_cell: Option<f64>,
    #[arg(long)]
    f_p: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    g_sys: Option<f64>,
    #[arg(long)]
    n_add: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    n_rep: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_batches: Option<usize>,
    #[arg(long)]
    insertion_loss_db: Option<f64>,
    /// Also write the raw samples as CSV.
    #[arg(long)]
    samples_csv: bool,
    #[arg(long, env = "TWPA_OUT_DIR")]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut settings = match &self.config {
            Some(path) => Settings::parse(&std::fs::read_to_string(path)?)?,
            None => Settings::default(),
        };
        let mut flags = Settings::default();
        let pairs: [(&str, Option<String>); 18] = [
            ("gain", self.gain.map(|v| v.to_string())),
            ("r", self.r.map(|v| v.to_string())),
            ("phi", self.phi.map(|v| v.to_string())),
            ("eps_bar", self.eps_bar.map(|v| v.to_string())),
            ("eta_s", self.eta_s.map(|v| v.to_string())),
            ("eta_i", self.eta_i.map(|v| v.to_string())),
            ("n_cells", self.n_cells.map(|v| v.to_string())),
            ("eps_cell", self.eps_cell.map(|v| v.to_string())),
            ("f_p", self.f_p.map(|v| v.to_string())),
            ("delta", self.delta.map(|v| v.to_string())),
            ("g_sys", self.g_sys.map(|v| v.to_string())),
            ("n_add", self.n_add.map(|v| v.to_string())),
            ("tau", self.tau.map(|v| v.to_string())),
            ("n_rep", self.n_rep.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("n_batches", self.n_batches.map(|v| v.to_string())),
            ("insertion_loss_db", self.insertion_loss_db.map(|v| v.to_string())),
            ("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                flags.set(k, &v)?;
            }
        }
        if self.samples_csv {
            flags.set("write_samples_csv", "true")?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{kv}`")))?;
            flags.set(k.trim(), v.trim())?;
        }
        settings.merge(&flags);
        let cfg = settings.resolve()?;
        if cfg.n_rep > LARGE_N_REP {
            eprintln!(
                "warning: n_rep = {} stores about {} MB of samples",
                cfg.n_rep,
                cfg.n_rep * 64 / 1_000_000
            );
        }
        Ok(cfg)
    }
}

fn print_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(common) => {
            let cfg = common.resolve()?;
            let out = experiment::cmd_simulate(&cfg)?;
            let m = &out.report.metrics;
            println!(
                "E_N = {:.4} ± {:.4}   Sq+ = {:.3} ± {:.3} dB   E_F = {:.4}   rate = {:.3e} ebit/s",
                m.report.log_negativity,
                m.log_negativity_err,
                m.report.squeezing_db_x_plus,
                m.squeezing_db_x_plus_err,
                m.report.entropy_formation,
                out.report.ebit_rate
            );
            print_files(&out.files);
        }
        Command::SweepPhase { common, points } => {
            let (_, path) = experiment::cmd_sweep_phase(&common.resolve()?, points)?;
            print_files(&[path]);
        }
        Command::SweepDetuning { common, values } => {
            let (_, path) = experiment::cmd_sweep_detuning(&common.resolve()?, &values)?;
            print_files(&[path]);
        }
        Command::SweepGain { common, values } => {
            let (_, path) = experiment::cmd_sweep_gain(&common.resolve()?, &values)?;
            print_files(&[path]);
        }
        Command::CellsCurve {
            eps_cell,
            max_cells,
            gain,
            out_dir,
        } => {
            let (_, path) = experiment::cmd_cells_curve(&out_dir, eps_cell, max_cells, gain)?;
            print_files(&[path]);
        }
        Command::Calibrate {
            input,
            insertion_loss_db,
            guess,
            output,
        } => {
            if insertion_loss_db < 0.0 {
                return Err(Error::Config("insertion loss must be ≥ 0 dB".into()));
            }
            let guess = guess.map(|g| SntjParams {
                t: g[0],
                t_sys: g[1],
                g_sys: g[2],
            });
            let fit = experiment::cmd_calibrate(&input, insertion_loss_db, guess, output.as_deref())?;
            println!(
                "T = {:.4} ± {:.4} K   T_sys = {:.3} ± {:.3} K   G_sys = {:.4e}",
                fit.t, fit.stderr[0], fit.t_sys, fit.stderr[1], fit.g_sys
            );
            println!(
                "G_sys corrected for {} dB: {:.4e} (range {:.4e} .. {:.4e})",
                fit.insertion_loss_db, fit.corrected_g_sys, fit.corrected_g_sys_low, fit.corrected_g_sys_high
            );
            if let Some(p) = output {
                print_files(&[p]);
            }
        }
        Command::Stability {
            common,
            reps,
            n_rep_each,
        } => {
            let (report, files) = experiment::cmd_stability(&common.resolve()?, reps, n_rep_each)?;
            println!("E_N = {:.4} (std {:.4} over {} runs)", report.mean, report.std, reps);
            print_files(&files);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are configuration errors; help and version are not errors
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() {
                1
            } else if e.is_io() {
                3
            } else {
                2
            })
        }
    }
}
