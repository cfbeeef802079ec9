//! `gravpose`: command-line runner for the simulation experiments.
//!
//! Every subcommand writes one CSV table (to `--out` or stdout). Failures
//! print a single JSON object on stderr and exit nonzero.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gravpose_core::bench::experiments::{run_crlb, run_mc_pnp, run_mc_ransac, run_noise_est};
use gravpose_core::bench::table::write_csv;
use gravpose_core::bench::{emit_csv, run_drift, McResult};
use gravpose_core::{Error, SimConfig};

/// Point counts of the accuracy and bound sweeps.
const DEFAULT_POINTS: &str = "25,100,400,1600";

#[derive(Debug, Parser)]
#[command(
    name = "gravpose",
    version,
    about = "Gravity-aided 4-DOF pose estimation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// LS, bias-eliminated and Gauss-Newton accuracy versus point count.
    McPnp {
        #[command(flatten)]
        common: Common,
        /// Point counts to sweep.
        #[arg(long, value_delimiter = ',', default_value = DEFAULT_POINTS)]
        points: Vec<usize>,
    },
    /// 3-point versus 5-point consensus under outliers.
    McRansac {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3")]
        outlier_rates: Vec<f64>,
        /// Also write the wall-clock table here. Without --threads this runs
        /// single-threaded so the timings are comparable.
        #[arg(long)]
        timing: Option<PathBuf>,
    },
    /// Long trajectory with gravity-prior fusion: per-frame errors.
    Drift {
        #[command(flatten)]
        common: Common,
    },
    /// Bound on yaw and translation versus point count.
    Crlb {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = DEFAULT_POINTS)]
        points: Vec<usize>,
    },
    /// Image-noise variance estimates from stereo pairs.
    NoiseEst {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// TOML file of simulation settings (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; defaults to `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Monte Carlo runs per configuration.
    #[arg(long)]
    runs: Option<usize>,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    sim: SimOverrides,
}

/// One flag per simulation setting, applied over the config file.
#[derive(Debug, Args)]
struct SimOverrides {
    #[arg(long)]
    focal: Option<f64>,
    #[arg(long)]
    width: Option<f64>,
    #[arg(long)]
    height: Option<f64>,
    /// Right camera center in the left frame, `x,y,z`.
    #[arg(long, value_delimiter = ',', num_args = 1, allow_hyphen_values = true)]
    baseline: Option<Vec<f64>>,
    #[arg(long)]
    depth_min: Option<f64>,
    #[arg(long)]
    depth_max: Option<f64>,
    #[arg(long)]
    sigma_px: Option<f64>,
    #[arg(long)]
    current_noise: Option<bool>,
    #[arg(long)]
    outlier_ratio: Option<f64>,
    #[arg(long)]
    n_points: Option<usize>,
    #[arg(long)]
    rp_prior_noise_deg: Option<f64>,
    #[arg(long)]
    max_yaw_deg: Option<f64>,
    #[arg(long)]
    max_tilt_deg: Option<f64>,
    #[arg(long)]
    t_min: Option<f64>,
    #[arg(long)]
    t_max: Option<f64>,
    #[arg(long)]
    camera_rate: Option<f64>,
    #[arg(long)]
    imu_rate: Option<f64>,
    #[arg(long)]
    gyro_noise_density: Option<f64>,
    #[arg(long)]
    gyro_bias_walk: Option<f64>,
    #[arg(long)]
    gyro_bias_init: Option<f64>,
    #[arg(long)]
    accel_noise_density: Option<f64>,
    #[arg(long)]
    accel_bound: Option<f64>,
    #[arg(long)]
    duration: Option<f64>,
}

macro_rules! apply {
    ($cfg:ident, $ov:ident, $($field:ident),*) => {
        $(if let Some(v) = $ov.$field { $cfg.$field = v; })*
    };
}

impl SimOverrides {
    fn apply(&self, cfg: &mut SimConfig) -> Result<(), Error> {
        let ov = self;
        apply!(
            cfg,
            ov,
            focal,
            width,
            height,
            depth_min,
            depth_max,
            sigma_px,
            current_noise,
            outlier_ratio,
            n_points,
            rp_prior_noise_deg,
            max_yaw_deg,
            max_tilt_deg,
            t_min,
            t_max,
            camera_rate,
            imu_rate,
            gyro_noise_density,
            gyro_bias_walk,
            gyro_bias_init,
            accel_noise_density,
            accel_bound,
            duration
        );
        if let Some(b) = &self.baseline {
            cfg.baseline = b
                .as_slice()
                .try_into()
                .map_err(|_| Error::Config(format!("--baseline needs 3 components, got {}", b.len())))?;
        }
        Ok(())
    }
}

fn load_config(path: &Path) -> Result<SimConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
}

/// Resolved settings shared by all subcommands.
struct Setup {
    cfg: SimConfig,
    seed: u64,
    runs: usize,
    out: Option<PathBuf>,
}

fn setup(common: &Common, default_runs: usize, default_threads: Option<usize>) -> Result<Setup, Error> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => SimConfig::default(),
    };
    common.sim.apply(&mut cfg)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let runs = common.runs.unwrap_or(default_runs);
    if runs == 0 {
        return Err(Error::Config("--runs must be positive".into()));
    }
    if let Some(n) = common.threads.or(default_threads) {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(Setup {
        seed: cfg.seed,
        cfg,
        runs,
        out: common.out.clone(),
    })
}

fn write_table(table: &McResult, out: Option<&Path>) -> Result<(), Error> {
    match out {
        Some(path) => emit_csv(table, path),
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_csv(table, &mut lock).map_err(|source| Error::Csv {
                path: PathBuf::from("<stdout>"),
                source,
            })?;
            lock.flush().map_err(|source| Error::Io {
                path: PathBuf::from("<stdout>"),
                source,
            })
        }
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::McPnp { common, points } => {
            let s = setup(&common, 700, None)?;
            write_table(&run_mc_pnp(&s.cfg, &points, s.runs, s.seed)?, s.out.as_deref())
        }
        Command::McRansac {
            common,
            outlier_rates,
            timing,
        } => {
            let single = timing.as_ref().map(|_| 1);
            let s = setup(&common, 400, single)?;
            let report = run_mc_ransac(&s.cfg, &outlier_rates, s.runs, s.seed)?;
            write_table(&report.accuracy, s.out.as_deref())?;
            match timing {
                Some(path) => emit_csv(&report.timing, &path),
                None => Ok(()),
            }
        }
        Command::Drift { common } => {
            let s = setup(&common, 1, None)?;
            write_table(&run_drift(&s.cfg, s.runs, s.seed)?, s.out.as_deref())
        }
        Command::Crlb { common, points } => {
            let s = setup(&common, 50, None)?;
            write_table(&run_crlb(&s.cfg, &points, s.runs, s.seed)?, s.out.as_deref())
        }
        Command::NoiseEst { common } => {
            let s = setup(&common, 20, None)?;
            write_table(&run_noise_est(&s.cfg, s.runs, s.seed)?, s.out.as_deref())
        }
    }
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
