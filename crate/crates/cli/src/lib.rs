//! Command-line front-end: config ingestion, subcommand dispatch and
//! deterministic artifacts.
//!
//! Every run writes its data files plus a `manifest.json` into the
//! output directory. Re-running with the inputs recorded in a manifest
//! reproduces the data files byte for byte, at any thread count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use cqed_core::dispersive::{self, SweepSpin};
use cqed_core::fit::{self, FitProblem, FlatModel, FreeParam};
use cqed_core::model::{SystemConfig, ValidatedConfig};
use cqed_core::readout::{self, ReadoutParams};
use cqed_core::spectrum;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug)]
pub enum AppError {
    /// Bad flags, unknown subcommand, malformed grid spec.
    Usage(String),
    /// Invalid input: config violations, unreadable files, bad JSON.
    Validation(String),
    /// Numerical failure inside a computation.
    Numerical(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => EXIT_USAGE,
            AppError::Validation(_) => EXIT_VALIDATION,
            AppError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            AppError::Usage(m) | AppError::Validation(m) | AppError::Numerical(m) => m,
        }
    }
}

impl From<cqed_core::Error> for AppError {
    fn from(e: cqed_core::Error) -> Self {
        if e.is_validation() {
            AppError::Validation(e.to_string())
        } else {
            AppError::Numerical(e.to_string())
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "cqed-sim",
    version,
    about = "Cavity-QED transmission, collective-mode and spin-readout simulator",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Transmission spectrum of a system config over a probe grid.
    Spectrum {
        #[command(flatten)]
        common: Common,
        /// Probe grid START:STOP:POINTS in GHz.
        #[arg(long, allow_hyphen_values = true)]
        grid: String,
    },
    /// Collective modes of the cavity-eliminated effective matrix.
    Modes {
        #[command(flatten)]
        common: Common,
    },
    /// Magnetic-field sweep: intensity map plus tracked mode branches.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Override the probe grid from the sweep document.
        #[arg(long, allow_hyphen_values = true)]
        grid: Option<String>,
    },
    /// Monte-Carlo single-shot readout histograms and fidelity.
    Readout {
        #[command(flatten)]
        common: Common,
        /// Override the seed from the readout document.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Least-squares parameter extraction from a measured spectrum.
    Fit {
        #[command(flatten)]
        common: Common,
        /// CSV data file with header omega_GHz,T.
        #[arg(long)]
        data: PathBuf,
        /// Fit problem JSON (free parameters, bounds, initial values).
        #[arg(long)]
        problem: PathBuf,
        /// Override the seed from the problem document.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a system config and report every violation.
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Input document (system config, sweep doc or readout doc).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts and the run manifest.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker thread cap; falls back to CQED_SIM_THREADS, then to the
    /// machine parallelism. Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    subcommand: &'a str,
    config: String,
    outputs: Vec<String>,
    seed: Option<u64>,
    tool_version: &'a str,
    wall_time_ms: f64,
}

/// Sweep document: a system config plus the field grid, per-emitter
/// spin preparation and probe grid.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepDoc {
    system: SystemConfig,
    b_values: GridSpec,
    spin_prep: Vec<SweepSpin>,
    probe_grid: GridSpec,
    #[serde(default)]
    #[allow(dead_code)]
    provenance: Option<BTreeMap<String, String>>,
}

/// Readout document: simulation parameters.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReadoutDoc {
    params: ReadoutParams,
    #[serde(default)]
    #[allow(dead_code)]
    provenance: Option<BTreeMap<String, String>>,
}

#[derive(Deserialize, Clone, Copy)]
#[serde(deny_unknown_fields)]
struct GridSpec {
    start: f64,
    stop: f64,
    points: usize,
}

impl GridSpec {
    fn build(&self) -> Result<Vec<f64>, AppError> {
        if self.points == 0 {
            return Err(AppError::Validation("grid needs at least one point".into()));
        }
        if self.points > 1 && !(self.start < self.stop) {
            return Err(AppError::Validation(format!(
                "grid start {} must be below stop {}",
                self.start, self.stop
            )));
        }
        Ok(spectrum::linspace(self.start, self.stop, self.points))
    }
}

/// Fit problem document: which parameters float, their bounds and
/// starting values.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FitProblemDoc {
    free: Vec<FreeParamDoc>,
    #[serde(default)]
    restarts: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    max_iters: Option<usize>,
    #[serde(default)]
    #[allow(dead_code)]
    provenance: Option<BTreeMap<String, String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FreeParamDoc {
    param: String,
    bounds: (f64, f64),
    initial: f64,
}

fn parse_grid_flag(spec: &str) -> Result<Vec<f64>, AppError> {
    let parts: Vec<&str> = spec.split(':').collect();
    let usage = || {
        AppError::Usage(format!(
            "--grid expects START:STOP:POINTS (GHz), got `{spec}`"
        ))
    };
    if parts.len() != 3 {
        return Err(usage());
    }
    let start: f64 = parts[0].parse().map_err(|_| usage())?;
    let stop: f64 = parts[1].parse().map_err(|_| usage())?;
    let points: usize = parts[2].parse().map_err(|_| usage())?;
    if points == 0 || (points > 1 && !(start < stop)) {
        return Err(usage());
    }
    Ok(spectrum::linspace(start, stop, points))
}

fn read_file(path: &Path) -> Result<String, AppError> {
    std::fs::read_to_string(path)
        .map_err(|e| AppError::Validation(format!("cannot read {}: {e}", path.display())))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, AppError> {
    serde_json::from_str(text).map_err(|e| {
        AppError::Validation(format!(
            "{} at line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}

/// Parse and validate a system config, reporting all errors at once.
pub fn load_config(path: &Path) -> Result<ValidatedConfig, AppError> {
    let text = read_file(path)?;
    let config: SystemConfig = parse_json(path, &text)?;
    Ok(config.validate()?)
}

struct OutputWriter {
    dir: PathBuf,
    written: Vec<String>,
}

impl OutputWriter {
    fn new(dir: &Path) -> Result<Self, AppError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| AppError::Validation(format!("cannot create {}: {e}", dir.display())))?;
        Ok(OutputWriter {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), AppError> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents)
            .map_err(|e| AppError::Validation(format!("cannot write {}: {e}", path.display())))?;
        self.written.push(path.display().to_string());
        Ok(())
    }

    fn finish(
        mut self,
        subcommand: &str,
        config: &Path,
        seed: Option<u64>,
        started: Instant,
    ) -> Result<(), AppError> {
        let manifest = RunManifest {
            subcommand,
            config: config.display().to_string(),
            outputs: std::mem::take(&mut self.written),
            seed,
            tool_version: env!("CARGO_PKG_VERSION"),
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        json.push('\n');
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, json)
            .map_err(|e| AppError::Validation(format!("cannot write {}: {e}", path.display())))
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, AppError> {
    if let Some(n) = flag {
        if n == 0 {
            return Err(AppError::Usage("--threads must be at least 1".into()));
        }
        return Ok(Some(n));
    }
    match std::env::var("CQED_SIM_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(AppError::Usage(format!(
                "CQED_SIM_THREADS must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Ok(None),
    }
}

fn with_pool<T>(
    threads: Option<usize>,
    job: impl FnOnce() -> Result<T, AppError> + Send,
) -> Result<T, AppError>
where
    T: Send,
{
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| AppError::Validation(format!("cannot build thread pool: {e}")))?;
    pool.install(job)
}

/// Parse argv and execute. Returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn execute(command: Command) -> Result<(), AppError> {
    let started = Instant::now();
    match command {
        Command::Validate { common } => {
            let config = load_config(&common.config)?;
            println!(
                "ok: {} ({} emitters, {} active)",
                common.config.display(),
                config.emitters.len(),
                config.emitters.iter().filter(|e| e.active).count()
            );
            let writer = OutputWriter::new(&common.out)?;
            writer.finish("validate", &common.config, None, started)
        }
        Command::Spectrum { common, grid } => {
            let config = load_config(&common.config)?;
            let grid = parse_grid_flag(&grid)?;
            let threads = thread_count(common.threads)?;
            let spec = with_pool(threads, || {
                Ok(spectrum::transmission_spectrum(&grid, &config)?)
            })?;
            let mut writer = OutputWriter::new(&common.out)?;
            writer.write("spectrum.csv", &spectrum::to_csv(&spec))?;
            writer.finish("spectrum", &common.config, None, started)
        }
        Command::Modes { common } => {
            let config = load_config(&common.config)?;
            let model = dispersive::effective_matrix_auto(&config)?;
            let modes = dispersive::collective_modes(&model)?;
            let mut writer = OutputWriter::new(&common.out)?;
            writer.write("modes.json", &modes_json(&model, &modes))?;
            writer.finish("modes", &common.config, None, started)
        }
        Command::Sweep { common, grid } => {
            let text = read_file(&common.config)?;
            let doc: SweepDoc = parse_json(&common.config, &text)?;
            let system = doc.system.validate()?;
            let b_values = doc.b_values.build()?;
            let probe_grid = match grid {
                Some(spec) => parse_grid_flag(&spec)?,
                None => doc.probe_grid.build()?,
            };
            let threads = thread_count(common.threads)?;
            let sweep = with_pool(threads, || {
                Ok(dispersive::field_sweep(
                    &system,
                    &b_values,
                    &doc.spin_prep,
                    &probe_grid,
                )?)
            })?;
            let mut writer = OutputWriter::new(&common.out)?;
            writer.write("sweep_map.csv", &dispersive::sweep_to_csv(&sweep))?;
            writer.write(
                "sweep_summary.json",
                &dispersive::sweep_summary_json(&sweep),
            )?;
            writer.finish("sweep", &common.config, None, started)
        }
        Command::Readout { common, seed } => {
            let text = read_file(&common.config)?;
            let doc: ReadoutDoc = parse_json(&common.config, &text)?;
            let mut params = doc.params;
            if let Some(seed) = seed {
                params.seed = seed;
            }
            let threads = thread_count(common.threads)?;
            let result = with_pool(threads, || Ok(readout::count_histograms(&params)?))?;
            let mut writer = OutputWriter::new(&common.out)?;
            writer.write("readout.json", &readout::result_to_json(&params, &result))?;
            writer.write("readout_hist.csv", &readout::histograms_to_csv(&result))?;
            writer.finish("readout", &common.config, Some(params.seed), started)
        }
        Command::Fit {
            common,
            data,
            problem,
            seed,
        } => {
            let config = load_config(&common.config)?;
            let base = FlatModel::from_config(&config)?;
            let data_points = fit::parse_data_csv(&read_file(&data)?)?;
            let text = read_file(&problem)?;
            let doc: FitProblemDoc = parse_json(&problem, &text)?;

            let free = doc
                .free
                .iter()
                .map(|f| {
                    Ok(FreeParam {
                        id: f.param.parse()?,
                        bounds: f.bounds,
                        initial: f.initial,
                    })
                })
                .collect::<Result<Vec<_>, cqed_core::Error>>()?;
            let mut fit_problem = FitProblem::new(data_points, base, free);
            if let Some(r) = doc.restarts {
                fit_problem.restarts = r;
            }
            if let Some(m) = doc.max_iters {
                fit_problem.max_iters = m;
            }
            fit_problem.seed = seed.or(doc.seed).unwrap_or(0);

            let threads = thread_count(common.threads)?;
            let result = with_pool(threads, || Ok(fit::fit(&fit_problem)?))?;
            let mut writer = OutputWriter::new(&common.out)?;
            writer.write(
                "fit_result.json",
                &fit::result_to_json(&fit_problem, &result),
            )?;
            writer.finish("fit", &common.config, Some(fit_problem.seed), started)
        }
    }
}

fn modes_json(model: &dispersive::EffectiveModel, modes: &dispersive::CollectiveModes) -> String {
    #[derive(Serialize)]
    struct ModeDoc {
        #[serde(rename = "omega_GHz")]
        omega: f64,
        #[serde(rename = "fwhm_GHz")]
        fwhm: f64,
        cavity_weight: f64,
        label: String,
        eigenvector_re: Vec<f64>,
        eigenvector_im: Vec<f64>,
    }
    #[derive(Serialize)]
    struct Doc {
        #[serde(rename = "reference_GHz")]
        reference: f64,
        #[serde(rename = "delta_r_GHz")]
        delta_r: f64,
        modes: Vec<ModeDoc>,
    }
    let doc = Doc {
        reference: model.reference,
        delta_r: model.delta_r,
        modes: modes
            .modes
            .iter()
            .map(|m| ModeDoc {
                omega: m.frequency(),
                fwhm: m.fwhm(),
                cavity_weight: m.cavity_weight,
                label: m.label.to_string(),
                eigenvector_re: m.eigenvector.iter().map(|z| z.re).collect(),
                eigenvector_im: m.eigenvector.iter().map(|z| z.im).collect(),
            })
            .collect(),
    };
    let mut json = serde_json::to_string_pretty(&doc).expect("modes serialize");
    json.push('\n');
    json
}
