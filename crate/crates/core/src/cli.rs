//! The `orbit-langevin` command line.
//!
//! Exit codes: 0 on success, 1 on numerical failure (a diverged chain, a
//! failed initialization), 2 on usage errors including unreadable inputs.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::{Dims, RunConfig, SpectrumSpec};
use crate::diagnostics::{assemble_report, ReportSettings};
use crate::error::Error;
use crate::io::{read_json, to_json_string};
use crate::linalg::{from_row_major, to_row_major};
use crate::manifold::{Branch, OrbitSpec};
use crate::operators::{generate_instance, GenerateOptions, Instance, Variant};
use crate::processes::{cir_simulate, ou_squares_simulate, quantile_table, write_quantile_csv, CirParams};
use crate::rng::RngStream;
use crate::sampler::{init_gradient_descent, read_trajectory_csv, run_chains, write_trajectory_csv, Trajectory};
use crate::torus::{torus_chains, torus_decomposition_check, write_samples_csv, TestFunction};

/// Stream id reserved for initialization draws; chains use `0..chains`.
const INIT_STREAM: u64 = 1 << 40;
/// Default step size is this multiple of `1 / (beta sigma_max^2)`; the
/// largest Hessian eigenvalue at the orbit is `8 sigma_max^2`.
const DEFAULT_STEP_FACTOR: f64 = 0.1;

#[derive(Parser, Debug)]
#[command(name = "orbit-langevin", version, about = "Langevin sampling on orthogonal-orbit posteriors")]
pub struct Cli {
    /// Worker threads (defaults to the number of physical cores).
    #[arg(long, global = true, env = "ORBIT_LANGEVIN_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Draw a problem instance and write it as JSON.
    Generate(GenerateArgs),
    /// Run Langevin chains on an instance.
    Sample(SampleArgs),
    /// Compute the diagnostics report for a sampling run.
    Diagnose(DiagnoseArgs),
    /// Torus toy problem: decomposition quadrature and chain samples.
    Torus(TorusArgs),
    /// Simulate the CIR process and write marginal quantiles.
    Cir(CirArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum OperatorKind {
    Factorization,
    Sensing,
    Completion,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "factorization")]
    pub operator: OperatorKind,
    /// Number of sensing matrices.
    #[arg(long = "L")]
    pub l: Option<usize>,
    /// Completion sampling probability.
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long, default_value_t = 1e6)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_min: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_max: f64,
    #[arg(long)]
    pub seed: u64,
    /// Leave out the observation noise.
    #[arg(long)]
    pub noiseless: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InitKind {
    /// Perturbed gradient descent from a small random start.
    Gd,
    /// Start at the ground truth.
    Truth,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub instance: PathBuf,
    /// Output directory for `chain_NNN.csv` and `run.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Step size; defaults to 0.1 / (beta sigma_max(X0)^2).
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long, default_value_t = 100_000)]
    pub steps: u64,
    /// Defaults to steps / 10.
    #[arg(long)]
    pub burnin: Option<u64>,
    #[arg(long, default_value_t = 10)]
    pub thin: u64,
    #[arg(long, default_value_t = 4)]
    pub chains: usize,
    #[arg(long)]
    pub seed: u64,
    /// Overrides the inverse temperature stored in the instance.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    #[arg(long, value_enum, default_value = "gd")]
    pub init: InitKind,
    #[arg(long, default_value_t = 1e-10)]
    pub init_tol: f64,
    #[arg(long, default_value_t = 1_000_000)]
    pub init_max_iters: usize,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub instance: PathBuf,
    /// Directory written by `sample`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Nearness radius; defaults to sqrt(10 d k / (beta sigma_min^2)).
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub grad_points: usize,
    #[arg(long, default_value_t = 20)]
    pub det_points: usize,
    #[arg(long, default_value_t = 100)]
    pub rotations: usize,
}

#[derive(Args, Debug)]
pub struct TorusArgs {
    #[arg(long, default_value_t = 25.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.3)]
    pub s_max: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub h: f64,
    #[arg(long, default_value_t = 100_000)]
    pub steps: u64,
    #[arg(long, default_value_t = 4)]
    pub chains: usize,
    #[arg(long, default_value_t = 10)]
    pub thin: u64,
    #[arg(long)]
    pub seed: u64,
    /// Output directory for `quadrature.csv` and `samples.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProcessKind {
    /// Full-truncation Euler scheme.
    Cir,
    /// Sum of squared OU components, sampled exactly.
    Ou,
}

#[derive(Args, Debug)]
pub struct CirArgs {
    #[arg(long)]
    pub gamma: f64,
    #[arg(long)]
    pub n_tilde: f64,
    #[arg(long, default_value_t = 0.0)]
    pub y0: f64,
    /// Horizon.
    #[arg(long)]
    pub t: f64,
    #[arg(long, default_value_t = 10_000)]
    pub paths: usize,
    /// Time step; defaults to min(1e-3, 0.01 / gamma).
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "cir")]
    pub process: ProcessKind,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Contents of `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub config: RunConfig,
    pub d: usize,
    pub k: usize,
    /// Starting point, row-major.
    pub x0: Vec<f64>,
    pub init_iterations: usize,
    pub init_perturbations: usize,
    pub init_grad_norm: f64,
    pub diverged: Vec<String>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Size(_) | Error::InvalidParameter(_) | Error::Unsupported(_) | Error::Io(_) | Error::Parse(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn read_instance(path: &Path) -> CliResult<Instance> {
    if !path.is_file() {
        return Err(usage(format!("instance file {} not found", path.display())));
    }
    read_json(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn ensure_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| usage(format!("cannot create {}: {e}", path.display())))
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> CliResult<()> {
    let n = cli.threads.unwrap_or_else(num_cpus::get_physical);
    if n == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| usage(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Generate(a) => generate(a),
        Command::Sample(a) => sample(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Torus(a) => torus(a),
        Command::Cir(a) => cir(a),
    })
}

fn generate(a: GenerateArgs) -> CliResult<()> {
    if a.l.is_some() && a.operator != OperatorKind::Sensing {
        return Err(usage("--L only applies to --operator sensing"));
    }
    if a.p.is_some() && a.operator != OperatorKind::Completion {
        return Err(usage("--p only applies to --operator completion"));
    }
    let variant = match a.operator {
        OperatorKind::Factorization => Variant::Factorization,
        OperatorKind::Sensing => Variant::Sensing { l: a.l.ok_or_else(|| usage("--operator sensing needs --L"))? },
        OperatorKind::Completion => {
            Variant::Completion { p: a.p.ok_or_else(|| usage("--operator completion needs --p"))? }
        }
    };
    if a.k > a.d {
        return Err(usage(format!("--k {} exceeds --d {}", a.k, a.d)));
    }
    let dims = Dims::new(a.d, a.k)?;
    let spectrum = SpectrumSpec::geometric(a.k, a.sigma_min, a.sigma_max)?;
    let opts = GenerateOptions { noiseless: a.noiseless, ..GenerateOptions::default() };
    let inst = generate_instance(dims, &spectrum, variant, a.beta, &mut RngStream::new(a.seed, 0), opts)?;
    write_text(&a.out, &to_json_string(&inst)?)
}

fn sample(a: SampleArgs) -> CliResult<()> {
    let mut inst = read_instance(&a.instance)?;
    if let Some(beta) = a.beta {
        inst.beta = beta;
    }
    let init = match a.init {
        InitKind::Gd => {
            let mut rng = RngStream::new(a.seed, INIT_STREAM);
            Some(init_gradient_descent(&inst, &mut rng, a.init_tol, a.init_max_iters)?)
        }
        InitKind::Truth => None,
    };
    let x0 = init.as_ref().map_or_else(|| inst.x_star.clone(), |o| o.x.clone());
    let sigma_max = OrbitSpec::new(x0.clone(), Branch::One)?.sigma_max();
    let h = a.h.unwrap_or(DEFAULT_STEP_FACTOR / (inst.beta * sigma_max * sigma_max));
    let mut cfg = RunConfig::new(inst.beta, h, a.steps, a.chains, a.seed).map_err(|e| usage(e.to_string()))?;
    if let Some(b) = a.burnin {
        cfg.burnin = b;
    }
    cfg.thin = a.thin;
    cfg.epsilon = a.epsilon;
    cfg.validate()?;

    let trajectories = run_chains(&inst, &cfg, &x0)?;
    ensure_dir(&a.out)?;
    for t in &trajectories {
        let w = create(&a.out.join(format!("chain_{:03}.csv", t.chain)))?;
        write_trajectory_csv(&t.records, w)?;
    }
    let diverged: Vec<String> =
        trajectories.iter().filter_map(|t| t.diverged.as_ref().map(|e| format!("chain {}: {e}", t.chain))).collect();
    let info = RunInfo {
        config: cfg,
        d: inst.dims.d(),
        k: inst.dims.k(),
        x0: to_row_major(&x0),
        init_iterations: init.as_ref().map_or(0, |o| o.iterations),
        init_perturbations: init.as_ref().map_or(0, |o| o.perturbations),
        init_grad_norm: init.as_ref().map_or(0.0, |o| o.grad_norm),
        diverged: diverged.clone(),
    };
    write_text(&a.out.join("run.json"), &to_json_string(&info)?)?;
    if diverged.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(diverged.join("; ")))
    }
}

/// Nearness radius used when none is given: the square root of ten times
/// the initial-noise scale `d k / (beta sigma_min^2)`.
pub fn calibrated_radius(d: usize, k: usize, beta: f64, sigma_min: f64) -> f64 {
    (10.0 * (d * k) as f64 / (beta * sigma_min * sigma_min)).sqrt()
}

fn diagnose(a: DiagnoseArgs) -> CliResult<()> {
    let inst = read_instance(&a.instance)?;
    let info_path = a.run.join("run.json");
    if !info_path.is_file() {
        return Err(usage(format!("{} not found", info_path.display())));
    }
    let info: RunInfo = read_json(&info_path).map_err(|e| usage(format!("{}: {e}", info_path.display())))?;
    if (info.d, info.k) != (inst.dims.d(), inst.dims.k()) {
        return Err(usage("run and instance dimensions differ"));
    }
    let spec = OrbitSpec::new(from_row_major(info.d, info.k, &info.x0), Branch::One)?;
    let mut trajectories = Vec::with_capacity(info.config.chains);
    for c in 0..info.config.chains {
        let path = a.run.join(format!("chain_{c:03}.csv"));
        let file = File::open(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        trajectories.push(Trajectory {
            chain: c,
            records: read_trajectory_csv(file)?,
            states: Vec::new(),
            diverged: None,
        });
    }
    let radius = a.radius.unwrap_or_else(|| calibrated_radius(info.d, info.k, info.config.beta, spec.sigma_min()));
    let settings = ReportSettings {
        radius,
        epsilon: info.config.epsilon,
        grad_points: a.grad_points,
        det_points: a.det_points,
        rotations: a.rotations,
        seed: a.seed,
    };
    let mut report = assemble_report(&inst, &spec, &trajectories, &settings);
    report.notes.extend(info.diverged.iter().cloned());
    write_text(&a.out, &to_json_string(&report)?)
}

fn torus(a: TorusArgs) -> CliResult<()> {
    ensure_dir(&a.out)?;
    let mut w = create(&a.out.join("quadrature.csv"))?;
    let io_err = |e: io::Error| usage(e.to_string());
    writeln!(w, "chi,lhs,rhs,converged").map_err(io_err)?;
    for chi in TestFunction::ALL {
        let c = torus_decomposition_check(a.beta, chi, a.s_max)?;
        writeln!(w, "{},{},{},{}", chi.name(), c.lhs, c.rhs, c.converged).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;

    let mut cfg = RunConfig::new(a.beta, a.h, a.steps, a.chains, a.seed).map_err(|e| usage(e.to_string()))?;
    cfg.thin = a.thin;
    cfg.validate()?;
    let samples = torus_chains(&cfg)?;
    write_samples_csv(&samples, create(&a.out.join("samples.csv"))?)?;
    Ok(())
}

fn cir(a: CirArgs) -> CliResult<()> {
    let h = a.h.unwrap_or((0.01 / a.gamma).min(1e-3));
    let params = CirParams::new(a.gamma, a.n_tilde, a.y0, h, a.t)?;
    let mut rng = RngStream::new(a.seed, 0);
    let paths = match a.process {
        ProcessKind::Cir => cir_simulate(&params, &mut rng, a.paths)?,
        ProcessKind::Ou => {
            params.ou_components().map_err(|e| usage(e.to_string()))?;
            ou_squares_simulate(&params, &mut rng, a.paths)?
        }
    };
    for w in &paths.warnings {
        eprintln!("warning: {w}");
    }
    let rows = quantile_table(&paths);
    match &a.out {
        Some(p) => write_quantile_csv(&rows, create(p)?)?,
        None => write_quantile_csv(&rows, io::stdout().lock())?,
    }
    Ok(())
}
