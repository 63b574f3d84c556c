use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lpo_mor::io::{self, EnergyFile};
use lpo_mor::kron_solver::{self, ObservabilityOptions};
use lpo_mor::mor::{self, EnergyReduceOptions};
use lpo_mor::sim::{self, InputSignal, Trajectory};
use lpo_mor::{Error, LpoSystem, OptimizerConfig, SymmetryPolicy};

/// Energy functions and model order reduction for linear systems with
/// polynomial outputs.
#[derive(Parser, Debug)]
#[command(name = "lpo-mor", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute the observability energy coefficients of a system.
    Energy(EnergyArgs),
    /// Reduce a system with balanced truncation, QOBT or the energy method.
    Reduce(ReduceArgs),
    /// Simulate a system and optionally compare it with a reduced model.
    Simulate(SimulateArgs),
}

/// A system file, or one of the built-in benchmarks `msd` and `convdiff`.
#[derive(Args, Debug)]
struct SystemArgs {
    /// Path to a system JSON file, `msd` or `convdiff`.
    system: String,
    /// Load the system even if A is not asymptotically stable.
    #[arg(long)]
    skip_stability: bool,
    /// Number of masses of the msd benchmark (state dimension is twice this).
    #[arg(long, default_value_t = 25)]
    masses: usize,
    #[arg(long, default_value_t = 1.0)]
    mass: f64,
    #[arg(long, default_value_t = 1.0)]
    stiffness: f64,
    #[arg(long, default_value_t = 1.0)]
    damping: f64,
    /// Interior grid points per direction of the convdiff benchmark.
    #[arg(long, default_value_t = 20)]
    grid: usize,
    /// Convection velocity of the convdiff benchmark.
    #[arg(long, default_value_t = 1.0)]
    velocity: f64,
}

impl SystemArgs {
    fn load(&self) -> lpo_mor::Result<LpoSystem<f64>> {
        match self.system.as_str() {
            "msd" => sim::build_msd(self.masses, self.mass, self.stiffness, self.damping),
            "convdiff" => sim::build_convdiff(self.grid, self.velocity),
            path => io::read_system(Path::new(path), self.skip_stability),
        }
    }

    fn default_input(&self) -> &'static str {
        match self.system.as_str() {
            "msd" => "msd",
            "convdiff" => "convdiff",
            _ => "step",
        }
    }
}

#[derive(Args, Debug)]
struct EnergyArgs {
    #[command(flatten)]
    system: SystemArgs,
    /// Accuracy target for the quadrature.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Fixed quadrature parameter instead of the a-priori choice.
    #[arg(long)]
    ell: Option<usize>,
    /// Only compute even degrees.
    #[arg(long)]
    even_only: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Bt,
    Qobt,
    Energy,
}

#[derive(Args, Debug)]
struct ReduceArgs {
    #[command(flatten)]
    system: SystemArgs,
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Reduced order.
    #[arg(long)]
    r: usize,
    /// Radius of the state ball (energy method only).
    #[arg(long = "L", default_value_t = 1.0)]
    radius: f64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long)]
    ell: Option<usize>,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    grad_tol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    system: SystemArgs,
    /// Input signal: zero, step, msd or convdiff. Defaults to the
    /// benchmark's own input, or a unit step for system files.
    #[arg(long)]
    input: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    t0: f64,
    #[arg(long)]
    t1: Option<f64>,
    #[arg(long, default_value_t = sim::DEFAULT_DT)]
    dt: f64,
    /// Reduced model file to simulate alongside.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn run_energy(args: &EnergyArgs) -> lpo_mor::Result<()> {
    let sys = args.system.load()?;
    let obs = kron_solver::build_observability_coefficients(
        sys.a(),
        sys.outputs(),
        &ObservabilityOptions {
            tol: args.tol,
            ell: args.ell,
            even_only: args.even_only,
            ..Default::default()
        },
    )?;
    for rep in &obs.reports {
        println!(
            "degree {}: ell = {}{}, rank = {} (bound {})",
            rep.k,
            rep.ell,
            if rep.capped { " (capped)" } else { "" },
            rep.rank,
            rep.rank_bound
        );
    }
    let e = lpo_mor::EnergyFunction::new(obs.coefficients, SymmetryPolicy::Auto)?;
    io::write_json(&args.out, &EnergyFile::from_energy(&e, &obs.reports))
}

fn run_reduce(args: &ReduceArgs) -> lpo_mor::Result<()> {
    let sys = args.system.load()?;
    let rom = match args.method {
        MethodArg::Bt => mor::balanced_truncation(&sys, args.r)?,
        MethodArg::Qobt => mor::qobt_reduce(&sys, args.r)?,
        MethodArg::Energy => {
            let opts = EnergyReduceOptions {
                optimizer: OptimizerConfig {
                    max_iters: args.max_iters,
                    grad_tol: args.grad_tol,
                    ..Default::default()
                },
                tol: args.tol,
                ell: args.ell,
                ..Default::default()
            };
            mor::energy_based_reduce_with(&sys, args.r, args.radius, &opts)?
        }
    };
    let p = &rom.provenance;
    println!(
        "{:?} reduction to r = {}: {} (spectral abscissa {:.6e})",
        p.method,
        p.r,
        if p.stable { "stable" } else { "NOT stable" },
        p.spectral_abscissa
    );
    if let Some(o) = &p.optimizer {
        println!(
            "optimizer: {} iterations, objective {:.10e} -> {:.10e}, gradient norm {:.3e}",
            o.iterations, o.initial_objective, o.final_objective, o.grad_norm
        );
    }
    io::write_reduced(&args.out, &rom)
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn run_simulate(args: &SimulateArgs) -> lpo_mor::Result<()> {
    let sys = args.system.load()?;
    // Validate the comparison model before the (possibly long) full simulation.
    let rom = match &args.compare {
        Some(path) => {
            let rom: LpoSystem<f64> = io::read_system(path, true)?;
            if rom.inputs() != sys.inputs() {
                return Err(Error::Dimension(format!(
                    "reduced model has {} inputs, system has {}",
                    rom.inputs(),
                    sys.inputs()
                )));
            }
            if !rom.is_stable()? {
                log::warn!("reduced model is not asymptotically stable");
            }
            Some(rom)
        }
        None => None,
    };
    let input = InputSignal::by_name(
        args.input.as_deref().unwrap_or(args.system.default_input()),
        sys.inputs(),
    )?;
    let t1 = args.t1.unwrap_or(match args.system.system.as_str() {
        "msd" => 20.0,
        _ => 10.0,
    });
    let full = sim::simulate(&sys, &input, (args.t0, t1), args.dt)?;
    let reduced = rom
        .map(|r| sim::simulate(&r, &input, (args.t0, t1), args.dt))
        .transpose()?;
    write_csv(&args.out, &full, reduced.as_ref())?;
    if let Some(red) = &reduced {
        let m = sim::error_metrics(&full, red)?;
        let scale = sim::linf_norm(&full);
        println!(
            "max |y - yhat| = {:.6e} (relative {:.6e}), L2 error {:.6e}",
            m.linf,
            if scale > 0.0 { m.linf / scale } else { m.linf },
            m.l2
        );
    }
    Ok(())
}

fn write_csv(path: &Path, full: &Trajectory<f64>, reduced: Option<&Trajectory<f64>>) -> lpo_mor::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    match reduced {
        None => {
            w.write_record(["t", "y"]).map_err(csv_error)?;
            for (t, y) in full.times.iter().zip(&full.outputs) {
                w.write_record([fmt17(*t), fmt17(*y)]).map_err(csv_error)?;
            }
        }
        Some(red) => {
            w.write_record(["t", "y", "yhat", "abs_err"]).map_err(csv_error)?;
            for ((t, y), yh) in full.times.iter().zip(&full.outputs).zip(&red.outputs) {
                w.write_record([fmt17(*t), fmt17(*y), fmt17(*yh), fmt17((y - yh).abs())])
                    .map_err(csv_error)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Numerical(format!("csv: {other:?}")),
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("LPO_MOR_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("LPO_MOR_THREADS must be a positive integer, got '{value}'"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::Energy(a) => run_energy(a),
        Command::Reduce(a) => run_reduce(a),
        Command::Simulate(a) => run_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
