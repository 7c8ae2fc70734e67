//! `ltiqo` command line: system-norm estimation, reduced-order synthesis,
//! time-domain simulation, gradient checking, and benchmark sweeps.
//!
//! Systems and results travel as JSON (`"format": 1`), tabular data as CSV
//! with a header row. Exit codes: 0 success, 1 runtime failure or
//! non-convergence, 2 usage or validation errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use ltiqo::bench::{run_experiment, ExperimentSpec};
use ltiqo::grad::fd_gradient;
use ltiqo::model::{build_error_system, AnySystem, SystemJson};
use ltiqo::objective::{FrequencySets, LevelMode, ObjectiveContext};
use ltiqo::optimizer::{reduce, OptimizerConfig, ReductionResult};
use ltiqo::param::{init_theta, Scheme, ThetaLayout};
use ltiqo::timedomain::{default_dt, input_chirp, input_product_pair, simulate, Signal};
use ltiqo::transfer::{hinf_estimate, HinfConfig};
use ltiqo::Error;

#[derive(Parser)]
#[command(
    name = "ltiqo",
    version,
    about = "H-infinity norms and reduced-order models for LTI systems with quadratic outputs"
)]
struct Cli {
    /// Worker threads (defaults to all cores; env LTIQO_JOBS also applies).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a reduced-order model minimizing the system-norm error.
    Reduce(ReduceArgs),
    /// Estimate the system norm of a model or of an error pair.
    Hinf(HinfArgs),
    /// Integrate a system under a built-in or file-based input signal.
    Simulate(SimulateArgs),
    /// Compare analytic objective gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Run a mass-spring-damper experiment sweep from a spec file.
    BenchMsd(BenchMsdArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SchemeArg {
    Full,
    Diagm,
    Ph,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Full => Scheme::Full,
            SchemeArg::Diagm => Scheme::DiagM,
            SchemeArg::Ph => Scheme::PhCondensed,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Half,
    Sum,
}

impl From<ModeArg> for LevelMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Half => LevelMode::Half,
            ModeArg::Sum => LevelMode::Sum,
        }
    }
}

#[derive(Args)]
struct ReduceArgs {
    /// Full-order system (JSON).
    #[arg(long)]
    input: PathBuf,
    /// Reduced state dimension.
    #[arg(long)]
    order: usize,
    #[arg(long, value_enum)]
    scheme: SchemeArg,
    /// Initial upper level of the bisection.
    #[arg(long, default_value_t = 100.0)]
    gamma_u: f64,
    /// Initial lower level of the bisection.
    #[arg(long, default_value_t = 0.0)]
    gamma_l: f64,
    /// Relative bracket width at which the bisection stops.
    #[arg(long, default_value_t = 0.01)]
    eps_gamma: f64,
    /// Level-splitting convention for the two transfer parts.
    #[arg(long, value_enum, default_value_t = ModeArg::Half)]
    mode: ModeArg,
    /// Lower-bracket reset budget.
    #[arg(long, default_value_t = 3)]
    retries: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent random initializations; the best result is kept.
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    /// Outer-iteration cap.
    #[arg(long, default_value_t = 200)]
    max_outer: usize,
    /// Result file (JSON).
    #[arg(long, default_value = "result.json")]
    out: PathBuf,
    /// Optional per-iteration trace (CSV).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct HinfArgs {
    /// System to estimate (JSON; a reduction result is also accepted).
    #[arg(long)]
    input: PathBuf,
    /// Second system: estimate the norm of the error pair instead.
    #[arg(long)]
    rom: Option<PathBuf>,
    /// Emit the machine-readable estimate instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InputSignal {
    /// Two identical components sin(s t)·cos(s t); see --s.
    Sin,
    /// Linear (first component) and quadratic chirp 0 → 2 Hz.
    Chirp,
    /// Uniformly sampled CSV (t,u1,…,um); linear interpolation.
    File,
}

#[derive(Args)]
struct SimulateArgs {
    /// System to integrate (JSON).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = InputSignal::Sin)]
    input_signal: InputSignal,
    /// Frequency parameter of the sin family.
    #[arg(long, default_value_t = 4.1)]
    s: f64,
    /// Signal file for --input-signal file.
    #[arg(long)]
    signal_file: Option<PathBuf>,
    #[arg(long, default_value_t = 100.0)]
    t_final: f64,
    /// Integrator step (default resolves the input family).
    #[arg(long)]
    dt: Option<f64>,
    /// Output trajectory (CSV).
    #[arg(long, default_value = "output.csv")]
    out: PathBuf,
    /// Optional state trajectory (CSV).
    #[arg(long)]
    states: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Full-order system the objective is built against (JSON).
    #[arg(long)]
    input: PathBuf,
    /// Reduced state dimension of the checked parametrization.
    #[arg(long)]
    order: usize,
    #[arg(long, value_enum)]
    scheme: SchemeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random parameter points tested.
    #[arg(long, default_value_t = 3)]
    samples: usize,
    /// Pass threshold on the relative l2 error.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-6)]
    h: f64,
    /// Level at which the objective is differentiated (default: the
    /// largest sampled singular value, which keeps terms active).
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args)]
struct BenchMsdArgs {
    /// Experiment description (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Validate the spec and build the model without running.
    #[arg(long)]
    dry_run: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_jobs(cli.jobs);
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// Builds the global worker pool once, before any parallel work.
fn init_jobs(flag: Option<usize>) {
    let jobs = flag.or_else(|| {
        std::env::var("LTIQO_JOBS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = jobs {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

/// Usage and validation problems exit 2; runtime failures exit 1.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::DimensionMismatch(_)
        | Error::Unstable { .. }
        | Error::OutputIndex { .. }
        | Error::UnsupportedStructure(_)
        | Error::InvalidTheta(_)
        | Error::InvalidConfig(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::Csv(_) => 2,
        _ => 1,
    }
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Reduce(args) => cmd_reduce(args),
        Command::Hinf(args) => cmd_hinf(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::GradCheck(args) => cmd_grad_check(args),
        Command::BenchMsd(args) => cmd_bench_msd(args),
    }
}

/// Loads a system file; reduction results are accepted too (their embedded
/// reduced model is used).
fn load_system(path: &Path) -> Result<AnySystem, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let doc: SystemJson = if value.get("rom").is_some() {
        let result: ReductionResult = serde_json::from_value(value)?;
        result.rom
    } else {
        serde_json::from_value(value)?
    };
    doc.into_system()
}

fn cmd_reduce(args: ReduceArgs) -> Result<ExitCode, Error> {
    let fom = load_system(&args.input)?.to_ltiqo();
    let cfg = OptimizerConfig {
        gamma_u: args.gamma_u,
        gamma_l: args.gamma_l,
        eps_gamma: args.eps_gamma,
        mode: args.mode.into(),
        max_resets: args.retries,
        seed: args.seed,
        restarts: args.restarts,
        max_outer: args.max_outer,
        ..OptimizerConfig::default()
    };
    let result = reduce(&fom, args.order, args.scheme.into(), &cfg)?;
    std::fs::write(&args.out, serde_json::to_string_pretty(&result)?)?;
    if let Some(trace_path) = &args.trace {
        write_trace(trace_path, &result)?;
    }
    println!(
        "order {} {} model written to {}",
        result.order,
        result.scheme,
        args.out.display()
    );
    println!(
        "certified gamma {:.6e} (converged: {}) after {} outer iterations; final sets {} + {} points",
        result.gamma_certified,
        result.converged,
        result.outer_iterations,
        result.freqs_final.omega1.len(),
        result.freqs_final.omega2.len(),
    );
    Ok(if result.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn write_trace(path: &Path, result: &ReductionResult) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "iteration",
        "phase",
        "gamma",
        "f_value",
        "n_omega1",
        "n_omega2",
        "inner_iterations",
    ])?;
    for row in &result.trace {
        w.write_record([
            row.iteration.to_string(),
            format!("{:?}", row.phase).to_lowercase(),
            format!("{:.12e}", row.gamma),
            format!("{:.12e}", row.f_value),
            row.n_omega1.to_string(),
            row.n_omega2.to_string(),
            row.inner_iterations.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_hinf(args: HinfArgs) -> Result<ExitCode, Error> {
    let sys = load_system(&args.input)?.to_ltiqo();
    let target = match &args.rom {
        Some(rom_path) => {
            let rom = load_system(rom_path)?.to_ltiqo();
            build_error_system(&sys, &rom)?
        }
        None => sys,
    };
    let est = hinf_estimate(&target, &HinfConfig::default())?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&est)?);
    } else {
        println!(
            "linear part:    {:.12e} at omega = {:.6e}",
            est.linear_part, est.argmax_lin
        );
        println!(
            "quadratic part: {:.12e} at (omega1, omega2) = ({:.6e}, {:.6e})",
            est.quadratic_part, est.argmax_quad.0, est.argmax_quad.1
        );
        println!("total:          {:.12e}", est.total);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode, Error> {
    let sys = load_system(&args.input)?.to_ltiqo();
    let (u, omega_max): (Box<dyn Fn(f64) -> DVector<f64>>, f64) = match args.input_signal {
        InputSignal::Sin => (Box::new(input_product_pair(args.s)), 2.0 * args.s.abs()),
        InputSignal::Chirp => (
            Box::new(input_chirp(args.t_final, 2.0)),
            4.0 * std::f64::consts::PI,
        ),
        InputSignal::File => {
            let path = args.signal_file.as_ref().ok_or_else(|| {
                Error::InvalidConfig("--input-signal file requires --signal-file".into())
            })?;
            let sig = read_signal_csv(path)?;
            let step = sig.dt();
            let omega = if step > 0.0 { 1.0 / step } else { 0.0 };
            (Box::new(interpolate(sig)), omega)
        }
    };
    let dt = args.dt.unwrap_or_else(|| default_dt(omega_max));
    let (states, outputs) = simulate(&sys, u, args.t_final, dt)?;
    outputs.write_csv(std::fs::File::create(&args.out)?)?;
    println!(
        "wrote {} samples of {} output components to {}",
        outputs.len(),
        outputs.dim(),
        args.out.display()
    );
    if let Some(states_path) = &args.states {
        states.write_csv(std::fs::File::create(states_path)?)?;
        println!("wrote state trajectory to {}", states_path.display());
    }
    Ok(ExitCode::SUCCESS)
}

/// Reads a `t,u1,…,um` CSV with a strictly increasing time column.
fn read_signal_csv(path: &Path) -> Result<Signal, Error> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record?;
        let mut fields = record.iter().map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("non-numeric CSV field `{f}`")))
        });
        let t = fields
            .next()
            .ok_or_else(|| Error::InvalidConfig("empty CSV row".into()))??;
        let row: Vec<f64> = fields.collect::<Result<_, _>>()?;
        if row.is_empty() {
            return Err(Error::InvalidConfig(
                "signal rows need at least one component".into(),
            ));
        }
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(Error::InvalidConfig(
                    "signal time column must be strictly increasing".into(),
                ));
            }
        }
        times.push(t);
        values.push(DVector::from_vec(row));
    }
    if times.len() < 2 {
        return Err(Error::InvalidConfig(
            "signal file needs at least two samples".into(),
        ));
    }
    Ok(Signal { times, values })
}

/// Piecewise-linear extension of a sampled signal (clamped outside).
fn interpolate(sig: Signal) -> impl Fn(f64) -> DVector<f64> {
    move |t: f64| {
        let times = &sig.times;
        if t <= times[0] {
            return sig.values[0].clone();
        }
        if t >= *times.last().unwrap() {
            return sig.values.last().unwrap().clone();
        }
        let k = times.partition_point(|&x| x <= t) - 1;
        let (t0, t1) = (times[k], times[k + 1]);
        let w = (t - t0) / (t1 - t0);
        &sig.values[k] * (1.0 - w) + &sig.values[k + 1] * w
    }
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<ExitCode, Error> {
    let fom = load_system(&args.input)?.to_ltiqo();
    let layout = ThetaLayout::new(args.scheme.into(), args.order, fom.m(), fom.p())?;
    let segments = segment_table(&layout);
    let ctx = ObjectiveContext::new(&fom, layout.clone(), LevelMode::Half, FrequencySets::initial())?;
    let mut rng = ChaCha20Rng::seed_from_u64(args.seed);
    let mut worst = 0.0f64;
    for sample in 0..args.samples {
        let theta = init_theta(&layout, false, &mut rng);
        let gamma = match args.gamma {
            Some(g) => g,
            None => {
                let sigmas = ctx.point_sigmas(&theta, 1.0)?;
                let top = sigmas
                    .lin
                    .iter()
                    .chain(&sigmas.quad)
                    .fold(0.0f64, |a, &b| a.max(b));
                if top > 0.0 {
                    top
                } else {
                    1.0
                }
            }
        };
        let (_, analytic) = ctx.gradient(&theta, gamma)?;
        let fd = fd_gradient(|th| Ok(ctx.value(th, gamma).value), &theta, args.h)?;
        let denom = fd.norm().max(1e-300);
        let rel = (&analytic - &fd).norm() / denom;
        worst = worst.max(rel);
        println!("sample {sample} (gamma = {gamma:.6e}): relative l2 error {rel:.3e}");
        println!("  {:<12} {:>13} {:>13}", "segment", "max_abs_err", "rel_l2_err");
        for (name, range) in &segments {
            let a_seg = analytic.rows(range.start, range.len());
            let f_seg = fd.rows(range.start, range.len());
            let diff = a_seg - f_seg;
            let max_abs = diff.amax();
            let rel_seg = diff.norm() / f_seg.norm().max(1e-300);
            println!("  {name:<12} {max_abs:>13.3e} {rel_seg:>13.3e}");
        }
    }
    let pass = worst < args.tol;
    println!(
        "worst relative l2 error {worst:.3e} against tolerance {:.1e}: {}",
        args.tol,
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

/// Named parameter segments of a layout, in storage order.
fn segment_table(layout: &ThetaLayout) -> Vec<(String, std::ops::Range<usize>)> {
    let mut out = Vec::new();
    match layout.scheme {
        Scheme::Full | Scheme::DiagM => {
            out.push(("theta_A".to_string(), layout.a_range()));
            out.push(("theta_B".to_string(), layout.b_range()));
            for i in 0..layout.p {
                out.push((format!("theta_M[{i}]"), layout.m_range(i)));
            }
            out.push(("theta_C".to_string(), layout.c_range()));
            out.push(("theta_D".to_string(), layout.d_range()));
            for i in 0..layout.p {
                out.push((format!("theta_P[{i}]"), layout.p_range(i)));
            }
        }
        Scheme::PhCondensed => {
            out.push(("theta_J".to_string(), layout.j_range()));
            out.push(("theta_R".to_string(), layout.rdiag_range()));
            out.push(("theta_B".to_string(), layout.b_range()));
        }
    }
    out
}

fn cmd_bench_msd(args: BenchMsdArgs) -> Result<ExitCode, Error> {
    let text = std::fs::read_to_string(&args.spec).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", args.spec.display()),
        ))
    })?;
    let spec = ExperimentSpec::from_json(&text)?;
    if args.dry_run {
        let fom = spec.validate()?;
        let (n, m, p) = fom.dims();
        println!(
            "spec OK: {} orders to sweep on an (n, m, p) = ({n}, {m}, {p}) model; outputs to {}",
            spec.r_list.len(),
            spec.out_dir.display()
        );
        return Ok(ExitCode::SUCCESS);
    }
    let outcome = run_experiment(&spec)?;
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    let all_converged = outcome.records.iter().all(|r| r.converged);
    println!(
        "{} runs, {} converged",
        outcome.records.len(),
        outcome.records.iter().filter(|r| r.converged).count()
    );
    Ok(if all_converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
