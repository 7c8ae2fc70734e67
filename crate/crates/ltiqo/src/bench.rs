//! Mass-spring-damper benchmark generators and experiment sweeps.
//!
//! The chain couples `n_masses` bodies through springs, with every mass
//! damped and a wall spring anchoring the last one. In port-Hamiltonian
//! coordinates `x = [positions; momenta]`,
//!
//! ```text
//!   J = [0  Nᵀ; −N  0],   R = blkdiag(0, c·I),   Q = blkdiag(k·I, I/mass),
//! ```
//!
//! where `N` is the upper-bidiagonal difference operator (`+1` diagonal,
//! `−1` superdiagonal), so the effective stiffness matrix is `k·NᵀN ≻ 0`
//! and the chain is asymptotically stable for any positive constants.
//! Inputs force the first two masses (`m = 2`).
//!
//! Experiment sweeps reduce the benchmark at a list of orders and emit
//! CSV/JSON artifacts: the order-vs-error overview, kernel-error heat maps
//! and their `ω₁ = 0` cross sections, time-domain `L₂` errors for the
//! standard input family, and run metadata.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_error_system, LtiqoSystem, PhqoSystem};
use crate::optimizer::{reduce, OptimizerConfig, ReductionResult};
use crate::param::Scheme;
use crate::timedomain::{
    default_dt, input_chirp, input_product_pair, l2_norm, simulate, INPUT_S1, INPUT_S2,
};
use crate::transfer::{hinf_estimate, ComplexSystem, HinfConfig, HinfEstimate};

/// Physical constants of the chain, applied uniformly to every mass.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct MsdParams {
    pub mass: f64,
    pub stiffness: f64,
    pub damping: f64,
}

impl Default for MsdParams {
    fn default() -> Self {
        Self {
            mass: 4.0,
            stiffness: 4.0,
            damping: 1.0,
        }
    }
}

impl MsdParams {
    fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) || !(self.stiffness > 0.0) || !(self.damping > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "physical constants must be positive: mass = {}, stiffness = {}, damping = {}",
                self.mass, self.stiffness, self.damping
            )));
        }
        Ok(())
    }
}

/// Builds the chain in port-Hamiltonian form; state dimension `2·n_masses`,
/// inputs forcing the first `min(2, n_masses)` masses.
pub fn msd_phqo(n_masses: usize, params: &MsdParams) -> Result<PhqoSystem> {
    params.validate()?;
    if n_masses == 0 {
        return Err(Error::InvalidConfig("need at least one mass".into()));
    }
    let nm = n_masses;
    let n = 2 * nm;
    // Difference operator: (N x)_i = x_i − x_{i+1}, wall spring at the end.
    let mut nmat = DMatrix::<f64>::zeros(nm, nm);
    for i in 0..nm {
        nmat[(i, i)] = 1.0;
        if i + 1 < nm {
            nmat[(i, i + 1)] = -1.0;
        }
    }
    let mut j = DMatrix::<f64>::zeros(n, n);
    j.view_mut((0, nm), (nm, nm)).copy_from(&nmat.transpose());
    j.view_mut((nm, 0), (nm, nm)).copy_from(&(-&nmat));
    let mut r = DMatrix::<f64>::zeros(n, n);
    for i in 0..nm {
        r[(nm + i, nm + i)] = params.damping;
    }
    let mut q = DMatrix::<f64>::zeros(n, n);
    for i in 0..nm {
        q[(i, i)] = params.stiffness;
        q[(nm + i, nm + i)] = 1.0 / params.mass;
    }
    let m_inputs = nm.min(2);
    let mut b = DMatrix::<f64>::zeros(n, m_inputs);
    for k in 0..m_inputs {
        b[(nm + k, k)] = 1.0;
    }
    PhqoSystem::new(j, r, q, b)
}

/// The chain as a general system with a single purely quadratic output
/// `y = xᵀQx` (`A = (J−R)Q`, `C = 0`, `D = 0`, `P = 0`).
pub fn msd_ltiqo(n_masses: usize, params: &MsdParams) -> Result<LtiqoSystem> {
    let ph = msd_phqo(n_masses, params)?;
    let n = ph.n();
    let m = ph.m();
    LtiqoSystem::new(
        ph.a(),
        ph.b().clone(),
        DMatrix::zeros(1, n),
        DMatrix::zeros(1, m),
        vec![ph.q().clone()],
        vec![DMatrix::zeros(m, m)],
    )
}

/// Which generator builds the full-order model of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Single quadratic output `xᵀQx`.
    MsdLtiqo,
    /// Port-Hamiltonian outputs `BᵀQx` plus the Hamiltonian `½xᵀQx`.
    MsdPhqo,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemSpec {
    pub generator: Generator,
    pub n_masses: usize,
    #[serde(default)]
    pub params: MsdParams,
}

fn default_format() -> u32 {
    crate::model::FORMAT_VERSION
}

fn default_heatmap_grid() -> (usize, usize) {
    (81, 41)
}

fn default_freq_max() -> f64 {
    100.0
}

fn default_horizon() -> f64 {
    100.0
}

/// Experiment description, normally loaded from a JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default = "default_format")]
    pub format: u32,
    pub system: SystemSpec,
    pub scheme: Scheme,
    /// Reduced orders to sweep (one reduction per entry).
    pub r_list: Vec<usize>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Orders for which heat maps and cross sections are emitted.
    #[serde(default)]
    pub heatmap_r: Vec<usize>,
    /// `(points on [−ω_max, ω_max], points on [0, ω_max])`.
    #[serde(default = "default_heatmap_grid")]
    pub heatmap_grid: (usize, usize),
    #[serde(default = "default_freq_max")]
    pub heatmap_freq_max: f64,
    /// Horizon of the time-domain error runs.
    #[serde(default = "default_horizon")]
    pub l2_horizon: f64,
    /// Integrator step override (default: resolves the fastest input).
    #[serde(default)]
    pub l2_dt: Option<f64>,
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Checks the plan and builds the full-order model it describes.
    pub fn validate(&self) -> Result<LtiqoSystem> {
        if self.format != crate::model::FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported spec format {}",
                self.format
            )));
        }
        if self.r_list.is_empty() {
            return Err(Error::InvalidConfig("r_list must not be empty".into()));
        }
        let fom = self.build_fom()?;
        for &r in self.r_list.iter().chain(&self.heatmap_r) {
            if r == 0 || r >= fom.n() {
                return Err(Error::InvalidConfig(format!(
                    "reduced order {} out of range for n = {}",
                    r,
                    fom.n()
                )));
            }
        }
        if self.heatmap_grid.0 < 2 || self.heatmap_grid.1 < 2 {
            return Err(Error::InvalidConfig(
                "heat-map grid needs at least 2 points per axis".into(),
            ));
        }
        if !(self.heatmap_freq_max > 0.0) || !(self.l2_horizon > 0.0) {
            return Err(Error::InvalidConfig(
                "frequency range and horizon must be positive".into(),
            ));
        }
        Ok(fom)
    }

    pub fn build_fom(&self) -> Result<LtiqoSystem> {
        match self.system.generator {
            Generator::MsdLtiqo => msd_ltiqo(self.system.n_masses, &self.system.params),
            Generator::MsdPhqo => {
                Ok(msd_phqo(self.system.n_masses, &self.system.params)?.to_ltiqo())
            }
        }
    }
}

/// Time-domain output errors `‖y − ŷ‖₂` for the three standard inputs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct L2Errors {
    /// Product input at `s = 0.02`.
    pub f0_02: f64,
    /// Product input at `s = 4.1`.
    pub f4_1: f64,
    /// Linear + quadratic chirp pair.
    pub chirp: f64,
}

/// Per-order summary stored in `metadata.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub r: usize,
    pub seed: u64,
    pub converged: bool,
    pub gamma_certified: f64,
    pub final_objective: f64,
    pub max_sigma_sampled: f64,
    pub hinf_error: HinfEstimate,
    pub l2_errors: Option<L2Errors>,
    pub outer_iterations: usize,
    pub inner_iterations_total: usize,
    pub n_omega1_final: usize,
    pub n_omega2_final: usize,
    pub rom_spectral_abscissa: f64,
    pub wall_seconds: f64,
}

/// In-memory result of a sweep; the artifact files are already on disk.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    pub records: Vec<RunRecord>,
    pub reductions: Vec<ReductionResult>,
    pub files: Vec<PathBuf>,
}

/// Runs the full sweep: one reduction per entry of `r_list` (in parallel),
/// then writes `overview.csv`, `heatmap_r{r}.csv` + `crossection_r{r}.csv`
/// for each requested order, `l2err_overview.csv`, and `metadata.json`
/// into `out_dir`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    let fom = spec.validate()?;
    std::fs::create_dir_all(&spec.out_dir)?;

    let runs: Vec<Result<(ReductionResult, f64)>> = spec
        .r_list
        .par_iter()
        .map(|&r| {
            let clock = Instant::now();
            let res = reduce(&fom, r, spec.scheme, &spec.optimizer)?;
            Ok((res, clock.elapsed().as_secs_f64()))
        })
        .collect();

    let mut reductions = Vec::with_capacity(runs.len());
    let mut walls = Vec::with_capacity(runs.len());
    for run in runs {
        let (res, wall) = run?;
        reductions.push(res);
        walls.push(wall);
    }

    let mut records = Vec::with_capacity(reductions.len());
    let mut files = Vec::new();
    for (res, &wall) in reductions.iter().zip(&walls) {
        let rom = res.rom.clone().into_system()?.to_ltiqo();
        let err_sys = build_error_system(&fom, &rom)?;
        let hinf_err = hinf_estimate(&err_sys, &HinfConfig::default())?;
        let l2 = if fom.m() == 2 {
            Some(l2_error_table(&fom, &rom, spec.l2_horizon, spec.l2_dt)?)
        } else {
            None
        };
        records.push(RunRecord {
            r: res.order,
            seed: res.seed,
            converged: res.converged,
            gamma_certified: res.gamma_certified,
            final_objective: res.final_objective,
            max_sigma_sampled: res.max_sigma_lin.max(res.max_sigma_quad),
            hinf_error: hinf_err,
            l2_errors: l2,
            outer_iterations: res.outer_iterations,
            inner_iterations_total: res.trace.iter().map(|t| t.inner_iterations).sum(),
            n_omega1_final: res.freqs_final.omega1.len(),
            n_omega2_final: res.freqs_final.omega2.len(),
            rom_spectral_abscissa: res.rom_spectral_abscissa,
            wall_seconds: wall,
        });
    }

    files.push(write_overview(&spec.out_dir, &records)?);
    for &r in &spec.heatmap_r {
        let res = reductions
            .iter()
            .find(|res| res.order == r)
            .cloned()
            .map(Ok)
            .unwrap_or_else(|| reduce(&fom, r, spec.scheme, &spec.optimizer))?;
        let rom = res.rom.clone().into_system()?.to_ltiqo();
        let err_sys = build_error_system(&fom, &rom)?;
        files.push(write_heatmap(
            &spec.out_dir,
            r,
            &err_sys,
            spec.heatmap_freq_max,
            spec.heatmap_grid,
        )?);
        files.push(write_crossection(
            &spec.out_dir,
            r,
            &err_sys,
            spec.heatmap_freq_max,
            spec.heatmap_grid.0,
        )?);
    }
    files.push(write_l2_overview(&spec.out_dir, &records)?);
    files.push(write_metadata(&spec.out_dir, spec, &records)?);

    Ok(ExperimentOutcome {
        out_dir: spec.out_dir.clone(),
        records,
        reductions,
        files,
    })
}

/// `‖y − ŷ‖₂` for the three standard two-component inputs.
pub fn l2_error_table(
    fom: &LtiqoSystem,
    rom: &LtiqoSystem,
    t_final: f64,
    dt_override: Option<f64>,
) -> Result<L2Errors> {
    let err = |u: &dyn Fn(f64) -> DVector<f64>, omega_max: f64| -> Result<f64> {
        let dt = dt_override.unwrap_or_else(|| default_dt(omega_max));
        let (_, y_f) = simulate(fom, u, t_final, dt)?;
        let (_, y_r) = simulate(rom, u, t_final, dt)?;
        Ok(l2_norm(&y_f.sub(&y_r)?))
    };
    // Product inputs oscillate at 2s; the chirps reach 2 Hz.
    let u1 = input_product_pair(INPUT_S1);
    let u2 = input_product_pair(INPUT_S2);
    let u3 = input_chirp(t_final, 2.0);
    Ok(L2Errors {
        f0_02: err(&u1, 2.0 * INPUT_S1)?,
        f4_1: err(&u2, 2.0 * INPUT_S2)?,
        chirp: err(&u3, 4.0 * std::f64::consts::PI)?,
    })
}

fn write_overview(dir: &Path, records: &[RunRecord]) -> Result<PathBuf> {
    let path = dir.join("overview.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "r",
        "gamma_cert",
        "hinf",
        "hinf_lin",
        "hinf_quad",
        "converged",
        "outer_iterations",
        "n_omega1",
        "n_omega2",
        "wall_seconds",
    ])?;
    for rec in records {
        w.write_record([
            rec.r.to_string(),
            format!("{:.12e}", rec.gamma_certified),
            format!("{:.12e}", rec.hinf_error.total),
            format!("{:.12e}", rec.hinf_error.linear_part),
            format!("{:.12e}", rec.hinf_error.quadratic_part),
            rec.converged.to_string(),
            rec.outer_iterations.to_string(),
            rec.n_omega1_final.to_string(),
            rec.n_omega2_final.to_string(),
            format!("{:.3}", rec.wall_seconds),
        ])?;
    }
    w.flush()?;
    Ok(path)
}

/// Frobenius norm of the stacked kernel error over an
/// `[−ω_max, ω_max] × [0, ω_max]` grid (rows `omega1,omega2,kerr_fro`).
fn write_heatmap(
    dir: &Path,
    r: usize,
    err_sys: &LtiqoSystem,
    freq_max: f64,
    grid: (usize, usize),
) -> Result<PathBuf> {
    let (n1, n2) = grid;
    let w1 = lin_space(-freq_max, freq_max, n1);
    let w2 = lin_space(0.0, freq_max, n2);
    let sys = ComplexSystem::new(err_sys);
    let x1: Vec<DMatrix<Complex64>> = w1
        .par_iter()
        .map(|&w| sys.x(Complex64::new(0.0, w)))
        .collect::<Result<_>>()?;
    let x2: Vec<DMatrix<Complex64>> = w2
        .par_iter()
        .map(|&w| sys.x(Complex64::new(0.0, w)))
        .collect::<Result<_>>()?;
    let values: Vec<Vec<f64>> = x2
        .par_iter()
        .map(|xb| x1.iter().map(|xa| sys.g2_from(xa, xb).norm()).collect())
        .collect();

    let path = dir.join(format!("heatmap_r{r}.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["omega1", "omega2", "kerr_fro"])?;
    for (i2, &b) in w2.iter().enumerate() {
        for (i1, &a) in w1.iter().enumerate() {
            w.write_record([
                format!("{a:.9e}"),
                format!("{b:.9e}"),
                format!("{:.12e}", values[i2][i1]),
            ])?;
        }
    }
    w.flush()?;
    Ok(path)
}

/// Cross section of the kernel error at `ω₁ = 0` (rows `omega2,kerr_fro`).
fn write_crossection(
    dir: &Path,
    r: usize,
    err_sys: &LtiqoSystem,
    freq_max: f64,
    n: usize,
) -> Result<PathBuf> {
    let w2 = lin_space(0.0, freq_max, n);
    let sys = ComplexSystem::new(err_sys);
    let x0 = sys.x(Complex64::new(0.0, 0.0))?;
    let values: Vec<f64> = w2
        .par_iter()
        .map(|&w| {
            let xb = sys.x(Complex64::new(0.0, w))?;
            Ok(sys.g2_from(&x0, &xb).norm())
        })
        .collect::<Result<_>>()?;
    let path = dir.join(format!("crossection_r{r}.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["omega2", "kerr_fro"])?;
    for (&freq, &val) in w2.iter().zip(&values) {
        w.write_record([format!("{freq:.9e}"), format!("{val:.12e}")])?;
    }
    w.flush()?;
    Ok(path)
}

fn write_l2_overview(dir: &Path, records: &[RunRecord]) -> Result<PathBuf> {
    let path = dir.join("l2err_overview.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["r", "f0.02f0.02", "f4.1f4.1", "chirp"])?;
    for rec in records {
        let Some(l2) = rec.l2_errors else { continue };
        w.write_record([
            rec.r.to_string(),
            format!("{:.12e}", l2.f0_02),
            format!("{:.12e}", l2.f4_1),
            format!("{:.12e}", l2.chirp),
        ])?;
    }
    w.flush()?;
    Ok(path)
}

fn write_metadata(dir: &Path, spec: &ExperimentSpec, records: &[RunRecord]) -> Result<PathBuf> {
    #[derive(Serialize)]
    struct Metadata<'a> {
        format: u32,
        spec: &'a ExperimentSpec,
        runs: &'a [RunRecord],
        total_wall_seconds: f64,
    }
    let path = dir.join("metadata.json");
    let meta = Metadata {
        format: crate::model::FORMAT_VERSION,
        spec,
        runs: records,
        total_wall_seconds: records.iter().map(|r| r.wall_seconds).sum(),
    };
    std::fs::write(&path, serde_json::to_string_pretty(&meta)?)?;
    Ok(path)
}

fn lin_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    debug_assert!(n >= 2);
    (0..n)
        .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
        .collect()
}
