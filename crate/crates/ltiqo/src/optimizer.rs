//! Reduction driver: level bisection with reset, adaptive frequency
//! sampling, and a quasi-Newton inner solver.
//!
//! The outer loop alternates three moves until the level bracket closes:
//!
//! 1. minimize the surrogate `f(θ; γ)` over `θ` at the current level
//!    (BFGS with a cubic backtracking line search),
//! 2. scan a dense randomized check grid for frequencies where the error
//!    still exceeds the level and append the worst offenders,
//! 3. tighten the level bracket — a certified success lowers `γ_u`, a
//!    failed minimization raises `γ_l` — with a bounded number of
//!    lower-bracket resets so that early failures (possible local minima)
//!    do not freeze the bracket.
//!
//! Afterwards the certified level is re-verified on the final frequency
//! sets; a converged result satisfies `f(θ_final; γ_certified) ≤ eps_tol`
//! on those sets.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{spectral_abscissa, LtiqoSystem, SystemJson};
use crate::objective::{FrequencySets, LevelMode, ObjectiveContext};
use crate::param::{decode, init_theta, DecodedRom, Scheme, ThetaLayout};
use crate::transfer::ComplexSystem;

/// Bisection state for the achievable-level search.
///
/// `update` narrows the bracket from the achieved surrogate value: success
/// (`eps < eps_tol`) proves the current level achievable and lowers
/// `gamma_u`; failure raises `gamma_l`. After a success that follows
/// earlier failures (`gamma_l` above its initial value), the lower bracket
/// is re-opened to `gamma_l_init` — at most `max_resets` times — since
/// those failures may have been optimizer artifacts rather than true
/// infeasibility. The next level is the bracket midpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaState {
    pub gamma_l: f64,
    pub gamma_u: f64,
    pub gamma: f64,
    pub n_r: usize,
    pub max_resets: usize,
    pub gamma_l_init: f64,
    pub gamma_u_init: f64,
    pub eps_tol: f64,
    pub eps_gamma: f64,
    /// Audit-only variant: uses the update `γ ← γ_l + ½(γ_l + γ_u)`,
    /// which exceeds `γ_u` whenever `γ_l > γ_u/3`.
    pub legacy_update: bool,
}

impl GammaState {
    pub fn new(
        gamma_l_init: f64,
        gamma_u_init: f64,
        eps_tol: f64,
        eps_gamma: f64,
        max_resets: usize,
        legacy_update: bool,
    ) -> Result<Self> {
        if !(0.0 <= gamma_l_init && gamma_l_init < gamma_u_init && gamma_u_init.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "level bracket needs 0 <= gamma_l ({gamma_l_init}) < gamma_u ({gamma_u_init})"
            )));
        }
        if !(eps_tol > 0.0) || !(eps_gamma > 0.0) {
            return Err(Error::InvalidConfig(
                "eps_tol and eps_gamma must be positive".into(),
            ));
        }
        Ok(Self {
            gamma_l: gamma_l_init,
            gamma_u: gamma_u_init,
            gamma: gamma_u_init,
            n_r: 0,
            max_resets,
            gamma_l_init,
            gamma_u_init,
            eps_tol,
            eps_gamma,
            legacy_update,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Narrows the bracket from the achieved surrogate value `eps` and
    /// returns the next level.
    pub fn update(&mut self, eps: f64) -> f64 {
        if eps < self.eps_tol {
            self.gamma_u = self.gamma;
        } else {
            self.gamma_l = self.gamma;
        }
        if self.n_r < self.max_resets && self.gamma_l > self.gamma_l_init && self.gamma != self.gamma_l
        {
            self.n_r += 1;
            self.gamma_l = self.gamma_l_init;
        }
        self.gamma = if self.legacy_update {
            self.gamma_l + 0.5 * (self.gamma_l + self.gamma_u)
        } else {
            0.5 * (self.gamma_l + self.gamma_u)
        };
        self.gamma
    }

    pub fn converged(&self) -> bool {
        self.gamma_u - self.gamma_l < self.eps_gamma * (self.gamma_u + self.gamma_l)
    }
}

/// Inner minimization problem: the surrogate at fixed level, or any test
/// objective wired through the same interface.
pub trait InnerProblem {
    fn dim(&self) -> usize;
    /// Value only; `+∞` signals an infeasible trial point.
    fn value(&self, theta: &DVector<f64>) -> f64;
    fn value_grad(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
}

/// The surrogate `θ ↦ f(θ; γ)` at a fixed level.
pub struct LevelProblem<'a> {
    pub ctx: &'a ObjectiveContext,
    pub gamma: f64,
}

impl InnerProblem for LevelProblem<'_> {
    fn dim(&self) -> usize {
        self.ctx.layout().len()
    }

    fn value(&self, theta: &DVector<f64>) -> f64 {
        self.ctx.value(theta, self.gamma).value
    }

    fn value_grad(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (v, g) = self.ctx.gradient(theta, self.gamma)?;
        Ok((v.value, g))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InnerConfig {
    pub max_iters: usize,
    /// Success threshold on the objective value.
    pub eps_tol: f64,
    /// Stop when the gradient ∞-norm falls below this.
    pub grad_tol: f64,
    pub armijo_c1: f64,
    pub max_backtracks: usize,
    pub t_min: f64,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            eps_tol: 1e-12,
            grad_tol: 1e-10,
            armijo_c1: 1e-4,
            max_backtracks: 60,
            t_min: 1e-16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Objective value at or below `eps_tol`.
    Achieved,
    SmallGradient,
    IterationCap,
    /// Backtracking found no acceptable step; best iterate returned.
    LineSearchFailed,
    /// Gradient evaluation failed mid-run; best iterate returned.
    GradientFailed,
}

#[derive(Debug, Clone)]
pub struct InnerOutcome {
    pub theta: DVector<f64>,
    pub f_value: f64,
    pub iterations: usize,
    pub stop: StopReason,
}

/// BFGS descent with a cubic backtracking line search (Armijo condition).
/// Monotone: the returned value never exceeds the starting value. Line
/// search or gradient failures return the best iterate with a flag rather
/// than an error (callers treat the level as not achieved).
pub fn minimize_inner<P: InnerProblem>(
    problem: &P,
    theta0: DVector<f64>,
    cfg: &InnerConfig,
) -> Result<InnerOutcome> {
    let n = problem.dim();
    if theta0.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "theta has length {}, problem dimension is {n}",
            theta0.len()
        )));
    }
    let (mut f, mut g) = problem.value_grad(&theta0)?;
    if !f.is_finite() {
        return Err(Error::InvalidTheta(
            "initial point has non-finite objective value".into(),
        ));
    }
    let mut theta = theta0;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut first_update = true;
    let mut iterations = 0;
    let mut stop = StopReason::IterationCap;

    for _ in 0..cfg.max_iters {
        if f <= cfg.eps_tol {
            stop = StopReason::Achieved;
            break;
        }
        if g.amax() < cfg.grad_tol {
            stop = StopReason::SmallGradient;
            break;
        }
        let mut d = -(&h * &g);
        let mut gd = g.dot(&d);
        if !(gd < 0.0) {
            // Curvature approximation lost descent; reset to steepest.
            h = DMatrix::identity(n, n);
            first_update = true;
            d = -g.clone();
            gd = -g.norm_squared();
        }
        let Some((t, f_trial)) = line_search(problem, &theta, f, &d, gd, cfg) else {
            stop = StopReason::LineSearchFailed;
            break;
        };
        let theta_new = &theta + &d * t;
        iterations += 1;
        let (f_new, g_new) = match problem.value_grad(&theta_new) {
            Ok(pair) => pair,
            Err(_) => {
                // Keep the strict improvement the line search certified.
                theta = theta_new;
                f = f_trial;
                stop = StopReason::GradientFailed;
                break;
            }
        };
        let s = &d * t;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        let yy = y.norm_squared();
        if first_update && sy > 0.0 && yy > 0.0 {
            h *= sy / yy;
            first_update = false;
        }
        if sy > 1e-10 * s.norm() * y.norm() {
            bfgs_update(&mut h, &s, &y, sy);
        }
        theta = theta_new;
        f = f_new;
        g = g_new;
    }
    if f <= cfg.eps_tol {
        stop = StopReason::Achieved;
    }
    Ok(InnerOutcome {
        theta,
        f_value: f,
        iterations,
        stop,
    })
}

/// `H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ`, `ρ = 1/sᵀy`.
fn bfgs_update(h: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>, sy: f64) {
    let rho = 1.0 / sy;
    let hy = &*h * y;
    let yhy = y.dot(&hy);
    let sym = s * hy.transpose();
    *h -= rho * (&sym + sym.transpose());
    *h += (rho * rho * yhy + rho) * (s * s.transpose());
}

/// Backtracking Armijo search with quadratic first step and cubic
/// interpolation thereafter. Returns the accepted `(t, f(θ + t d))`.
fn line_search<P: InnerProblem>(
    problem: &P,
    theta: &DVector<f64>,
    f0: f64,
    d: &DVector<f64>,
    gd: f64,
    cfg: &InnerConfig,
) -> Option<(f64, f64)> {
    let mut t = 1.0;
    let mut f_t = problem.value(&(theta + d * t));
    let mut t_prev = 0.0;
    let mut f_prev = f0;
    for backtrack in 0..cfg.max_backtracks {
        if f_t.is_finite() && f_t <= f0 + cfg.armijo_c1 * t * gd {
            return Some((t, f_t));
        }
        let t_new = if !f_t.is_finite() {
            0.5 * t
        } else if backtrack == 0 {
            // Quadratic model through φ(0), φ'(0), φ(t).
            -gd * t * t / (2.0 * (f_t - f0 - gd * t))
        } else {
            cubic_step(f0, gd, t_prev, f_prev, t, f_t)
        };
        let t_clamped = if t_new.is_finite() {
            t_new.clamp(0.1 * t, 0.5 * t)
        } else {
            0.5 * t
        };
        t_prev = t;
        f_prev = f_t;
        t = t_clamped;
        if t < cfg.t_min {
            return None;
        }
        f_t = problem.value(&(theta + d * t));
    }
    None
}

/// Minimizer of the cubic through `φ(0) = f0`, `φ'(0) = gd`, and two trial
/// points.
fn cubic_step(f0: f64, gd: f64, t1: f64, f1: f64, t2: f64, f2: f64) -> f64 {
    let r1 = f2 - f0 - gd * t2;
    let r2 = f1 - f0 - gd * t1;
    let denom = t1 * t1 * t2 * t2 * (t2 - t1);
    if denom == 0.0 {
        return 0.5 * t2;
    }
    let a = (t1 * t1 * r1 - t2 * t2 * r2) / denom;
    let b = (-t1.powi(3) * r1 + t2.powi(3) * r2) / denom;
    if a.abs() < 1e-300 {
        return -gd / (2.0 * b);
    }
    let disc = b * b - 3.0 * a * gd;
    if disc < 0.0 {
        return 0.5 * t2;
    }
    (-b + disc.sqrt()) / (3.0 * a)
}

/// Dense check-scan configuration for the frequency updates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanConfig {
    /// Axis check points for the first-order part.
    pub n_axis: usize,
    /// Check grid (signed × nonnegative) for the second-order part.
    pub n_pairs: (usize, usize),
    pub freq_min: f64,
    pub freq_max: f64,
    /// New points appended per round, largest violations first.
    pub max_additions: usize,
    /// Threshold slack: a check point is flagged only when its penalty
    /// contribution would exceed `eps_tol`, i.e. `σ > γ_eff + √(eps_tol·γ_eff)`.
    pub eps_tol: f64,
    /// Drop sampled points whose terms were zero for two consecutive
    /// rounds (off by default).
    pub prune: bool,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            n_axis: 512,
            n_pairs: (64, 64),
            freq_min: 1e-4,
            freq_max: 1e4,
            max_additions: 16,
            eps_tol: 1e-12,
            prune: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScanOutcome {
    /// The input sets plus appended violators.
    pub sets: FrequencySets,
    pub added_lin: usize,
    pub added_quad: usize,
    /// Largest error σ seen on the check grid.
    pub max_sigma_lin: f64,
    pub max_sigma_quad: f64,
}

/// Evaluates the error maps on a dense randomized (log-jittered) check
/// grid and appends every point whose σ meaningfully exceeds `γ_eff` —
/// largest first, up to `max_additions`, never duplicating existing
/// points. The input sets are extended, never modified.
pub fn update_frequencies(
    ctx: &ObjectiveContext,
    theta: &DVector<f64>,
    gamma: f64,
    cfg: &ScanConfig,
    rng: &mut ChaCha20Rng,
) -> Result<ScanOutcome> {
    let gamma_eff = ctx.gamma_eff(gamma);
    let threshold = gamma_eff + (cfg.eps_tol * gamma_eff).sqrt();
    let rom_sys = decode(ctx.layout(), theta)?.to_ltiqo();
    let rom_c = ComplexSystem::new(&rom_sys);
    let fom = ctx.fom_complex();
    let lin_active = ctx.fom_has_linear() || rom_sys.has_linear_part();

    let (lmin, lmax) = (cfg.freq_min.log10(), cfg.freq_max.log10());
    let stratified = |k: usize, count: usize, rng: &mut ChaCha20Rng| -> f64 {
        let u = (k as f64 + rng.random::<f64>()) / count as f64;
        10f64.powf(lmin + u * (lmax - lmin))
    };

    let mut axis = vec![0.0];
    if lin_active {
        for k in 0..cfg.n_axis {
            axis.push(stratified(k, cfg.n_axis, rng));
        }
    }
    let (n1, n2) = cfg.n_pairs;
    let mut coords1 = vec![0.0];
    for k in 0..n1 {
        let mag = stratified(k, n1, rng);
        coords1.push(if k % 2 == 0 { mag } else { -mag });
    }
    let mut coords2 = vec![0.0];
    for k in 0..n2 {
        coords2.push(stratified(k, n2, rng));
    }

    // One solve per distinct shift for each side.
    let mut distinct: Vec<f64> = Vec::new();
    let mut seen = HashMap::new();
    {
        let mut note = |w: f64| {
            seen.entry(w.to_bits()).or_insert_with(|| {
                distinct.push(w);
                distinct.len() - 1
            });
        };
        for &w in axis.iter().chain(&coords1).chain(&coords2) {
            note(w);
        }
    }
    let solve =
        |sys: &ComplexSystem| -> Result<Vec<DMatrix<Complex64>>> {
            distinct
                .par_iter()
                .map(|&w| sys.x(Complex64::new(0.0, w)))
                .collect()
        };
    let xf = solve(fom)?;
    let xr = solve(&rom_c)?;
    let fi = |w: f64| &xf[seen[&w.to_bits()]];
    let ri = |w: f64| &xr[seen[&w.to_bits()]];

    let mut max_sigma_lin = 0.0f64;
    let mut lin_cand: Vec<(f64, f64)> = Vec::new();
    if lin_active {
        let sig: Vec<f64> = axis
            .par_iter()
            .map(|&w| {
                let err = (&fom.c * fi(w) + &fom.d) - (&rom_c.c * ri(w) + &rom_c.d);
                crate::transfer::sigma_max(&err)
            })
            .collect();
        for (&w, &s) in axis.iter().zip(&sig) {
            max_sigma_lin = max_sigma_lin.max(s);
            if s > threshold {
                lin_cand.push((w, s));
            }
        }
    }

    // Kernel contractions per distinct first coordinate make each pair
    // evaluation O(n·m²) instead of O(n²·m).
    let tf = kernel_tables(fom, &coords1, fi);
    let tr = kernel_tables(&rom_c, &coords1, ri);
    let pair_idx: Vec<(usize, usize)> = (0..coords1.len())
        .flat_map(|i| (0..coords2.len()).map(move |j| (i, j)))
        .collect();
    let pair_sig: Vec<f64> = pair_idx
        .par_iter()
        .map(|&(i1, i2)| {
            let b = coords2[i2];
            let err = g2_from_tables(fom, &tf[i1], fi(b)) - g2_from_tables(&rom_c, &tr[i1], ri(b));
            crate::transfer::sigma_max(&err)
        })
        .collect();
    let mut max_sigma_quad = 0.0f64;
    let mut quad_cand: Vec<((f64, f64), f64)> = Vec::new();
    let mut flat = 0;
    for &a in &coords1 {
        for &b in &coords2 {
            let s = pair_sig[flat];
            flat += 1;
            max_sigma_quad = max_sigma_quad.max(s);
            if s > threshold {
                quad_cand.push(((a, b), s));
            }
        }
    }

    // Merge both candidate lists by violation size and take the worst.
    let mut sets = ctx.frequencies().clone();
    let same = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0);
    enum Cand {
        Lin(f64),
        Quad(f64, f64),
    }
    let mut merged: Vec<(f64, Cand)> = lin_cand
        .into_iter()
        .map(|(w, s)| (s, Cand::Lin(w)))
        .chain(quad_cand.into_iter().map(|((a, b), s)| (s, Cand::Quad(a, b))))
        .collect();
    merged.sort_by(|x, y| y.0.total_cmp(&x.0));
    let (mut added_lin, mut added_quad) = (0usize, 0usize);
    for (_, cand) in merged {
        if added_lin + added_quad >= cfg.max_additions {
            break;
        }
        match cand {
            Cand::Lin(w) => {
                if !sets.omega1.iter().any(|&x| same(x, w)) {
                    sets.omega1.push(w);
                    added_lin += 1;
                }
            }
            Cand::Quad(a, b) => {
                if !sets
                    .omega2
                    .iter()
                    .any(|&(x, y)| same(x, a) && same(y, b))
                {
                    sets.omega2.push((a, b));
                    added_quad += 1;
                }
            }
        }
    }
    Ok(ScanOutcome {
        sets,
        added_lin,
        added_quad,
        max_sigma_lin,
        max_sigma_quad,
    })
}

/// Per-output contractions `Mⱼ · X(i ω₁)` for every first coordinate.
fn kernel_tables<'a>(
    sys: &ComplexSystem,
    coords1: &[f64],
    x_at: impl Fn(f64) -> &'a DMatrix<Complex64>,
) -> Vec<Vec<DMatrix<Complex64>>> {
    coords1
        .iter()
        .map(|&a| {
            let x1 = x_at(a);
            sys.m_quad.iter().map(|m| m * x1).collect()
        })
        .collect()
}

/// Assembles `G₂(iω₁, iω₂)` from precomputed `Mⱼ X(iω₁)` tables.
fn g2_from_tables(
    sys: &ComplexSystem,
    table: &[DMatrix<Complex64>],
    x2: &DMatrix<Complex64>,
) -> DMatrix<Complex64> {
    let p = sys.m_quad.len();
    let m = sys.b.ncols();
    let mut g2 = DMatrix::zeros(p, m * m);
    for j in 0..p {
        let k = x2.transpose() * &table[j] + &sys.p_quad[j];
        for (col, val) in k.as_slice().iter().enumerate() {
            g2[(j, col)] = *val;
        }
    }
    g2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub gamma_u: f64,
    pub gamma_l: f64,
    pub eps_gamma: f64,
    /// Success threshold on the surrogate value (shared by the inner
    /// solver, the bisection, and the scan slack).
    pub eps_tol: f64,
    /// Lower-bracket reset budget.
    pub max_resets: usize,
    /// Outer-iteration cap.
    pub max_outer: usize,
    pub mode: LevelMode,
    pub seed: u64,
    /// Independent random initializations; the best result is kept.
    pub restarts: usize,
    pub legacy_gamma_update: bool,
    pub inner: InnerConfig,
    pub scan: ScanConfig,
    /// Starting frequency sets; defaults to the built-in grids.
    pub initial_freqs: Option<FrequencySets>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            gamma_u: 100.0,
            gamma_l: 0.0,
            eps_gamma: 0.01,
            eps_tol: 1e-12,
            max_resets: 3,
            max_outer: 200,
            mode: LevelMode::Half,
            seed: 0,
            restarts: 1,
            legacy_gamma_update: false,
            inner: InnerConfig::default(),
            scan: ScanConfig::default(),
            initial_freqs: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Bisect,
    /// Level held while newly found violation frequencies are absorbed.
    Refine,
    Certify,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub gamma: f64,
    pub f_value: f64,
    pub n_omega1: usize,
    pub n_omega2: usize,
    pub inner_iterations: usize,
    pub phase: Phase,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReductionResult {
    pub format: u32,
    pub scheme: Scheme,
    pub order: usize,
    pub mode: LevelMode,
    /// Certified on the final sampled sets: if `converged`, then
    /// `f(θ_final; γ_certified)` on `freqs_final` is at most `eps_tol`.
    pub converged: bool,
    pub gamma_certified: f64,
    /// Final lower bracket of the bisection.
    pub gamma_lower: f64,
    pub final_objective: f64,
    pub max_sigma_lin: f64,
    pub max_sigma_quad: f64,
    pub rom_spectral_abscissa: f64,
    pub theta_final: Vec<f64>,
    pub rom: SystemJson,
    pub freqs_final: FrequencySets,
    pub trace: Vec<TraceRow>,
    pub outer_iterations: usize,
    pub seed: u64,
    pub restart_index: usize,
}

/// Reduces `fom` to order `r` under the given parametrization, returning
/// the smallest level the bisection certified together with the realized
/// reduced model.
pub fn reduce(
    fom: &LtiqoSystem,
    r: usize,
    scheme: Scheme,
    cfg: &OptimizerConfig,
) -> Result<ReductionResult> {
    let alpha = spectral_abscissa(fom.a());
    if alpha >= 0.0 {
        return Err(Error::Unstable { abscissa: alpha });
    }
    if r == 0 || r >= fom.n() {
        return Err(Error::InvalidConfig(format!(
            "reduced order must satisfy 1 <= r < n, got r = {} for n = {}",
            r,
            fom.n()
        )));
    }
    if cfg.restarts == 0 {
        return Err(Error::InvalidConfig("restarts must be at least 1".into()));
    }
    let mut best: Option<ReductionResult> = None;
    let mut first_err: Option<Error> = None;
    for restart in 0..cfg.restarts {
        match reduce_once(fom, r, scheme, cfg, restart) {
            Ok(res) => {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        (res.converged, -res.gamma_certified) > (b.converged, -b.gamma_certified)
                    }
                };
                if better {
                    best = Some(res);
                }
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    match best {
        Some(res) => Ok(res),
        None => Err(first_err.expect("at least one restart ran")),
    }
}

fn reduce_once(
    fom: &LtiqoSystem,
    r: usize,
    scheme: Scheme,
    cfg: &OptimizerConfig,
    restart: usize,
) -> Result<ReductionResult> {
    let mut rng =
        ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(restart as u64 * 0x9E37_79B9_7F4A_7C15));
    let layout = ThetaLayout::new(scheme, r, fom.m(), fom.p())?;
    let zero_linear = !fom.has_linear_part() && scheme != Scheme::PhCondensed;
    let mut theta = init_theta(&layout, zero_linear, &mut rng);
    let sets = cfg
        .initial_freqs
        .clone()
        .unwrap_or_else(FrequencySets::initial);
    let mut ctx = ObjectiveContext::new(fom, layout, cfg.mode, sets)?;
    let mut state = GammaState::new(
        cfg.gamma_l,
        cfg.gamma_u,
        cfg.eps_tol,
        cfg.eps_gamma,
        cfg.max_resets,
        cfg.legacy_gamma_update,
    )?;
    let mut scan_cfg = cfg.scan.clone();
    scan_cfg.eps_tol = cfg.eps_tol;
    let mut inner_cfg = cfg.inner.clone();
    inner_cfg.eps_tol = cfg.eps_tol;

    let mut trace: Vec<TraceRow> = Vec::new();
    let mut best_success: Option<(DVector<f64>, f64)> = None;
    let mut zero_streaks: HashMap<PointKey, u32> = HashMap::new();
    let mut outer = 0usize;

    while outer < cfg.max_outer && !state.converged() {
        outer += 1;
        let gamma = state.gamma();
        let problem = LevelProblem { ctx: &ctx, gamma };
        let inner = minimize_inner(&problem, theta, &inner_cfg)?;
        theta = inner.theta;
        let scan = update_frequencies(&ctx, &theta, gamma, &scan_cfg, &mut rng)?;
        let added = scan.added_lin + scan.added_quad;
        let inner_success = inner.f_value < cfg.eps_tol;
        trace.push(TraceRow {
            iteration: outer,
            gamma,
            f_value: inner.f_value,
            n_omega1: ctx.frequencies().omega1.len(),
            n_omega2: ctx.frequencies().omega2.len(),
            inner_iterations: inner.iterations,
            phase: if inner_success && added > 0 {
                Phase::Refine
            } else {
                Phase::Bisect
            },
        });
        let mut next_sets = if added > 0 { Some(scan.sets) } else { None };
        if scan_cfg.prune {
            next_sets = Some(prune_sets(
                &ctx,
                &theta,
                gamma,
                next_sets.unwrap_or_else(|| ctx.frequencies().clone()),
                &mut zero_streaks,
            )?);
        }
        if let Some(sets) = next_sets {
            ctx.set_frequencies(sets)?;
        }
        if inner_success && added == 0 {
            best_success = Some((theta.clone(), gamma));
            state.update(inner.f_value);
        } else if !inner_success {
            state.update(inner.f_value);
        }
        // Success with fresh violations: hold the level and refine.
    }

    // Certification: re-verify the best certified level on the final sets.
    // When that level turns out unattainable there (the sets grew since it
    // was recorded), escalate to the smallest level the current iterate
    // satisfies — the result must only ever claim a verified level.
    let (mut theta_c, mut gamma_cert) = match best_success {
        Some((t, g)) => (t, g),
        None => (theta.clone(), state.gamma_u),
    };
    let mut converged = false;
    for _ in 0..10 {
        let problem = LevelProblem {
            ctx: &ctx,
            gamma: gamma_cert,
        };
        let inner = minimize_inner(&problem, theta_c, &inner_cfg)?;
        theta_c = inner.theta;
        let scan = update_frequencies(&ctx, &theta_c, gamma_cert, &scan_cfg, &mut rng)?;
        let added = scan.added_lin + scan.added_quad;
        outer += 1;
        trace.push(TraceRow {
            iteration: outer,
            gamma: gamma_cert,
            f_value: inner.f_value,
            n_omega1: ctx.frequencies().omega1.len(),
            n_omega2: ctx.frequencies().omega2.len(),
            inner_iterations: inner.iterations,
            phase: Phase::Certify,
        });
        if inner.f_value < cfg.eps_tol && added == 0 {
            converged = true;
            break;
        }
        if added > 0 {
            ctx.set_frequencies(scan.sets)?;
        }
        if inner.f_value >= cfg.eps_tol {
            let val = ctx.value(&theta_c, gamma_cert);
            let top = val
                .max_sigma_lin
                .max(val.max_sigma_quad)
                .max(scan.max_sigma_lin)
                .max(scan.max_sigma_quad);
            let attainable = match cfg.mode {
                LevelMode::Half => 2.0 * top,
                LevelMode::Sum => top,
            };
            if attainable.is_finite() && attainable > 0.0 {
                gamma_cert = gamma_cert.max(attainable * (1.0 + 1e-9));
            }
        }
    }

    let final_val = ctx.value(&theta_c, gamma_cert);
    let rom = decode(ctx.layout(), &theta_c)?;
    let rom_sys = rom.to_ltiqo();
    let rom_json = match &rom {
        DecodedRom::Unstructured(sys) => sys.to_json(),
        DecodedRom::Ph(ph) => ph.to_phqo().to_json(),
    };
    Ok(ReductionResult {
        format: crate::model::FORMAT_VERSION,
        scheme,
        order: r,
        mode: cfg.mode,
        converged,
        gamma_certified: gamma_cert,
        gamma_lower: state.gamma_l,
        final_objective: final_val.value,
        max_sigma_lin: final_val.max_sigma_lin,
        max_sigma_quad: final_val.max_sigma_quad,
        rom_spectral_abscissa: spectral_abscissa(rom_sys.a()),
        theta_final: theta_c.iter().copied().collect(),
        rom: rom_json,
        freqs_final: ctx.frequencies().clone(),
        trace,
        outer_iterations: outer,
        seed: cfg.seed,
        restart_index: restart,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum PointKey {
    Lin(u64),
    Quad(u64, u64),
}

/// Drops points whose penalty terms have been zero for two consecutive
/// rounds, never emptying a set.
fn prune_sets(
    ctx: &ObjectiveContext,
    theta: &DVector<f64>,
    gamma: f64,
    sets: FrequencySets,
    streaks: &mut HashMap<PointKey, u32>,
) -> Result<FrequencySets> {
    let gamma_eff = ctx.gamma_eff(gamma);
    let sig = ctx.point_sigmas(theta, gamma)?;
    let current = ctx.frequencies();
    for (&w, &s) in current.omega1.iter().zip(&sig.lin) {
        let e = streaks.entry(PointKey::Lin(w.to_bits())).or_insert(0);
        *e = if s <= gamma_eff { *e + 1 } else { 0 };
    }
    for (&(a, b), &s) in current.omega2.iter().zip(&sig.quad) {
        let e = streaks
            .entry(PointKey::Quad(a.to_bits(), b.to_bits()))
            .or_insert(0);
        *e = if s <= gamma_eff { *e + 1 } else { 0 };
    }
    let keep1: Vec<f64> = sets
        .omega1
        .iter()
        .copied()
        .filter(|w| {
            streaks
                .get(&PointKey::Lin(w.to_bits()))
                .is_none_or(|&n| n < 2)
        })
        .collect();
    let keep2: Vec<(f64, f64)> = sets
        .omega2
        .iter()
        .copied()
        .filter(|(a, b)| {
            streaks
                .get(&PointKey::Quad(a.to_bits(), b.to_bits()))
                .is_none_or(|&n| n < 2)
        })
        .collect();
    Ok(FrequencySets {
        omega1: if keep1.is_empty() { sets.omega1 } else { keep1 },
        omega2: if keep2.is_empty() { sets.omega2 } else { keep2 },
    })
}
