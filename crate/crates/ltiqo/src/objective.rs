//! Leveled least-squares surrogate objective.
//!
//! For a level `γ > 0` and finite frequency sets `Ω₁ ⊂ ℝ`, `Ω₂ ⊂ ℝ²`, the
//! surrogate penalizes sampled singular values of the error maps that
//! exceed the effective level `γ_eff`:
//!
//! ```text
//!   f(θ; γ) = (1/γ_eff) [ Σ_{ω ∈ Ω₁}      Σ_k ([σ_k(G₁ₑ(iω))       − γ_eff]₊)²
//!                       + Σ_{(a,b) ∈ Ω₂}  Σ_k ([σ_k(G₂ₑ(ia, ib))   − γ_eff]₊)² ]
//! ```
//!
//! `f = 0` exactly when no sampled value exceeds `γ_eff`. Under
//! [`LevelMode::Half`] (the default) `γ_eff = γ/2`, so `f = 0` certifies
//! `σ(G₁ₑ) + σ(G₂ₑ) ≤ γ` on the sampled sets; [`LevelMode::Sum`] uses
//! `γ_eff = γ` for each part separately.
//!
//! The full model's transfer values at the sampled frequencies do not
//! depend on `θ`, so they are precomputed when the sets change and the
//! per-evaluation cost involves only reduced-dimension solves. The error
//! maps are formed as differences `G − Ĝ` rather than through an explicitly
//! assembled error system; the two are algebraically identical.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{linear_sigma_grad, quad_sigma_grad};
use crate::model::LtiqoSystem;
use crate::param::{decode, DecodedRom, ThetaLayout};
use crate::transfer::{ComplexSystem, SigmaProfile};

/// How the level `γ` is split between the first- and second-order parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelMode {
    /// `γ_eff = γ/2` for each part, so together they certify level `γ`.
    #[default]
    Half,
    /// `γ_eff = γ` applied to each part separately.
    Sum,
}

impl LevelMode {
    pub fn gamma_eff(self, gamma: f64) -> f64 {
        match self {
            LevelMode::Half => 0.5 * gamma,
            LevelMode::Sum => gamma,
        }
    }
}

/// Sampled frequencies: `Ω₁` on the axis, `Ω₂` as pairs. By conjugate
/// symmetry `Ω₁` needs only `ω ≥ 0` and `Ω₂` only `ω₂ ≥ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencySets {
    pub omega1: Vec<f64>,
    pub omega2: Vec<(f64, f64)>,
}

impl FrequencySets {
    /// Default starting sets: `Ω₁` is `{0}` plus a log grid over
    /// `[10⁻⁴, 10⁴]` at 10 points per decade; `Ω₂` is the decade product
    /// `{0, ±10⁻², …, ±10²} × {0, 10⁻², …, 10²}`.
    pub fn initial() -> Self {
        let mut omega1 = vec![0.0];
        omega1.extend((0..=80).map(|k| 10f64.powf(-4.0 + k as f64 / 10.0)));
        let mags: Vec<f64> = (-2..=2).map(|e| 10f64.powi(e)).collect();
        let mut w1s: Vec<f64> = mags.iter().rev().map(|&x| -x).collect();
        w1s.push(0.0);
        w1s.extend(mags.iter().copied());
        let mut w2s = vec![0.0];
        w2s.extend(mags.iter().copied());
        let omega2 = w1s
            .iter()
            .flat_map(|&a| w2s.iter().map(move |&b| (a, b)))
            .collect();
        Self { omega1, omega2 }
    }

    pub fn len(&self) -> (usize, usize) {
        (self.omega1.len(), self.omega2.len())
    }

    pub fn is_empty(&self) -> bool {
        self.omega1.is_empty() && self.omega2.is_empty()
    }
}

/// Evaluation summary of the surrogate at one `(θ, γ)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub value: f64,
    /// Sampled singular values of `G₁ₑ` exceeding `γ_eff`.
    pub n_violations_lin: usize,
    /// Sampled singular values of `G₂ₑ` exceeding `γ_eff`.
    pub n_violations_quad: usize,
    /// Largest sampled `σ_max(G₁ₑ)` (0 when the linear part is inactive).
    pub max_sigma_lin: f64,
    /// Largest sampled `σ_max(G₂ₑ)`.
    pub max_sigma_quad: f64,
}

impl ObjectiveValue {
    fn zero() -> Self {
        Self {
            value: 0.0,
            n_violations_lin: 0,
            n_violations_quad: 0,
            max_sigma_lin: 0.0,
            max_sigma_quad: 0.0,
        }
    }

    /// Sentinel for evaluations that failed or produced non-finite
    /// numbers; counted as a violation so that `value == 0` iff there are
    /// no violations.
    fn infinite() -> Self {
        Self {
            value: f64::INFINITY,
            n_violations_lin: 1,
            n_violations_quad: 0,
            max_sigma_lin: f64::INFINITY,
            max_sigma_quad: 0.0,
        }
    }

    pub fn total_violations(&self) -> usize {
        self.n_violations_lin + self.n_violations_quad
    }
}

/// Shared evaluation state: the full model, the parametrization, and the
/// cached full-model transfer values on the current frequency sets.
pub struct ObjectiveContext {
    fom: ComplexSystem,
    fom_has_linear: bool,
    layout: ThetaLayout,
    mode: LevelMode,
    sets: FrequencySets,
    g1_fom: Vec<DMatrix<Complex64>>,
    g2_fom: Vec<DMatrix<Complex64>>,
}

/// Relative threshold under which a sampled singular value is treated as an
/// exact zero.
const SIGMA_ZERO_RTOL: f64 = 1e-14;

fn shift(w: f64) -> Complex64 {
    Complex64::new(0.0, w)
}

impl ObjectiveContext {
    pub fn new(
        fom: &LtiqoSystem,
        layout: ThetaLayout,
        mode: LevelMode,
        sets: FrequencySets,
    ) -> Result<Self> {
        if fom.m() != layout.m || fom.p() != layout.p {
            return Err(Error::DimensionMismatch(format!(
                "full model has (m, p) = ({}, {}), layout expects ({}, {})",
                fom.m(),
                fom.p(),
                layout.m,
                layout.p
            )));
        }
        let mut ctx = Self {
            fom: ComplexSystem::new(fom),
            fom_has_linear: fom.has_linear_part(),
            layout,
            mode,
            sets: FrequencySets {
                omega1: Vec::new(),
                omega2: Vec::new(),
            },
            g1_fom: Vec::new(),
            g2_fom: Vec::new(),
        };
        ctx.set_frequencies(sets)?;
        Ok(ctx)
    }

    pub fn layout(&self) -> &ThetaLayout {
        &self.layout
    }

    pub fn mode(&self) -> LevelMode {
        self.mode
    }

    pub fn frequencies(&self) -> &FrequencySets {
        &self.sets
    }

    /// Replaces the frequency sets and recomputes the cached full-model
    /// values (one solve per distinct shift).
    pub fn set_frequencies(&mut self, sets: FrequencySets) -> Result<()> {
        if sets
            .omega1
            .iter()
            .chain(sets.omega2.iter().flat_map(|(a, b)| [a, b]))
            .any(|w| !w.is_finite())
        {
            return Err(Error::InvalidConfig(
                "frequency sets must be finite".into(),
            ));
        }
        let mut distinct: Vec<f64> = Vec::new();
        let mut seen = HashMap::new();
        let mut note = |w: f64| {
            seen.entry(w.to_bits()).or_insert_with(|| {
                distinct.push(w);
                distinct.len() - 1
            });
        };
        for &w in &sets.omega1 {
            note(w);
        }
        for &(a, b) in &sets.omega2 {
            note(a);
            note(b);
        }
        let xs: Result<Vec<DMatrix<Complex64>>> = distinct
            .par_iter()
            .map(|&w| self.fom.x(shift(w)))
            .collect();
        let xs = xs?;
        let at = |w: f64| &xs[seen[&w.to_bits()]];
        self.g1_fom = sets
            .omega1
            .iter()
            .map(|&w| &self.fom.c * at(w) + &self.fom.d)
            .collect();
        self.g2_fom = sets
            .omega2
            .iter()
            .map(|&(a, b)| self.fom.g2_from(at(a), at(b)))
            .collect();
        self.sets = sets;
        Ok(())
    }

    pub fn gamma_eff(&self, gamma: f64) -> f64 {
        self.mode.gamma_eff(gamma)
    }

    /// Whether the first-order error can be nonzero for this ROM.
    fn linear_active(&self, rom_sys: &LtiqoSystem) -> bool {
        self.fom_has_linear || rom_sys.has_linear_part()
    }

    /// Evaluates the surrogate. Decode failures, singular shifts, and
    /// non-finite numbers yield an infinite objective value (never a panic),
    /// which line searches reject.
    pub fn value(&self, theta: &DVector<f64>, gamma: f64) -> ObjectiveValue {
        self.try_eval(theta, gamma, false)
            .map(|(v, _, _)| v)
            .unwrap_or_else(|_| ObjectiveValue::infinite())
    }

    /// Evaluates value and gradient. Degenerate (numerically coalescent)
    /// singular values at some frequency trigger one retry at a slightly
    /// perturbed frequency; if the perturbed point is degenerate too, the
    /// error is propagated.
    pub fn gradient(&self, theta: &DVector<f64>, gamma: f64) -> Result<(ObjectiveValue, DVector<f64>)> {
        let (value, grad, _) = self.try_eval(theta, gamma, true)?;
        Ok((value, grad.expect("gradient requested")))
    }

    /// Largest singular value of the error map at every sampled point, in
    /// set order. The linear vector is all zeros when the linear part is
    /// structurally inactive.
    pub fn point_sigmas(&self, theta: &DVector<f64>, gamma: f64) -> Result<PointwiseSigmas> {
        let (_, _, detail) = self.try_eval(theta, gamma, false)?;
        Ok(detail)
    }

    fn try_eval(
        &self,
        theta: &DVector<f64>,
        gamma: f64,
        with_grad: bool,
    ) -> Result<(ObjectiveValue, Option<DVector<f64>>, PointwiseSigmas)> {
        if !(gamma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "level gamma must be positive, got {gamma}"
            )));
        }
        let gamma_eff = self.gamma_eff(gamma);
        let rom = decode(&self.layout, theta)?;
        let rom_sys = rom.to_ltiqo();
        let rom_c = ComplexSystem::new(&rom_sys);
        let lin_active = self.linear_active(&rom_sys);

        // One reduced-order solve per distinct shift, in parallel.
        let mut distinct: Vec<f64> = Vec::new();
        let mut seen = HashMap::new();
        {
            let mut note = |w: f64| {
                seen.entry(w.to_bits()).or_insert_with(|| {
                    distinct.push(w);
                    distinct.len() - 1
                });
            };
            if lin_active {
                for &w in &self.sets.omega1 {
                    note(w);
                }
            }
            for &(a, b) in &self.sets.omega2 {
                note(a);
                note(b);
            }
        }
        let xs: Result<Vec<DMatrix<Complex64>>> = distinct
            .par_iter()
            .map(|&w| rom_c.x(shift(w)))
            .collect();
        let xs = xs?;
        let x_at = |w: f64| &xs[seen[&w.to_bits()]];

        // Per-point evaluations fan out; the fold below is sequential for
        // bit-reproducible sums.
        let lin_points: Result<Vec<PointResult>> = if lin_active {
            (0..self.sets.omega1.len())
                .into_par_iter()
                .map(|idx| {
                    let w = self.sets.omega1[idx];
                    self.eval_lin_point(idx, w, x_at(w), &rom, &rom_c, gamma_eff, with_grad)
                })
                .collect()
        } else {
            Ok(Vec::new())
        };
        let lin_points = lin_points?;
        let quad_points: Result<Vec<PointResult>> = (0..self.sets.omega2.len())
            .into_par_iter()
            .map(|idx| {
                let (a, b) = self.sets.omega2[idx];
                self.eval_quad_point(idx, (a, b), x_at(a), x_at(b), &rom, &rom_c, gamma_eff, with_grad)
            })
            .collect();
        let quad_points = quad_points?;

        let mut out = ObjectiveValue::zero();
        let mut acc = 0.0f64;
        let mut grad = with_grad.then(|| DVector::zeros(self.layout.len()));
        let mut detail = PointwiseSigmas {
            lin: vec![0.0; self.sets.omega1.len()],
            quad: vec![0.0; self.sets.omega2.len()],
        };
        for (idx, pt) in lin_points.into_iter().enumerate() {
            out.max_sigma_lin = out.max_sigma_lin.max(pt.top);
            out.n_violations_lin += pt.violations;
            acc += pt.penalty;
            detail.lin[idx] = pt.top;
            if let (Some(g), Some(delta)) = (grad.as_mut(), pt.grad) {
                *g += delta;
            }
        }
        for (idx, pt) in quad_points.into_iter().enumerate() {
            out.max_sigma_quad = out.max_sigma_quad.max(pt.top);
            out.n_violations_quad += pt.violations;
            acc += pt.penalty;
            detail.quad[idx] = pt.top;
            if let (Some(g), Some(delta)) = (grad.as_mut(), pt.grad) {
                *g += delta;
            }
        }

        out.value = acc / gamma_eff;
        if !out.value.is_finite() {
            return Err(Error::InvalidTheta("objective value is non-finite".into()));
        }
        Ok((out, grad, detail))
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_lin_point(
        &self,
        idx: usize,
        w: f64,
        x: &DMatrix<Complex64>,
        rom: &DecodedRom,
        rom_c: &ComplexSystem,
        gamma_eff: f64,
        with_grad: bool,
    ) -> Result<PointResult> {
        let err = &self.g1_fom[idx] - (&rom_c.c * x + &rom_c.d);
        ensure_finite(&err)?;
        let sigmas = crate::transfer::singular_values(&err);
        let mut pt = PointResult::from_sigmas(&sigmas, gamma_eff);
        if with_grad && pt.violations > 0 {
            // (2/γ_eff) Σ_violating (σ_k − γ_eff) ∂σ_k/∂θ, retrying once at
            // a perturbed frequency when a needed σ is degenerate.
            let attempt = |w_at: f64, g1f: &DMatrix<Complex64>| -> Result<DVector<f64>> {
                let s = shift(w_at);
                let x = rom_c.x(s)?;
                let err = g1f - (&rom_c.c * x + &rom_c.d);
                let profile = SigmaProfile::new(&err)?;
                let mut delta = DVector::zeros(self.layout.len());
                for k in 0..profile.len() {
                    if !violates(profile.sigmas[k], gamma_eff) {
                        continue;
                    }
                    let (sigma, u, v) = profile.triple(k)?;
                    let w_k = 2.0 / gamma_eff * (sigma - gamma_eff);
                    delta += linear_sigma_grad(&self.layout, rom, s, &u, &v)? * w_k;
                }
                Ok(delta)
            };
            let delta = match attempt(w, &self.g1_fom[idx]) {
                Ok(delta) => delta,
                Err(Error::DegenerateSingularValue { .. }) => {
                    let w_pert = perturb(w);
                    let g1f = self.fom.g1(shift(w_pert))?;
                    attempt(w_pert, &g1f)?
                }
                Err(e) => return Err(e),
            };
            pt.grad = Some(delta);
        }
        Ok(pt)
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_quad_point(
        &self,
        idx: usize,
        pair: (f64, f64),
        x1: &DMatrix<Complex64>,
        x2: &DMatrix<Complex64>,
        rom: &DecodedRom,
        rom_c: &ComplexSystem,
        gamma_eff: f64,
        with_grad: bool,
    ) -> Result<PointResult> {
        let err = &self.g2_fom[idx] - rom_c.g2_from(x1, x2);
        ensure_finite(&err)?;
        let sigmas = crate::transfer::singular_values(&err);
        let mut pt = PointResult::from_sigmas(&sigmas, gamma_eff);
        if with_grad && pt.violations > 0 {
            let attempt = |p: (f64, f64), g2f: &DMatrix<Complex64>| -> Result<DVector<f64>> {
                let (s1, s2) = (shift(p.0), shift(p.1));
                let x1 = rom_c.x(s1)?;
                let x2 = rom_c.x(s2)?;
                let err = g2f - rom_c.g2_from(&x1, &x2);
                let profile = SigmaProfile::new(&err)?;
                let mut delta = DVector::zeros(self.layout.len());
                for k in 0..profile.len() {
                    if !violates(profile.sigmas[k], gamma_eff) {
                        continue;
                    }
                    let (sigma, u, v) = profile.triple(k)?;
                    let w_k = 2.0 / gamma_eff * (sigma - gamma_eff);
                    delta += quad_sigma_grad(&self.layout, rom, s1, s2, &u, &v)? * w_k;
                }
                Ok(delta)
            };
            let delta = match attempt(pair, &self.g2_fom[idx]) {
                Ok(delta) => delta,
                Err(Error::DegenerateSingularValue { .. }) => {
                    let pert = (perturb(pair.0), perturb(pair.1));
                    let g2f = self.fom.g2(shift(pert.0), shift(pert.1))?;
                    attempt(pert, &g2f)?
                }
                Err(e) => return Err(e),
            };
            pt.grad = Some(delta);
        }
        Ok(pt)
    }

    /// Full-model transfer evaluator, shared with the optimizer's dense
    /// check scans.
    pub(crate) fn fom_complex(&self) -> &ComplexSystem {
        &self.fom
    }

    pub(crate) fn fom_has_linear(&self) -> bool {
        self.fom_has_linear
    }
}

/// Largest sampled singular value per frequency point, in set order.
#[derive(Debug, Clone)]
pub struct PointwiseSigmas {
    pub lin: Vec<f64>,
    pub quad: Vec<f64>,
}

struct PointResult {
    penalty: f64,
    violations: usize,
    top: f64,
    grad: Option<DVector<f64>>,
}

impl PointResult {
    fn from_sigmas(sigmas: &[f64], gamma_eff: f64) -> Self {
        Self {
            penalty: penalty(sigmas, gamma_eff),
            violations: count_violations(sigmas, gamma_eff),
            top: sigmas.first().copied().unwrap_or(0.0),
            grad: None,
        }
    }
}

fn ensure_finite(m: &DMatrix<Complex64>) -> Result<()> {
    if m.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidTheta(
            "transfer evaluation produced non-finite values".into(),
        ))
    }
}

fn perturb(w: f64) -> f64 {
    if w == 0.0 {
        1e-6
    } else {
        w * (1.0 + 1e-6)
    }
}

fn violates(sigma: f64, gamma_eff: f64) -> bool {
    let effective = if sigma < SIGMA_ZERO_RTOL * gamma_eff {
        0.0
    } else {
        sigma
    };
    effective > gamma_eff
}

fn count_violations(sigmas: &[f64], gamma_eff: f64) -> usize {
    sigmas.iter().filter(|&&s| violates(s, gamma_eff)).count()
}

fn penalty(sigmas: &[f64], gamma_eff: f64) -> f64 {
    sigmas
        .iter()
        .filter(|&&s| violates(s, gamma_eff))
        .map(|&s| (s - gamma_eff) * (s - gamma_eff))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_error_system;
    use crate::param::{init_theta, Scheme};
    use crate::testutil::{random_phqo, random_stable_system};
    use crate::transfer::{eval_g1, eval_g2, singular_values};
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn scalar_fom(c: f64) -> LtiqoSystem {
        LtiqoSystem::new(
            dmatrix![-1.0],
            dmatrix![1.0],
            dmatrix![c],
            dmatrix![0.0],
            vec![dmatrix![0.0]],
            vec![dmatrix![0.0]],
        )
        .unwrap()
    }

    #[test]
    fn single_violation_frozen_value() {
        // FOM: G₁(0) = 2, ROM ≡ 0 (â = −1, everything else 0). With
        // Ω₁ = {0}, Ω₂ = ∅ and γ_eff = 1: f = (1/1)(2 − 1)² = 1.
        let fom = scalar_fom(2.0);
        let layout = ThetaLayout::new(Scheme::Full, 1, 1, 1).unwrap();
        let sets = FrequencySets {
            omega1: vec![0.0],
            omega2: vec![],
        };
        let ctx = ObjectiveContext::new(&fom, layout, LevelMode::Sum, sets).unwrap();
        let theta = dvector![-1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let v = ctx.value(&theta, 1.0);
        assert_abs_diff_eq!(v.value, 1.0, epsilon = 1e-14);
        assert_eq!(v.n_violations_lin, 1);
        assert_eq!(v.n_violations_quad, 0);
        assert_abs_diff_eq!(v.max_sigma_lin, 2.0, epsilon = 1e-14);

        // Same level under Half mode: γ_eff = 0.5, f = (1/0.5)(1.5)² = 4.5.
        let ctx_half = ObjectiveContext::new(
            &fom,
            ThetaLayout::new(Scheme::Full, 1, 1, 1).unwrap(),
            LevelMode::Half,
            FrequencySets {
                omega1: vec![0.0],
                omega2: vec![],
            },
        )
        .unwrap();
        let vh = ctx_half.value(&theta, 1.0);
        assert_abs_diff_eq!(vh.value, 4.5, epsilon = 1e-14);
    }

    #[test]
    fn half_mode_equals_sum_at_half_level() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let fom = random_stable_system(5, 2, 1, &mut rng);
        let layout = ThetaLayout::new(Scheme::Full, 2, 2, 1).unwrap();
        let theta = init_theta(&layout, false, &mut rng);
        let sets = FrequencySets::initial();
        let ctx_half =
            ObjectiveContext::new(&fom, layout.clone(), LevelMode::Half, sets.clone()).unwrap();
        let ctx_sum = ObjectiveContext::new(&fom, layout, LevelMode::Sum, sets).unwrap();
        for &g in &[0.5, 2.0, 10.0] {
            let vh = ctx_half.value(&theta, g);
            let vs = ctx_sum.value(&theta, g / 2.0);
            assert_abs_diff_eq!(vh.value, vs.value, epsilon = 1e-12 * (1.0 + vh.value));
            assert_eq!(vh.total_violations(), vs.total_violations());
        }
    }

    #[test]
    fn zero_iff_no_violations() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let fom = random_stable_system(4, 1, 1, &mut rng);
        let layout = ThetaLayout::new(Scheme::Full, 2, 1, 1).unwrap();
        let theta = init_theta(&layout, false, &mut rng);
        let ctx =
            ObjectiveContext::new(&fom, layout, LevelMode::Half, FrequencySets::initial()).unwrap();
        // Huge level: no violations, value exactly zero.
        let v = ctx.value(&theta, 1e9);
        assert_eq!(v.value, 0.0);
        assert_eq!(v.total_violations(), 0);
        // Tiny level: violations, strictly positive value.
        let v = ctx.value(&theta, 1e-9);
        assert!(v.value > 0.0);
        assert!(v.total_violations() > 0);
    }

    #[test]
    fn value_monotone_nonincreasing_in_gamma() {
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let fom = random_stable_system(5, 2, 2, &mut rng);
        let layout = ThetaLayout::new(Scheme::Full, 3, 2, 2).unwrap();
        let theta = init_theta(&layout, false, &mut rng);
        let ctx =
            ObjectiveContext::new(&fom, layout, LevelMode::Half, FrequencySets::initial()).unwrap();
        let gammas = [0.01, 0.1, 1.0, 5.0, 50.0, 500.0];
        let vals: Vec<f64> = gammas.iter().map(|&g| ctx.value(&theta, g).value).collect();
        for k in 1..vals.len() {
            assert!(
                vals[k] <= vals[k - 1] + 1e-12,
                "f not monotone: {vals:?}"
            );
        }
    }

    #[test]
    fn matches_explicit_error_system() {
        // Independent oracle: assemble the error system explicitly and
        // evaluate its maps directly.
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let fom = random_stable_system(5, 2, 2, &mut rng);
        let layout = ThetaLayout::new(Scheme::Full, 3, 2, 2).unwrap();
        let theta = init_theta(&layout, false, &mut rng);
        let rom_sys = decode(&layout, &theta).unwrap().to_ltiqo();
        let err_sys = build_error_system(&fom, &rom_sys).unwrap();

        let sets = FrequencySets {
            omega1: vec![0.0, 0.3, 2.0],
            omega2: vec![(0.0, 0.0), (-1.5, 0.7), (4.0, 0.1)],
        };
        let gamma = 0.8;
        let gamma_eff = LevelMode::Half.gamma_eff(gamma);
        let mut expected = 0.0;
        for &w in &sets.omega1 {
            let g = eval_g1(&err_sys, Complex64::new(0.0, w)).unwrap();
            for s in singular_values(&g) {
                if s > gamma_eff {
                    expected += (s - gamma_eff) * (s - gamma_eff);
                }
            }
        }
        for &(a, b) in &sets.omega2 {
            let g = eval_g2(&err_sys, Complex64::new(0.0, a), Complex64::new(0.0, b)).unwrap();
            for s in singular_values(&g) {
                if s > gamma_eff {
                    expected += (s - gamma_eff) * (s - gamma_eff);
                }
            }
        }
        expected /= gamma_eff;

        let ctx = ObjectiveContext::new(&fom, layout, LevelMode::Half, sets).unwrap();
        let v = ctx.value(&theta, gamma);
        assert_abs_diff_eq!(v.value, expected, epsilon = 1e-11 * (1.0 + expected));
    }

    fn check_objective_gradient(scheme: Scheme, seed: u64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (fom, layout) = match scheme {
            Scheme::PhCondensed => {
                let ph = random_phqo(5, 2, &mut rng);
                (ph.to_ltiqo(), ThetaLayout::new(scheme, 3, 2, 3).unwrap())
            }
            _ => (
                random_stable_system(5, 2, 2, &mut rng),
                ThetaLayout::new(scheme, 3, 2, 2).unwrap(),
            ),
        };
        let theta = init_theta(&layout, false, &mut rng);
        let sets = FrequencySets {
            omega1: vec![0.0, 0.4, 1.7, 12.0],
            omega2: vec![(0.0, 0.0), (-0.9, 0.2), (3.0, 1.1), (0.5, 8.0)],
        };
        let ctx = ObjectiveContext::new(&fom, layout, LevelMode::Half, sets).unwrap();
        // Pick γ low enough that some terms violate (nonzero gradient).
        let probe = ctx.value(&theta, 1.0);
        let gamma = 0.5 * (probe.max_sigma_lin + probe.max_sigma_quad).max(0.1);
        let (val, analytic) = ctx.gradient(&theta, gamma).unwrap();
        assert!(val.total_violations() > 0, "test needs active terms");
        let fd = crate::grad::fd_gradient(
            |t: &DVector<f64>| Ok(ctx.value(t, gamma).value),
            &theta,
            1e-6,
        )
        .unwrap();
        let rel = (&analytic - &fd).norm() / fd.norm().max(1e-300);
        assert!(rel < 1e-6, "scheme {scheme}: rel error {rel:.3e}");
        // Gradient-path value agrees with the value path.
        assert_abs_diff_eq!(val.value, ctx.value(&theta, gamma).value, epsilon = 1e-13);
    }

    #[test]
    fn objective_gradient_matches_fd_full() {
        check_objective_gradient(Scheme::Full, 31);
    }

    #[test]
    fn objective_gradient_matches_fd_diagm() {
        check_objective_gradient(Scheme::DiagM, 32);
    }

    #[test]
    fn objective_gradient_matches_fd_ph() {
        check_objective_gradient(Scheme::PhCondensed, 33);
    }

    #[test]
    fn gradient_zero_when_feasible() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let fom = random_stable_system(4, 1, 1, &mut rng);
        let layout = ThetaLayout::new(Scheme::Full, 2, 1, 1).unwrap();
        let theta = init_theta(&layout, false, &mut rng);
        let ctx =
            ObjectiveContext::new(&fom, layout, LevelMode::Half, FrequencySets::initial()).unwrap();
        let (v, g) = ctx.gradient(&theta, 1e9).unwrap();
        assert_eq!(v.value, 0.0);
        assert_eq!(g.amax(), 0.0);
    }

    #[test]
    fn non_finite_theta_gives_infinite_value() {
        let fom = scalar_fom(1.0);
        let layout = ThetaLayout::new(Scheme::Full, 1, 1, 1).unwrap();
        let ctx =
            ObjectiveContext::new(&fom, layout, LevelMode::Half, FrequencySets::initial()).unwrap();
        let mut theta = dvector![-1.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        theta[1] = f64::NAN;
        let v = ctx.value(&theta, 1.0);
        assert!(v.value.is_infinite());
        assert!(v.total_violations() > 0);
    }

    #[test]
    fn structurally_zero_linear_part_is_skipped() {
        // FOM with C = D = 0 and a ROM with zero Ĉ, D̂: the linear part is
        // identically zero and contributes neither value nor violations.
        let fom = LtiqoSystem::new(
            dmatrix![-1.0],
            dmatrix![1.0],
            dmatrix![0.0],
            dmatrix![0.0],
            vec![dmatrix![1.0]],
            vec![dmatrix![0.0]],
        )
        .unwrap();
        let layout = ThetaLayout::new(Scheme::Full, 1, 1, 1).unwrap();
        let ctx =
            ObjectiveContext::new(&fom, layout, LevelMode::Sum, FrequencySets::initial()).unwrap();
        // ROM: â = −1, everything else 0 → error K(0,0) = 1.
        let theta = dvector![-1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let v = ctx.value(&theta, 0.5);
        assert_eq!(v.n_violations_lin, 0);
        assert_eq!(v.max_sigma_lin, 0.0);
        assert!(v.n_violations_quad > 0);
        assert_abs_diff_eq!(v.max_sigma_quad, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_sigma_error_after_retry() {
        // ROM Ĝ₁(iω) = diag(1/(1+iω), 1/(1+iω)) has exactly equal singular
        // values at every frequency, so the retry also fails and the error
        // surfaces.
        let fom = LtiqoSystem::new(
            -nalgebra::DMatrix::identity(2, 2),
            nalgebra::DMatrix::identity(2, 2),
            nalgebra::DMatrix::zeros(2, 2),
            nalgebra::DMatrix::zeros(2, 2),
            vec![nalgebra::DMatrix::zeros(2, 2); 2],
            vec![nalgebra::DMatrix::zeros(2, 2); 2],
        )
        .unwrap();
        let layout = ThetaLayout::new(Scheme::Full, 2, 2, 2).unwrap();
        let rom = LtiqoSystem::new(
            -nalgebra::DMatrix::identity(2, 2),
            nalgebra::DMatrix::identity(2, 2),
            nalgebra::DMatrix::identity(2, 2),
            nalgebra::DMatrix::zeros(2, 2),
            vec![nalgebra::DMatrix::zeros(2, 2); 2],
            vec![nalgebra::DMatrix::zeros(2, 2); 2],
        )
        .unwrap();
        let theta = crate::param::encode(&layout, &DecodedRom::Unstructured(rom)).unwrap();
        let sets = FrequencySets {
            omega1: vec![0.3],
            omega2: vec![],
        };
        let ctx = ObjectiveContext::new(&fom, layout, LevelMode::Sum, sets).unwrap();
        // Value still works (no vectors needed).
        let v = ctx.value(&theta, 0.1);
        assert!(v.value > 0.0);
        assert!(matches!(
            ctx.gradient(&theta, 0.1),
            Err(Error::DegenerateSingularValue { .. })
        ));
    }
}
