//! Analytic gradients of error-map singular values with respect to ROM
//! parameters, plus the finite-difference oracle used to validate them.
//!
//! For a simple (isolated) singular value of a complex matrix-valued map,
//! `dσ = Re(uᴴ dG v)` with `G v = σ u`. The error maps are
//! `G₁ₑ = G₁ − Ĝ₁` and `G₂ₑ = G₂ − Ĝ₂`, so `dG/dθ = −dĜ/dθ` and everything
//! reduces to derivatives of the ROM transfer maps, which involve only the
//! small reduced matrices and the resolvents `R̂(s) = (sI − Â)⁻¹`.
//!
//! Second-order derivatives are handled through a kernel-cotangent
//! contraction: `uᴴ dG₂ v = Σⱼ ūⱼ ⟨V, dK̂ⱼ⟩` with `V = unvec(v)`, so each
//! output contributes through its kernel weighted by `Λⱼ = ūⱼ V`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::Result;
use crate::param::{
    chain_a_grad_ph, diag_embed_adjoint, duplication_adjoint, vec_apply, DecodedRom, Scheme,
    ThetaLayout,
};
use crate::transfer::{resolvent, to_complex};

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

/// Central-difference gradient with a fixed step `h`.
pub fn fd_gradient<F>(mut f: F, theta: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
{
    let mut grad = DVector::zeros(theta.len());
    let mut work = theta.clone();
    for i in 0..theta.len() {
        let ti = theta[i];
        work[i] = ti + h;
        let fp = f(&work)?;
        work[i] = ti - h;
        let fm = f(&work)?;
        work[i] = ti;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Central-difference gradient with per-coordinate steps
/// `hᵢ = h_rel · max(1, |θᵢ|)`.
pub fn fd_gradient_scaled<F>(mut f: F, theta: &DVector<f64>, h_rel: f64) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
{
    let mut grad = DVector::zeros(theta.len());
    let mut work = theta.clone();
    for i in 0..theta.len() {
        let ti = theta[i];
        let h = h_rel * ti.abs().max(1.0);
        work[i] = ti + h;
        let fp = f(&work)?;
        work[i] = ti - h;
        let fm = f(&work)?;
        work[i] = ti;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

fn re_mat(m: &DMatrix<Complex64>) -> DMatrix<f64> {
    m.map(|z| z.re)
}

fn write_seg(grad: &mut DVector<f64>, range: std::ops::Range<usize>, vals: &DVector<f64>) {
    grad.as_mut_slice()[range].copy_from_slice(vals.as_slice());
}

// ---------------------------------------------------------------------------
// First-order map: dσ(G₁ₑ)/dθ
// ---------------------------------------------------------------------------

/// Gradient of a simple singular value of the first-order error map at
/// `s = iω`, given its singular triple (`G₁ₑ v = σ u`).
///
/// Only ROM quantities enter: with `w = R̂B̂v` and `ρᴴ = uᴴĈR̂`,
/// `∂σ/∂Â = −Re[(w ρᴴ)ᵀ]`, `∂σ/∂B̂ = −Re[(v ρᴴ)ᵀ]`, `∂σ/∂Ĉ = −Re[(w uᴴ)ᵀ]`,
/// `∂σ/∂D̂ = −Re[(v uᴴ)ᵀ]`; the pH scheme substitutes `Ĉ = [B̂ᵀ; 0]` (the
/// appended quadratic output has no linear row, so only the leading `m`
/// entries of `u` act) and chains `Â = Ĵ − diag(θ_R)²` into `θ_J, θ_R`,
/// with `B̂` collecting both its direct term and the one through `Ĉ`.
pub fn linear_sigma_grad(
    layout: &ThetaLayout,
    rom: &DecodedRom,
    s: Complex64,
    u: &DVector<Complex64>,
    v: &DVector<Complex64>,
) -> Result<DVector<f64>> {
    debug_assert_eq!(u.len(), layout.p);
    debug_assert_eq!(v.len(), layout.m);
    let mut grad = DVector::zeros(layout.len());
    match rom {
        DecodedRom::Unstructured(sys) => {
            let res = resolvent(sys.a(), s)?;
            let bc = to_complex(sys.b());
            let cc = to_complex(sys.c());
            let w = &res * (&bc * v); // R̂ B̂ v ∈ ℂʳ
            let rho = (u.adjoint() * cc) * &res; // uᴴ Ĉ R̂ ∈ ℂ¹ˣʳ
            let g_a = -re_mat(&(&w * &rho).transpose());
            let g_b = -re_mat(&(v * &rho).transpose());
            let g_c = -re_mat(&(&w * u.adjoint()).transpose());
            let g_d = -re_mat(&(v * u.adjoint()).transpose());
            write_seg(&mut grad, layout.a_range(), &vec_apply(&g_a));
            write_seg(&mut grad, layout.b_range(), &vec_apply(&g_b));
            write_seg(&mut grad, layout.c_range(), &vec_apply(&g_c));
            write_seg(&mut grad, layout.d_range(), &vec_apply(&g_d));
        }
        DecodedRom::Ph(ph) => {
            let res = resolvent(&ph.a(), s)?;
            let bc = to_complex(&ph.b);
            let u_lin = u.rows(0, layout.m).into_owned();
            let w = &res * (&bc * v);
            let rho = (u_lin.adjoint() * bc.transpose()) * &res; // ũᴴ B̂ᵀ R̂
            let g_a = -re_mat(&(&w * &rho).transpose());
            let g_b = -re_mat(&(&w * u_lin.adjoint() + (v * &rho).transpose()));
            let (g_j, g_r) = chain_a_grad_ph(&g_a, &ph.theta_r);
            write_seg(&mut grad, layout.j_range(), &g_j);
            write_seg(&mut grad, layout.rdiag_range(), &g_r);
            write_seg(&mut grad, layout.b_range(), &vec_apply(&g_b));
        }
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Second-order map: dσ(G₂ₑ)/dθ
// ---------------------------------------------------------------------------

/// Gradient of a simple singular value of the second-order error map at
/// `(s₁, s₂) = (iω₁, iω₂)`, given its singular triple (`u ∈ ℂᵖ`,
/// `v ∈ ℂ^{m²}`).
///
/// With `X̂ᵢ = R̂(sᵢ)B̂`, `V = unvec(v)` and `Λⱼ = ūⱼV`, each output adds
///
/// ```text
///   ∂σ/∂M̂ⱼ −= Re(X̂₂ Λⱼ X̂₁ᵀ),      ∂σ/∂P̂ⱼ −= Re(Λⱼ),
///   ∂σ/∂Â  −= Re(R̂₂ᵀM̂ⱼX̂₁ Λⱼᵀ X̂₂ᵀ + R̂₁ᵀM̂ⱼX̂₂ Λⱼ X̂₁ᵀ),
///   ∂σ/∂B̂  −= Re(R̂₂ᵀM̂ⱼX̂₁ Λⱼᵀ     + R̂₁ᵀM̂ⱼX̂₂ Λⱼ),
/// ```
///
/// the minus signs coming from `dG₂ₑ = −dĜ₂`. `Ĉ` and `D̂` do not enter.
/// The pH scheme fixes `M̂ = ½I` on the appended output and chains `Â` into
/// `(θ_J, θ_R)` as in [`linear_sigma_grad`].
pub fn quad_sigma_grad(
    layout: &ThetaLayout,
    rom: &DecodedRom,
    s1: Complex64,
    s2: Complex64,
    u: &DVector<Complex64>,
    v: &DVector<Complex64>,
) -> Result<DVector<f64>> {
    let m = layout.m;
    debug_assert_eq!(u.len(), layout.p);
    debug_assert_eq!(v.len(), m * m);
    let mut grad = DVector::zeros(layout.len());
    let v_mat = DMatrix::from_column_slice(m, m, v.as_slice());
    match rom {
        DecodedRom::Unstructured(sys) => {
            let r = sys.n();
            let a = sys.a();
            let bc = to_complex(sys.b());
            let r1 = resolvent(a, s1)?;
            let r2 = if s2 == s1 { r1.clone() } else { resolvent(a, s2)? };
            let x1 = &r1 * &bc;
            let x2 = &r2 * &bc;
            let r1t = r1.transpose();
            let r2t = r2.transpose();
            let mut g_a = DMatrix::<f64>::zeros(r, r);
            let mut g_b = DMatrix::<f64>::zeros(r, m);
            for j in 0..layout.p {
                let lam = &v_mat * u[j].conj();
                let lam_t = lam.transpose();
                let mc = to_complex(sys.m_quad(j));
                let w2m1 = &r2t * (&mc * &x1); // R̂₂ᵀ M̂ⱼ X̂₁
                let w1m2 = &r1t * (&mc * &x2); // R̂₁ᵀ M̂ⱼ X̂₂
                g_a -= re_mat(&(&w2m1 * &lam_t * x2.transpose() + &w1m2 * &lam * x1.transpose()));
                g_b -= re_mat(&(&w2m1 * &lam_t + &w1m2 * &lam));
                let g_m = -re_mat(&(&x2 * &lam * x1.transpose()));
                let g_m_seg = match layout.scheme {
                    Scheme::Full => duplication_adjoint(&vec_apply(&g_m), r),
                    Scheme::DiagM => diag_embed_adjoint(&vec_apply(&g_m), r),
                    Scheme::PhCondensed => unreachable!("pH ROM decodes to the structured variant"),
                };
                write_seg(&mut grad, layout.m_range(j), &g_m_seg);
                let g_p = -re_mat(&lam);
                write_seg(
                    &mut grad,
                    layout.p_range(j),
                    &duplication_adjoint(&vec_apply(&g_p), m),
                );
            }
            write_seg(&mut grad, layout.a_range(), &vec_apply(&g_a));
            write_seg(&mut grad, layout.b_range(), &vec_apply(&g_b));
        }
        DecodedRom::Ph(ph) => {
            let a = ph.a();
            let bc = to_complex(&ph.b);
            let r1 = resolvent(&a, s1)?;
            let r2 = if s2 == s1 { r1.clone() } else { resolvent(&a, s2)? };
            let x1 = &r1 * &bc;
            let x2 = &r2 * &bc;
            // Only the appended Hamiltonian output (index m) is quadratic,
            // with fixed M̂ = ½I.
            let lam = &v_mat * u[m].conj();
            let lam_t = lam.transpose();
            let half = Complex64::new(0.5, 0.0);
            let w2m1 = r2.transpose() * &x1 * half;
            let w1m2 = r1.transpose() * &x2 * half;
            let g_a =
                -re_mat(&(&w2m1 * &lam_t * x2.transpose() + &w1m2 * &lam * x1.transpose()));
            let g_b = -re_mat(&(&w2m1 * &lam_t + &w1m2 * &lam));
            let (g_j, g_r) = chain_a_grad_ph(&g_a, &ph.theta_r);
            write_seg(&mut grad, layout.j_range(), &g_j);
            write_seg(&mut grad, layout.rdiag_range(), &g_r);
            write_seg(&mut grad, layout.b_range(), &vec_apply(&g_b));
        }
    }
    Ok(grad)
}
