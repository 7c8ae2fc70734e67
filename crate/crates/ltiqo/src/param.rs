//! Parameter vectors for reduced-order models.
//!
//! A candidate ROM is a flat vector `θ` under one of three schemes:
//!
//! * [`Scheme::Full`] — dense `Â, B̂, Ĉ, D̂`, symmetric `M̂ᵢ, P̂ᵢ` stored as
//!   half-vectorizations;
//! * [`Scheme::DiagM`] — like `Full` but each `M̂ᵢ` restricted to a diagonal;
//! * [`Scheme::PhCondensed`] — structurally stable port-Hamiltonian form
//!   `Â = Ĵ − diag(θ_R)²` with `Ĵ` skew from its strict upper triangle and
//!   output fixed to `[B̂ᵀx; ½xᵀx]`.
//!
//! All vectorizations are column-major. The classical structural matrices
//! (commutation, duplication, diagonal embedding, strict-upper
//! vectorization) are realized as index maps — never as dense matrices —
//! together with their adjoints, which is all the gradient chain rules need.

use nalgebra::{DMatrix, DVector};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LtiqoSystem, PhqoSystem};

// ---------------------------------------------------------------------------
// Structural maps (index realizations)
// ---------------------------------------------------------------------------

/// Column-major vectorization.
pub fn vec_apply(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_apply`] for the given shape.
pub fn unvec_apply(v: &DVector<f64>, nrows: usize, ncols: usize) -> DMatrix<f64> {
    assert_eq!(v.len(), nrows * ncols, "unvec: length mismatch");
    DMatrix::from_column_slice(nrows, ncols, v.as_slice())
}

/// Commutation map: `vec(X) ↦ vec(Xᵀ)` for `X` of shape `nrows × ncols`.
pub fn commutation_apply(v: &DVector<f64>, nrows: usize, ncols: usize) -> DVector<f64> {
    assert_eq!(v.len(), nrows * ncols, "commutation: length mismatch");
    let mut out = DVector::zeros(v.len());
    for j in 0..ncols {
        for i in 0..nrows {
            // (i, j) of X sits at i + j·nrows; in Xᵀ it sits at (j, i).
            out[j + i * ncols] = v[i + j * nrows];
        }
    }
    out
}

/// Length of the half-vectorization of a symmetric `n × n` matrix.
pub fn hvec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Half-vectorization: upper triangle including the diagonal, column-major:
/// (0,0), (0,1), (1,1), (0,2), (1,2), (2,2), ...
pub fn hvec_apply(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    assert_eq!(m.ncols(), n, "hvec: matrix must be square");
    let mut out = DVector::zeros(hvec_len(n));
    let mut k = 0;
    for j in 0..n {
        for i in 0..=j {
            out[k] = m[(i, j)];
            k += 1;
        }
    }
    out
}

/// Duplication map: half-vectorization of a symmetric matrix to its full
/// column-major vectorization.
pub fn duplication_apply(h: &DVector<f64>, n: usize) -> DVector<f64> {
    assert_eq!(h.len(), hvec_len(n), "duplication: length mismatch");
    let mut out = DVector::zeros(n * n);
    let mut k = 0;
    for j in 0..n {
        for i in 0..=j {
            out[i + j * n] = h[k];
            out[j + i * n] = h[k];
            k += 1;
        }
    }
    out
}

/// Adjoint of the duplication map: accumulates a full-matrix gradient onto
/// the half-vectorization (off-diagonal pairs sum).
pub fn duplication_adjoint(v: &DVector<f64>, n: usize) -> DVector<f64> {
    assert_eq!(v.len(), n * n, "duplication adjoint: length mismatch");
    let mut out = DVector::zeros(hvec_len(n));
    let mut k = 0;
    for j in 0..n {
        for i in 0..=j {
            out[k] = if i == j {
                v[i + j * n]
            } else {
                v[i + j * n] + v[j + i * n]
            };
            k += 1;
        }
    }
    out
}

/// Reconstructs the symmetric matrix from its half-vectorization.
pub fn unhvec_apply(h: &DVector<f64>, n: usize) -> DMatrix<f64> {
    unvec_apply(&duplication_apply(h, n), n, n)
}

/// Diagonal embedding: `d ↦ vec(diag(d))`.
pub fn diag_embed_apply(d: &DVector<f64>) -> DVector<f64> {
    let n = d.len();
    let mut out = DVector::zeros(n * n);
    for i in 0..n {
        out[i + i * n] = d[i];
    }
    out
}

/// Adjoint of the diagonal embedding: extracts the diagonal of a
/// full-matrix gradient.
pub fn diag_embed_adjoint(v: &DVector<f64>, n: usize) -> DVector<f64> {
    assert_eq!(v.len(), n * n, "diag embed adjoint: length mismatch");
    DVector::from_fn(n, |i, _| v[i + i * n])
}

/// Length of the strict-upper vectorization of an `n × n` matrix.
pub fn sutv_len(n: usize) -> usize {
    n * (n - 1) / 2
}

/// Strict-upper vectorization, column-major: (0,1), (0,2), (1,2), (0,3), ...
pub fn sutv_apply(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    assert_eq!(m.ncols(), n, "sutv: matrix must be square");
    let mut out = DVector::zeros(sutv_len(n));
    let mut k = 0;
    for j in 1..n {
        for i in 0..j {
            out[k] = m[(i, j)];
            k += 1;
        }
    }
    out
}

/// Inverse direction of [`sutv_apply`]: places entries into a strictly
/// upper-triangular matrix (zeros elsewhere).
pub fn vtsu_apply(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    assert_eq!(v.len(), sutv_len(n), "vtsu: length mismatch");
    let mut out = DMatrix::zeros(n, n);
    let mut k = 0;
    for j in 1..n {
        for i in 0..j {
            out[(i, j)] = v[k];
            k += 1;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Schemes and layouts
// ---------------------------------------------------------------------------

/// ROM parametrization scheme. Serialized under the same short names the
/// CLI uses (`full`, `diagm`, `ph`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    /// Dense realization; symmetric quadratic matrices via half-vectorization.
    #[serde(rename = "full")]
    Full,
    /// Dense realization with each state-quadratic matrix diagonal.
    #[serde(rename = "diagm")]
    DiagM,
    /// Condensed port-Hamiltonian form (skew `Ĵ`, `R̂ = diag(θ_R)² ⪰ 0`,
    /// `Q̂ = I`); asymptotically non-expansive by construction.
    #[serde(rename = "ph")]
    PhCondensed,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scheme::Full => write!(f, "full"),
            Scheme::DiagM => write!(f, "diagm"),
            Scheme::PhCondensed => write!(f, "ph"),
        }
    }
}

/// Segment offsets of a parameter vector for one (scheme, r, m, p).
///
/// Segment order is `θ_A, θ_B, θ_M(1..p), θ_C, θ_D, θ_P(1..p)` for the dense
/// schemes and `θ_J, θ_R, θ_B` for the pH scheme.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThetaLayout {
    pub scheme: Scheme,
    /// Reduced state dimension.
    pub r: usize,
    /// Input dimension.
    pub m: usize,
    /// Output dimension.
    pub p: usize,
}

impl ThetaLayout {
    pub fn new(scheme: Scheme, r: usize, m: usize, p: usize) -> Result<Self> {
        if r == 0 || m == 0 || p == 0 {
            return Err(Error::InvalidConfig(format!(
                "layout dimensions must be positive, got r = {r}, m = {m}, p = {p}"
            )));
        }
        if scheme == Scheme::PhCondensed && p != m + 1 {
            return Err(Error::InvalidConfig(format!(
                "pH scheme has p = m + 1 outputs; got p = {p} with m = {m}"
            )));
        }
        Ok(Self { scheme, r, m, p })
    }

    /// Per-quadratic-output parameter count for one `M̂ᵢ`.
    fn m_seg_len(&self) -> usize {
        match self.scheme {
            Scheme::Full => hvec_len(self.r),
            Scheme::DiagM => self.r,
            Scheme::PhCondensed => 0,
        }
    }

    /// Total parameter count.
    pub fn len(&self) -> usize {
        let (r, m, p) = (self.r, self.m, self.p);
        match self.scheme {
            Scheme::Full | Scheme::DiagM => {
                r * r + r * m + p * self.m_seg_len() + p * r + p * m + p * hvec_len(m)
            }
            Scheme::PhCondensed => sutv_len(r) + r + r * m,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dense_only(&self, what: &str) -> std::ops::Range<usize> {
        panic!("segment {what} does not exist under scheme {}", self.scheme)
    }

    /// `vec(Â)` segment (dense schemes).
    pub fn a_range(&self) -> std::ops::Range<usize> {
        match self.scheme {
            Scheme::Full | Scheme::DiagM => 0..self.r * self.r,
            Scheme::PhCondensed => self.dense_only("A"),
        }
    }

    /// `vec(B̂)` segment (any scheme).
    pub fn b_range(&self) -> std::ops::Range<usize> {
        match self.scheme {
            Scheme::Full | Scheme::DiagM => {
                let s = self.r * self.r;
                s..s + self.r * self.m
            }
            Scheme::PhCondensed => {
                let s = sutv_len(self.r) + self.r;
                s..s + self.r * self.m
            }
        }
    }

    /// Segment of `M̂ᵢ` (half-vectorized or diagonal, by scheme).
    pub fn m_range(&self, i: usize) -> std::ops::Range<usize> {
        assert!(i < self.p, "output index {} out of range {}", i, self.p);
        match self.scheme {
            Scheme::Full | Scheme::DiagM => {
                let base = self.r * self.r + self.r * self.m;
                let s = base + i * self.m_seg_len();
                s..s + self.m_seg_len()
            }
            Scheme::PhCondensed => self.dense_only("M"),
        }
    }

    /// `vec(Ĉ)` segment (dense schemes).
    pub fn c_range(&self) -> std::ops::Range<usize> {
        match self.scheme {
            Scheme::Full | Scheme::DiagM => {
                let s = self.r * self.r + self.r * self.m + self.p * self.m_seg_len();
                s..s + self.p * self.r
            }
            Scheme::PhCondensed => self.dense_only("C"),
        }
    }

    /// `vec(D̂)` segment (dense schemes).
    pub fn d_range(&self) -> std::ops::Range<usize> {
        let s = self.c_range().end;
        s..s + self.p * self.m
    }

    /// Segment of `P̂ᵢ` (half-vectorized; dense schemes).
    pub fn p_range(&self, i: usize) -> std::ops::Range<usize> {
        assert!(i < self.p, "output index {} out of range {}", i, self.p);
        let base = self.d_range().end;
        let s = base + i * hvec_len(self.m);
        s..s + hvec_len(self.m)
    }

    /// `θ_J` segment (pH scheme).
    pub fn j_range(&self) -> std::ops::Range<usize> {
        match self.scheme {
            Scheme::PhCondensed => 0..sutv_len(self.r),
            _ => self.dense_only("J"),
        }
    }

    /// `θ_R` segment (pH scheme).
    pub fn rdiag_range(&self) -> std::ops::Range<usize> {
        match self.scheme {
            Scheme::PhCondensed => {
                let s = sutv_len(self.r);
                s..s + self.r
            }
            _ => self.dense_only("R"),
        }
    }
}

// ---------------------------------------------------------------------------
// Decoding and encoding
// ---------------------------------------------------------------------------

/// Condensed pH reduced model: `Â = Ĵ − diag(θ_R)²`, `Q̂ = I`,
/// Hamiltonian output `½xᵀx`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhRom {
    pub theta_j: DVector<f64>,
    pub theta_r: DVector<f64>,
    pub b: DMatrix<f64>,
}

impl PhRom {
    pub fn r(&self) -> usize {
        self.theta_r.len()
    }

    /// Skew `Ĵ` with `θ_J` filling the strict lower triangle (column-major
    /// over the transposed positions): `Ĵ = Uᵀ − U` for `U` strictly upper.
    pub fn j(&self) -> DMatrix<f64> {
        let u = vtsu_apply(&self.theta_j, self.r());
        u.transpose() - u
    }

    /// `R̂ = diag(θ_R²) ⪰ 0`.
    pub fn r_mat(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.theta_r.map(|t| t * t))
    }

    /// `Â = Ĵ − R̂`.
    pub fn a(&self) -> DMatrix<f64> {
        self.j() - self.r_mat()
    }

    /// As a pH system with `Q = I`.
    pub fn to_phqo(&self) -> PhqoSystem {
        PhqoSystem::new(
            self.j(),
            self.r_mat(),
            DMatrix::identity(self.r(), self.r()),
            self.b.clone(),
        )
        .expect("pH ROM dimensions are consistent by construction")
    }
}

/// A decoded reduced model.
#[derive(Debug, Clone, PartialEq)]
pub enum DecodedRom {
    /// Dense realization (`Full` or `DiagM` schemes).
    Unstructured(LtiqoSystem),
    /// Structured pH realization.
    Ph(PhRom),
}

impl DecodedRom {
    /// General-form view for evaluation.
    pub fn to_ltiqo(&self) -> LtiqoSystem {
        match self {
            DecodedRom::Unstructured(sys) => sys.clone(),
            DecodedRom::Ph(ph) => ph.to_phqo().to_ltiqo(),
        }
    }

    pub fn order(&self) -> usize {
        match self {
            DecodedRom::Unstructured(sys) => sys.n(),
            DecodedRom::Ph(ph) => ph.r(),
        }
    }
}

/// Materializes the reduced model encoded by `theta`.
pub fn decode(layout: &ThetaLayout, theta: &DVector<f64>) -> Result<DecodedRom> {
    if theta.len() != layout.len() {
        return Err(Error::InvalidTheta(format!(
            "expected {} parameters for scheme {}, got {}",
            layout.len(),
            layout.scheme,
            theta.len()
        )));
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidTheta("non-finite parameter entry".into()));
    }
    let (r, m, p) = (layout.r, layout.m, layout.p);
    let seg = |range: std::ops::Range<usize>| DVector::from_column_slice(&theta.as_slice()[range]);
    match layout.scheme {
        Scheme::Full | Scheme::DiagM => {
            let a = unvec_apply(&seg(layout.a_range()), r, r);
            let b = unvec_apply(&seg(layout.b_range()), r, m);
            let c = unvec_apply(&seg(layout.c_range()), p, r);
            let d = unvec_apply(&seg(layout.d_range()), p, m);
            let m_quad = (0..p)
                .map(|i| {
                    let mi = seg(layout.m_range(i));
                    if layout.scheme == Scheme::Full {
                        unhvec_apply(&mi, r)
                    } else {
                        DMatrix::from_diagonal(&mi)
                    }
                })
                .collect();
            let p_quad = (0..p).map(|i| unhvec_apply(&seg(layout.p_range(i)), m)).collect();
            Ok(DecodedRom::Unstructured(LtiqoSystem::new(
                a, b, c, d, m_quad, p_quad,
            )?))
        }
        Scheme::PhCondensed => Ok(DecodedRom::Ph(PhRom {
            theta_j: seg(layout.j_range()),
            theta_r: seg(layout.rdiag_range()),
            b: unvec_apply(&seg(layout.b_range()), r, m),
        })),
    }
}

/// Flattens a reduced model back to parameters. Inverse of [`decode`] up to
/// the sign of `θ_R`, which is canonicalized to be nonnegative.
///
/// Fails with [`Error::UnsupportedStructure`] when the model does not fit
/// the scheme (e.g. a non-diagonal `M̂ᵢ` under `DiagM`).
pub fn encode(layout: &ThetaLayout, rom: &DecodedRom) -> Result<DVector<f64>> {
    let mut theta = DVector::zeros(layout.len());
    let mut put = |range: std::ops::Range<usize>, v: &DVector<f64>| {
        theta.as_mut_slice()[range].copy_from_slice(v.as_slice());
    };
    match (layout.scheme, rom) {
        (Scheme::Full | Scheme::DiagM, DecodedRom::Unstructured(sys)) => {
            if sys.dims() != (layout.r, layout.m, layout.p) {
                return Err(Error::DimensionMismatch(format!(
                    "system dims {:?} do not match layout ({}, {}, {})",
                    sys.dims(),
                    layout.r,
                    layout.m,
                    layout.p
                )));
            }
            put(layout.a_range(), &vec_apply(sys.a()));
            put(layout.b_range(), &vec_apply(sys.b()));
            put(layout.c_range(), &vec_apply(sys.c()));
            put(layout.d_range(), &vec_apply(sys.d()));
            for i in 0..layout.p {
                let mi = sys.m_quad(i);
                let enc = match layout.scheme {
                    Scheme::Full => hvec_apply(mi),
                    Scheme::DiagM => {
                        let diag = mi.diagonal();
                        let off = mi - DMatrix::from_diagonal(&diag);
                        if off.amax() > 1e-12 * mi.amax().max(1.0) {
                            return Err(Error::UnsupportedStructure(format!(
                                "M[{i}] is not diagonal; cannot encode under scheme diagm"
                            )));
                        }
                        diag
                    }
                    Scheme::PhCondensed => unreachable!(),
                };
                put(layout.m_range(i), &enc);
                put(layout.p_range(i), &hvec_apply(sys.p_quad(i)));
            }
            Ok(theta)
        }
        (Scheme::PhCondensed, DecodedRom::Ph(ph)) => {
            if ph.r() != layout.r || ph.b.ncols() != layout.m {
                return Err(Error::DimensionMismatch(format!(
                    "pH ROM dims (r = {}, m = {}) do not match layout ({}, {})",
                    ph.r(),
                    ph.b.ncols(),
                    layout.r,
                    layout.m
                )));
            }
            put(layout.j_range(), &ph.theta_j);
            put(layout.rdiag_range(), &ph.theta_r.abs());
            put(layout.b_range(), &vec_apply(&ph.b));
            Ok(theta)
        }
        _ => Err(Error::UnsupportedStructure(format!(
            "model kind does not match scheme {}",
            layout.scheme
        ))),
    }
}

// ---------------------------------------------------------------------------
// Gradient chain rules through the parametrizations
// ---------------------------------------------------------------------------

/// Chains a gradient matrix `∂f/∂Â` into the pH coordinates:
/// returns `(∂f/∂θ_J, ∂f/∂θ_R)`.
///
/// `Ĵ = Uᵀ − U` gives `∂f/∂θ_J = sutv(Gᵀ − G)`; `R̂ = diag(θ_R²)` gives
/// `∂f/∂θ_R = −2 θ_R ⊙ diag(G)` (the minus from `Â = Ĵ − R̂`).
pub fn chain_a_grad_ph(g_a: &DMatrix<f64>, theta_r: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let g_j = sutv_apply(&(g_a.transpose() - g_a));
    let g_r = DVector::from_fn(theta_r.len(), |i, _| -2.0 * theta_r[i] * g_a[(i, i)]);
    (g_j, g_r)
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Draws a starting point.
///
/// Dense schemes: `Â = S − 1.1 ‖S‖₂ I` with `S` standard normal (stable with
/// margin), every other segment standard normal; when
/// `zero_linear_output` is set (the full model has no linear output part),
/// `θ_C` and `θ_D` start at zero and provably stay there under gradient
/// descent. pH scheme: `θ_J`, `θ_B` standard normal, `θ_R = |N(0,1)|`.
pub fn init_theta<Rng: rand::Rng + ?Sized>(
    layout: &ThetaLayout,
    zero_linear_output: bool,
    rng: &mut Rng,
) -> DVector<f64> {
    let mut theta = DVector::from_fn(layout.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    match layout.scheme {
        Scheme::Full | Scheme::DiagM => {
            let r = layout.r;
            let s = DMatrix::from_fn(r, r, |_, _| rng.sample::<f64, _>(StandardNormal));
            let norm = s.clone().svd(false, false).singular_values[0];
            let a = &s - DMatrix::identity(r, r) * (1.1 * norm);
            theta.as_mut_slice()[layout.a_range()].copy_from_slice(vec_apply(&a).as_slice());
            if zero_linear_output {
                theta.as_mut_slice()[layout.c_range()].fill(0.0);
                theta.as_mut_slice()[layout.d_range()].fill(0.0);
            }
        }
        Scheme::PhCondensed => {
            for k in layout.rdiag_range() {
                theta[k] = theta[k].abs();
            }
        }
    }
    theta
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn vec_is_column_major() {
        let m = dmatrix![1.0, 2.0; 3.0, 4.0];
        assert_eq!(vec_apply(&m).as_slice(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(unvec_apply(&vec_apply(&m), 2, 2), m);
    }

    #[test]
    fn commutation_transposes() {
        let m = dmatrix![1.0, 2.0, 3.0; 4.0, 5.0, 6.0];
        let v = vec_apply(&m);
        let vt = commutation_apply(&v, 2, 3);
        assert_eq!(vt, vec_apply(&m.transpose()));
    }

    #[test]
    fn hvec_upper_column_major() {
        let m = dmatrix![1.0, 2.0; 2.0, 4.0];
        assert_eq!(hvec_apply(&m).as_slice(), &[1.0, 2.0, 4.0]);
        let m3 = dmatrix![1.0, 2.0, 4.0; 2.0, 3.0, 5.0; 4.0, 5.0, 6.0];
        assert_eq!(
            hvec_apply(&m3).as_slice(),
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
        );
    }

    #[test]
    fn duplication_frozen_example() {
        let h = dvector![1.0, 2.0, 3.0];
        assert_eq!(duplication_apply(&h, 2).as_slice(), &[1.0, 2.0, 2.0, 3.0]);
    }

    #[test]
    fn duplication_adjoint_frozen_example() {
        // Full-matrix gradient [[1,2],[3,4]] (column-major (1,3,2,4)):
        // off-diagonal pair sums to 5.
        let g = vec_apply(&dmatrix![1.0, 2.0; 3.0, 4.0]);
        assert_eq!(duplication_adjoint(&g, 2).as_slice(), &[1.0, 5.0, 4.0]);
    }

    #[test]
    fn duplication_adjoint_is_transpose() {
        // <D h, g> = <h, Dᵀ g> for all h, g.
        let n = 3;
        let h = dvector![1.0, -2.0, 0.5, 3.0, -1.5, 2.5];
        let g = DVector::from_fn(n * n, |i, _| (i as f64 + 1.0) * 0.7 - 3.0);
        let lhs = duplication_apply(&h, n).dot(&g);
        let rhs = h.dot(&duplication_adjoint(&g, n));
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn diag_embed_frozen_examples() {
        let d = dvector![7.0, 8.0];
        assert_eq!(diag_embed_apply(&d).as_slice(), &[7.0, 0.0, 0.0, 8.0]);
        let g = vec_apply(&dmatrix![1.0, 2.0; 3.0, 4.0]);
        assert_eq!(diag_embed_adjoint(&g, 2).as_slice(), &[1.0, 4.0]);
    }

    #[test]
    fn sutv_order_and_inverse() {
        let m = dmatrix![0.0, 1.0, 2.0; 0.0, 0.0, 3.0; 0.0, 0.0, 0.0];
        assert_eq!(sutv_apply(&m).as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(vtsu_apply(&dvector![1.0, 2.0, 3.0], 3), m);
    }

    #[test]
    fn layout_lengths_frozen() {
        let full = ThetaLayout::new(Scheme::Full, 2, 1, 1).unwrap();
        assert_eq!(full.a_range().len(), 4);
        assert_eq!(full.b_range().len(), 2);
        assert_eq!(full.m_range(0).len(), 3);
        assert_eq!(full.c_range().len(), 2);
        assert_eq!(full.d_range().len(), 1);
        assert_eq!(full.p_range(0).len(), 1);
        assert_eq!(full.len(), 13);

        let diagm = ThetaLayout::new(Scheme::DiagM, 2, 1, 1).unwrap();
        assert_eq!(diagm.m_range(0).len(), 2);
        assert_eq!(diagm.len(), 12);

        let ph = ThetaLayout::new(Scheme::PhCondensed, 4, 2, 3).unwrap();
        assert_eq!(ph.j_range().len(), 6);
        assert_eq!(ph.rdiag_range().len(), 4);
        assert_eq!(ph.b_range().len(), 8);
        assert_eq!(ph.len(), 18);
    }

    #[test]
    fn layout_length_formulas() {
        for r in 1..=6 {
            for m in 1..=3 {
                for p in 1..=3 {
                    let full = ThetaLayout::new(Scheme::Full, r, m, p).unwrap();
                    let expected = r * r + r * m + p * (r * (r + 1) / 2 + r + m + m * (m + 1) / 2);
                    assert_eq!(full.len(), expected);
                    assert_eq!(full.p_range(p - 1).end, full.len());

                    let diagm = ThetaLayout::new(Scheme::DiagM, r, m, p).unwrap();
                    assert_eq!(
                        diagm.len(),
                        r * r + r * (m + 2 * p) + p * (m + m * (m + 1) / 2)
                    );
                }
                let ph = ThetaLayout::new(Scheme::PhCondensed, r, m, m + 1).unwrap();
                assert_eq!(ph.len(), r * (r - 1) / 2 + r + r * m);
            }
        }
    }

    #[test]
    fn ph_layout_requires_matching_outputs() {
        assert!(ThetaLayout::new(Scheme::PhCondensed, 3, 2, 2).is_err());
        assert!(ThetaLayout::new(Scheme::PhCondensed, 3, 2, 3).is_ok());
    }

    #[test]
    fn ph_j_orientation_frozen() {
        // θ_J = (a) for r = 2 yields Ĵ = [[0, −a], [a, 0]].
        let ph = PhRom {
            theta_j: dvector![2.0],
            theta_r: dvector![0.0, 0.0],
            b: DMatrix::zeros(2, 1),
        };
        let j = ph.j();
        assert_eq!(j[(0, 1)], -2.0);
        assert_eq!(j[(1, 0)], 2.0);
        assert_eq!(j[(0, 0)], 0.0);
    }

    #[test]
    fn ph_r_is_squared_diagonal() {
        let ph = PhRom {
            theta_j: dvector![0.0],
            theta_r: dvector![2.0, -3.0],
            b: DMatrix::zeros(2, 1),
        };
        let r = ph.r_mat();
        assert_eq!(r[(0, 0)], 4.0);
        assert_eq!(r[(1, 1)], 9.0);
        assert_eq!(r[(0, 1)], 0.0);
    }

    #[test]
    fn ph_rom_is_stable_by_construction() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(42);
        for _ in 0..10 {
            let layout = ThetaLayout::new(Scheme::PhCondensed, 4, 2, 3).unwrap();
            let theta = init_theta(&layout, false, &mut rng);
            let rom = decode(&layout, &theta).unwrap();
            let sys = rom.to_ltiqo();
            assert!(crate::model::spectral_abscissa(sys.a()) <= 1e-12);
        }
    }

    #[test]
    fn dense_init_is_stable() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        for _ in 0..10 {
            let layout = ThetaLayout::new(Scheme::Full, 5, 2, 1).unwrap();
            let theta = init_theta(&layout, false, &mut rng);
            let rom = decode(&layout, &theta).unwrap();
            assert!(crate::model::spectral_abscissa(rom.to_ltiqo().a()) < 0.0);
        }
    }

    #[test]
    fn init_zeroes_linear_output_when_asked() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let layout = ThetaLayout::new(Scheme::DiagM, 3, 2, 1).unwrap();
        let theta = init_theta(&layout, true, &mut rng);
        assert!(theta.as_slice()[layout.c_range()].iter().all(|&x| x == 0.0));
        assert!(theta.as_slice()[layout.d_range()].iter().all(|&x| x == 0.0));
        assert!(theta.as_slice()[layout.b_range()].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn chain_a_grad_ph_matches_componentwise() {
        let g = dmatrix![1.0, 2.0; 3.0, 4.0];
        let theta_r = dvector![0.5, -1.5];
        let (gj, gr) = chain_a_grad_ph(&g, &theta_r);
        // d/dθ_J with Ĵ(0,1) = −θ, Ĵ(1,0) = +θ: g(1,0) − g(0,1) = 1.
        assert_eq!(gj.as_slice(), &[1.0]);
        assert_eq!(gr.as_slice(), &[-2.0 * 0.5 * 1.0, -2.0 * -1.5 * 4.0]);
    }

    fn arb_theta(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-5.0f64..5.0, len)
    }

    proptest! {
        #[test]
        fn decode_encode_round_trip_full(vals in arb_theta(13)) {
            let layout = ThetaLayout::new(Scheme::Full, 2, 1, 1).unwrap();
            let theta = DVector::from_vec(vals);
            let rom = decode(&layout, &theta).unwrap();
            let back = encode(&layout, &rom).unwrap();
            prop_assert!((&back - &theta).amax() < 1e-14);
        }

        #[test]
        fn decode_encode_round_trip_diagm(vals in arb_theta(12)) {
            let layout = ThetaLayout::new(Scheme::DiagM, 2, 1, 1).unwrap();
            let theta = DVector::from_vec(vals);
            let rom = decode(&layout, &theta).unwrap();
            let back = encode(&layout, &rom).unwrap();
            prop_assert!((&back - &theta).amax() < 1e-14);
        }

        #[test]
        fn decode_encode_round_trip_ph(vals in arb_theta(3 + 3 + 6)) {
            let layout = ThetaLayout::new(Scheme::PhCondensed, 3, 2, 3).unwrap();
            let theta = DVector::from_vec(vals);
            let rom = decode(&layout, &theta).unwrap();
            let back = encode(&layout, &rom).unwrap();
            // θ_R is canonicalized to |θ_R|; the realized model is identical.
            for k in 0..theta.len() {
                if layout.rdiag_range().contains(&k) {
                    prop_assert!((back[k] - theta[k].abs()).abs() < 1e-14);
                } else {
                    prop_assert!((back[k] - theta[k]).abs() < 1e-14);
                }
            }
            let again = decode(&layout, &back).unwrap();
            match (rom, again) {
                (DecodedRom::Ph(p1), DecodedRom::Ph(p2)) => {
                    prop_assert!((p1.r_mat() - p2.r_mat()).amax() < 1e-14);
                    prop_assert!((p1.j() - p2.j()).amax() < 1e-14);
                }
                _ => prop_assert!(false),
            }
        }

        #[test]
        fn duplication_round_trip(vals in arb_theta(6)) {
            let h = DVector::from_vec(vals);
            let full = duplication_apply(&h, 3);
            let mat = unvec_apply(&full, 3, 3);
            prop_assert!((&mat - mat.transpose()).amax() == 0.0);
            let back = hvec_apply(&mat);
            prop_assert!((&back - &h).amax() == 0.0);
        }
    }

    #[test]
    fn decode_rejects_wrong_length() {
        let layout = ThetaLayout::new(Scheme::Full, 2, 1, 1).unwrap();
        assert!(decode(&layout, &DVector::zeros(12)).is_err());
    }

    #[test]
    fn decode_rejects_non_finite() {
        let layout = ThetaLayout::new(Scheme::Full, 2, 1, 1).unwrap();
        let mut theta = DVector::zeros(13);
        theta[5] = f64::NAN;
        assert!(decode(&layout, &theta).is_err());
    }

    #[test]
    fn encode_rejects_offdiagonal_m_under_diagm() {
        let layout = ThetaLayout::new(Scheme::DiagM, 2, 1, 1).unwrap();
        let sys = LtiqoSystem::new(
            -DMatrix::identity(2, 2),
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::zeros(1, 2),
            DMatrix::zeros(1, 1),
            vec![dmatrix![1.0, 0.5; 0.5, 2.0]],
            vec![DMatrix::zeros(1, 1)],
        )
        .unwrap();
        assert!(encode(&layout, &DecodedRom::Unstructured(sys)).is_err());
    }
}
