//! System types: general LTIQO systems, port-Hamiltonian quadratic-output
//! (pHQO) systems, validation, the FOM−ROM error system, and the condensed
//! pH state transform.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Version tag for all JSON exchange documents.
pub const FORMAT_VERSION: u32 = 1;

/// Linear time-invariant system with quadratic output:
///
/// ```text
///   x' = A x + B u,    y_i = x'Mᵢx + (Cx)ᵢ + u'Pᵢu + (Du)ᵢ.
/// ```
///
/// `Mᵢ` and `Pᵢ` are symmetrized on construction (symmetry is without loss
/// of generality for quadratic forms); asymmetry defects are recorded and
/// surfaced by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct LtiqoSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
    m_quad: Vec<DMatrix<f64>>,
    p_quad: Vec<DMatrix<f64>>,
    symmetry_defects: Vec<(String, f64)>,
}

fn symmetrize(x: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (x + x.transpose()) * 0.5;
    let scale = x.amax().max(1.0);
    let defect = (x - x.transpose()).amax() / scale;
    (sym, defect)
}

impl LtiqoSystem {
    /// Builds a system, checking dimensional consistency and symmetrizing
    /// every `Mᵢ` and `Pᵢ`.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        m_quad: Vec<DMatrix<f64>>,
        p_quad: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        let p = c.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "B must have {} rows, got {}",
                n,
                b.nrows()
            )));
        }
        if c.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "C must have {} columns, got {}",
                n,
                c.ncols()
            )));
        }
        if d.nrows() != p || d.ncols() != m {
            return Err(Error::DimensionMismatch(format!(
                "D must be {}x{}, got {}x{}",
                p,
                m,
                d.nrows(),
                d.ncols()
            )));
        }
        if m_quad.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "expected {} state-quadratic matrices, got {}",
                p,
                m_quad.len()
            )));
        }
        if p_quad.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "expected {} input-quadratic matrices, got {}",
                p,
                p_quad.len()
            )));
        }
        let mut defects = Vec::new();
        let mut m_sym = Vec::with_capacity(p);
        for (i, mi) in m_quad.into_iter().enumerate() {
            if mi.nrows() != n || mi.ncols() != n {
                return Err(Error::DimensionMismatch(format!(
                    "M[{}] must be {}x{}, got {}x{}",
                    i,
                    n,
                    n,
                    mi.nrows(),
                    mi.ncols()
                )));
            }
            let (sym, defect) = symmetrize(&mi);
            defects.push((format!("M[{i}]"), defect));
            m_sym.push(sym);
        }
        let mut p_sym = Vec::with_capacity(p);
        for (i, pi) in p_quad.into_iter().enumerate() {
            if pi.nrows() != m || pi.ncols() != m {
                return Err(Error::DimensionMismatch(format!(
                    "P[{}] must be {}x{}, got {}x{}",
                    i,
                    m,
                    m,
                    pi.nrows(),
                    pi.ncols()
                )));
            }
            let (sym, defect) = symmetrize(&pi);
            defects.push((format!("P[{i}]"), defect));
            p_sym.push(sym);
        }
        Ok(Self {
            a,
            b,
            c,
            d,
            m_quad: m_sym,
            p_quad: p_sym,
            symmetry_defects: defects,
        })
    }

    /// State dimension `n`.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Input dimension `m`.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// Output dimension `p`.
    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    /// `(n, m, p)` in one call.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n(), self.m(), self.p())
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    /// State-quadratic matrix of output `i`.
    pub fn m_quad(&self, i: usize) -> &DMatrix<f64> {
        &self.m_quad[i]
    }

    /// Input-quadratic matrix of output `i`.
    pub fn p_quad(&self, i: usize) -> &DMatrix<f64> {
        &self.p_quad[i]
    }

    pub fn m_quads(&self) -> &[DMatrix<f64>] {
        &self.m_quad
    }

    pub fn p_quads(&self) -> &[DMatrix<f64>] {
        &self.p_quad
    }

    /// True when some output has a nonzero `Mᵢ` or `Pᵢ`.
    pub fn has_quadratic_part(&self) -> bool {
        !self.quadratic_output_indices().is_empty()
    }

    /// True when `C` or `D` has a nonzero entry.
    pub fn has_linear_part(&self) -> bool {
        self.c.amax() > 0.0 || self.d.amax() > 0.0
    }

    /// Output indices whose `Mᵢ` or `Pᵢ` is nonzero.
    pub fn quadratic_output_indices(&self) -> Vec<usize> {
        (0..self.p())
            .filter(|&i| self.m_quad[i].amax() > 0.0 || self.p_quad[i].amax() > 0.0)
            .collect()
    }
}

/// Maximum real part of the eigenvalues of `a`; negative means
/// asymptotically stable.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return f64::NEG_INFINITY;
    }
    a.clone()
        .schur()
        .complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Diagnostic report for [`validate`].
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub stable: bool,
    pub spectral_abscissa: f64,
    /// Asymmetry of each `Mᵢ`/`Pᵢ` as recorded at construction (relative to
    /// the matrix scale).
    pub symmetry_defects: Vec<(String, f64)>,
    pub messages: Vec<String>,
}

/// Checks stability and reports construction-time symmetry defects.
///
/// Diagnostic only: it never fails; callers that need stability decide from
/// the flag.
pub fn validate(sys: &LtiqoSystem) -> ValidationReport {
    let alpha = spectral_abscissa(&sys.a);
    let mut messages = Vec::new();
    if alpha >= 0.0 {
        messages.push(format!(
            "A is not asymptotically stable (spectral abscissa {alpha:.6e})"
        ));
    }
    for (name, defect) in &sys.symmetry_defects {
        if *defect > 1e-8 {
            messages.push(format!(
                "{name} was asymmetric (relative defect {defect:.3e}); symmetrized"
            ));
        }
    }
    ValidationReport {
        stable: alpha < 0.0,
        spectral_abscissa: alpha,
        symmetry_defects: sys.symmetry_defects.clone(),
        messages,
    }
}

/// Port-Hamiltonian system with the Hamiltonian appended as a quadratic
/// output:
///
/// ```text
///   x' = (J − R) Q x + B u,
///   y  = [ B'Q x ; ½ x'Q x ].
/// ```
///
/// `J` is stored by its strictly-upper triangle so skew-symmetry is exact by
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PhqoSystem {
    n: usize,
    j_upper: Vec<f64>,
    r: DMatrix<f64>,
    q: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl PhqoSystem {
    /// Builds from a full (possibly slightly unskew) `J`; the skew part
    /// `(J − Jᵀ)/2` is kept. `R` and `Q` are symmetrized.
    pub fn new(
        j: DMatrix<f64>,
        r: DMatrix<f64>,
        q: DMatrix<f64>,
        b: DMatrix<f64>,
    ) -> Result<Self> {
        let n = j.nrows();
        if j.ncols() != n {
            return Err(Error::DimensionMismatch("J must be square".into()));
        }
        let skew = (&j - j.transpose()) * 0.5;
        let j_upper = crate::param::sutv_apply(&skew);
        Self::from_upper(n, j_upper.as_slice().to_vec(), r, q, b)
    }

    /// Builds from the strictly-upper triangle of `J` (column-major order,
    /// as produced by [`crate::param::sutv_apply`]).
    pub fn from_upper(
        n: usize,
        j_upper: Vec<f64>,
        r: DMatrix<f64>,
        q: DMatrix<f64>,
        b: DMatrix<f64>,
    ) -> Result<Self> {
        if j_upper.len() != n * (n - 1) / 2 {
            return Err(Error::DimensionMismatch(format!(
                "J upper triangle must have {} entries for n = {}, got {}",
                n * (n - 1) / 2,
                n,
                j_upper.len()
            )));
        }
        if r.nrows() != n || r.ncols() != n {
            return Err(Error::DimensionMismatch("R must be n x n".into()));
        }
        if q.nrows() != n || q.ncols() != n {
            return Err(Error::DimensionMismatch("Q must be n x n".into()));
        }
        if b.nrows() != n {
            return Err(Error::DimensionMismatch("B must have n rows".into()));
        }
        let (r_sym, _) = symmetrize(&r);
        let (q_sym, _) = symmetrize(&q);
        Ok(Self {
            n,
            j_upper,
            r: r_sym,
            q: q_sym,
            b,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// Reconstructs the full skew-symmetric `J`.
    pub fn j(&self) -> DMatrix<f64> {
        let u = crate::param::vtsu_apply(
            &nalgebra::DVector::from_column_slice(&self.j_upper),
            self.n,
        );
        &u - u.transpose()
    }

    /// Strictly-upper triangle of `J` in column-major order.
    pub fn j_upper(&self) -> &[f64] {
        &self.j_upper
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// System matrix `A = (J − R) Q`.
    pub fn a(&self) -> DMatrix<f64> {
        (self.j() - &self.r) * &self.q
    }

    /// Converts to the general form: `p = m + 1` outputs, the first `m`
    /// linear (`B'Q x`) and the last purely quadratic (Hamiltonian, `M = ½Q`).
    /// `D` and every `Pᵢ` are zero.
    pub fn to_ltiqo(&self) -> LtiqoSystem {
        let n = self.n;
        let m = self.m();
        let p = m + 1;
        let a = self.a();
        let mut c = DMatrix::zeros(p, n);
        let bt_q = self.b.transpose() * &self.q;
        c.view_mut((0, 0), (m, n)).copy_from(&bt_q);
        let d = DMatrix::zeros(p, m);
        let mut m_quad = vec![DMatrix::zeros(n, n); p];
        m_quad[m] = &self.q * 0.5;
        let p_quad = vec![DMatrix::zeros(m, m); p];
        LtiqoSystem::new(a, self.b.clone(), c, d, m_quad, p_quad)
            .expect("pH conversion produces consistent dimensions")
    }

    /// Index of the quadratic (Hamiltonian) output in the converted system.
    pub fn quadratic_output_index(&self) -> usize {
        self.m()
    }
}

/// Equivalent realization with `Q = I` and diagonal `R`.
///
/// With `Q = LLᵀ` (Cholesky) and `Φ` an orthogonal eigenbasis of `LᵀRL`,
/// the state transform `x = L⁻ᵀΦ x̃` yields `J̃ = Φᵀ(LᵀJL)Φ`,
/// `R̃ = diag(eigenvalues)`, `B̃ = ΦᵀLᵀB`, `Q̃ = I`; the input-output map is
/// unchanged.
pub fn condense_ph(ph: &PhqoSystem) -> Result<PhqoSystem> {
    let n = ph.n();
    let chol = ph
        .q
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { name: "Q" })?;
    let l = chol.l();
    let lt_r_l = l.transpose() * &ph.r * &l;
    let eig = nalgebra::SymmetricEigen::new((&lt_r_l + lt_r_l.transpose()) * 0.5);
    let phi = eig.eigenvectors;
    let j_tilde = phi.transpose() * (l.transpose() * ph.j() * &l) * &phi;
    let r_tilde = DMatrix::from_diagonal(&eig.eigenvalues);
    let b_tilde = phi.transpose() * (l.transpose() * &ph.b);
    PhqoSystem::new(j_tilde, r_tilde, DMatrix::identity(n, n), b_tilde)
}

/// LTIQO system whose output is `y − ŷ`: block-diagonal dynamics, stacked
/// inputs, and signed output blocks.
pub fn build_error_system(fom: &LtiqoSystem, rom: &LtiqoSystem) -> Result<LtiqoSystem> {
    if fom.m() != rom.m() {
        return Err(Error::DimensionMismatch(format!(
            "input dimensions differ: {} vs {}",
            fom.m(),
            rom.m()
        )));
    }
    if fom.p() != rom.p() {
        return Err(Error::DimensionMismatch(format!(
            "output dimensions differ: {} vs {}",
            fom.p(),
            rom.p()
        )));
    }
    let (n, m, p) = fom.dims();
    let r = rom.n();
    let nt = n + r;
    let mut a = DMatrix::zeros(nt, nt);
    a.view_mut((0, 0), (n, n)).copy_from(fom.a());
    a.view_mut((n, n), (r, r)).copy_from(rom.a());
    let mut b = DMatrix::zeros(nt, m);
    b.view_mut((0, 0), (n, m)).copy_from(fom.b());
    b.view_mut((n, 0), (r, m)).copy_from(rom.b());
    let mut c = DMatrix::zeros(p, nt);
    c.view_mut((0, 0), (p, n)).copy_from(fom.c());
    c.view_mut((0, n), (p, r)).copy_from(&(-rom.c()));
    let d = fom.d() - rom.d();
    let mut m_quad = Vec::with_capacity(p);
    let mut p_quad = Vec::with_capacity(p);
    for i in 0..p {
        let mut mi = DMatrix::zeros(nt, nt);
        mi.view_mut((0, 0), (n, n)).copy_from(fom.m_quad(i));
        mi.view_mut((n, n), (r, r)).copy_from(&(-rom.m_quad(i)));
        m_quad.push(mi);
        p_quad.push(fom.p_quad(i) - rom.p_quad(i));
    }
    LtiqoSystem::new(a, b, c, d, m_quad, p_quad)
}

// ---------------------------------------------------------------------------
// JSON exchange format
// ---------------------------------------------------------------------------

fn mat_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn rows_to_mat(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::DimensionMismatch(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

/// Serialized general system (`"kind": "ltiqo"`). Matrices are row-major
/// nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LtiqoJson {
    pub format: u32,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub m_quad: Vec<Vec<Vec<f64>>>,
    pub p_quad: Vec<Vec<Vec<f64>>>,
}

/// Serialized pH system (`"kind": "phqo"`). `j_upper` is the strictly-upper
/// triangle of `J` in column-major order: (0,1), (0,2), (1,2), ...
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhqoJson {
    pub format: u32,
    pub n: usize,
    pub m: usize,
    pub j_upper: Vec<f64>,
    pub r: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

/// Tagged union for system files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SystemJson {
    Ltiqo(LtiqoJson),
    Phqo(PhqoJson),
}

/// A loaded system of either kind.
#[derive(Debug, Clone)]
pub enum AnySystem {
    Ltiqo(LtiqoSystem),
    Phqo(PhqoSystem),
}

impl AnySystem {
    /// View as a general LTIQO system (converting pH data if needed).
    pub fn to_ltiqo(&self) -> LtiqoSystem {
        match self {
            AnySystem::Ltiqo(s) => s.clone(),
            AnySystem::Phqo(ph) => ph.to_ltiqo(),
        }
    }
}

impl LtiqoSystem {
    pub fn to_json(&self) -> SystemJson {
        SystemJson::Ltiqo(LtiqoJson {
            format: FORMAT_VERSION,
            n: self.n(),
            m: self.m(),
            p: self.p(),
            a: mat_to_rows(&self.a),
            b: mat_to_rows(&self.b),
            c: mat_to_rows(&self.c),
            d: mat_to_rows(&self.d),
            m_quad: self.m_quad.iter().map(mat_to_rows).collect(),
            p_quad: self.p_quad.iter().map(mat_to_rows).collect(),
        })
    }
}

impl PhqoSystem {
    pub fn to_json(&self) -> SystemJson {
        SystemJson::Phqo(PhqoJson {
            format: FORMAT_VERSION,
            n: self.n,
            m: self.m(),
            j_upper: self.j_upper.clone(),
            r: mat_to_rows(&self.r),
            q: mat_to_rows(&self.q),
            b: mat_to_rows(&self.b),
        })
    }
}

impl SystemJson {
    /// Validates the format tag and dimensions, returning the system.
    pub fn into_system(self) -> Result<AnySystem> {
        match self {
            SystemJson::Ltiqo(doc) => {
                if doc.format != FORMAT_VERSION {
                    return Err(Error::InvalidConfig(format!(
                        "unsupported format {} (expected {})",
                        doc.format, FORMAT_VERSION
                    )));
                }
                let a = rows_to_mat(&doc.a, "A")?;
                let b = rows_to_mat(&doc.b, "B")?;
                let c = rows_to_mat(&doc.c, "C")?;
                let d = rows_to_mat(&doc.d, "D")?;
                let m_quad = doc
                    .m_quad
                    .iter()
                    .map(|m| rows_to_mat(m, "M"))
                    .collect::<Result<Vec<_>>>()?;
                let p_quad = doc
                    .p_quad
                    .iter()
                    .map(|m| rows_to_mat(m, "P"))
                    .collect::<Result<Vec<_>>>()?;
                let sys = LtiqoSystem::new(a, b, c, d, m_quad, p_quad)?;
                if sys.dims() != (doc.n, doc.m, doc.p) {
                    return Err(Error::DimensionMismatch(format!(
                        "declared dims ({}, {}, {}) do not match matrices {:?}",
                        doc.n,
                        doc.m,
                        doc.p,
                        sys.dims()
                    )));
                }
                Ok(AnySystem::Ltiqo(sys))
            }
            SystemJson::Phqo(doc) => {
                if doc.format != FORMAT_VERSION {
                    return Err(Error::InvalidConfig(format!(
                        "unsupported format {} (expected {})",
                        doc.format, FORMAT_VERSION
                    )));
                }
                let r = rows_to_mat(&doc.r, "R")?;
                let q = rows_to_mat(&doc.q, "Q")?;
                let b = rows_to_mat(&doc.b, "B")?;
                let ph = PhqoSystem::from_upper(doc.n, doc.j_upper, r, q, b)?;
                if ph.m() != doc.m {
                    return Err(Error::DimensionMismatch(format!(
                        "declared m = {} does not match B with {} columns",
                        doc.m,
                        ph.m()
                    )));
                }
                Ok(AnySystem::Phqo(ph))
            }
        }
    }
}
