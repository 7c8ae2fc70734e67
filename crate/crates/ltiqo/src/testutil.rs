//! Deterministic generators shared by unit tests.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::model::{LtiqoSystem, PhqoSystem};

pub(crate) fn gauss_mat(rng: &mut ChaCha20Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub(crate) fn gauss_sym(rng: &mut ChaCha20Rng, n: usize) -> DMatrix<f64> {
    let g = gauss_mat(rng, n, n);
    (&g + g.transpose()) * 0.5
}

/// Dense stable system (`A = S − 1.1‖S‖₂I`) with every output carrying both
/// linear and quadratic terms.
pub(crate) fn random_stable_system(
    n: usize,
    m: usize,
    p: usize,
    rng: &mut ChaCha20Rng,
) -> LtiqoSystem {
    let s = gauss_mat(rng, n, n);
    let norm = s.clone().svd(false, false).singular_values[0];
    let a = &s - DMatrix::identity(n, n) * (1.1 * norm);
    let b = gauss_mat(rng, n, m);
    let c = gauss_mat(rng, p, n);
    let d = gauss_mat(rng, p, m);
    let m_quad = (0..p).map(|_| gauss_sym(rng, n)).collect();
    let p_quad = (0..p).map(|_| gauss_sym(rng, m)).collect();
    LtiqoSystem::new(a, b, c, d, m_quad, p_quad).unwrap()
}

/// Random pH system: skew `J`, PSD `R` with margin, PD `Q`.
pub(crate) fn random_phqo(n: usize, m: usize, rng: &mut ChaCha20Rng) -> PhqoSystem {
    let s = gauss_mat(rng, n, n);
    let j = &s - s.transpose();
    let g = gauss_mat(rng, n, n);
    let r = &g * g.transpose() + DMatrix::identity(n, n) * 0.1;
    let f = gauss_mat(rng, n, n);
    let q = &f * f.transpose() + DMatrix::identity(n, n) * 0.5;
    let b = gauss_mat(rng, n, m);
    PhqoSystem::new(j, r, q, b).unwrap()
}
