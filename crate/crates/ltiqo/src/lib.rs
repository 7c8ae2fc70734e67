//! H-infinity analysis and reduced-order modeling for linear time-invariant
//! systems with quadratic outputs (LTIQO).
//!
//! An LTIQO system is
//!
//! ```text
//!   x'(t) = A x(t) + B u(t),            x(0) = 0,
//!   y_i(t) = x'Mᵢx + (Cx)ᵢ + u'Pᵢu + (Du)ᵢ,   i = 1..p,
//! ```
//!
//! with stable `A` and symmetric `Mᵢ`, `Pᵢ`. Its input-output behaviour is
//! captured by a linear transfer function `G₁(s)` together with a family of
//! quadratic kernels `K_j(s₁,s₂)`, and the associated H∞ norm bounds the
//! L₂-to-L₂ gain with one term linear and one quadratic in `‖u‖₂`.
//!
//! The crate provides:
//!
//! * [`model`] — system types (general and port-Hamiltonian), validation,
//!   error-system construction and the condensed pH transform;
//! * [`transfer`] — evaluation of `G₁`, `G₂`, `K_j` and a sampling-based
//!   H∞ estimator with local refinement;
//! * [`param`] — flat parameter vectors for three ROM structures (full,
//!   diagonal-M, condensed port-Hamiltonian) and the structural linear maps
//!   (vec/hvec/strict-upper, commutation, duplication, diagonal embedding);
//! * [`grad`] — analytic derivatives of error singular values and of
//!   `‖K_err‖²_F` with respect to every parameter segment;
//! * [`objective`] — the leveled least-squares objective and its gradient;
//! * [`optimizer`] — the level-bisection outer loop with adaptive frequency
//!   sampling and an inner BFGS minimizer;
//! * [`timedomain`] — RK4 simulation, L₂ norms, and gain-bound checks;
//! * [`bench`] — mass-spring-damper benchmark generators and experiment
//!   sweeps emitting CSV artifacts.

pub mod bench;
pub mod error;
pub mod grad;
pub mod model;
pub mod objective;
pub mod optimizer;
pub mod param;
pub mod timedomain;
pub mod transfer;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
