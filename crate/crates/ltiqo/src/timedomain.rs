//! Time-domain simulation, `L₂` norms over a finite horizon, and checks of
//! the input-output gain bound
//! `‖y − ŷ‖₂ ≤ ‖G₁ₑ‖_{H∞} ‖u‖₂ + ‖G₂ₑ‖_{H∞} ‖u‖₂²`.
//!
//! Integration is classical fixed-step fourth-order Runge–Kutta on the
//! state equation with `x(0) = 0`; outputs are assembled pointwise. The
//! default step resolves the smooth, slow test-input family used by the
//! benchmark experiments.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LtiqoSystem;
use crate::transfer::HinfEstimate;

/// Uniformly sampled vector-valued signal on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
}

impl Signal {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Components per sample.
    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, |v| v.len())
    }

    /// Grid spacing (zero for signals with fewer than two samples).
    pub fn dt(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            self.times[1] - self.times[0]
        }
    }

    /// Pointwise difference; both signals must share grid and dimension.
    pub fn sub(&self, other: &Signal) -> Result<Signal> {
        if self.times.len() != other.times.len() || self.dim() != other.dim() {
            return Err(Error::DimensionMismatch(
                "signals differ in grid length or dimension".into(),
            ));
        }
        Ok(Signal {
            times: self.times.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    /// Writes `t,y1,…,yk` rows.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim()).map(|i| format!("y{i}")));
        out.write_record(&header)?;
        for (t, v) in self.times.iter().zip(&self.values) {
            let mut row = vec![format!("{t:.17e}")];
            row.extend(v.iter().map(|x| format!("{x:.17e}")));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Default integrator step: `min(0.01, 0.05/ω_max)` for the fastest input
/// angular frequency `ω_max` (pass 0 when unknown).
pub fn default_dt(omega_max: f64) -> f64 {
    if omega_max > 0.0 {
        (0.05 / omega_max).min(1e-2)
    } else {
        1e-2
    }
}

/// Integrates `ẋ = Ax + Bu`, `x(0) = 0` with classical RK4 on a uniform
/// grid reaching exactly `t_final` (the step is shrunk to divide the
/// horizon). Returns the state and output trajectories.
pub fn simulate<F>(
    sys: &LtiqoSystem,
    u: F,
    t_final: f64,
    dt: f64,
) -> Result<(Signal, Signal)>
where
    F: Fn(f64) -> DVector<f64>,
{
    if !(dt > 0.0) || !t_final.is_finite() || t_final < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "need dt > 0 and a finite horizon, got dt = {dt}, T = {t_final}"
        )));
    }
    let n_steps = if t_final == 0.0 {
        0
    } else {
        (t_final / dt - 1e-9).ceil().max(1.0) as usize
    };
    let h = if n_steps == 0 { 0.0 } else { t_final / n_steps as f64 };
    let u0 = u(0.0);
    if u0.len() != sys.m() {
        return Err(Error::DimensionMismatch(format!(
            "input has {} components, system expects {}",
            u0.len(),
            sys.m()
        )));
    }

    let a = sys.a();
    let b = sys.b();
    let deriv = |x: &DVector<f64>, uv: &DVector<f64>| a * x + b * uv;

    let mut x = DVector::zeros(sys.n());
    let mut u_t = u0;
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut outputs = Vec::with_capacity(n_steps + 1);
    times.push(0.0);
    states.push(x.clone());
    outputs.push(output_at(sys, &x, &u_t));

    for k in 0..n_steps {
        let t = k as f64 * h;
        let u_mid = u(t + 0.5 * h);
        let u_next = u((k + 1) as f64 * h);
        let k1 = deriv(&x, &u_t);
        let k2 = deriv(&(&x + &k1 * (0.5 * h)), &u_mid);
        let k3 = deriv(&(&x + &k2 * (0.5 * h)), &u_mid);
        let k4 = deriv(&(&x + &k3 * h), &u_next);
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let t_next = (k + 1) as f64 * h;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SimulationDiverged { t: t_next });
        }
        u_t = u_next;
        times.push(t_next);
        states.push(x.clone());
        outputs.push(output_at(sys, &x, &u_t));
    }
    Ok((
        Signal {
            times: times.clone(),
            values: states,
        },
        Signal {
            times,
            values: outputs,
        },
    ))
}

/// `y_i = xᵀ M_i x + (Cx)_i + uᵀ P_i u + (Du)_i`.
fn output_at(sys: &LtiqoSystem, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut y = sys.c() * x + sys.d() * u;
    for i in 0..sys.p() {
        y[i] += (x.transpose() * sys.m_quad(i) * x)[(0, 0)]
            + (u.transpose() * sys.p_quad(i) * u)[(0, 0)];
    }
    y
}

/// `(∫₀ᵀ ‖sig(t)‖² dt)^{1/2}` by composite Simpson quadrature; an odd
/// interval count is finished with the 3/8 rule on the last three
/// intervals (trapezoid when only one interval exists).
pub fn l2_norm(sig: &Signal) -> f64 {
    let g: Vec<f64> = sig.values.iter().map(|v| v.norm_squared()).collect();
    let n = g.len();
    if n < 2 {
        return 0.0;
    }
    let h = sig.dt();
    let intervals = n - 1;
    let integral = if intervals == 1 {
        0.5 * h * (g[0] + g[1])
    } else if intervals % 2 == 0 {
        simpson(&g, h)
    } else if intervals == 3 {
        simpson38_tail(&g, h, 0)
    } else {
        // Even prefix by Simpson, last three intervals by the 3/8 rule.
        let split = intervals - 3;
        simpson(&g[..=split], h) + simpson38_tail(&g, h, split)
    };
    integral.max(0.0).sqrt()
}

/// Composite Simpson over an even number of intervals.
fn simpson(g: &[f64], h: f64) -> f64 {
    let n = g.len() - 1;
    debug_assert!(n >= 2 && n % 2 == 0);
    let mut acc = g[0] + g[n];
    for (k, &v) in g.iter().enumerate().take(n).skip(1) {
        acc += if k % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    acc * h / 3.0
}

/// 3/8 rule over `g[start..start+4]`.
fn simpson38_tail(g: &[f64], h: f64, start: usize) -> f64 {
    3.0 * h / 8.0 * (g[start] + 3.0 * g[start + 1] + 3.0 * g[start + 2] + g[start + 3])
}

/// Benchmark test input `[sin(st)·cos(st), cos(st)·sin(st)]` (the two
/// components coincide); `s = 0.02` and `s = 4.1` are the standard
/// settings.
pub fn input_product_pair(s: f64) -> impl Fn(f64) -> DVector<f64> {
    move |t| {
        let v = (s * t).sin() * (s * t).cos();
        DVector::from_vec(vec![v, v])
    }
}

pub const INPUT_S1: f64 = 0.02;
pub const INPUT_S2: f64 = 4.1;

/// Two-component chirp sweeping 0 → `f_end` Hz over `[0, T]`: linear rate
/// in the first component (`sin(π f_end t²/T)`), quadratic in the second
/// (`sin(2π f_end t³/(3T²))`). Unit amplitudes.
pub fn input_chirp(t_final: f64, f_end: f64) -> impl Fn(f64) -> DVector<f64> {
    move |t| {
        let lin = (std::f64::consts::PI * f_end * t * t / t_final).sin();
        let quad =
            (2.0 * std::f64::consts::PI * f_end * t * t * t / (3.0 * t_final * t_final)).sin();
        DVector::from_vec(vec![lin, quad])
    }
}

/// Gain-bound check outcome. The H∞ parts are sampled lower bounds, so a
/// small overshoot is possible; `satisfied` applies the declared slack.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GainBoundReport {
    /// `‖y − ŷ‖₂` over the horizon.
    pub lhs: f64,
    pub u_l2: f64,
    /// `‖G₁ₑ‖·‖u‖₂ + ‖G₂ₑ‖·‖u‖₂²` from the supplied estimate.
    pub rhs: f64,
    pub tol: f64,
    /// `lhs ≤ rhs·(1 + tol)`.
    pub satisfied: bool,
}

/// Simulates both systems under the same input and compares the output
/// error energy against the theoretical gain bound assembled from
/// `hinf_parts` (the estimate for the *error* system).
pub fn check_gain_bound<F>(
    fom: &LtiqoSystem,
    rom: &LtiqoSystem,
    u: F,
    t_final: f64,
    dt: f64,
    hinf_parts: &HinfEstimate,
    tol: f64,
) -> Result<GainBoundReport>
where
    F: Fn(f64) -> DVector<f64>,
{
    if fom.p() != rom.p() || fom.m() != rom.m() {
        return Err(Error::DimensionMismatch(format!(
            "output/input dimensions differ: ({}, {}) vs ({}, {})",
            fom.m(),
            fom.p(),
            rom.m(),
            rom.p()
        )));
    }
    let (_, y_f) = simulate(fom, &u, t_final, dt)?;
    let (_, y_r) = simulate(rom, &u, t_final, dt)?;
    let err = y_f.sub(&y_r)?;
    let lhs = l2_norm(&err);
    let u_sig = Signal {
        times: y_f.times.clone(),
        values: y_f.times.iter().map(|&t| u(t)).collect(),
    };
    let u_l2 = l2_norm(&u_sig);
    let rhs = hinf_parts.gain_bound(u_l2);
    Ok(GainBoundReport {
        lhs,
        u_l2,
        rhs,
        tol,
        satisfied: lhs <= rhs * (1.0 + tol),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_error_system;
    use crate::testutil::random_stable_system;
    use crate::transfer::{hinf_estimate, HinfConfig};
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn scalar_square_system() -> LtiqoSystem {
        LtiqoSystem::new(
            dmatrix![-1.0],
            dmatrix![1.0],
            dmatrix![0.0],
            dmatrix![0.0],
            vec![dmatrix![1.0]],
            vec![dmatrix![0.0]],
        )
        .unwrap()
    }

    #[test]
    fn zero_input_zero_output() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let sys = random_stable_system(4, 2, 2, &mut rng);
        let (xs, ys) = simulate(&sys, |_| DVector::zeros(2), 5.0, 0.01).unwrap();
        assert!(xs.values.iter().all(|v| v.amax() == 0.0));
        assert!(ys.values.iter().all(|v| v.amax() == 0.0));
    }

    #[test]
    fn scalar_step_closed_form() {
        // ẋ = −x + 1 → x(t) = 1 − e^{−t}, y = x².
        let sys = scalar_square_system();
        let (_, ys) = simulate(&sys, |_| DVector::from_element(1, 1.0), 2.0, 0.01).unwrap();
        let max_err = ys
            .times
            .iter()
            .zip(&ys.values)
            .map(|(&t, y)| {
                let x = 1.0 - (-t).exp();
                (y[0] - x * x).abs()
            })
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-9, "max error {max_err:.3e}");
    }

    #[test]
    fn rk4_fourth_order_convergence() {
        let sys = scalar_square_system();
        let err_at = |dt: f64| {
            let (_, ys) = simulate(&sys, |_| DVector::from_element(1, 1.0), 2.0, dt).unwrap();
            ys.times
                .iter()
                .zip(&ys.values)
                .map(|(&t, y)| {
                    let x = 1.0 - (-t).exp();
                    (y[0] - x * x).abs()
                })
                .fold(0.0f64, f64::max)
        };
        let e1 = err_at(0.1);
        let e2 = err_at(0.05);
        let ratio = e1 / e2;
        assert!(
            (10.0..26.0).contains(&ratio),
            "halving dt gave ratio {ratio:.2} (expected ≈16)"
        );
    }

    #[test]
    fn l2_norm_constant_one() {
        // Even interval count…
        let sig = Signal {
            times: (0..=100).map(|k| k as f64 / 100.0).collect(),
            values: (0..=100).map(|_| DVector::from_element(1, 1.0)).collect(),
        };
        assert_abs_diff_eq!(l2_norm(&sig), 1.0, epsilon = 1e-13);
        // …and odd (exercises the 3/8 tail).
        let sig = Signal {
            times: (0..=101).map(|k| k as f64 / 101.0).collect(),
            values: (0..=101).map(|_| DVector::from_element(1, 1.0)).collect(),
        };
        assert_abs_diff_eq!(l2_norm(&sig), 1.0, epsilon = 1e-13);
    }

    #[test]
    fn l2_norm_sine_analytic() {
        // ∫₀^{2π} sin² = π.
        let n = 1000;
        let times: Vec<f64> = (0..=n)
            .map(|k| 2.0 * std::f64::consts::PI * k as f64 / n as f64)
            .collect();
        let values = times
            .iter()
            .map(|&t| DVector::from_element(1, t.sin()))
            .collect();
        let sig = Signal { times, values };
        assert_abs_diff_eq!(
            l2_norm(&sig),
            std::f64::consts::PI.sqrt(),
            epsilon = 1e-8
        );
    }

    #[test]
    fn simpson_vs_trapezoid_second_order_difference() {
        let make = |n: usize| {
            let times: Vec<f64> = (0..=n).map(|k| 3.0 * k as f64 / n as f64).collect();
            let values = times
                .iter()
                .map(|&t| DVector::from_element(1, (1.3 * t).sin() + 0.5 * (2.1 * t).cos()))
                .collect();
            Signal { times, values }
        };
        let trapezoid = |sig: &Signal| -> f64 {
            let g: Vec<f64> = sig.values.iter().map(|v| v.norm_squared()).collect();
            let h = sig.dt();
            let inner: f64 = g[1..g.len() - 1].iter().sum();
            (h * (0.5 * (g[0] + g[g.len() - 1]) + inner)).sqrt()
        };
        let d_coarse = (l2_norm(&make(200)) - trapezoid(&make(200))).abs();
        let d_fine = (l2_norm(&make(400)) - trapezoid(&make(400))).abs();
        let ratio = d_coarse / d_fine;
        assert!(
            (3.0..5.5).contains(&ratio),
            "halving h gave ratio {ratio:.2} (expected ≈4)"
        );
    }

    #[test]
    fn output_norm_nondecreasing_in_horizon() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let sys = random_stable_system(3, 1, 1, &mut rng);
        let (_, ys) = simulate(&sys, |t: f64| DVector::from_element(1, t.sin()), 10.0, 0.01)
            .unwrap();
        let mut last = 0.0;
        for cut in [100, 300, 500, 701, 1000] {
            let prefix = Signal {
                times: ys.times[..=cut].to_vec(),
                values: ys.values[..=cut].to_vec(),
            };
            let norm = l2_norm(&prefix);
            assert!(norm + 1e-12 >= last, "‖y‖ decreased at cut {cut}");
            last = norm;
        }
    }

    #[test]
    fn diverging_system_reports_blowup() {
        let sys = LtiqoSystem::new(
            dmatrix![300.0],
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![0.0],
            vec![dmatrix![0.0]],
            vec![dmatrix![0.0]],
        )
        .unwrap();
        let res = simulate(&sys, |_| DVector::from_element(1, 1.0), 50.0, 0.5);
        assert!(matches!(res, Err(Error::SimulationDiverged { .. })));
    }

    #[test]
    fn gain_bound_identical_systems() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let sys = random_stable_system(3, 2, 1, &mut rng);
        let err_sys = build_error_system(&sys, &sys).unwrap();
        let hinf = hinf_estimate(&err_sys, &HinfConfig::default()).unwrap();
        let rep = check_gain_bound(
            &sys,
            &sys,
            input_product_pair(INPUT_S1),
            20.0,
            0.01,
            &hinf,
            0.05,
        )
        .unwrap();
        assert!(rep.lhs < 1e-12);
        assert!(rep.satisfied);
    }

    #[test]
    fn gain_bound_scaled_inputs() {
        // Perturbed ROM: the error is genuine; the bound must hold with
        // the declared slack across input scalings.
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let fom = random_stable_system(4, 2, 1, &mut rng);
        let mut c2 = fom.c().clone();
        c2 *= 0.9;
        let mut m2 = fom.m_quad(0).clone();
        m2 *= 0.85;
        let rom = LtiqoSystem::new(
            fom.a().clone(),
            fom.b().clone(),
            c2,
            fom.d().clone(),
            vec![m2],
            vec![fom.p_quad(0).clone()],
        )
        .unwrap();
        let err_sys = build_error_system(&fom, &rom).unwrap();
        let hinf = hinf_estimate(&err_sys, &HinfConfig::default()).unwrap();
        for alpha in [0.25, 0.5, 1.0, 2.0] {
            let u = move |t: f64| {
                let base = input_product_pair(INPUT_S2)(t);
                base * alpha
            };
            let rep = check_gain_bound(&fom, &rom, u, 50.0, 0.005, &hinf, 0.05).unwrap();
            assert!(
                rep.satisfied,
                "alpha = {alpha}: lhs = {:.6e} > rhs = {:.6e}",
                rep.lhs,
                rep.rhs
            );
            assert!(rep.lhs > 0.0);
        }
    }

    #[test]
    fn chirp_inputs_start_at_zero() {
        let u = input_chirp(100.0, 2.0);
        let v0 = u(0.0);
        assert_eq!(v0, DVector::zeros(2));
        // Nontrivial later.
        assert!(u(30.0).amax() > 0.0);
    }

    #[test]
    fn csv_export_roundtrips_header() {
        let sig = Signal {
            times: vec![0.0, 0.5, 1.0],
            values: vec![
                DVector::from_vec(vec![1.0, 2.0]),
                DVector::from_vec(vec![3.0, 4.0]),
                DVector::from_vec(vec![5.0, 6.0]),
            ],
        };
        let mut buf = Vec::new();
        sig.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,y1,y2");
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn default_step_tracks_fast_inputs() {
        assert_eq!(default_dt(0.0), 1e-2);
        assert_eq!(default_dt(4.1), (0.05 / 4.1f64).min(1e-2));
        assert!(default_dt(100.0) < 1e-3);
    }

    #[test]
    fn grid_reaches_horizon_exactly() {
        let sys = scalar_square_system();
        let (xs, _) = simulate(&sys, |_| DVector::from_element(1, 1.0), 1.0, 0.3).unwrap();
        assert_eq!(*xs.times.last().unwrap(), 1.0);
        // 1.0/0.3 → 4 steps of 0.25.
        assert_eq!(xs.times.len(), 5);
    }
}
