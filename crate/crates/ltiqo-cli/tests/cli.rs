//! End-to-end tests of the `ltiqo` binary: exit codes, file artifacts, and
//! the documented determinism and round-trip guarantees.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ltiqo"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// Exactly representable FOM: a reachable scalar core padded with an
/// unreachable second state, so order-1 reduction can drive the error to
/// zero.
fn padded_fom_json() -> serde_json::Value {
    json!({
        "kind": "ltiqo",
        "format": 1,
        "n": 2, "m": 1, "p": 1,
        "a": [[-1.0, 0.0], [0.0, -2.0]],
        "b": [[1.0], [0.0]],
        "c": [[1.0, 0.0]],
        "d": [[0.0]],
        "m_quad": [[[0.5, 0.0], [0.0, 0.0]]],
        "p_quad": [[[0.2]]]
    })
}

fn zero_output_json() -> serde_json::Value {
    json!({
        "kind": "ltiqo",
        "format": 1,
        "n": 1, "m": 1, "p": 1,
        "a": [[-1.0]],
        "b": [[1.0]],
        "c": [[0.0]],
        "d": [[0.0]],
        "m_quad": [[[0.0]]],
        "p_quad": [[[0.0]]]
    })
}

/// Stable single-state system with two inputs for the simulation family.
fn two_input_json() -> serde_json::Value {
    json!({
        "kind": "ltiqo",
        "format": 1,
        "n": 1, "m": 2, "p": 1,
        "a": [[-1.0]],
        "b": [[1.0, 0.5]],
        "c": [[1.0]],
        "d": [[0.0, 0.0]],
        "m_quad": [[[0.3]]],
        "p_quad": [[[0.0, 0.0], [0.0, 0.0]]]
    })
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

#[test]
fn reduce_exact_recovery_deterministic_and_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let fom = write_json(dir.path(), "fom.json", &padded_fom_json());
    let out1 = dir.path().join("result1.json");
    let out2 = dir.path().join("result2.json");
    let trace = dir.path().join("trace.csv");

    let mut args = vec![
        "reduce",
        "--input",
        fom.to_str().unwrap(),
        "--order",
        "1",
        "--scheme",
        "full",
        "--seed",
        "1",
        "--jobs",
        "2",
        "--trace",
        trace.to_str().unwrap(),
        "--out",
    ];
    args.push(out1.to_str().unwrap());
    let first = run(&args);
    assert_eq!(
        code(&first),
        0,
        "stdout: {}\nstderr: {}",
        stdout(&first),
        stderr(&first)
    );
    assert!(stdout(&first).contains("certified gamma"));

    args.pop();
    args.push(out2.to_str().unwrap());
    let second = run(&args);
    assert_eq!(code(&second), 0);

    let bytes1 = std::fs::read(&out1).unwrap();
    let bytes2 = std::fs::read(&out2).unwrap();
    assert_eq!(bytes1, bytes2, "same seed must reproduce the result file");

    let result: ltiqo::optimizer::ReductionResult = serde_json::from_slice(&bytes1).unwrap();
    assert!(result.converged);
    assert_eq!(result.order, 1);

    // Trace CSV exists with a header and at least one iteration row.
    let trace_text = std::fs::read_to_string(&trace).unwrap();
    assert!(trace_text.lines().next().unwrap().starts_with("iteration,"));
    assert!(trace_text.lines().count() >= 2);

    // Round trip: the error estimate of FOM vs the embedded reduced model
    // is at least the optimizer's sampled maximum (both near zero here).
    let hinf = run(&[
        "hinf",
        "--input",
        fom.to_str().unwrap(),
        "--rom",
        out1.to_str().unwrap(),
        "--json",
    ]);
    assert_eq!(code(&hinf), 0, "stderr: {}", stderr(&hinf));
    let est: serde_json::Value = serde_json::from_str(&stdout(&hinf)).unwrap();
    let total = est["total"].as_f64().unwrap();
    let sampled = result.max_sigma_lin + result.max_sigma_quad;
    assert!(
        total >= sampled - 1e-9,
        "estimate {total:.3e} below recorded sampled max {sampled:.3e}"
    );
    assert!(total <= 1e-3, "exact recovery should leave near-zero error");
}

#[test]
fn reduce_missing_input_is_usage_error() {
    let out = run(&[
        "reduce",
        "--input",
        "/nonexistent/system.json",
        "--order",
        "1",
        "--scheme",
        "full",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("error:"));
}

#[test]
fn reduce_order_out_of_range_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let fom = write_json(dir.path(), "fom.json", &padded_fom_json());
    let out = run(&[
        "reduce",
        "--input",
        fom.to_str().unwrap(),
        "--order",
        "5",
        "--scheme",
        "full",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("error:"));
}

#[test]
fn unknown_scheme_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let fom = write_json(dir.path(), "fom.json", &padded_fom_json());
    let out = run(&[
        "reduce",
        "--input",
        fom.to_str().unwrap(),
        "--order",
        "1",
        "--scheme",
        "bogus",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn hinf_zero_system_reports_zero() {
    let dir = tempfile::tempdir().unwrap();
    let sys = write_json(dir.path(), "zero.json", &zero_output_json());
    let human = run(&["hinf", "--input", sys.to_str().unwrap()]);
    assert_eq!(code(&human), 0);
    assert!(stdout(&human).contains("total"));
    let machine = run(&["hinf", "--input", sys.to_str().unwrap(), "--json"]);
    let est: serde_json::Value = serde_json::from_str(&stdout(&machine)).unwrap();
    assert_eq!(est["total"].as_f64().unwrap(), 0.0);
}

#[test]
fn hinf_self_comparison_cancels() {
    let dir = tempfile::tempdir().unwrap();
    let sys = write_json(dir.path(), "fom.json", &padded_fom_json());
    let alone = run(&["hinf", "--input", sys.to_str().unwrap(), "--json"]);
    let est: serde_json::Value = serde_json::from_str(&stdout(&alone)).unwrap();
    let scale = est["total"].as_f64().unwrap();
    assert!(scale > 0.0);

    let pair = run(&[
        "hinf",
        "--input",
        sys.to_str().unwrap(),
        "--rom",
        sys.to_str().unwrap(),
        "--json",
    ]);
    let est_pair: serde_json::Value = serde_json::from_str(&stdout(&pair)).unwrap();
    let err_total = est_pair["total"].as_f64().unwrap();
    assert!(
        err_total <= 1e-12 * scale,
        "self-comparison left {err_total:.3e} against scale {scale:.3e}"
    );
}

#[test]
fn simulate_families_and_file_input() {
    let dir = tempfile::tempdir().unwrap();
    let sys = write_json(dir.path(), "sys.json", &two_input_json());
    let out_csv = dir.path().join("out.csv");

    let sin = run(&[
        "simulate",
        "--input",
        sys.to_str().unwrap(),
        "--input-signal",
        "sin",
        "--s",
        "0.02",
        "--t-final",
        "5",
        "--dt",
        "0.01",
        "--out",
        out_csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&sin), 0, "stderr: {}", stderr(&sin));
    let text = std::fs::read_to_string(&out_csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "t,y1");
    assert_eq!(text.lines().count(), 1 + 501);

    let chirp_csv = dir.path().join("chirp.csv");
    let chirp = run(&[
        "simulate",
        "--input",
        sys.to_str().unwrap(),
        "--input-signal",
        "chirp",
        "--t-final",
        "5",
        "--out",
        chirp_csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&chirp), 0, "stderr: {}", stderr(&chirp));
    assert!(chirp_csv.exists());

    // File-driven input: constant two-component signal.
    let signal = dir.path().join("u.csv");
    std::fs::write(&signal, "t,u1,u2\n0.0,1.0,0.0\n10.0,1.0,0.0\n").unwrap();
    let states_csv = dir.path().join("states.csv");
    let file_out = dir.path().join("file_out.csv");
    let from_file = run(&[
        "simulate",
        "--input",
        sys.to_str().unwrap(),
        "--input-signal",
        "file",
        "--signal-file",
        signal.to_str().unwrap(),
        "--t-final",
        "2",
        "--dt",
        "0.01",
        "--out",
        file_out.to_str().unwrap(),
        "--states",
        states_csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&from_file), 0, "stderr: {}", stderr(&from_file));
    assert!(states_csv.exists());
    // Constant input: x(2) = 1 − e⁻², output 0.3x² + x.
    let last_line = std::fs::read_to_string(&file_out)
        .unwrap()
        .lines()
        .last()
        .unwrap()
        .to_string();
    let y_final: f64 = last_line.split(',').nth(1).unwrap().parse().unwrap();
    let x = 1.0 - (-2.0f64).exp();
    assert!((y_final - (0.3 * x * x + x)).abs() < 1e-6, "y(2) = {y_final}");

    // Missing --signal-file is a usage error.
    let missing = run(&[
        "simulate",
        "--input",
        sys.to_str().unwrap(),
        "--input-signal",
        "file",
    ]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn grad_check_passes_on_small_problem() {
    let dir = tempfile::tempdir().unwrap();
    let fom = write_json(dir.path(), "fom.json", &padded_fom_json());
    let out = run(&[
        "grad-check",
        "--input",
        fom.to_str().unwrap(),
        "--order",
        "1",
        "--scheme",
        "full",
        "--samples",
        "2",
        "--seed",
        "7",
    ]);
    assert_eq!(code(&out), 0, "stdout: {}", stdout(&out));
    let text = stdout(&out);
    assert!(text.contains("PASS"));
    assert!(text.contains("theta_A"));
    assert!(text.contains("theta_P[0]"));
}

#[test]
fn bench_msd_dry_run_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sweep");
    let spec = json!({
        "system": {"generator": "msd_ltiqo", "n_masses": 3},
        "scheme": "diagm",
        "r_list": [2],
        "optimizer": {
            "eps_gamma": 0.05,
            "max_outer": 6,
            "max_resets": 1,
            "seed": 3,
            "inner": {"max_iters": 60},
            "scan": {"n_axis": 64, "n_pairs": [12, 12], "max_additions": 4}
        },
        "heatmap_r": [2],
        "heatmap_grid": [5, 3],
        "heatmap_freq_max": 10.0,
        "l2_horizon": 10.0,
        "l2_dt": 0.02,
        "out_dir": out_dir.to_str().unwrap()
    });
    let spec_path = write_json(dir.path(), "spec.json", &spec);

    let dry = run(&["bench-msd", "--spec", spec_path.to_str().unwrap(), "--dry-run"]);
    assert_eq!(code(&dry), 0, "stderr: {}", stderr(&dry));
    assert!(stdout(&dry).contains("spec OK"));
    assert!(!out_dir.exists(), "dry run must not write artifacts");

    let full = run(&["bench-msd", "--spec", spec_path.to_str().unwrap()]);
    assert!(
        code(&full) == 0 || code(&full) == 1,
        "unexpected exit: {} stderr: {}",
        code(&full),
        stderr(&full)
    );
    for name in [
        "overview.csv",
        "heatmap_r2.csv",
        "crossection_r2.csv",
        "l2err_overview.csv",
        "metadata.json",
    ] {
        assert!(out_dir.join(name).exists(), "missing {name}");
    }

    // Bad spec (order out of range) is a usage error.
    let bad = json!({
        "system": {"generator": "msd_ltiqo", "n_masses": 3},
        "scheme": "diagm",
        "r_list": [6],
        "out_dir": out_dir.to_str().unwrap()
    });
    let bad_path = write_json(dir.path(), "bad.json", &bad);
    let rejected = run(&["bench-msd", "--spec", bad_path.to_str().unwrap(), "--dry-run"]);
    assert_eq!(code(&rejected), 2);
}
