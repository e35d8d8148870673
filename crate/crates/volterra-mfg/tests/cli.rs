//! End-to-end checks of the command-line interface: exit codes, output
//! formats, overrides, and the solved-trajectory round trip.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_volterra-mfg");

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("model.toml");
    fs::write(&path, body).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

const SDE_BASE: &str = r#"
[model]
preset = "sde"
r = 10.0
gamma = 0.5
eta = 0.2
x0 = 1.0
b = { form = "constant", value = 0.0 }
c = { form = "constant", value = 1.0 }
sigma = { form = "constant", value = 1.0 }

[grid]
horizon = 1.0
n_steps = 32

[experiment]
ns = [4, 16]
paths = 400
seed = 9
"#;

#[test]
fn malformed_config_exits_one_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "[model\npreset = \"sde\"\n");
    let out = run(&["check", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line"), "no position info: {stderr}");
}

#[test]
fn passing_conditions_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), SDE_BASE);
    let out = run(&[
        "check",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"));
    assert!(dir.path().join("out/conditions.json").exists());
}

#[test]
fn failing_sufficient_condition_exits_two() {
    // Tiny R: sup int gram^2 / R crosses one and the triple-integral
    // threshold R^2/3 collapses.
    let dir = tempfile::tempdir().unwrap();
    let cfg = SDE_BASE.replace("r = 10.0", "r = 0.2");
    let path = write_config(dir.path(), &cfg);
    let out = run(&[
        "check",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL"), "expected FAIL lines:\n{stdout}");
}

#[test]
fn nce_collapse_case_writes_phi_hat_column() {
    // gamma = 1, eta = 0, f = 0 and b = 0: a_hat(t) = x0 = 1 at every node.
    let dir = tempfile::tempdir().unwrap();
    let cfg = SDE_BASE
        .replace("gamma = 0.5", "gamma = 1.0")
        .replace("eta = 0.2", "eta = 0.0");
    let path = write_config(dir.path(), &cfg);
    let out_dir = dir.path().join("out");
    let out = run(&[
        "nce",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(out_dir.join("a_hat.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,a_hat"));
    for line in lines {
        let a_hat: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(a_hat, 1.0);
    }
}

#[test]
fn written_trajectory_round_trips_through_the_residual() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), SDE_BASE);
    let out_dir = dir.path().join("out");
    let out = run(&[
        "nce",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(out_dir.join("a_hat.csv")).unwrap();
    let values: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();

    // Rebuild the model exactly as the CLI does and re-check the residual.
    let cfg = volterra_mfg::config::ConfigFile::parse(SDE_BASE).unwrap();
    let model = cfg.build_model().unwrap();
    let bundle = volterra_mfg::transforms::build_transforms(&model).unwrap();
    let a_hat = volterra_mfg::grid::GridFunction::from_values(bundle.grid().clone(), values);
    let residual = volterra_mfg::nce::nce_residual(&a_hat, &model, &bundle);
    assert!(
        residual <= bundle.settings.tol,
        "round-trip residual {residual}"
    );
}

#[test]
fn rates_with_single_population_size_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SDE_BASE.replace("ns = [4, 16]", "ns = [4]");
    let path = write_config(dir.path(), &cfg);
    let out = run(&[
        "rates",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn degenerate_noise_rates_exit_zero_with_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SDE_BASE.replace(
        "sigma = { form = \"constant\", value = 1.0 }",
        "sigma = { form = \"constant\", value = 0.0 }",
    );
    let path = write_config(dir.path(), &cfg);
    let out_dir = dir.path().join("out");
    let out = run(&[
        "rates",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let summary = fs::read_to_string(out_dir.join("rates_summary.json")).unwrap();
    assert!(summary.contains("\"degenerate\": true"));
}

#[test]
fn seed_override_changes_the_monte_carlo_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), SDE_BASE);
    let run_rates = |out: &str, seed: Option<&str>| {
        let out_dir = dir.path().join(out);
        let mut args = vec![
            "rates",
            "--config",
            path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ];
        if let Some(s) = seed {
            args.push("--seed");
            args.push(s);
        }
        assert_eq!(run(&args).status.code(), Some(0));
        fs::read(out_dir.join("rates.csv")).unwrap()
    };
    let base = run_rates("a", None);
    let same = run_rates("b", Some("9"));
    let other = run_rates("c", Some("10"));
    assert_eq!(base, same, "explicit seed equal to config seed must match");
    assert_ne!(base, other, "different seed must change the gap estimates");
}

const CONTROL_DELAY: &str = r#"
[model]
preset = "control-delay"
r = 10.0
gamma = 0.0
eta = 0.0
a_coef = { form = "constant", value = 0.0 }
control_coef = { form = "polynomial", coeffs = [2.0, 1.0] }
noise_coef = { form = "constant", value = 1.0 }
lag = 0.25
initial = { form = "constant", value = 1.0 }

[grid]
horizon = 1.0
n_steps = 8
"#;

#[test]
fn convert_emits_the_shifted_control_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), CONTROL_DELAY);
    let out_dir = dir.path().join("out");
    let out = run(&[
        "convert",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(out_dir.join("c.csv")).unwrap();
    // A = 0: c(t, s) = C(s + lag) = 2 + (s + 0.25) where it fits the horizon.
    for line in csv.lines().skip(1) {
        let mut fields = line.split(',');
        let t: f64 = fields.next().unwrap().parse().unwrap();
        let s: f64 = fields.next().unwrap().parse().unwrap();
        let v: f64 = fields.next().unwrap().parse().unwrap();
        if s > t {
            assert_eq!(v, 0.0);
        } else if s + 0.25 > 1.0 + 1e-12 {
            assert_eq!(v, 0.0, "beyond-horizon value at ({t}, {s})");
        } else {
            assert!((v - (2.25 + s)).abs() < 1e-12, "value {v} at ({t}, {s})");
        }
    }
    assert!(out_dir.join("sigma.csv").exists());
    assert!(out_dir.join("phi.csv").exists());
    assert!(out_dir.join("fundamental.csv").exists());
}

#[test]
fn convert_rejects_misaligned_lag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CONTROL_DELAY.replace("lag = 0.25", "lag = 0.3");
    let path = write_config(dir.path(), &cfg);
    let out = run(&[
        "convert",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn convert_rejects_non_delay_presets() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), SDE_BASE);
    let out = run(&[
        "convert",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn thread_override_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), SDE_BASE);
    let run_with = |out: &str, threads: Option<(&str, &str)>| {
        let out_dir = dir.path().join(out);
        let mut cmd = Command::new(BIN);
        cmd.args([
            "rates",
            "--config",
            path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        match threads {
            Some(("flag", n)) => {
                cmd.args(["--threads", n]);
            }
            Some(("env", n)) => {
                cmd.env("VOLTERRA_MFG_THREADS", n);
            }
            _ => {}
        }
        assert_eq!(cmd.output().unwrap().status.code(), Some(0));
        fs::read(out_dir.join("rates.csv")).unwrap()
    };
    let base = run_with("t0", None);
    let one = run_with("t1", Some(("flag", "1")));
    let env = run_with("t2", Some(("env", "2")));
    assert_eq!(base, one, "thread count must not affect results");
    assert_eq!(base, env, "env thread count must not affect results");
}

#[test]
fn deviate_command_reports_the_family() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        "{}deviations = [\"equilibrium\", \"zero\", \"scale:2\"]\n",
        SDE_BASE
    );
    let path = write_config(dir.path(), &cfg);
    let out_dir = dir.path().join("out");
    let out = run(&[
        "deviate",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(out_dir.join("deviations.csv")).unwrap();
    assert!(csv.lines().count() > 1 + 3); // header + 3 deviations x 2 sizes
    // The equilibrium rows are exactly zero.
    for line in csv.lines().skip(1).filter(|l| l.starts_with("equilibrium")) {
        let gap: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(gap, 0.0);
    }
}
