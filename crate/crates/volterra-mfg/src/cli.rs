//! Command implementations behind the binary: condition checking, solving
//! the consistency equation, rate experiments, and delay-model conversion.
//!
//! Numeric text output uses 17 significant digits so files round-trip f64
//! values exactly; reruns with the same config and seed are byte-identical.

use crate::config::ConfigFile;
use crate::delay::{
    delay_control_to_volterra, delay_state_to_volterra, fundamental_solution, propagator,
};
use crate::error::{Error, Result};
use crate::grid::{GridFunction, KernelMatrix, KernelShape, TimeGrid};
use crate::nce::{check_conditions, solve_nce_with, NceRoute};
use crate::population::{deviation_experiment, rate_experiment, SimConfig};
use crate::transforms::build_transforms;
use serde_json::json;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Exit codes: 0 success, 1 usage/config error, 2 sufficient-condition
/// warning, 3 solver failure.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_CONDITION: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

pub struct RunContext {
    pub config: ConfigFile,
    pub config_hash: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub paths: usize,
}

pub fn load_context(
    config_path: &Path,
    out_override: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<RunContext> {
    let text = fs::read_to_string(config_path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", config_path.display())))?;
    let config = ConfigFile::parse(&text)?;
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let config_hash = format!("{:x}", hasher.finalize());
    let out_dir = out_override
        .map(|p| p.to_path_buf())
        .or_else(|| {
            config
                .output
                .as_ref()
                .and_then(|o| o.dir.as_ref().map(PathBuf::from))
        })
        .unwrap_or_else(|| PathBuf::from("out"));
    let seed = seed_override
        .or_else(|| config.experiment.as_ref().and_then(|e| e.seed))
        .unwrap_or(0);
    let paths = config
        .experiment
        .as_ref()
        .and_then(|e| e.paths)
        .unwrap_or(10_000);
    Ok(RunContext {
        config,
        config_hash,
        out_dir,
        seed,
        paths,
    })
}

/// 17 significant digits: round-trip safe for f64.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn meta_json(ctx: &RunContext) -> serde_json::Value {
    json!({
        "config_hash": ctx.config_hash,
        "seed": ctx.seed,
        "version": env!("CARGO_PKG_VERSION"),
    })
}

/// `check`: evaluate every solvability margin, print pass/fail lines, and
/// persist the report. Exit code 2 when any sufficient condition fails.
pub fn cmd_check(ctx: &RunContext) -> Result<i32> {
    let model = ctx.config.build_model()?;
    let bundle = build_transforms(&model)?;
    let ns = ctx
        .config
        .experiment
        .as_ref()
        .and_then(|e| e.ns.clone())
        .unwrap_or_else(|| vec![4, 16, 64, 256]);
    let n_min = ns.iter().copied().min().unwrap_or(2).max(1);
    let report = check_conditions(&model, &bundle, n_min)?;

    let mut lines = Vec::new();
    let mut push = |name: &str, value: f64, threshold: f64, pass: bool| {
        lines.push(format!(
            "{}: {} = {:.6e} (threshold {:.6e})",
            if pass { "PASS" } else { "FAIL" },
            name,
            value,
            threshold
        ));
        pass
    };
    let mut all = true;
    all &= push("existence margin", report.existence_margin, 1.0, report.existence_margin < 1.0);
    all &= push("uniqueness margin", report.uniqueness_margin, 1.0, report.uniqueness_margin < 1.0);
    all &= push(
        "triple-integral condition (coupled case)",
        report.smallness_coupled.value,
        report.smallness_coupled.threshold,
        report.smallness_coupled.passes(),
    );
    all &= push(
        "triple-integral condition (decoupled case)",
        report.smallness_decoupled.value,
        report.smallness_decoupled.threshold,
        report.smallness_decoupled.passes(),
    );
    all &= push(
        &format!("population smallness (N = {n_min})"),
        report.population_smallness,
        0.5,
        report.population_smallness_passes(),
    );
    for line in &lines {
        println!("{line}");
    }

    let doc = json!({
        "meta": meta_json(ctx),
        "existence_margin": report.existence_margin,
        "uniqueness_margin": report.uniqueness_margin,
        "smallness_coupled": { "value": report.smallness_coupled.value, "threshold": report.smallness_coupled.threshold },
        "smallness_decoupled": { "value": report.smallness_decoupled.value, "threshold": report.smallness_decoupled.threshold },
        "control_energy": report.control_energy,
        "coupling_energy": report.coupling_energy,
        "resolvent_energy": report.resolvent_energy,
        "n_players": report.n_players,
        "population_smallness": report.population_smallness,
        "all_pass": all,
    });
    let path = write_file(
        &ctx.out_dir,
        "conditions.json",
        &format!("{}\n", serde_json::to_string_pretty(&doc).unwrap()),
    )?;
    eprintln!("wrote {}", path.display());
    Ok(if all { EXIT_OK } else { EXIT_CONDITION })
}

/// `nce`: solve the consistency equation, write the trajectory as CSV plus a
/// JSON summary with the residual and route.
pub fn cmd_nce(ctx: &RunContext) -> Result<i32> {
    let model = ctx.config.build_model()?;
    let bundle = build_transforms(&model)?;
    let solution = solve_nce_with(&model, &bundle, NceRoute::FredholmTilde)?;

    let grid = bundle.grid();
    let mut csv = String::from("t,a_hat\n");
    for i in 0..grid.len() {
        let _ = writeln!(
            csv,
            "{},{}",
            fmt17(grid.node(i)),
            fmt17(solution.a_hat.get(i))
        );
    }
    let csv_path = write_file(&ctx.out_dir, "a_hat.csv", &csv)?;

    let doc = json!({
        "meta": meta_json(ctx),
        "residual_sup": solution.residual_sup,
        "route": solution.route.as_str(),
        "n_steps": grid.n_steps(),
        "horizon": grid.horizon(),
    });
    let json_path = write_file(
        &ctx.out_dir,
        "nce_summary.json",
        &format!("{}\n", serde_json::to_string_pretty(&doc).unwrap()),
    )?;
    eprintln!("wrote {}", csv_path.display());
    eprintln!("wrote {}", json_path.display());
    println!(
        "consistency equation solved (route {}, residual {:.3e})",
        solution.route.as_str(),
        solution.residual_sup
    );
    Ok(EXIT_OK)
}

/// `rates`: run the convergence-rate experiment over the configured
/// population sizes, write the per-N table and a slope summary.
pub fn cmd_rates(ctx: &RunContext) -> Result<i32> {
    let model = ctx.config.build_model()?;
    let ns = ctx
        .config
        .experiment
        .as_ref()
        .and_then(|e| e.ns.clone())
        .ok_or_else(|| Error::Config("experiment.ns is required for rates".into()))?;
    if ns.len() < 2 {
        return Err(Error::Config(
            "experiment.ns needs at least two population sizes".into(),
        ));
    }
    let cfg = SimConfig::new(ctx.paths, ctx.seed)?;
    let report = rate_experiment(&model, &ns, &cfg)?;

    let mut csv =
        String::from("N,mf_error,eps_a,eps_b,cost_gap,gap_stderr,log_n,log_mf_error,log_cost_gap\n");
    for (k, &n) in report.ns.iter().enumerate() {
        let log_mf = if report.mf_error[k] > 0.0 {
            report.mf_error[k].ln()
        } else {
            f64::NEG_INFINITY
        };
        let log_gap = if report.cost_gap[k] > 0.0 {
            report.cost_gap[k].ln()
        } else {
            f64::NEG_INFINITY
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            n,
            fmt17(report.mf_error[k]),
            fmt17(report.eps_a[k]),
            fmt17(report.eps_b[k]),
            fmt17(report.cost_gap[k]),
            fmt17(report.gap_stderr[k]),
            fmt17((n as f64).ln()),
            fmt17(log_mf),
            fmt17(log_gap)
        );
    }
    let csv_path = write_file(&ctx.out_dir, "rates.csv", &csv)?;

    let slope_json = |fit: &Option<crate::population::SlopeFit>| match fit {
        Some(f) => json!({ "slope": f.slope, "stderr": f.stderr }),
        None => json!(null),
    };
    let doc = json!({
        "meta": meta_json(ctx),
        "ns": report.ns,
        "paths": report.paths,
        "degenerate": report.degenerate,
        "mf_slope": slope_json(&report.mf_slope),
        "gap_slope": slope_json(&report.gap_slope),
        "limit_cost": report.limit_cost_exact,
        "pop_cost": report
            .pop_cost
            .iter()
            .map(|c| json!({ "mean": c.mean, "stderr": c.stderr }))
            .collect::<Vec<_>>(),
    });
    let json_path = write_file(
        &ctx.out_dir,
        "rates_summary.json",
        &format!("{}\n", serde_json::to_string_pretty(&doc).unwrap()),
    )?;
    eprintln!("wrote {}", csv_path.display());
    eprintln!("wrote {}", json_path.display());
    if report.degenerate {
        println!("rate experiment degenerate: mean-field error at round-off for every N");
    } else if let Some(fit) = &report.mf_slope {
        println!(
            "mean-field slope {:.4} +- {:.4}; cost-gap slope {}",
            fit.slope,
            fit.stderr,
            report
                .gap_slope
                .as_ref()
                .map(|g| format!("{:.3} +- {:.3}", g.slope, g.stderr))
                .unwrap_or_else(|| "n/a".into())
        );
    }
    Ok(EXIT_OK)
}

/// `deviate`: deviation experiments for player 1 against the configured
/// family, one report per (deviation, N).
pub fn cmd_deviate(ctx: &RunContext) -> Result<i32> {
    let model = ctx.config.build_model()?;
    let bundle = build_transforms(&model)?;
    let nce = solve_nce_with(&model, &bundle, NceRoute::FredholmTilde)?;
    let ns = ctx
        .config
        .experiment
        .as_ref()
        .and_then(|e| e.ns.clone())
        .unwrap_or_else(|| vec![4, 256]);
    let deviations = ctx.config.deviations()?;
    let cfg = SimConfig::new(ctx.paths, ctx.seed)?;

    let mut rows = Vec::new();
    let mut csv = String::from("deviation,N,gap,gap_stderr,mf_perturbed,mf_baseline\n");
    for deviation in &deviations {
        for &n in &ns {
            let rep = deviation_experiment(&model, &nce.a_hat, n, *deviation, &cfg)?;
            println!(
                "deviation {} at N = {n}: gap {:.6e} +- {:.2e}",
                deviation.label(),
                rep.gap.mean,
                rep.gap.stderr
            );
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{}",
                deviation.label(),
                n,
                fmt17(rep.gap.mean),
                fmt17(rep.gap.stderr),
                fmt17(rep.mf_perturbed),
                fmt17(rep.mf_baseline)
            );
            rows.push(json!({
                "deviation": deviation.label(),
                "n": n,
                "gap": rep.gap.mean,
                "gap_stderr": rep.gap.stderr,
                "mf_perturbed": rep.mf_perturbed,
                "mf_baseline": rep.mf_baseline,
            }));
        }
    }
    let csv_path = write_file(&ctx.out_dir, "deviations.csv", &csv)?;
    let doc = json!({ "meta": meta_json(ctx), "reports": rows });
    let json_path = write_file(
        &ctx.out_dir,
        "deviations_summary.json",
        &format!("{}\n", serde_json::to_string_pretty(&doc).unwrap()),
    )?;
    eprintln!("wrote {}", csv_path.display());
    eprintln!("wrote {}", json_path.display());
    Ok(EXIT_OK)
}

fn kernel_csv(grid: &TimeGrid, kernel: &KernelMatrix, header: &str) -> String {
    let mut csv = format!("t,s,{header}\n");
    for i in 0..grid.len() {
        for j in 0..grid.len() {
            let _ = writeln!(
                csv,
                "{},{},{}",
                fmt17(grid.node(i)),
                fmt17(grid.node(j)),
                fmt17(kernel.get(i, j))
            );
        }
    }
    csv
}

/// `convert`: emit the sampled kernels of a delay model's Volterra form.
pub fn cmd_convert(ctx: &RunContext) -> Result<i32> {
    let preset = ctx.config.model.preset.clone();
    let grid = TimeGrid::uniform(ctx.config.grid.horizon, ctx.config.grid.n_steps)?;
    let settings = ctx.config.settings();
    let m = &ctx.config.model;
    let spec = match preset.as_str() {
        "state-delay" => {
            let model = ctx.config.build_state_delay()?;
            // Surface the fundamental solution alongside the conversion.
            let f = fundamental_solution(&model, &grid)?;
            let path = write_file(
                &ctx.out_dir,
                "fundamental.csv",
                &kernel_csv(&grid, &f.values, "value"),
            )?;
            eprintln!("wrote {}", path.display());
            delay_state_to_volterra(&model, &grid, m.r, m.gamma, m.eta, settings)?
        }
        "control-delay" => {
            let model = ctx.config.build_control_delay()?;
            let p = propagator(&model.a_coef, &grid)?;
            let path = write_file(
                &ctx.out_dir,
                "fundamental.csv",
                &kernel_csv(&grid, &p.values, "value"),
            )?;
            eprintln!("wrote {}", path.display());
            delay_control_to_volterra(&model, &grid, m.r, m.gamma, m.eta, settings)?
        }
        other => {
            return Err(Error::Config(format!(
                "convert requires a delay preset, got `{other}`"
            )))
        }
    };

    let c = KernelMatrix::sample(grid.clone(), KernelShape::LowerTriangular, |t, s| {
        (spec.c)(t, s)
    })?;
    let sigma = KernelMatrix::sample(grid.clone(), KernelShape::LowerTriangular, |t, s| {
        (spec.sigma)(t, s)
    })?;
    let phi = GridFunction::sample(grid.clone(), |t| (spec.phi)(t))?;

    let c_path = write_file(&ctx.out_dir, "c.csv", &kernel_csv(&grid, &c, "c"))?;
    let s_path = write_file(&ctx.out_dir, "sigma.csv", &kernel_csv(&grid, &sigma, "sigma"))?;
    let mut phi_csv = String::from("t,phi\n");
    for i in 0..grid.len() {
        let _ = writeln!(phi_csv, "{},{}", fmt17(grid.node(i)), fmt17(phi.get(i)));
    }
    let phi_path = write_file(&ctx.out_dir, "phi.csv", &phi_csv)?;
    eprintln!("wrote {}", c_path.display());
    eprintln!("wrote {}", s_path.display());
    eprintln!("wrote {}", phi_path.display());
    println!("converted `{preset}` model to Volterra form");
    Ok(EXIT_OK)
}

/// Map an error to the command's exit code.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Io(_) => EXIT_CONFIG,
        Error::NonConvergence { .. }
        | Error::IterationNotConverged { .. }
        | Error::SingularSystem(_)
        | Error::NceInconsistency { .. }
        | Error::InternalConsistency(_)
        | Error::KernelEvaluation { .. } => EXIT_SOLVER,
    }
}
