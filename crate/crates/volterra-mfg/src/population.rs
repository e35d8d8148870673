//! Finite-population closed loop, Monte Carlo cost estimation, deviation
//! experiments, and convergence-rate regression.
//!
//! With every player applying the decentralized feedback, the exchangeable
//! ansatz
//!
//! ```text
//! x_l(t) = mean(t) + sum_m own(t, m) dW_m^l + sum_m avg(t, m) Z_m,
//! Z_m = (1/N) sum_j dW_m^j,
//! ```
//!
//! satisfies the coupled system exactly on the grid: averaging gives a
//! closed equation for the aggregate response `own + avg`, subtracting gives
//! the idiosyncratic one. The coefficients do not depend on `N`; only the
//! variance of `Z` does, which is why the mean-field error
//! `E int |a - x^N|^2` is an exact multiple of `1/N` and is computed in
//! closed form. Monte Carlo is reserved for costs, where the limit cost is
//! estimated pathwise with common random numbers so that cost *gaps* are
//! resolvable far below the noise level of either cost alone.

use crate::closed_loop::{control_kernel, limit_cost, limit_optimal_state, AffineState};
use crate::error::{Error, Result};
use crate::grid::{
    gram_kernel, gram_kernel_from, volterra_operator, GridFunction, KernelMatrix, KernelShape,
};
use crate::nce::solve_nce_with;
use crate::rng::{standard_normal, REST_OF_POPULATION};
use crate::transforms::{build_transforms, ModelSpec, TransformBundle};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Exchangeable closed-loop representation for `N` players.
#[derive(Debug, Clone)]
pub struct PopulationState {
    pub n_players: usize,
    pub mean: GridFunction,
    /// Response of `x_l` to the player's own increments.
    pub noise_own: KernelMatrix,
    /// Response to the population-averaged increments `Z`.
    pub noise_avg: KernelMatrix,
}

impl PopulationState {
    /// Aggregate response: `x^N = mean + sum_m (own + avg)(., m) Z_m`.
    pub fn aggregate_column(&self, i: usize, m: usize) -> f64 {
        self.noise_own.get(i, m) + self.noise_avg.get(i, m)
    }

    /// Trajectories of every player plus the mean field, for given increments
    /// (`increments[l][m]`, player-major).
    pub fn trajectories(&self, increments: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let grid = self.mean.grid();
        let n = grid.len();
        let steps = grid.n_steps();
        let n_players = increments.len();
        let z: Vec<f64> = (0..steps)
            .map(|m| increments.iter().map(|row| row[m]).sum::<f64>() / n_players as f64)
            .collect();
        let mut players = vec![vec![0.0; n]; n_players];
        for (l, path) in players.iter_mut().enumerate() {
            for (i, slot) in path.iter_mut().enumerate() {
                let mut acc = self.mean.get(i);
                let own = self.noise_own.row(i);
                let avg = self.noise_avg.row(i);
                for m in 0..steps {
                    acc += own[m] * increments[l][m] + avg[m] * z[m];
                }
                *slot = acc;
            }
        }
        let mut mean_field = vec![0.0; n];
        for (i, slot) in mean_field.iter_mut().enumerate() {
            *slot = players.iter().map(|p| p[i]).sum::<f64>() / n_players as f64;
        }
        (players, mean_field)
    }

    /// Exact `E int_0^T |a - x^N|^2 dt`.
    pub fn mean_field_error(&self, a: &GridFunction) -> f64 {
        let grid = self.mean.grid().clone();
        let h = grid.step();
        let steps = grid.n_steps();
        let nn = self.n_players as f64;
        grid.quadrature(|i| {
            let d = a.get(i) - self.mean.get(i);
            let mut acc = d * d;
            for m in 0..steps {
                let agg = self.aggregate_column(i, m);
                acc += agg * agg * h / nn;
            }
            acc
        })
    }
}

/// Solve the exchangeable closed loop for `N` players best-responding to the
/// equilibrium trajectory `a_hat`.
pub fn solve_population(
    model: &ModelSpec,
    bundle: &TransformBundle,
    a_hat: &GridFunction,
    n_players: usize,
) -> Result<PopulationState> {
    if n_players < 2 {
        return Err(Error::invalid("population needs at least 2 players"));
    }
    let grid = bundle.grid().clone();
    let n = grid.len();
    let steps = grid.n_steps();
    let w = grid.weights();
    let v = volterra_operator(&bundle.f_hat);
    let gram = gram_kernel(&bundle.c_hat);

    // Deterministic part: same linear system as the consistency equation.
    let mean = {
        let mat = DMatrix::from_fn(n, n, |i, j| {
            let id = if i == j { 1.0 } else { 0.0 };
            id - v[(i, j)] + w[j] * gram.get(i, j) / model.r_weight
        });
        let rhs = DVector::from_fn(n, |i, _| {
            let mut acc = 0.0;
            for j in 0..n {
                acc += w[j] * gram.get(i, j) * (model.gamma * a_hat.get(j) + model.eta);
            }
            bundle.phi_hat.get(i) + acc / model.r_weight
        });
        let sol = mat
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::SingularSystem(" (population mean solve)".into()))?;
        GridFunction::from_values(grid.clone(), sol.iter().copied().collect())
    };

    // Noise columns: aggregate response solves the averaged equation
    // (Volterra term present), idiosyncratic response the decoupled one.
    let sigma_cols = crate::closed_loop::ito_columns(&bundle.sigma_hat);
    let columns: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..steps)
        .into_par_iter()
        .map(|m| {
            let rhs_vals: Vec<f64> = (0..n).map(|i| sigma_cols.get(i, m)).collect();
            if rhs_vals.iter().all(|v| *v == 0.0) {
                return Ok((m, vec![0.0; n], vec![0.0; n]));
            }
            let rhs = DVector::from_column_slice(&rhs_vals);
            let g_m = gram_kernel_from(&bundle.c_hat, m + 1);
            let agg_mat = DMatrix::from_fn(n, n, |i, j| {
                let id = if i == j { 1.0 } else { 0.0 };
                id - v[(i, j)] + w[j] * g_m.get(i, j) / model.r_weight
            });
            let agg = agg_mat
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::SingularSystem(" (aggregate column solve)".into()))?;
            let own_mat = DMatrix::from_fn(n, n, |i, j| {
                let id = if i == j { 1.0 } else { 0.0 };
                id + w[j] * g_m.get(i, j) / model.r_weight
            });
            let own = own_mat
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::SingularSystem(" (idiosyncratic column solve)".into()))?;
            let avg: Vec<f64> = (0..n).map(|i| agg[i] - own[i]).collect();
            Ok((m, own.iter().copied().collect(), avg))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut noise_own = KernelMatrix::zeros(grid.clone(), KernelShape::Full);
    let mut noise_avg = KernelMatrix::zeros(grid.clone(), KernelShape::Full);
    for (m, own, avg) in columns {
        for i in 0..n {
            noise_own.set(i, m, own[i]);
            noise_avg.set(i, m, avg[i]);
        }
    }
    Ok(PopulationState {
        n_players,
        mean,
        noise_own,
        noise_avg,
    })
}

/// Monte Carlo configuration. Standard errors come from batch means, so
/// `paths` should be a multiple of `batches`.
#[derive(Debug, Clone, Copy)]
pub struct SimConfig {
    pub paths: usize,
    pub seed: u64,
    pub batches: usize,
}

impl SimConfig {
    pub fn new(paths: usize, seed: u64) -> Result<Self> {
        if paths < 1 {
            return Err(Error::invalid("paths must be at least 1"));
        }
        let batches = paths.clamp(1, 100);
        Ok(SimConfig {
            paths,
            seed,
            batches,
        })
    }
}

/// Lazily evaluated path ensemble: every path is a pure function of
/// `(seed, path index)`, so realizations are regenerated on demand and the
/// ensemble is bit-reproducible.
pub struct PathEnsemble<'a> {
    pub state: &'a PopulationState,
    pub cfg: SimConfig,
}

/// One realized path of the closed-loop population.
pub struct PathRealization {
    /// `increments[l][m]`: Brownian increment of player `l` over step `m`.
    pub increments: Vec<Vec<f64>>,
    /// `players[l][i]`: trajectory of player `l` at node `i`.
    pub players: Vec<Vec<f64>>,
    pub mean_field: Vec<f64>,
}

/// Draw the ensemble handle (paths are generated lazily per index).
pub fn sample_paths<'a>(state: &'a PopulationState, cfg: &SimConfig) -> PathEnsemble<'a> {
    PathEnsemble { state, cfg: *cfg }
}

impl PathEnsemble<'_> {
    pub fn path(&self, p: usize) -> PathRealization {
        let grid = self.state.mean.grid();
        let steps = grid.n_steps();
        let sqrt_h = grid.step().sqrt();
        let increments: Vec<Vec<f64>> = (0..self.state.n_players)
            .map(|l| {
                (0..steps)
                    .map(|m| sqrt_h * standard_normal(self.cfg.seed, p as u64, l as u32, m as u32))
                    .collect()
            })
            .collect();
        let (players, mean_field) = self.state.trajectories(&increments);
        PathRealization {
            increments,
            players,
            mean_field,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CostEstimate {
    pub mean: f64,
    pub stderr: f64,
}

fn batch_stats(batch_means: &[f64]) -> CostEstimate {
    let b = batch_means.len() as f64;
    let mean = batch_means.iter().sum::<f64>() / b;
    if batch_means.len() < 2 {
        return CostEstimate { mean, stderr: 0.0 };
    }
    let var = batch_means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (b - 1.0);
    CostEstimate {
        mean,
        stderr: (var / b).sqrt(),
    }
}

#[derive(Debug, Clone)]
pub struct CostReport {
    /// Finite-population cost of each player.
    pub players: Vec<CostEstimate>,
    /// Limit-problem cost of each player (same noise, decoupled dynamics).
    pub limit: Vec<CostEstimate>,
}

/// Monte Carlo estimates of every player's finite-population cost and the
/// matching limit cost, from a full ensemble.
pub fn estimate_costs(
    ensemble: &PathEnsemble<'_>,
    model: &ModelSpec,
    a_hat: &GridFunction,
) -> Result<CostReport> {
    let bundle = build_transforms(model)?;
    let state = ensemble.state;
    let grid = bundle.grid().clone();
    let steps = grid.n_steps();
    let n_players = state.n_players;

    let ck = control_kernel(model, &bundle, a_hat);
    let u_pop = ck.evaluate_blocks(&state.mean, &state.noise_own, &state.noise_avg);
    let limit = limit_optimal_state(model, &bundle, a_hat)?.state;
    let u_lim = ck.evaluate(&limit);

    let cfg = ensemble.cfg;
    let batches = cfg.batches.min(cfg.paths).max(1);
    let mut pop_batches = vec![vec![0.0f64; batches]; n_players];
    let mut lim_batches = vec![vec![0.0f64; batches]; n_players];
    let mut batch_counts = vec![0usize; batches];

    for p in 0..cfg.paths {
        let b = p * batches / cfg.paths;
        batch_counts[b] += 1;
        let real = ensemble.path(p);
        let z: Vec<f64> = (0..steps)
            .map(|m| {
                real.increments.iter().map(|row| row[m]).sum::<f64>() / n_players as f64
            })
            .collect();
        for l in 0..n_players {
            let u_l = u_pop.realize(&real.increments[l], &z);
            let pop_cost = grid.quadrature(|i| {
                let dev =
                    real.players[l][i] - model.gamma * real.mean_field[i] - model.eta;
                dev * dev + model.r_weight * u_l[i] * u_l[i]
            });
            pop_batches[l][b] += pop_cost;

            let zero = vec![0.0; steps];
            let x_l = limit.realize(&real.increments[l], &zero);
            let ul_l = u_lim.realize(&real.increments[l], &zero);
            let lim_cost = grid.quadrature(|i| {
                let dev = x_l[i] - model.gamma * a_hat.get(i) - model.eta;
                dev * dev + model.r_weight * ul_l[i] * ul_l[i]
            });
            lim_batches[l][b] += lim_cost;
        }
    }

    let normalize = |batches_for_player: &[f64]| -> Vec<f64> {
        batches_for_player
            .iter()
            .zip(&batch_counts)
            .map(|(sum, count)| sum / (*count).max(1) as f64)
            .collect()
    };
    Ok(CostReport {
        players: pop_batches
            .iter()
            .map(|b| batch_stats(&normalize(b)))
            .collect(),
        limit: lim_batches
            .iter()
            .map(|b| batch_stats(&normalize(b)))
            .collect(),
    })
}

/// Affine coefficients of a scalar process in the reduced basis
/// `(deterministic, own increments of player 1, summed increments of the
/// other `N - 1` players)`.
#[derive(Debug, Clone)]
struct ReducedProcess {
    det: Vec<f64>,
    /// Coefficient on `dW^1_m`.
    own: DMatrix<f64>,
    /// Coefficient on `S_m = sum_{j >= 2} dW^j_m`.
    rest: DMatrix<f64>,
}

impl ReducedProcess {
    fn realize_into(&self, own: &[f64], rest: &[f64], out: &mut [f64]) {
        let n = self.det.len();
        let steps = own.len();
        for i in 0..n {
            let mut acc = self.det[i];
            for m in 0..steps {
                acc += self.own[(i, m)] * own[m] + self.rest[(i, m)] * rest[m];
            }
            out[i] = acc;
        }
    }
}

/// The processes needed to price player 1's decisions in one system.
#[derive(Debug, Clone)]
struct ReducedSystem {
    player: ReducedProcess,
    mean_field: ReducedProcess,
    control: ReducedProcess,
}

fn baseline_reduced(
    state: &PopulationState,
    u_det: &GridFunction,
    u_own: &KernelMatrix,
    u_avg: &KernelMatrix,
) -> ReducedSystem {
    let grid = state.mean.grid();
    let n = grid.len();
    let steps = grid.n_steps();
    let nn = state.n_players as f64;
    let mk = |det: Vec<f64>, own_f: &dyn Fn(usize, usize) -> f64, rest_f: &dyn Fn(usize, usize) -> f64| {
        ReducedProcess {
            det,
            own: DMatrix::from_fn(n, steps, &own_f),
            rest: DMatrix::from_fn(n, steps, &rest_f),
        }
    };
    // x_1 = mean + own dW^1 + avg Z, Z = (dW^1 + S)/N.
    let player = mk(
        state.mean.values().to_vec(),
        &|i, m| state.noise_own.get(i, m) + state.noise_avg.get(i, m) / nn,
        &|i, m| state.noise_avg.get(i, m) / nn,
    );
    let mean_field = mk(
        state.mean.values().to_vec(),
        &|i, m| state.aggregate_column(i, m) / nn,
        &|i, m| state.aggregate_column(i, m) / nn,
    );
    let control = mk(
        u_det.values().to_vec(),
        &|i, m| u_own.get(i, m) + u_avg.get(i, m) / nn,
        &|i, m| u_avg.get(i, m) / nn,
    );
    ReducedSystem {
        player,
        mean_field,
        control,
    }
}

/// Pathwise Monte Carlo of player 1's cost in a reduced system, with the
/// limit cost from the same own-noise stream. Returns batch means of
/// `(population cost, population - limit)` plus the limit batch means.
struct PathwiseCosts {
    pop: CostEstimate,
    diff: CostEstimate,
}

#[allow(clippy::too_many_arguments)]
fn pathwise_costs(
    system: &ReducedSystem,
    limit: &AffineState,
    u_lim: &AffineState,
    model: &ModelSpec,
    a_hat: &GridFunction,
    n_players: usize,
    cfg: &SimConfig,
) -> PathwiseCosts {
    let grid = system.player.det.len();
    let a_grid = a_hat.grid().clone();
    let steps = a_grid.n_steps();
    let sqrt_h = a_grid.step().sqrt();
    let rest_scale = ((n_players - 1) as f64).sqrt();
    let batches = cfg.batches.min(cfg.paths).max(1);

    let batch_results: Vec<(f64, f64, f64, usize)> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let lo = b * cfg.paths / batches;
            let hi = (b + 1) * cfg.paths / batches;
            let mut own = vec![0.0; steps];
            let mut rest = vec![0.0; steps];
            let mut x1 = vec![0.0; grid];
            let mut xn = vec![0.0; grid];
            let mut u1 = vec![0.0; grid];
            let mut sum_pop = 0.0;
            let mut sum_lim = 0.0;
            let mut sum_diff = 0.0;
            for p in lo..hi {
                for m in 0..steps {
                    own[m] = sqrt_h * standard_normal(cfg.seed, p as u64, 0, m as u32);
                    rest[m] = sqrt_h
                        * rest_scale
                        * standard_normal(cfg.seed, p as u64, REST_OF_POPULATION, m as u32);
                }
                system.player.realize_into(&own, &rest, &mut x1);
                system.mean_field.realize_into(&own, &rest, &mut xn);
                system.control.realize_into(&own, &rest, &mut u1);
                let pop = a_grid.quadrature(|i| {
                    let dev = x1[i] - model.gamma * xn[i] - model.eta;
                    dev * dev + model.r_weight * u1[i] * u1[i]
                });
                let zero = vec![0.0; steps];
                let xl = limit.realize(&own, &zero);
                let ul = u_lim.realize(&own, &zero);
                let lim = a_grid.quadrature(|i| {
                    let dev = xl[i] - model.gamma * a_hat.get(i) - model.eta;
                    dev * dev + model.r_weight * ul[i] * ul[i]
                });
                sum_pop += pop;
                sum_lim += lim;
                sum_diff += pop - lim;
            }
            (sum_pop, sum_lim, sum_diff, hi - lo)
        })
        .collect();

    let pop: Vec<f64> = batch_results
        .iter()
        .map(|(s, _, _, c)| s / (*c).max(1) as f64)
        .collect();
    let diff: Vec<f64> = batch_results
        .iter()
        .map(|(_, _, s, c)| s / (*c).max(1) as f64)
        .collect();
    PathwiseCosts {
        pop: batch_stats(&pop),
        diff: batch_stats(&diff),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SlopeFit {
    pub slope: f64,
    pub stderr: f64,
}

fn fit_slope(xs: &[f64], ys: &[f64]) -> SlopeFit {
    let k = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / k;
    let ybar = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let dof = (xs.len().max(3) - 2) as f64;
    SlopeFit {
        slope,
        stderr: (ss_res / dof / sxx).sqrt(),
    }
}

/// Per-population-size error statistics and fitted convergence slopes.
#[derive(Debug, Clone)]
pub struct NashGapReport {
    pub ns: Vec<usize>,
    /// Exact `E int |a - x^N|^2` per N.
    pub mf_error: Vec<f64>,
    /// `(E int |x^N - a|^2)^{1/2}` per N.
    pub eps_a: Vec<f64>,
    /// `|gamma| eps_a` per N.
    pub eps_b: Vec<f64>,
    /// `|J_1(pop) - J_1(limit)|` per N, estimated pathwise.
    pub cost_gap: Vec<f64>,
    pub gap_stderr: Vec<f64>,
    pub pop_cost: Vec<CostEstimate>,
    /// Limit cost in closed form.
    pub limit_cost_exact: f64,
    pub mf_slope: Option<SlopeFit>,
    pub gap_slope: Option<SlopeFit>,
    /// Set when the noise is degenerate and no rate can be fitted.
    pub degenerate: bool,
    pub paths: usize,
    pub seed: u64,
}

/// Run the full rate verification: exact mean-field errors and Monte Carlo
/// cost gaps across the given population sizes, with fitted log-log slopes.
pub fn rate_experiment(model: &ModelSpec, ns: &[usize], cfg: &SimConfig) -> Result<NashGapReport> {
    if ns.len() < 2 {
        return Err(Error::invalid("need at least two population sizes"));
    }
    if ns.iter().any(|&n| n < 2) {
        return Err(Error::invalid("every population size must be at least 2"));
    }
    let bundle = build_transforms(model)?;
    let nce = solve_nce_with(model, &bundle, crate::nce::NceRoute::FredholmTilde)?;
    let a_hat = &nce.a_hat;

    let limit = limit_optimal_state(model, &bundle, a_hat)?.state;
    let ck = control_kernel(model, &bundle, a_hat);
    let u_lim = ck.evaluate(&limit);
    let limit_cost_exact = limit_cost(model, &limit, &u_lim, a_hat);

    let mut mf_error = Vec::new();
    let mut cost_gap = Vec::new();
    let mut gap_stderr = Vec::new();
    let mut pop_cost = Vec::new();
    for &n in ns {
        let state = solve_population(model, &bundle, a_hat, n)?;
        mf_error.push(state.mean_field_error(a_hat));
        let u_pop = ck.evaluate_blocks(&state.mean, &state.noise_own, &state.noise_avg);
        let system = baseline_reduced(&state, &u_pop.mean, &u_pop.noise_own, &u_pop.noise_avg);
        let costs = pathwise_costs(&system, &limit, &u_lim, model, a_hat, n, cfg);
        cost_gap.push(costs.diff.mean.abs());
        gap_stderr.push(costs.diff.stderr);
        pop_cost.push(costs.pop);
    }

    let degenerate = mf_error.iter().all(|&e| e < 1e-18);
    let (mf_slope, gap_slope) = if degenerate {
        (None, None)
    } else {
        let ln_n: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
        let ln_mf: Vec<f64> = mf_error.iter().map(|e| e.ln()).collect();
        let mf = fit_slope(&ln_n, &ln_mf);
        let gap = if cost_gap.iter().all(|&g| g > 0.0) {
            let ln_gap: Vec<f64> = cost_gap.iter().map(|g| g.ln()).collect();
            Some(fit_slope(&ln_n, &ln_gap))
        } else {
            None
        };
        (Some(mf), gap)
    };

    let eps_a: Vec<f64> = mf_error.iter().map(|e| e.sqrt()).collect();
    let eps_b: Vec<f64> = eps_a.iter().map(|e| model.gamma.abs() * e).collect();
    Ok(NashGapReport {
        ns: ns.to_vec(),
        mf_error,
        eps_a,
        eps_b,
        cost_gap,
        gap_stderr,
        pop_cost,
        limit_cost_exact,
        mf_slope,
        gap_slope,
        degenerate,
        paths: cfg.paths,
        seed: cfg.seed,
    })
}

/// Alternative strategy for player 1 in a deviation experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Deviation {
    /// Keep the equilibrium feedback (the gap is zero by construction).
    Equilibrium,
    /// Play zero control.
    Zero,
    /// Scale the equilibrium control by a factor.
    Scaled(f64),
    /// Shift the equilibrium control later by a number of grid steps.
    TimeShifted(usize),
    /// Re-solve the limit problem's best response against the realized
    /// equilibrium trajectory and play it open loop.
    BestResponse,
}

impl Deviation {
    pub fn label(&self) -> String {
        match self {
            Deviation::Equilibrium => "equilibrium".into(),
            Deviation::Zero => "zero".into(),
            Deviation::Scaled(l) => format!("scale:{l}"),
            Deviation::TimeShifted(d) => format!("shift:{d}"),
            Deviation::BestResponse => "best-response".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeviationReport {
    pub deviation: Deviation,
    pub n_players: usize,
    /// `J_1(u_alt, rest) - J_1(equilibrium)`, pathwise with common noise.
    pub gap: CostEstimate,
    /// Exact `E int |x^N - a|^2` in the deviated system.
    pub mf_perturbed: f64,
    /// Same quantity without the deviation.
    pub mf_baseline: f64,
}

/// Player-1 control coefficients in the `(det, own dW^1, averaged Z)` basis.
#[derive(Debug, Clone)]
struct AltControl {
    det: Vec<f64>,
    own: DMatrix<f64>,
    avg: DMatrix<f64>,
}

/// Re-solve the population with player 1 playing `u_alt` open loop while
/// players `2..N` keep the equilibrium feedback, and report the cost gap and
/// the mean-field perturbation.
pub fn deviation_experiment(
    model: &ModelSpec,
    a_hat: &GridFunction,
    n_players: usize,
    deviation: Deviation,
    cfg: &SimConfig,
) -> Result<DeviationReport> {
    let bundle = build_transforms(model)?;
    let grid = bundle.grid().clone();
    let n = grid.len();
    let steps = grid.n_steps();
    let nn = n_players as f64;

    let baseline = solve_population(model, &bundle, a_hat, n_players)?;
    let ck = control_kernel(model, &bundle, a_hat);
    let u_eq = ck.evaluate_blocks(&baseline.mean, &baseline.noise_own, &baseline.noise_avg);
    let base_system =
        baseline_reduced(&baseline, &u_eq.mean, &u_eq.noise_own, &u_eq.noise_avg);
    let mf_baseline = baseline.mean_field_error(a_hat);

    let limit = limit_optimal_state(model, &bundle, a_hat)?.state;
    let u_lim = ck.evaluate(&limit);

    // Build the alternative control in the (det, own, Z) basis.
    let alt = match deviation {
        Deviation::Equilibrium => None,
        Deviation::Zero => Some(AltControl {
            det: vec![0.0; n],
            own: DMatrix::zeros(n, steps),
            avg: DMatrix::zeros(n, steps),
        }),
        Deviation::Scaled(factor) => Some(AltControl {
            det: u_eq.mean.values().iter().map(|v| factor * v).collect(),
            own: DMatrix::from_fn(n, steps, |i, m| factor * u_eq.noise_own.get(i, m)),
            avg: DMatrix::from_fn(n, steps, |i, m| factor * u_eq.noise_avg.get(i, m)),
        }),
        Deviation::TimeShifted(d) => {
            let shift = |i: usize, m: usize, k: &KernelMatrix| -> f64 {
                if i >= d {
                    k.get(i - d, m)
                } else {
                    0.0
                }
            };
            Some(AltControl {
                det: (0..n)
                    .map(|i| if i >= d { u_eq.mean.get(i - d) } else { 0.0 })
                    .collect(),
                own: DMatrix::from_fn(n, steps, |i, m| shift(i, m, &u_eq.noise_own)),
                avg: DMatrix::from_fn(n, steps, |i, m| shift(i, m, &u_eq.noise_avg)),
            })
        }
        Deviation::BestResponse => {
            let (_, u_br) = crate::closed_loop::best_response(model, &bundle, a_hat)?;
            Some(AltControl {
                det: u_br.mean.values().to_vec(),
                own: DMatrix::from_fn(n, steps, |i, m| u_br.noise_own.get(i, m)),
                avg: DMatrix::zeros(n, steps),
            })
        }
    };

    let (dev_system, mf_perturbed) = match alt {
        None => (base_system.clone(), mf_baseline),
        Some(alt) => {
            let (system, mf) =
                solve_deviated(model, &bundle, a_hat, n_players, &alt)?;
            (system, mf)
        }
    };

    // Common-noise pathwise gap: deviated cost minus equilibrium cost.
    let batches = cfg.batches.min(cfg.paths).max(1);
    let sqrt_h = grid.step().sqrt();
    let rest_scale = (nn - 1.0).sqrt();
    let batch_means: Vec<(f64, usize)> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let lo = b * cfg.paths / batches;
            let hi = (b + 1) * cfg.paths / batches;
            let mut own = vec![0.0; steps];
            let mut rest = vec![0.0; steps];
            let mut x1 = vec![0.0; n];
            let mut xn = vec![0.0; n];
            let mut u1 = vec![0.0; n];
            let mut sum = 0.0;
            for p in lo..hi {
                for m in 0..steps {
                    own[m] = sqrt_h * standard_normal(cfg.seed, p as u64, 0, m as u32);
                    rest[m] = sqrt_h
                        * rest_scale
                        * standard_normal(cfg.seed, p as u64, REST_OF_POPULATION, m as u32);
                }
                let mut cost = |sys: &ReducedSystem| -> f64 {
                    sys.player.realize_into(&own, &rest, &mut x1);
                    sys.mean_field.realize_into(&own, &rest, &mut xn);
                    sys.control.realize_into(&own, &rest, &mut u1);
                    grid.quadrature(|i| {
                        let dev = x1[i] - model.gamma * xn[i] - model.eta;
                        dev * dev + model.r_weight * u1[i] * u1[i]
                    })
                };
                sum += cost(&dev_system) - cost(&base_system);
            }
            (sum, hi - lo)
        })
        .collect();
    let means: Vec<f64> = batch_means
        .iter()
        .map(|(s, c)| s / (*c).max(1) as f64)
        .collect();
    let gap = batch_stats(&means);
    let _ = (&limit, &u_lim);

    Ok(DeviationReport {
        deviation,
        n_players,
        gap,
        mf_perturbed,
        mf_baseline,
    })
}

/// Solve the deviated population (player 1 open loop with `u_alt`, the rest
/// in equilibrium feedback) coefficient-wise and return player 1's processes
/// in the reduced basis plus the exact mean-field error.
fn solve_deviated(
    model: &ModelSpec,
    bundle: &TransformBundle,
    a_hat: &GridFunction,
    n_players: usize,
    u_alt: &AltControl,
) -> Result<(ReducedSystem, f64)> {
    let grid = bundle.grid().clone();
    let n = grid.len();
    let steps = grid.n_steps();
    let w = grid.weights();
    let nn = n_players as f64;
    let v = volterra_operator(&bundle.f_hat);
    let c_mat = volterra_operator(&bundle.c_hat);
    let gram = gram_kernel(&bundle.c_hat);
    let sigma_cols = crate::closed_loop::ito_columns(&bundle.sigma_hat);
    let lambda = 1.0 / model.r_weight;

    // kappa = (1/R) int gram (gamma a + eta): the control offset folded into
    // the feedback players' forcing.
    let kappa = DVector::from_fn(n, |i, _| {
        let mut acc = 0.0;
        for j in 0..n {
            acc += w[j] * gram.get(i, j) * (model.gamma * a_hat.get(j) + model.eta);
        }
        acc * lambda
    });
    let phi_hat = DVector::from_column_slice(bundle.phi_hat.values());

    // Deterministic aggregate: with K the full-Gram operator,
    // [(I + K) - (I + K) V / N - (1 - 1/N) V] y = (1/N) [ (N-1)(phi_hat +
    // kappa) + (I + K)(phi_hat + C u_alt_det) ].
    let k_full = DMatrix::from_fn(n, n, |i, j| lambda * w[j] * gram.get(i, j));
    let eye = DMatrix::<f64>::identity(n, n);
    let ik = &eye + &k_full;
    let op_det = &ik - (&ik * &v) / nn - (1.0 - 1.0 / nn) * &v;
    let cu_det = &c_mat * DVector::from_column_slice(&u_alt.det);
    let rhs_det =
        ((nn - 1.0) * (&phi_hat + &kappa) + &ik * (&phi_hat + &cu_det)) / nn;
    let y_det = op_det
        .lu()
        .solve(&rhs_det)
        .ok_or_else(|| Error::SingularSystem(" (deviated aggregate mean solve)".into()))?;
    let x1_det = &phi_hat + &cu_det + &v * &y_det;

    // Noise columns.
    let mut y_own = DMatrix::<f64>::zeros(n, steps);
    let mut y_rest = DMatrix::<f64>::zeros(n, steps);
    let mut x1_own = DMatrix::<f64>::zeros(n, steps);
    let mut x1_rest = DMatrix::<f64>::zeros(n, steps);

    let columns: Vec<(usize, DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> = (0
        ..steps)
        .into_par_iter()
        .map(|m| {
            let g_m = gram_kernel_from(&bundle.c_hat, m + 1);
            let k_m = DMatrix::from_fn(n, n, |i, j| lambda * w[j] * g_m.get(i, j));
            let ik_m = &eye + &k_m;
            let op_m = &ik_m - (&ik_m * &v) / nn - (1.0 - 1.0 / nn) * &v;
            let lu = op_m.lu();

            let sig = DVector::from_fn(n, |i, _| sigma_cols.get(i, m));
            let cu_own = &c_mat
                * DVector::from_fn(n, |i, _| {
                    u_alt.own[(i, m)] + u_alt.avg[(i, m)] / nn
                });
            let cu_rest = &c_mat * DVector::from_fn(n, |i, _| u_alt.avg[(i, m)] / nn);

            // Coefficient on player 1's own increment.
            let rhs_own = (&ik_m * (&sig + &cu_own)) / nn;
            let y1 = lu
                .solve(&rhs_own)
                .ok_or_else(|| Error::SingularSystem(" (deviated own column)".into()))?;
            // Coefficient on each other player's increment.
            let rhs_rest = (&sig + &ik_m * &cu_rest) / nn;
            let yr = lu
                .solve(&rhs_rest)
                .ok_or_else(|| Error::SingularSystem(" (deviated rest column)".into()))?;

            let x1o = &sig + &cu_own + &v * &y1;
            let x1r = &cu_rest + &v * &yr;
            Ok((m, y1, yr, x1o, x1r))
        })
        .collect::<Result<Vec<_>>>()?;
    for (m, y1, yr, x1o, x1r) in columns {
        for i in 0..n {
            y_own[(i, m)] = y1[i];
            y_rest[(i, m)] = yr[i];
            x1_own[(i, m)] = x1o[i];
            x1_rest[(i, m)] = x1r[i];
        }
    }

    // Exact mean-field error of the deviated aggregate.
    let h = grid.step();
    let mf = grid.quadrature(|i| {
        let d = a_hat.get(i) - y_det[i];
        let mut acc = d * d;
        for m in 0..steps {
            acc += h * (y_own[(i, m)] * y_own[(i, m)] + (nn - 1.0) * y_rest[(i, m)] * y_rest[(i, m)]);
        }
        acc
    });

    let system = ReducedSystem {
        player: ReducedProcess {
            det: x1_det.iter().copied().collect(),
            own: x1_own,
            rest: x1_rest,
        },
        mean_field: ReducedProcess {
            det: y_det.iter().copied().collect(),
            own: y_own,
            rest: y_rest,
        },
        control: ReducedProcess {
            det: u_alt.det.clone(),
            own: DMatrix::from_fn(n, steps, |i, m| {
                u_alt.own[(i, m)] + u_alt.avg[(i, m)] / nn
            }),
            rest: DMatrix::from_fn(n, steps, |i, m| u_alt.avg[(i, m)] / nn),
        },
    };
    Ok((system, mf))
}
