//! The consistency (Nash certainty equivalence) equation and the solvability
//! margins behind the theory.
//!
//! The equilibrium trajectory `a` solves
//!
//! ```text
//! a(t) = phi_hat(t) + int_0^t f_hat(t,s) a(s) ds
//!        + (1/R) int_0^T gram(t,s) [ (gamma - 1) a(s) + eta ] ds.
//! ```
//!
//! The production route folds the Volterra term into the tilde quantities and
//! solves the resulting pure Fredholm equation; the residual is always
//! measured against the original mixed equation. A direct dense
//! discretization of the mixed equation is kept as the oracle route.

use crate::error::{Error, Result};
use crate::fredholm::{fredholm_solve, FredholmProblem, SolveMode};
use crate::grid::{volterra_operator, GridFunction, KernelMatrix};
use crate::transforms::{build_transforms, ModelSpec, TransformBundle};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NceRoute {
    /// Solve the tilde/Fredholm form (production path).
    FredholmTilde,
    /// Dense discretization of the mixed Volterra-Fredholm equation (oracle).
    VolterraFredholm,
}

impl NceRoute {
    pub fn as_str(&self) -> &'static str {
        match self {
            NceRoute::FredholmTilde => "fredholm-tilde",
            NceRoute::VolterraFredholm => "volterra-fredholm",
        }
    }
}

#[derive(Debug, Clone)]
pub struct NceSolution {
    pub a_hat: GridFunction,
    /// Sup-norm residual in the original mixed equation.
    pub residual_sup: f64,
    pub route: NceRoute,
}

/// Solve the consistency equation (builds the transforms internally).
pub fn solve_nce(model: &ModelSpec) -> Result<NceSolution> {
    let bundle = build_transforms(model)?;
    solve_nce_with(model, &bundle, NceRoute::FredholmTilde)
}

/// Solve the consistency equation on a prepared bundle via the given route.
pub fn solve_nce_with(
    model: &ModelSpec,
    bundle: &TransformBundle,
    route: NceRoute,
) -> Result<NceSolution> {
    let tol = bundle.settings.tol;
    let a_hat = match route {
        NceRoute::FredholmTilde => {
            let grid = bundle.grid().clone();
            let n = grid.len();
            let w = grid.weights();
            // forcing = phi_tilde + (eta/R) int gram_tilde(t, s) ds
            let mut forcing = vec![0.0; n];
            for (i, slot) in forcing.iter_mut().enumerate() {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += w[j] * bundle.gram_tilde.get(i, j);
                }
                *slot = bundle.phi_tilde.get(i) + model.eta * acc / model.r_weight;
            }
            let problem = FredholmProblem::new(
                bundle.gram_tilde.scale(model.gamma - 1.0),
                GridFunction::from_values(grid, forcing),
                model.r_weight,
            )?;
            fredholm_solve(&problem, SolveMode::Direct, tol, 0)?.solution
        }
        NceRoute::VolterraFredholm => {
            let grid = bundle.grid().clone();
            let n = grid.len();
            let w = grid.weights();
            let v = volterra_operator(&bundle.f_hat);
            let lambda = (model.gamma - 1.0) / model.r_weight;
            let a = DMatrix::from_fn(n, n, |i, j| {
                let id = if i == j { 1.0 } else { 0.0 };
                id - v[(i, j)] - lambda * w[j] * bundle.gram.get(i, j)
            });
            let rhs = DVector::from_fn(n, |i, _| {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += w[j] * bundle.gram.get(i, j);
                }
                bundle.phi_hat.get(i) + model.eta * acc / model.r_weight
            });
            let sol = a
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::SingularSystem(" (mixed-equation dense solve)".into()))?;
            GridFunction::from_values(grid, sol.iter().copied().collect())
        }
    };

    let residual_sup = nce_residual(&a_hat, model, bundle);
    if residual_sup > tol {
        return Err(Error::NceInconsistency {
            residual: residual_sup,
            tol,
        });
    }
    Ok(NceSolution {
        a_hat,
        residual_sup,
        route,
    })
}

/// Sup-norm residual of a candidate trajectory in the original mixed
/// consistency equation.
pub fn nce_residual(a_hat: &GridFunction, model: &ModelSpec, bundle: &TransformBundle) -> f64 {
    let grid = bundle.grid();
    let n = grid.len();
    let w = grid.weights();
    let mut worst = 0.0f64;
    for i in 0..n {
        let volterra = grid.segment_quadrature(0, i, |s| bundle.f_hat.get(i, s) * a_hat.get(s));
        let mut fredholm = 0.0;
        for j in 0..n {
            fredholm += w[j]
                * bundle.gram.get(i, j)
                * ((model.gamma - 1.0) * a_hat.get(j) + model.eta);
        }
        let rhs = bundle.phi_hat.get(i) + volterra + fredholm / model.r_weight;
        worst = worst.max((a_hat.get(i) - rhs).abs());
    }
    worst
}

/// Pass/fail record for one sufficient condition.
#[derive(Debug, Clone, Copy)]
pub struct ConditionValue {
    pub value: f64,
    pub threshold: f64,
}

impl ConditionValue {
    pub fn passes(&self) -> bool {
        self.value < self.threshold
    }
}

/// Every solvability margin and constant behind the sufficient conditions,
/// evaluated by grid quadrature. Reporting only: these conditions are
/// sufficient, not necessary, so a failing margin is a warning, not an
/// error — the discrete system may be perfectly well posed anyway.
#[derive(Debug, Clone)]
pub struct ConditionReport {
    /// `sup_t int |gram(t,s)|^2 ds / R` (existence for the mean equation).
    pub existence_margin: f64,
    /// `sup_t int |(gamma-1) gram_tilde(t,s)|^2 ds / R` (uniqueness for the
    /// consistency equation).
    pub uniqueness_margin: f64,
    /// Triple-integral condition with `A = f_hat`, `B = c_hat` vs `R^2/3`.
    pub smallness_coupled: ConditionValue,
    /// Same with `A = 0`, `B = c_hat`.
    pub smallness_decoupled: ConditionValue,
    /// `int_0^T int_0^t |c_hat|^2`.
    pub control_energy: f64,
    /// `int_0^T int_0^t |f_hat|^2`.
    pub coupling_energy: f64,
    /// `int_0^T int_0^t |P0|^2` with `P0` the resolvent of `f_hat`.
    pub resolvent_energy: f64,
    pub n_players: usize,
    /// `(1 + resolvent_energy) * coupling_energy * 360 * control_energy^2
    /// / (N^2 R^2)`, must be below 1/2; vanishes whenever `f = 0` and decays
    /// like `1/N^2` otherwise.
    pub population_smallness: f64,
}

impl ConditionReport {
    pub fn population_smallness_passes(&self) -> bool {
        self.population_smallness < 0.5
    }

    pub fn all_pass(&self) -> bool {
        self.existence_margin < 1.0
            && self.uniqueness_margin < 1.0
            && self.smallness_coupled.passes()
            && self.smallness_decoupled.passes()
            && self.population_smallness_passes()
    }
}

fn lower_triangle_sq_integral(k: &KernelMatrix) -> f64 {
    let grid = k.grid();
    let w = grid.weights();
    let n = grid.len();
    let mut acc = 0.0;
    for i in 0..n {
        let row = k.row(i);
        let inner = grid.segment_quadrature(0, i, |s| row[s] * row[s]);
        acc += w[i] * inner;
    }
    acc
}

/// Triple integral `T int int int_0^{s/\t} |B_hat(t,r) B(s,r)|^2 dr ds dt`
/// where `B_hat = B + P0 o B` and `P0` is the resolvent of `A`. The
/// solvability condition compares it against `R^2 / 3`.
pub fn smallness_value(b_hat: &KernelMatrix, b: &KernelMatrix) -> f64 {
    let grid = b.grid();
    let w = grid.weights();
    let n = grid.len();
    let mut acc = 0.0;
    for i in 0..n {
        let bh = b_hat.row(i);
        let mut acc_i = 0.0;
        for j in 0..n {
            let bj = b.row(j);
            let inner = grid.segment_quadrature(0, i.min(j), |r| {
                let v = bh[r] * bj[r];
                v * v
            });
            acc_i += w[j] * inner;
        }
        acc += w[i] * acc_i;
    }
    grid.horizon() * acc
}

/// Evaluate every margin for a model and population size `N`.
pub fn check_conditions(
    model: &ModelSpec,
    bundle: &TransformBundle,
    n_players: usize,
) -> Result<ConditionReport> {
    if n_players < 1 {
        return Err(Error::invalid("population size must be at least 1"));
    }
    let grid = bundle.grid();
    let n = grid.len();
    let w = grid.weights();
    let r = model.r_weight;

    let mut existence = 0.0f64;
    let mut uniqueness = 0.0f64;
    for i in 0..n {
        let mut m_acc = 0.0;
        let mut mt_acc = 0.0;
        for j in 0..n {
            let m = bundle.gram.get(i, j);
            let mt = (model.gamma - 1.0) * bundle.gram_tilde.get(i, j);
            m_acc += w[j] * m * m;
            mt_acc += w[j] * mt * mt;
        }
        existence = existence.max(m_acc);
        uniqueness = uniqueness.max(mt_acc);
    }

    // Case A = f_hat, B = c_hat: P0 is the resolvent of f_hat.
    let p0 = &bundle.coupling_resolvent.kernel;
    let b_hat_fc = bundle.c_hat.add(&crate::grid::kernel_compose(
        p0,
        &bundle.c_hat,
        crate::grid::ComposeRange::Volterra,
    )?)?;
    let cond_fc = smallness_value(&b_hat_fc, &bundle.c_hat);
    // Case A = 0: B_hat = B.
    let cond_0c = smallness_value(&bundle.c_hat, &bundle.c_hat);
    let threshold = r * r / 3.0;

    let control_energy = lower_triangle_sq_integral(&bundle.c_hat);
    let coupling_energy = lower_triangle_sq_integral(&bundle.f_hat);
    let resolvent_energy = lower_triangle_sq_integral(p0);
    let nn = n_players as f64;
    let population_smallness = (1.0 + resolvent_energy) * coupling_energy * 360.0 * control_energy * control_energy / (nn * nn * r * r);

    Ok(ConditionReport {
        existence_margin: existence / r,
        uniqueness_margin: uniqueness / r,
        smallness_coupled: ConditionValue {
            value: cond_fc,
            threshold,
        },
        smallness_decoupled: ConditionValue {
            value: cond_0c,
            threshold,
        },
        control_energy,
        coupling_energy,
        resolvent_energy,
        n_players,
        population_smallness,
    })
}
