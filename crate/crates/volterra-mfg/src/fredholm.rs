//! Second-kind Fredholm solvers and the mean-response operator.
//!
//! The discrete problem is `x_i = psi_i + (1/R) sum_j w_j A[i][j] x_j` with
//! the grid's trapezoid weights `w`. Two modes:
//!
//! * `Picard` iterates the fixed point and stops when the sup-norm residual
//!   drops below `tol` (mirrors the contraction argument behind the
//!   solvability condition `sup_t int |A(t,s)|^2 ds < R`);
//! * `Direct` assembles `(I - Q/R) x = psi` and solves it densely; the
//!   solution is accepted only when its residual is below `tol`.
//!
//! Every report carries `contraction_margin = sup_t int |A(t,s)|^2 ds / R`.
//! A margin at or above one means the proved sufficient condition fails; the
//! discrete system may still be solvable, and `Direct` will say so.

use crate::error::{Error, Result};
use crate::grid::{apply_volterra, GridFunction, KernelMatrix};
use crate::transforms::TransformBundle;
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct FredholmProblem {
    /// Full-square kernel `A`.
    pub kernel: KernelMatrix,
    /// Forcing `psi`.
    pub forcing: GridFunction,
    /// Weight `R > 0` dividing the integral term.
    pub r_weight: f64,
}

impl FredholmProblem {
    pub fn new(kernel: KernelMatrix, forcing: GridFunction, r_weight: f64) -> Result<Self> {
        if !kernel.grid().same_as(forcing.grid()) {
            return Err(Error::invalid("kernel and forcing grids differ"));
        }
        if !(r_weight > 0.0) {
            return Err(Error::invalid("R must be positive"));
        }
        Ok(FredholmProblem {
            kernel,
            forcing,
            r_weight,
        })
    }

    /// `sup_t int_0^T |A(t, s)|^2 ds / R`.
    pub fn contraction_margin(&self) -> f64 {
        let grid = self.kernel.grid();
        let w = grid.weights();
        let n = grid.len();
        let mut sup = 0.0f64;
        for i in 0..n {
            let row = self.kernel.row(i);
            let mut acc = 0.0;
            for j in 0..n {
                acc += w[j] * row[j] * row[j];
            }
            sup = sup.max(acc);
        }
        sup / self.r_weight
    }

    /// Sup-norm residual of a candidate solution in the discrete equation.
    pub fn residual_sup(&self, x: &GridFunction) -> f64 {
        let grid = self.kernel.grid();
        let w = grid.weights();
        let n = grid.len();
        let mut worst = 0.0f64;
        for i in 0..n {
            let row = self.kernel.row(i);
            let mut acc = 0.0;
            for j in 0..n {
                acc += w[j] * row[j] * x.get(j);
            }
            let r = x.get(i) - self.forcing.get(i) - acc / self.r_weight;
            worst = worst.max(r.abs());
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMode {
    Picard,
    Direct,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub solution: GridFunction,
    pub residual_sup: f64,
    pub iterations: usize,
    pub contraction_margin: f64,
}

pub fn fredholm_solve(
    problem: &FredholmProblem,
    mode: SolveMode,
    tol: f64,
    max_iter: usize,
) -> Result<SolveReport> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tol must be positive"));
    }
    let margin = problem.contraction_margin();
    let grid = problem.kernel.grid().clone();
    let n = grid.len();

    // Zero kernel: the forcing is the solution, exactly.
    if problem.kernel.sup_norm() == 0.0 {
        return Ok(SolveReport {
            solution: problem.forcing.clone(),
            residual_sup: 0.0,
            iterations: 0,
            contraction_margin: margin,
        });
    }

    match mode {
        SolveMode::Picard => {
            let mut x = problem.forcing.clone();
            for iter in 0..=max_iter {
                let residual = problem.residual_sup(&x);
                if residual <= tol {
                    return Ok(SolveReport {
                        solution: x,
                        residual_sup: residual,
                        iterations: iter,
                        contraction_margin: margin,
                    });
                }
                if iter == max_iter {
                    return Err(Error::IterationNotConverged {
                        iterations: max_iter,
                        residual,
                        tol,
                    });
                }
                // x <- psi + (1/R) Q x
                let w = grid.weights();
                let mut next = vec![0.0; n];
                for (i, slot) in next.iter_mut().enumerate() {
                    let row = problem.kernel.row(i);
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += w[j] * row[j] * x.get(j);
                    }
                    *slot = problem.forcing.get(i) + acc / problem.r_weight;
                }
                x = GridFunction::from_values(grid.clone(), next);
            }
            unreachable!()
        }
        SolveMode::Direct => {
            let w = grid.weights();
            let a = DMatrix::from_fn(n, n, |i, j| {
                let id = if i == j { 1.0 } else { 0.0 };
                id - w[j] * problem.kernel.get(i, j) / problem.r_weight
            });
            let rhs = DVector::from_column_slice(problem.forcing.values());
            let lu = a.lu();
            let sol = lu.solve(&rhs).ok_or_else(|| {
                Error::SingularSystem(" (zero pivot in LU factorization)".into())
            })?;
            let x = GridFunction::from_values(grid, sol.iter().copied().collect());
            let residual = problem.residual_sup(&x);
            if residual > tol {
                return Err(Error::SingularSystem(format!(
                    " (direct solve residual {residual:.3e} exceeds tol {tol:.3e})"
                )));
            }
            Ok(SolveReport {
                solution: x,
                residual_sup: residual,
                iterations: 0,
                contraction_margin: margin,
            })
        }
    }
}

/// Apply the mean-response operator: the returned `x` solves
///
/// ```text
/// x(t) = phi_hat(t) + int_0^t f_hat(t,s) a(s) ds
///        + (1/R) int_0^T gram(t,s) { gamma a(s) + eta - x(s) } ds,
/// ```
///
/// i.e. a Fredholm solve with kernel `-gram` and the forcing above.
pub fn gamma_apply(
    bundle: &TransformBundle,
    a: &GridFunction,
    gamma: f64,
    eta: f64,
    r_weight: f64,
) -> Result<GridFunction> {
    let grid = bundle.grid().clone();
    if !grid.same_as(a.grid()) {
        return Err(Error::invalid("a lives on a different grid"));
    }
    let n = grid.len();
    let w = grid.weights();

    let fa = apply_volterra(&bundle.f_hat, a);
    let mut forcing = vec![0.0; n];
    for (i, slot) in forcing.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..n {
            acc += w[j] * bundle.gram.get(i, j) * (gamma * a.get(j) + eta);
        }
        *slot = bundle.phi_hat.get(i) + fa.get(i) + acc / r_weight;
    }

    let problem = FredholmProblem::new(
        bundle.gram.scale(-1.0),
        GridFunction::from_values(grid, forcing),
        r_weight,
    )?;
    let report = fredholm_solve(&problem, SolveMode::Direct, bundle.settings.tol, 0)?;
    Ok(report.solution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{KernelShape, TimeGrid};
    use crate::transforms::{build_transforms, const1, const2, GridSettings, ModelSpec};

    fn constant_problem(a: f64, psi: f64, r: f64, t: f64, n: usize) -> FredholmProblem {
        let grid = TimeGrid::uniform(t, n).unwrap();
        let kernel = KernelMatrix::sample(grid.clone(), KernelShape::Full, |_, _| a).unwrap();
        let forcing = GridFunction::constant(grid, psi);
        FredholmProblem::new(kernel, forcing, r).unwrap()
    }

    #[test]
    fn zero_kernel_returns_forcing() {
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let kernel = KernelMatrix::zeros(grid.clone(), KernelShape::Full);
        let forcing = GridFunction::sample(grid, |t| t * t - 0.5).unwrap();
        let p = FredholmProblem::new(kernel, forcing.clone(), 1.0).unwrap();
        let rep = fredholm_solve(&p, SolveMode::Picard, 1e-12, 100).unwrap();
        assert_eq!(rep.iterations, 0);
        assert_eq!(rep.solution.sup_distance(&forcing), 0.0);
    }

    #[test]
    fn constant_kernel_analytic_solution() {
        // x = 1 + (x/2) int_0^1 ds  =>  x = 2.
        let p = constant_problem(1.0, 1.0, 2.0, 1.0, 64);
        let rep = fredholm_solve(&p, SolveMode::Direct, 1e-10, 0).unwrap();
        for &v in rep.solution.values() {
            assert!((v - 2.0).abs() < 1e-10);
        }
        assert!((rep.contraction_margin - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unit_spectral_radius_fails_both_modes() {
        // A = 1, R = 1, T = 1: the integral operator has eigenvalue exactly 1.
        let p = constant_problem(1.0, 1.0, 1.0, 1.0, 32);
        assert!(matches!(
            fredholm_solve(&p, SolveMode::Picard, 1e-10, 200),
            Err(Error::IterationNotConverged { .. })
        ));
        assert!(matches!(
            fredholm_solve(&p, SolveMode::Direct, 1e-10, 0),
            Err(Error::SingularSystem(_))
        ));
    }

    #[test]
    fn picard_and_direct_agree_under_contraction() {
        let grid = TimeGrid::uniform(1.0, 48).unwrap();
        let kernels: Vec<KernelMatrix> = vec![
            KernelMatrix::sample(grid.clone(), KernelShape::Full, |t, s| (t * s).cos()).unwrap(),
            KernelMatrix::sample(grid.clone(), KernelShape::Full, |t, s| {
                0.8 * (-(t - s).powi(2)).exp()
            })
            .unwrap(),
        ];
        let forcing = GridFunction::sample(grid, |t| 1.0 + 0.3 * t).unwrap();
        for kernel in kernels {
            let p = FredholmProblem::new(kernel, forcing.clone(), 2.5).unwrap();
            assert!(p.contraction_margin() < 1.0);
            let tol = 1e-11;
            let pic = fredholm_solve(&p, SolveMode::Picard, tol, 500).unwrap();
            let dir = fredholm_solve(&p, SolveMode::Direct, tol, 0).unwrap();
            let dist = pic.solution.sup_distance(&dir.solution);
            assert!(dist < 10.0 * tol, "mode disagreement {dist}");
            assert!(pic.residual_sup <= tol);
            assert!(dir.residual_sup <= tol);
        }
    }

    #[test]
    fn solutions_refine_at_second_order() {
        // Smooth kernel; compare against a fine-grid reference at shared nodes.
        let solve_at = |n: usize| -> Vec<f64> {
            let grid = TimeGrid::uniform(1.0, n).unwrap();
            let kernel =
                KernelMatrix::sample(grid.clone(), KernelShape::Full, |t, s| (-(t * s)).exp())
                    .unwrap();
            let forcing = GridFunction::sample(grid, |t| 1.0 + t).unwrap();
            let p = FredholmProblem::new(kernel, forcing, 2.0).unwrap();
            fredholm_solve(&p, SolveMode::Direct, 1e-9, 0)
                .unwrap()
                .solution
                .values()
                .to_vec()
        };
        let reference = solve_at(512);
        let err = |n: usize| -> f64 {
            let sol = solve_at(n);
            let stride = 512 / n;
            sol.iter()
                .enumerate()
                .map(|(i, v)| (v - reference[i * stride]).abs())
                .fold(0.0f64, f64::max)
        };
        let (e32, e64) = (err(32), err(64));
        let ratio = e32 / e64;
        assert!((3.0..5.5).contains(&ratio), "refinement ratio {ratio}");
    }

    fn sde_bundle(r: f64) -> TransformBundle {
        let model = ModelSpec::new(
            1.0,
            const1(1.0),
            const2(0.0),
            const2(0.0),
            const2(1.0),
            const2(0.0),
            r,
            0.0,
            0.0,
            GridSettings::default(),
        )
        .unwrap();
        build_transforms(&model).unwrap()
    }

    #[test]
    fn gamma_apply_with_zero_gram_returns_phi_hat() {
        let model = ModelSpec::new(
            1.0,
            const1(1.0),
            const2(0.3),
            const2(0.0),
            const2(0.0), // c = 0 so the Gram kernel vanishes
            const2(0.0),
            1.0,
            0.7,
            0.4,
            GridSettings::default(),
        )
        .unwrap();
        let bundle = build_transforms(&model).unwrap();
        let a = GridFunction::sample(bundle.grid().clone(), |t| t.sin()).unwrap();
        let out = gamma_apply(&bundle, &a, 0.7, 0.4, 1.0).unwrap();
        assert_eq!(out.sup_distance(&bundle.phi_hat), 0.0);
    }

    #[test]
    fn gamma_apply_matches_dense_oracle_on_sde_case() {
        // b = 0, c = 1: gram(t, s) = s /\ t exactly, so assemble the dense
        // system (I + Q/R) x = 1 from the closed form and compare.
        let bundle = sde_bundle(10.0);
        let grid = bundle.grid().clone();
        let n = grid.len();
        let w = grid.weights();
        let a0 = GridFunction::constant(grid.clone(), 0.0);
        let out = gamma_apply(&bundle, &a0, 0.0, 0.0, 10.0).unwrap();

        let m = DMatrix::from_fn(n, n, |i, j| {
            let id = if i == j { 1.0 } else { 0.0 };
            id + w[j] * grid.node(i).min(grid.node(j)) / 10.0
        });
        let rhs = DVector::from_element(n, 1.0);
        let oracle = m.lu().solve(&rhs).unwrap();
        let mut err = 0.0f64;
        for i in 0..n {
            err = err.max((out.get(i) - oracle[i]).abs());
        }
        assert!(err < 1e-10, "oracle distance {err}");
    }

    #[test]
    fn gamma_apply_forcing_reduces_to_phi_hat_for_zero_argument() {
        // a = 0 and eta = 0: x solves x = phi_hat - (1/R) int gram x.
        let bundle = sde_bundle(10.0);
        let grid = bundle.grid().clone();
        let a0 = GridFunction::constant(grid.clone(), 0.0);
        let via_gamma = gamma_apply(&bundle, &a0, 0.3, 0.0, 10.0).unwrap();
        let problem = FredholmProblem::new(
            bundle.gram.scale(-1.0),
            bundle.phi_hat.clone(),
            10.0,
        )
        .unwrap();
        let direct = fredholm_solve(&problem, SolveMode::Direct, 1e-10, 0).unwrap();
        assert!(via_gamma.sup_distance(&direct.solution) < 1e-12);
    }
}
