//! Hatted and tilde transforms of the raw model kernels.
//!
//! Starting from the game's data `(phi, b, f, c, sigma, R, gamma, eta)`, this
//! module resolves the state's own feedback through the resolvent `P` of `b`
//! and produces the derived kernels used everywhere downstream:
//!
//! * `c_hat(t, s) = c(t, s) + int_s^t P(t, r) c(r, s) dr`, and likewise
//!   `phi_hat`, `f_hat`, `sigma_hat`;
//! * the Gram kernel `gram(t, s) = int_0^{s /\ t} c_hat(t, r) c_hat(s, r) dr`;
//! * the tilde quantities that fold the `f_hat` Volterra term into the
//!   forcing, turning the consistency equation into a pure Fredholm equation.
//!
//! The tilde pair `(phi_tilde, gram_tilde)` is built with the Neumann series
//! of the discrete Volterra operator of `f_hat` (matrix powers), not by
//! re-quadrature of the resolvent kernel: that makes the Fredholm reduction
//! invert the discrete Volterra operator exactly, so the transformed and the
//! original consistency equations have the same discrete solution down to
//! round-off. The resolvent kernel of `f_hat` is still computed and exposed
//! for reporting and for the solvability conditions.

use crate::error::{Error, Result};
use crate::grid::{
    apply_volterra, gram_kernel, kernel_compose, volterra_operator, volterra_resolvent,
    ComposeRange, GridFunction, KernelMatrix, KernelShape, Resolvent, TimeGrid,
};
use nalgebra::{DMatrix, DVector};
use std::fmt;
use std::sync::Arc;

pub type Fn1 = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type Fn2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

pub fn const1(v: f64) -> Fn1 {
    Arc::new(move |_| v)
}

pub fn const2(v: f64) -> Fn2 {
    Arc::new(move |_, _| v)
}

/// Discretization and series settings shared by a model.
#[derive(Debug, Clone, Copy)]
pub struct GridSettings {
    pub n_steps: usize,
    /// Maximum number of resolvent series terms.
    pub k_max: usize,
    /// Solver tolerance (series truncation, residual checks).
    pub tol: f64,
}

impl Default for GridSettings {
    fn default() -> Self {
        GridSettings {
            n_steps: 64,
            k_max: 40,
            tol: 1e-10,
        }
    }
}

/// The game's data: drift offset `phi`, kernels `b, f, c, sigma`, control
/// weight `R > 0`, mean-field coupling `gamma`, cost offset `eta`.
#[derive(Clone)]
pub struct ModelSpec {
    pub horizon: f64,
    pub phi: Fn1,
    pub b: Fn2,
    pub f: Fn2,
    pub c: Fn2,
    pub sigma: Fn2,
    pub r_weight: f64,
    pub gamma: f64,
    pub eta: f64,
    pub settings: GridSettings,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("horizon", &self.horizon)
            .field("r_weight", &self.r_weight)
            .field("gamma", &self.gamma)
            .field("eta", &self.eta)
            .field("settings", &self.settings)
            .finish_non_exhaustive()
    }
}

impl ModelSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        horizon: f64,
        phi: Fn1,
        b: Fn2,
        f: Fn2,
        c: Fn2,
        sigma: Fn2,
        r_weight: f64,
        gamma: f64,
        eta: f64,
        settings: GridSettings,
    ) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::invalid("horizon must be positive"));
        }
        if !(r_weight > 0.0) || !r_weight.is_finite() {
            return Err(Error::invalid("control weight R must be positive"));
        }
        if !gamma.is_finite() || !eta.is_finite() {
            return Err(Error::invalid("gamma and eta must be finite"));
        }
        if settings.n_steps < 2 {
            return Err(Error::invalid("n_steps must be at least 2"));
        }
        Ok(ModelSpec {
            horizon,
            phi,
            b,
            f,
            c,
            sigma,
            r_weight,
            gamma,
            eta,
            settings,
        })
    }

    pub fn grid(&self) -> Result<Arc<TimeGrid>> {
        TimeGrid::uniform(self.horizon, self.settings.n_steps)
    }
}

/// All kernels derived from a model, sampled on one shared grid.
#[derive(Debug, Clone)]
pub struct TransformBundle {
    grid: Arc<TimeGrid>,
    pub settings: GridSettings,
    /// Resolvent of `b` with series diagnostics.
    pub resolvent: Resolvent,
    /// Raw sampled kernels (kept for re-substitution checks).
    pub c_raw: KernelMatrix,
    pub sigma_raw: KernelMatrix,
    pub c_hat: KernelMatrix,
    pub phi_hat: GridFunction,
    pub f_hat: KernelMatrix,
    pub sigma_hat: KernelMatrix,
    /// Gram kernel of `c_hat` (full square, symmetric).
    pub gram: KernelMatrix,
    /// Resolvent of `f_hat` (kernel form, for reporting and conditions).
    pub coupling_resolvent: Resolvent,
    pub phi_tilde: GridFunction,
    pub gram_tilde: KernelMatrix,
}

impl TransformBundle {
    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }
}

/// Neumann series of a discrete Volterra operator matrix: `sum_{k>=1} V^k`,
/// truncated when the sup-norm of the current power drops below `tol`.
pub(crate) fn operator_neumann(v: &DMatrix<f64>, k_max: usize, tol: f64) -> Result<DMatrix<f64>> {
    let mut acc = v.clone();
    let mut power = v.clone();
    let sup = |m: &DMatrix<f64>| m.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let mut last = sup(&power);
    let mut terms = 1usize;
    while last > tol && terms < k_max {
        power = v * &power;
        acc += &power;
        last = sup(&power);
        terms += 1;
    }
    if last > tol {
        return Err(Error::NonConvergence {
            last_term_sup: last,
            terms,
            bound: last,
            tol,
        });
    }
    Ok(acc)
}

/// Build every derived kernel for a model.
pub fn build_transforms(model: &ModelSpec) -> Result<TransformBundle> {
    let grid = model.grid()?;
    let settings = model.settings;
    let lower = KernelShape::LowerTriangular;

    let b = KernelMatrix::sample(grid.clone(), lower, |t, s| (model.b)(t, s))?;
    let c = KernelMatrix::sample(grid.clone(), lower, |t, s| (model.c)(t, s))?;
    let f = KernelMatrix::sample(grid.clone(), lower, |t, s| (model.f)(t, s))?;
    let sigma = KernelMatrix::sample(grid.clone(), lower, |t, s| (model.sigma)(t, s))?;
    let phi = GridFunction::sample(grid.clone(), |t| (model.phi)(t))?;

    let resolvent = volterra_resolvent(&b, settings.k_max, settings.tol)?;
    let p = &resolvent.kernel;

    let c_hat = c.add(&kernel_compose(p, &c, ComposeRange::Volterra)?)?;
    let f_hat = f.add(&kernel_compose(p, &f, ComposeRange::Volterra)?)?;
    let sigma_hat = sigma.add(&kernel_compose(p, &sigma, ComposeRange::Volterra)?)?;
    let phi_hat = phi.add(&apply_volterra(p, &phi));

    let gram = gram_kernel(&c_hat);

    let coupling_resolvent = volterra_resolvent(&f_hat, settings.k_max, settings.tol)?;

    // Operator-level Neumann series of f_hat's Volterra matrix; applied as a
    // plain matrix it inverts (I - V) exactly at series convergence.
    let v = volterra_operator(&f_hat);
    let series_tol = (settings.tol * 1e-3).clamp(1e-300, 1e-13);
    let r_op = operator_neumann(&v, settings.k_max.max(60), series_tol)?;

    let n = grid.len();
    let phi_tilde = {
        let x = DVector::from_column_slice(phi_hat.values());
        let extra = &r_op * &x;
        GridFunction::from_values(
            grid.clone(),
            (0..n).map(|i| phi_hat.get(i) + extra[i]).collect(),
        )
    };
    let gram_tilde = {
        let m = DMatrix::from_fn(n, n, |i, j| gram.get(i, j));
        let extra = &r_op * &m;
        let mut out = KernelMatrix::zeros(grid.clone(), KernelShape::Full);
        for i in 0..n {
            for j in 0..n {
                out.set(i, j, gram.get(i, j) + extra[(i, j)]);
            }
        }
        out
    };

    Ok(TransformBundle {
        grid,
        settings,
        resolvent,
        c_raw: c,
        sigma_raw: sigma,
        c_hat,
        phi_hat,
        f_hat,
        sigma_hat,
        gram,
        coupling_resolvent,
        phi_tilde,
        gram_tilde,
    })
}

/// Maximum asymmetry `max |M(t,s) - M(s,t)|` of the Gram kernel. Zero by
/// construction; anything else signals a discretization bug.
pub fn gram_asymmetry(bundle: &TransformBundle) -> f64 {
    let n = bundle.grid.len();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            worst = worst.max((bundle.gram.get(i, j) - bundle.gram.get(j, i)).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delay::sde_closed_forms;

    fn sde_model(b: f64, c: f64, sigma: f64, n_steps: usize) -> ModelSpec {
        ModelSpec::new(
            1.0,
            const1(1.0),
            const2(b),
            const2(0.0),
            const2(c),
            const2(sigma),
            10.0,
            0.0,
            0.0,
            GridSettings {
                n_steps,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_feedback_kernel_passes_through() {
        // b = 0: P = 0, c_hat = c, phi_hat = phi, f_hat = f bit-for-bit.
        let model = ModelSpec::new(
            1.0,
            Arc::new(|t| 1.0 + t),
            const2(0.0),
            Arc::new(|t, s| 0.3 * (t + s)),
            Arc::new(|t, s| (t - s).cos()),
            const2(1.0),
            2.0,
            0.5,
            0.1,
            GridSettings::default(),
        )
        .unwrap();
        let bundle = build_transforms(&model).unwrap();
        assert_eq!(bundle.resolvent.kernel.sup_norm(), 0.0);
        let grid = bundle.grid().clone();
        let c = KernelMatrix::sample(grid.clone(), KernelShape::LowerTriangular, |t, s| {
            (t - s).cos()
        })
        .unwrap();
        for i in 0..grid.len() {
            for j in 0..grid.len() {
                assert_eq!(bundle.c_hat.get(i, j).to_bits(), c.get(i, j).to_bits());
            }
        }
        let phi = GridFunction::sample(grid, |t| 1.0 + t).unwrap();
        assert_eq!(bundle.phi_hat.sup_distance(&phi), 0.0);
    }

    #[test]
    fn constant_coefficients_match_closed_forms() {
        let model = sde_model(1.0, 1.0, 0.0, 64);
        let bundle = build_transforms(&model).unwrap();
        let grid = bundle.grid().clone();
        let oracle = sde_closed_forms(&const1(1.0), &const1(1.0), &const1(0.0), &grid).unwrap();
        let mut err = 0.0f64;
        for i in 0..grid.len() {
            for j in 0..=i {
                err = err.max((bundle.c_hat.get(i, j) - oracle.c_hat.get(i, j)).abs());
            }
        }
        // c_hat(t, s) = c e^{b (t-s)}; e at the far corner.
        assert!((bundle.c_hat.get(grid.n_steps(), 0) - 1.0f64.exp()).abs() < 5e-3);
        assert!(err < 5e-3, "sup error {err}");
    }

    #[test]
    fn refinement_reduces_c_hat_error_quadratically() {
        let mut errors = Vec::new();
        for n_steps in [32usize, 64, 128] {
            let model = sde_model(1.0, 1.0, 0.0, n_steps);
            let bundle = build_transforms(&model).unwrap();
            let grid = bundle.grid().clone();
            let mut err = 0.0f64;
            for i in 0..grid.len() {
                for j in 0..=i {
                    let exact = (grid.node(i) - grid.node(j)).exp();
                    err = err.max((bundle.c_hat.get(i, j) - exact).abs());
                }
            }
            errors.push(err);
        }
        for w in errors.windows(2) {
            let ratio = w[0] / w[1];
            assert!((3.0..5.5).contains(&ratio), "refinement ratio {ratio}");
        }
    }

    #[test]
    fn zero_coupling_collapses_tilde_quantities() {
        let model = sde_model(0.5, 1.0, 0.0, 32);
        let bundle = build_transforms(&model).unwrap();
        assert_eq!(bundle.coupling_resolvent.kernel.sup_norm(), 0.0);
        assert_eq!(bundle.phi_tilde.sup_distance(&bundle.phi_hat), 0.0);
        let n = bundle.grid().len();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(
                    bundle.gram_tilde.get(i, j).to_bits(),
                    bundle.gram.get(i, j).to_bits()
                );
            }
        }
    }

    #[test]
    fn gram_kernel_is_symmetric_and_matches_min() {
        let model = sde_model(0.0, 1.0, 0.0, 16);
        let bundle = build_transforms(&model).unwrap();
        assert_eq!(gram_asymmetry(&bundle), 0.0);
        let grid = bundle.grid().clone();
        for i in 0..grid.len() {
            for j in 0..grid.len() {
                let expect = grid.node(i).min(grid.node(j));
                assert!((bundle.gram.get(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gram_of_zero_control_kernel_vanishes() {
        let model = sde_model(0.7, 0.0, 1.0, 16);
        let bundle = build_transforms(&model).unwrap();
        assert_eq!(bundle.gram.sup_norm(), 0.0);
        assert_eq!(gram_asymmetry(&bundle), 0.0);
    }

    #[test]
    fn c_hat_adjacent_jumps_shrink_under_refinement() {
        // Continuity proxy: the largest jump between adjacent t-nodes of
        // c_hat(., s) halves when the grid is refined.
        let jump = |n_steps: usize| -> f64 {
            let model = sde_model(1.0, 1.0, 0.0, n_steps);
            let bundle = build_transforms(&model).unwrap();
            let grid = bundle.grid().clone();
            let mut worst = 0.0f64;
            for j in 0..grid.len() {
                for i in j..grid.len() - 1 {
                    worst = worst.max((bundle.c_hat.get(i + 1, j) - bundle.c_hat.get(i, j)).abs());
                }
            }
            worst
        };
        let (j1, j2) = (jump(32), jump(64));
        let ratio = j1 / j2;
        assert!((1.6..2.5).contains(&ratio), "jump ratio {ratio}");
    }

    #[test]
    fn sigma_hat_passthrough_when_b_zero() {
        let model = sde_model(0.0, 1.0, 0.7, 16);
        let bundle = build_transforms(&model).unwrap();
        let grid = bundle.grid().clone();
        for i in 0..grid.len() {
            for j in 0..=i {
                assert_eq!(bundle.sigma_hat.get(i, j), 0.7);
            }
        }
    }
}
