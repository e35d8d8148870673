//! Time discretization, kernel sampling, quadrature, and Volterra resolvents.
//!
//! Everything downstream works on a shared uniform partition of `[0, T]` with
//! composite-trapezoid quadrature. Two-variable kernels are sampled into
//! `(n+1) x (n+1)` matrices indexed `(first argument, second argument)`, so a
//! Volterra kernel `k(t, s)` with support `s <= t` is lower triangular. The
//! resolvent of a Volterra kernel is built as the truncated series of iterated
//! kernels
//!
//! ```text
//! P = sum_k L^k,   L^1 = K,   L^{k+1}(t, s) = int_s^t K(t, r) L^k(r, s) dr,
//! ```
//!
//! with each composition evaluated by trapezoid quadrature on the sub-range
//! `[s, t]`. The k-th term is bounded by `M^k T^(k-1) / (k-1)!` (`M = sup|K|`),
//! so the series decays superexponentially for bounded kernels.

use crate::error::{Error, Result};
use std::sync::Arc;

/// Uniform partition of `[0, T]` with composite-trapezoid weights.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl TimeGrid {
    /// Build a uniform grid with `n_steps + 1` nodes on `[0, T]`.
    ///
    /// Weights are `h/2` at the endpoints and `h` in the interior, so they sum
    /// to `T`. Rejects `T <= 0` and `n_steps < 2`.
    pub fn uniform(horizon: f64, n_steps: usize) -> Result<Arc<Self>> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::invalid(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if n_steps < 2 {
            return Err(Error::invalid(format!(
                "n_steps must be at least 2, got {n_steps}"
            )));
        }
        let h = horizon / n_steps as f64;
        let mut nodes: Vec<f64> = (0..=n_steps).map(|i| i as f64 * h).collect();
        // Pin the last node to T exactly.
        nodes[n_steps] = horizon;
        let mut weights = vec![h; n_steps + 1];
        weights[0] = 0.5 * h;
        weights[n_steps] = 0.5 * h;
        Ok(Arc::new(TimeGrid {
            horizon,
            n_steps,
            nodes,
            weights,
        }))
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of nodes, `n_steps + 1`.
    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Global quadrature weights over `[0, T]`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.n_steps == other.n_steps && self.horizon.to_bits() == other.horizon.to_bits()
    }

    /// Trapezoid quadrature of `g` (given by node index) over `[t_j, t_i]`.
    /// Zero when `i <= j`.
    pub fn segment_quadrature(&self, j: usize, i: usize, g: impl Fn(usize) -> f64) -> f64 {
        if i <= j {
            return 0.0;
        }
        let h = self.step();
        let mut acc = 0.5 * (g(j) + g(i));
        for r in j + 1..i {
            acc += g(r);
        }
        acc * h
    }

    /// Trapezoid quadrature of `g` over the whole interval `[0, T]`.
    pub fn quadrature(&self, g: impl Fn(usize) -> f64) -> f64 {
        self.segment_quadrature(0, self.n_steps, g)
    }

    /// Weight of node `r` in the trapezoid rule on `[t_j, t_i]` (zero outside).
    pub fn segment_weight(&self, j: usize, i: usize, r: usize) -> f64 {
        if i <= j || r < j || r > i {
            return 0.0;
        }
        if r == j || r == i {
            0.5 * self.step()
        } else {
            self.step()
        }
    }
}

/// Support pattern of a sampled kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelShape {
    /// Nonzero only for `second argument <= first argument`.
    LowerTriangular,
    /// Nonzero only for `second argument >= first argument`.
    UpperTriangular,
    Full,
}

impl KernelShape {
    fn supports(&self, i: usize, j: usize) -> bool {
        match self {
            KernelShape::LowerTriangular => j <= i,
            KernelShape::UpperTriangular => j >= i,
            KernelShape::Full => true,
        }
    }
}

/// A two-variable function sampled on the grid: `values[i][j] = k(t_i, t_j)`.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    grid: Arc<TimeGrid>,
    shape: KernelShape,
    values: Vec<f64>,
}

impl KernelMatrix {
    pub fn zeros(grid: Arc<TimeGrid>, shape: KernelShape) -> Self {
        let n = grid.len();
        KernelMatrix {
            grid,
            shape,
            values: vec![0.0; n * n],
        }
    }

    /// Sample `k(t, s)` at the grid nodes inside the shape's support; entries
    /// outside the support are exact zeros. A non-finite evaluation is an
    /// error carrying the offending `(t, s)`.
    pub fn sample(
        grid: Arc<TimeGrid>,
        shape: KernelShape,
        k: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        let n = grid.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if shape.supports(i, j) {
                    let (t, s) = (grid.node(i), grid.node(j));
                    let v = k(t, s);
                    if !v.is_finite() {
                        return Err(Error::KernelEvaluation { t, s });
                    }
                    values[i * n + j] = v;
                }
            }
        }
        Ok(KernelMatrix {
            grid,
            shape,
            values,
        })
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn shape(&self) -> KernelShape {
        self.shape
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid.len() + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let n = self.grid.len();
        self.values[i * n + j] = v;
    }

    /// Row `i` as a slice (all columns).
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Elementwise `self + other`, keeping `self`'s shape when they agree.
    pub fn add(&self, other: &KernelMatrix) -> Result<KernelMatrix> {
        self.check_same_grid(other)?;
        let shape = if self.shape == other.shape {
            self.shape
        } else {
            KernelShape::Full
        };
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(KernelMatrix {
            grid: self.grid.clone(),
            shape,
            values,
        })
    }

    pub fn scale(&self, factor: f64) -> KernelMatrix {
        KernelMatrix {
            grid: self.grid.clone(),
            shape: self.shape,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub(crate) fn check_same_grid(&self, other: &KernelMatrix) -> Result<()> {
        if !self.grid.same_as(&other.grid) {
            return Err(Error::invalid("kernel matrices live on different grids"));
        }
        Ok(())
    }
}

/// A one-variable function sampled at the grid nodes.
#[derive(Debug, Clone)]
pub struct GridFunction {
    grid: Arc<TimeGrid>,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn sample(grid: Arc<TimeGrid>, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values: Vec<f64> = grid.nodes().iter().map(|&t| f(t)).collect();
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::KernelEvaluation {
                t: grid.node(bad),
                s: f64::NAN,
            });
        }
        Ok(GridFunction { grid, values })
    }

    pub fn constant(grid: Arc<TimeGrid>, value: f64) -> Self {
        let n = grid.len();
        GridFunction {
            grid,
            values: vec![value; n],
        }
    }

    pub fn from_values(grid: Arc<TimeGrid>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.len());
        GridFunction { grid, values }
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn sup_distance(&self, other: &GridFunction) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridFunction {
        GridFunction {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &GridFunction) -> GridFunction {
        GridFunction {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }
}

/// Integration range of the inner variable in a kernel composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComposeRange {
    /// `r` runs over `[s, t]` (both kernels Volterra, result Volterra).
    Volterra,
    /// `r` runs over `[0, t]` (result is a full matrix).
    Prefix,
}

/// Quadrature of the composition `(A o B)(t, s) = int A(t, r) B(r, s) dr`
/// over the requested `r`-range.
pub fn kernel_compose(
    a: &KernelMatrix,
    b: &KernelMatrix,
    range: ComposeRange,
) -> Result<KernelMatrix> {
    a.check_same_grid(b)?;
    let grid = a.grid().clone();
    let n = grid.len();
    let shape = match range {
        ComposeRange::Volterra => KernelShape::LowerTriangular,
        ComposeRange::Prefix => KernelShape::Full,
    };
    let mut out = KernelMatrix::zeros(grid.clone(), shape);
    for i in 0..n {
        let a_row = a.row(i);
        for j in 0..n {
            let v = match range {
                ComposeRange::Volterra => {
                    if j > i {
                        continue;
                    }
                    grid.segment_quadrature(j, i, |r| a_row[r] * b.get(r, j))
                }
                ComposeRange::Prefix => grid.segment_quadrature(0, i, |r| a_row[r] * b.get(r, j)),
            };
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// `(K f)(t) = int_0^t K(t, s) f(s) ds` by trapezoid quadrature.
pub fn apply_volterra(k: &KernelMatrix, f: &GridFunction) -> GridFunction {
    let grid = k.grid().clone();
    let n = grid.len();
    let mut values = vec![0.0; n];
    for (i, value) in values.iter_mut().enumerate() {
        let row = k.row(i);
        *value = grid.segment_quadrature(0, i, |r| row[r] * f.get(r));
    }
    GridFunction::from_values(grid, values)
}

/// Resolvent of a Volterra kernel together with series diagnostics.
#[derive(Debug, Clone)]
pub struct Resolvent {
    pub kernel: KernelMatrix,
    /// Number of series terms accumulated.
    pub terms: usize,
    /// Sup-norm of the last accumulated term.
    pub last_term_sup: f64,
    /// Analytic bound `M^k T^(k-1) / (k-1)!` on the first omitted term.
    pub truncation_bound: f64,
}

/// Truncated iterated-kernel series for the resolvent of a lower-triangular
/// Volterra kernel.
///
/// Stops when the sup-norm of the current term drops below `tol`, or at
/// `k_max` terms. Hitting `k_max` with the computed term still above `tol` is
/// accepted only when the analytic term bound is already below `tol`;
/// otherwise it is a non-convergence error.
pub fn volterra_resolvent(k: &KernelMatrix, k_max: usize, tol: f64) -> Result<Resolvent> {
    if k.shape() != KernelShape::LowerTriangular {
        return Err(Error::invalid(
            "volterra_resolvent requires a lower-triangular kernel",
        ));
    }
    if k_max < 1 {
        return Err(Error::invalid("k_max must be at least 1"));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tol must be positive"));
    }

    let grid = k.grid().clone();
    let n = grid.len();
    let horizon = grid.horizon();
    let sup_k = k.sup_norm();

    let mut accum = k.clone();
    let mut term = k.clone();
    let mut term_sup = sup_k;
    let mut terms = 1usize;
    // bound_k = M^k T^(k-1) / (k-1)!; start at k = 1.
    let mut bound = sup_k;

    while term_sup > tol && terms < k_max {
        let mut next = KernelMatrix::zeros(grid.clone(), KernelShape::LowerTriangular);
        for i in 0..n {
            let k_row = k.row(i);
            for j in 0..=i {
                let v = grid.segment_quadrature(j, i, |r| k_row[r] * term.get(r, j));
                next.set(i, j, v);
            }
        }
        term = next;
        term_sup = term.sup_norm();
        terms += 1;
        bound = bound * sup_k * horizon / (terms - 1) as f64;
        accum = accum.add(&term)?;
    }

    let next_bound = bound * sup_k * horizon / terms as f64;
    if term_sup > tol && next_bound > tol {
        return Err(Error::NonConvergence {
            last_term_sup: term_sup,
            terms,
            bound: next_bound,
            tol,
        });
    }
    Ok(Resolvent {
        kernel: accum,
        terms,
        last_term_sup: term_sup,
        truncation_bound: next_bound,
    })
}

/// Discrete Volterra operator matrix of a kernel: row `i` holds the trapezoid
/// weights of `int_0^{t_i} k(t_i, s) x(s) ds`, so `(V x)_i = sum_j V[i][j] x_j`.
pub fn volterra_operator(k: &KernelMatrix) -> nalgebra::DMatrix<f64> {
    let grid = k.grid();
    let n = grid.len();
    let mut v = nalgebra::DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let w = grid.segment_weight(0, i, j);
            if w != 0.0 {
                v[(i, j)] = w * k.get(i, j);
            }
        }
    }
    v
}

/// Gram kernel of a Volterra kernel `B`:
/// `G(t, s) = int_{t_lo}^{s /\ t} B(t, r) B(s, r) dr` (symmetric, full square).
///
/// `lo` is the node index of the lower integration limit; `lo = 0` gives the
/// plain Gram kernel and `lo = m + 1` the conditional-expectation truncation
/// that discards the first `m + 1` increments.
pub fn gram_kernel_from(b: &KernelMatrix, lo: usize) -> KernelMatrix {
    let grid = b.grid().clone();
    let n = grid.len();
    let mut g = KernelMatrix::zeros(grid.clone(), KernelShape::Full);
    for i in 0..n {
        let bi = b.row(i);
        for j in 0..=i {
            let bj = b.row(j);
            let v = grid.segment_quadrature(lo, j.min(i), |r| bi[r] * bj[r]);
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    g
}

/// Plain Gram kernel, `lo = 0`.
pub fn gram_kernel(b: &KernelMatrix) -> KernelMatrix {
    gram_kernel_from(b, 0)
}
