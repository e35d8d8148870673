//! Reductions of delayed dynamics to the Volterra form, plus the plain-SDE
//! closed forms used as test oracles.
//!
//! A state-delay model `dx = [A(t) x(t-h) + int_{t-h}^t B(t,s) x(s) ds] dt
//! + C(t) u(t) dt + D(t) dW` is rewritten as a Volterra model with `b = 0`
//! through its fundamental solution `F(t, s)` (unit value at `t = s`, zero
//! before). A control-delay model `dx = A(t) x dt + C(t) u(t-h) dt + D dW`
//! uses the scalar propagator `E(t, s) = exp(int_s^t A)` instead.
//!
//! The delay `h` must be an exact multiple of the grid step; interpolating
//! delayed values would introduce an unanalyzed error term, so mismatches are
//! rejected outright.

use crate::error::{Error, Result};
use crate::grid::{GridFunction, KernelMatrix, KernelShape, TimeGrid};
use crate::transforms::{Fn1, Fn2, GridSettings, ModelSpec};
use std::sync::Arc;

/// Delay in the state process.
#[derive(Clone)]
pub struct DelayStateModel {
    pub a_coef: Fn1,
    /// Distributed-delay kernel, defined on the band `s in [t-h, t]`;
    /// evaluations off the band count as zero.
    pub band_kernel: Fn2,
    pub control_coef: Fn1,
    pub noise_coef: Fn1,
    pub lag: f64,
    /// Initial segment on `[-h, 0]`.
    pub initial: Fn1,
}

impl DelayStateModel {
    pub fn new(
        a_coef: Fn1,
        band_kernel: Fn2,
        control_coef: Fn1,
        noise_coef: Fn1,
        lag: f64,
        initial: Fn1,
    ) -> Result<Self> {
        if !(lag > 0.0) || !lag.is_finite() {
            return Err(Error::invalid("delay must be positive"));
        }
        Ok(DelayStateModel {
            a_coef,
            band_kernel,
            control_coef,
            noise_coef,
            lag,
            initial,
        })
    }

    fn band(&self, t: f64, s: f64) -> f64 {
        if s < t - self.lag - 1e-12 || s > t + 1e-12 {
            0.0
        } else {
            (self.band_kernel)(t, s)
        }
    }
}

/// Delay in the control variable. The convention `C(t) = 0` for `t < h` is
/// enforced at construction.
#[derive(Clone)]
pub struct DelayControlModel {
    pub a_coef: Fn1,
    pub control_coef: Fn1,
    pub noise_coef: Fn1,
    pub lag: f64,
    pub initial: Fn1,
}

impl DelayControlModel {
    pub fn new(
        a_coef: Fn1,
        control_coef: Fn1,
        noise_coef: Fn1,
        lag: f64,
        initial: Fn1,
    ) -> Result<Self> {
        if !(lag > 0.0) || !lag.is_finite() {
            return Err(Error::invalid("delay must be positive"));
        }
        let h = lag;
        let raw = control_coef;
        let clipped: Fn1 = Arc::new(move |t| if t < h { 0.0 } else { raw(t) });
        Ok(DelayControlModel {
            a_coef,
            control_coef: clipped,
            noise_coef,
            lag,
            initial,
        })
    }
}

/// A fundamental solution sampled on the grid.
#[derive(Debug, Clone)]
pub struct FundamentalSolution {
    pub values: KernelMatrix,
}

fn lag_steps(lag: f64, grid: &TimeGrid) -> Result<usize> {
    let h = grid.step();
    let ratio = lag / h;
    let rounded = ratio.round();
    if (ratio - rounded).abs() > 1e-9 || rounded < 1.0 {
        return Err(Error::invalid(format!(
            "delay {lag} is not a positive multiple of the grid step {h}"
        )));
    }
    Ok(rounded as usize)
}

/// Scalar propagator `E(t, s) = exp(int_s^t A(r) dr)`, computed from the
/// cumulative trapezoid integral of `A`. Full square; `E(s, s) = 1`.
pub fn propagator(a_coef: &Fn1, grid: &Arc<TimeGrid>) -> Result<FundamentalSolution> {
    let n = grid.len();
    let h = grid.step();
    let mut cumulative = vec![0.0; n];
    for i in 1..n {
        let (t0, t1) = (grid.node(i - 1), grid.node(i));
        cumulative[i] = cumulative[i - 1] + 0.5 * h * (a_coef(t0) + a_coef(t1));
    }
    let mut values = KernelMatrix::zeros(grid.clone(), KernelShape::Full);
    for i in 0..n {
        for j in 0..n {
            values.set(i, j, (cumulative[i] - cumulative[j]).exp());
        }
    }
    Ok(FundamentalSolution { values })
}

/// Fundamental solution of the state-delay dynamics: for each start node `s`,
/// `F(., s)` solves
///
/// ```text
/// dF(t, s)/dt = A(t) F(t - h, s) + int_{t-h}^t B(t, r) F(r, s) dr,
/// F(s, s) = 1,   F(t, s) = 0 for t < s,
/// ```
///
/// integrated forward by a trapezoid-consistent method of steps. The jump of
/// `F` from 0 to 1 at the start node is handled with one-sided values so the
/// scheme stays second order through the kink.
pub fn fundamental_solution(
    model: &DelayStateModel,
    grid: &Arc<TimeGrid>,
) -> Result<FundamentalSolution> {
    let d = lag_steps(model.lag, grid)?;
    let n = grid.len();
    let h = grid.step();
    let mut values = KernelMatrix::zeros(grid.clone(), KernelShape::LowerTriangular);

    for s in 0..n {
        let mut col = vec![0.0; n];
        col[s] = 1.0;
        // Delayed value used by the derivative at node v, one-sided:
        // `plus` treats the start node as already at 1, `minus` as still 0.
        let delayed = |col: &[f64], v: usize, plus: bool| -> f64 {
            if v < d {
                return 0.0;
            }
            let idx = v - d;
            if idx < s || (idx == s && !plus) {
                0.0
            } else {
                col[idx]
            }
        };
        // Distributed term int_{max(t_v - h, t_s)}^{t_v} B(t_v, r) F(r, s) dr,
        // optionally excluding the top node (whose value is implicit).
        let distributed = |col: &[f64], v: usize, skip_top: bool| -> f64 {
            let lo = v.saturating_sub(d).max(s);
            if v <= lo {
                return 0.0;
            }
            let tv = grid.node(v);
            let mut acc = 0.0;
            for r in lo..=v {
                if skip_top && r == v {
                    continue;
                }
                let w = grid.segment_weight(lo, v, r);
                acc += w * model.band(tv, grid.node(r)) * col[r];
            }
            acc
        };

        for k in s..n - 1 {
            let tv = grid.node(k);
            let tn = grid.node(k + 1);
            let g_left = (model.a_coef)(tv) * delayed(&col, k, true) + distributed(&col, k, false);
            // Right endpoint: explicit part plus the implicit top-node weight
            // of the distributed integral.
            let g_right_explicit =
                (model.a_coef)(tn) * delayed(&col, k + 1, false) + distributed(&col, k + 1, true);
            let lo = (k + 1).saturating_sub(d).max(s);
            let top_weight = if k + 1 > lo {
                grid.segment_weight(lo, k + 1, k + 1) * model.band(tn, tn)
            } else {
                0.0
            };
            // col[k+1] = col[k] + h/2 (g_left + g_right_explicit + top_weight * col[k+1])
            let rhs = col[k] + 0.5 * h * (g_left + g_right_explicit);
            let denom = 1.0 - 0.5 * h * top_weight;
            if denom.abs() < 1e-14 {
                return Err(Error::SingularSystem(
                    " (implicit delay step has a vanishing pivot)".into(),
                ));
            }
            col[k + 1] = rhs / denom;
        }
        for t in s..n {
            values.set(t, s, col[t]);
        }
    }
    Ok(FundamentalSolution { values })
}

fn lookup(values: &KernelMatrix, grid: &TimeGrid, t: f64, s: f64) -> f64 {
    let h = grid.step();
    let i = (t / h).round() as usize;
    let j = (s / h).round() as usize;
    if i >= grid.len() || j >= grid.len() {
        return 0.0;
    }
    values.get(i, j)
}

/// Free response of the state-delay model: the deterministic solution driven
/// only by the initial segment `k` on `[-h, 0]`,
///
/// ```text
/// psi(t) = F(t, 0) k(0)
///          + int_{-h}^0 [ F(t, s+h) A(s+h) + int_0^h F(t, u) B(u, s) du ] k(s) ds.
/// ```
///
/// `F(t, u)` vanishes for `u > t`, so for nodes inside the first lag both
/// integrals run over truncated supports; the quadratures use the exact
/// subranges (the support edges are grid nodes) to stay second order.
pub fn state_delay_free_response(
    model: &DelayStateModel,
    fundamental: &FundamentalSolution,
    grid: &Arc<TimeGrid>,
) -> Result<GridFunction> {
    let d = lag_steps(model.lag, grid)?;
    let h = grid.step();
    let n = grid.len();
    let seg_w = |lo: usize, hi: usize, r: usize| -> f64 {
        if hi <= lo {
            0.0
        } else if r == lo || r == hi {
            0.5 * h
        } else {
            h
        }
    };
    let mut psi = vec![0.0; n];
    for (t_idx, slot) in psi.iter_mut().enumerate() {
        let k0 = (model.initial)(0.0);
        let mut val = fundamental.values.get(t_idx, 0) * k0;
        // A-part: support s in [-h, (t - h) /\ 0], i.e. q up to min(t, d).
        let m_a = d.min(t_idx);
        for q in 0..=m_a {
            let s = -model.lag + q as f64 * h;
            let term = fundamental.values.get(t_idx, q)
                * (model.a_coef)(s + model.lag)
                * (model.initial)(s);
            val += seg_w(0, m_a, q) * term;
        }
        // B-part: the inner integral is continuous in s, so the outer
        // quadrature uses the full [-h, 0] range; the inner one is truncated
        // to the band and to F's support.
        for q in 0..=d {
            let s = -model.lag + q as f64 * h;
            let m_b = q.min(t_idx);
            let mut inner = 0.0;
            for u in 0..=m_b {
                inner += seg_w(0, m_b, u)
                    * fundamental.values.get(t_idx, u)
                    * model.band(grid.node(u), s);
            }
            val += seg_w(0, d, q) * inner * (model.initial)(s);
        }
        *slot = val;
    }
    Ok(GridFunction::from_values(grid.clone(), psi))
}

/// Convert a state-delay model into a Volterra model: `b = 0`, `f = 0`,
/// `c(t, s) = F(t, s) C(s)`, `sigma(t, s) = F(t, s) D(s)`, `phi` the free
/// response of the initial segment.
pub fn delay_state_to_volterra(
    model: &DelayStateModel,
    grid: &Arc<TimeGrid>,
    r_weight: f64,
    gamma: f64,
    eta: f64,
    settings: GridSettings,
) -> Result<ModelSpec> {
    let fundamental = fundamental_solution(model, grid)?;
    let psi = state_delay_free_response(model, &fundamental, grid)?;

    let grid_phi = grid.clone();
    let psi_vals = psi.values().to_vec();
    let phi: Fn1 = Arc::new(move |t| {
        let i = (t / grid_phi.step()).round() as usize;
        psi_vals[i.min(grid_phi.len() - 1)]
    });
    let g1 = grid.clone();
    let f1 = fundamental.values.clone();
    let control = model.control_coef.clone();
    let c: Fn2 = Arc::new(move |t, s| lookup(&f1, &g1, t, s) * control(s));
    let g2 = grid.clone();
    let f2 = fundamental.values.clone();
    let noise = model.noise_coef.clone();
    let sigma: Fn2 = Arc::new(move |t, s| lookup(&f2, &g2, t, s) * noise(s));

    ModelSpec::new(
        grid.horizon(),
        phi,
        Arc::new(|_, _| 0.0),
        Arc::new(|_, _| 0.0),
        c,
        sigma,
        r_weight,
        gamma,
        eta,
        GridSettings {
            n_steps: grid.n_steps(),
            ..settings
        },
    )
}

/// Convert a control-delay model into a Volterra model: `b = 0`, `f = 0`,
/// `c(t, s) = E(t, s + h) C(s + h)` (zero once `s + h` leaves the horizon),
/// `sigma(t, s) = E(t, s) D(s)`, `phi(t) = E(t, 0) k(0)`.
pub fn delay_control_to_volterra(
    model: &DelayControlModel,
    grid: &Arc<TimeGrid>,
    r_weight: f64,
    gamma: f64,
    eta: f64,
    settings: GridSettings,
) -> Result<ModelSpec> {
    let d = lag_steps(model.lag, grid)?;
    let prop = propagator(&model.a_coef, grid)?;

    let n = grid.len();
    let g1 = grid.clone();
    let p1 = prop.values.clone();
    let control = model.control_coef.clone();
    let lag = model.lag;
    let c: Fn2 = Arc::new(move |t, s| {
        let j = (s / g1.step()).round() as usize + d;
        if j >= n {
            return 0.0;
        }
        lookup(&p1, &g1, t, g1.node(j)) * control(s + lag)
    });
    let g2 = grid.clone();
    let p2 = prop.values.clone();
    let noise = model.noise_coef.clone();
    let sigma: Fn2 = Arc::new(move |t, s| lookup(&p2, &g2, t, s) * noise(s));
    let k0 = (model.initial)(0.0);
    let g3 = grid.clone();
    let p3 = prop.values.clone();
    let phi: Fn1 = Arc::new(move |t| lookup(&p3, &g3, t, 0.0) * k0);

    ModelSpec::new(
        grid.horizon(),
        phi,
        Arc::new(|_, _| 0.0),
        Arc::new(|_, _| 0.0),
        c,
        sigma,
        r_weight,
        gamma,
        eta,
        GridSettings {
            n_steps: grid.n_steps(),
            ..settings
        },
    )
}

/// Closed forms for constant-in-`t` coefficient models (the plain-SDE case):
/// the resolvent of `b`, the transformed control kernel, the drift factor
/// `exp(int_0^t b)`, and the Gram kernel, all by exponent quadrature.
#[derive(Debug, Clone)]
pub struct SdeOracle {
    pub resolvent: KernelMatrix,
    pub c_hat: KernelMatrix,
    pub drift_factor: GridFunction,
    pub gram: KernelMatrix,
}

pub fn sde_closed_forms(
    b: &Fn1,
    c: &Fn1,
    sigma: &Fn1,
    grid: &Arc<TimeGrid>,
) -> Result<SdeOracle> {
    let _ = sigma; // the noise kernel needs no transform in the SDE case
    let n = grid.len();
    let h = grid.step();
    let mut cum_b = vec![0.0; n];
    for i in 1..n {
        cum_b[i] = cum_b[i - 1] + 0.5 * h * (b(grid.node(i - 1)) + b(grid.node(i)));
    }
    let mut resolvent = KernelMatrix::zeros(grid.clone(), KernelShape::LowerTriangular);
    let mut c_hat = KernelMatrix::zeros(grid.clone(), KernelShape::LowerTriangular);
    for i in 0..n {
        for j in 0..=i {
            let growth = (cum_b[i] - cum_b[j]).exp();
            resolvent.set(i, j, b(grid.node(j)) * growth);
            c_hat.set(i, j, c(grid.node(j)) * growth);
        }
    }
    let drift_factor =
        GridFunction::from_values(grid.clone(), cum_b.iter().map(|v| v.exp()).collect());
    let mut gram = KernelMatrix::zeros(grid.clone(), KernelShape::Full);
    for i in 0..n {
        for j in 0..n {
            let m = i.min(j);
            let v = grid.segment_quadrature(0, m, |r| {
                let cr = c(grid.node(r));
                cr * cr * ((cum_b[i] - cum_b[r]) + (cum_b[j] - cum_b[r])).exp()
            });
            gram.set(i, j, v);
            gram.set(j, i, v);
        }
    }
    Ok(SdeOracle {
        resolvent,
        c_hat,
        drift_factor,
        gram,
    })
}
