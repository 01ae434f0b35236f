//! Chambolle-Pock primal-dual iteration for box-constrained QPs with
//! diagonal Hessian, plus its accelerated variant for strongly convex `Q`.
//!
//! One iteration:
//!
//! ```text
//!   lambda+ = lambda + sigma (A ybar - b)
//!   mu+     = max(0, mu + sigma (C ybar - d))
//!   y+      = clamp(P (y - tau (A' lambda+ + C' mu+) - tau c), l, u),  P = diag(1 / (1 + tau q))
//!   ybar+   = y+ + theta (y+ - y)
//! ```
//!
//! The iteration never factors a matrix: `P` is diagonal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::precond::{estimate_spectral_norm, DEFAULT_POWER_ITERS};
use crate::problem::{all_finite, PrimalDualPoint, QpData, Vector};

/// Floor applied to `q_i` before forming `P`, so every subproblem is convex.
pub const Q_MIN: f64 = 1e-8;

/// Relative distance under which `y_i` counts as sitting on a bound.
pub const BOUND_ACTIVE_TOL: f64 = 1e-8;

pub const DEFAULT_ACCEL_RATIO: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CpSettings {
    pub theta: f64,
    pub max_iters: usize,
    pub eps_prim: f64,
    pub eps_gap: f64,
    /// Stationarity check using analytically recovered bound multipliers.
    /// `None` stops on primal feasibility and gap alone.
    pub eps_dual: Option<f64>,
    pub check_every: usize,
    pub power_iters: usize,
    pub power_seed: u64,
    /// Restarted schedule for the accelerated variant: each cycle starts at
    /// `(r tau, sigma / r)` and restarts once `tau` has decayed below the
    /// plain `tau`. `None` runs one uninterrupted schedule from `(tau, sigma)`.
    pub accel_restart_ratio: Option<f64>,
}

impl Default for CpSettings {
    fn default() -> Self {
        Self {
            theta: 1.0,
            max_iters: 200_000,
            eps_prim: 1e-8,
            eps_gap: 1e-8,
            eps_dual: Some(1e-8),
            check_every: 25,
            power_iters: DEFAULT_POWER_ITERS,
            power_seed: 0,
            accel_restart_ratio: Some(DEFAULT_ACCEL_RATIO),
        }
    }
}

impl CpSettings {
    pub fn with_tolerance(mut self, eps: f64) -> Self {
        self.eps_prim = eps;
        self.eps_gap = eps;
        if self.eps_dual.is_some() {
            self.eps_dual = Some(eps);
        }
        self
    }
}

/// Step sizes and stopping rule for one QP.
#[derive(Clone, Debug, PartialEq)]
pub struct CpParams {
    pub tau: f64,
    pub sigma: f64,
    pub theta: f64,
    /// Spectral norm estimate of `[A; C]` the steps were chosen for.
    pub norm_k: f64,
    pub max_iters: usize,
    pub eps_prim: f64,
    pub eps_gap: f64,
    pub eps_dual: Option<f64>,
    pub check_every: usize,
    pub accel_restart_ratio: Option<f64>,
}

impl CpParams {
    /// Explicit step sizes; rejects pairs with `tau sigma ||K||^2 >= 1`.
    pub fn with_steps(tau: f64, sigma: f64, norm_k: f64, settings: &CpSettings) -> Result<Self> {
        if !(tau > 0.0 && sigma > 0.0) || !tau.is_finite() || !sigma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "step sizes must be positive and finite (tau={tau}, sigma={sigma})"
            )));
        }
        if !(0.0..=1.0).contains(&settings.theta) {
            return Err(Error::InvalidConfig(format!(
                "theta must lie in [0, 1], got {}",
                settings.theta
            )));
        }
        if let Some(r) = settings.accel_restart_ratio {
            if !(r >= 1.0) || !r.is_finite() {
                return Err(Error::InvalidConfig(format!("accel_restart_ratio must be >= 1, got {r}")));
            }
        }
        let product = tau * sigma * norm_k * norm_k;
        if product >= 1.0 {
            return Err(Error::InvalidStepSizes { product });
        }
        Ok(Self {
            tau,
            sigma,
            theta: settings.theta,
            norm_k,
            max_iters: settings.max_iters,
            eps_prim: settings.eps_prim,
            eps_gap: settings.eps_gap,
            eps_dual: settings.eps_dual,
            check_every: settings.check_every.max(1),
            accel_restart_ratio: settings.accel_restart_ratio,
        })
    }

    /// Default steps for `qp`: estimates `||K||` and applies [`default_steps`].
    pub fn for_qp(qp: &QpData, settings: &CpSettings) -> Self {
        let norm_k = estimate_spectral_norm(
            &qp.a_eq,
            &qp.a_ineq,
            settings.power_iters,
            settings.power_seed,
        );
        let l_f = qp.q_diag.iter().fold(Q_MIN, |m, q| m.max(*q));
        let (tau, sigma) = default_steps(l_f, norm_k);
        Self::with_steps(tau, sigma, norm_k, settings)
            .expect("default step sizes satisfy tau*sigma*|K|^2 < 1")
    }

    /// The admissibility inequality `(1/tau - L_f)(1/sigma) < ||K||^2` as it
    /// is sometimes quoted for this scheme. Reported for diagnostics only;
    /// construction enforces `tau sigma ||K||^2 < 1`.
    pub fn satisfies_quoted_condition(&self, l_f: f64) -> bool {
        (1.0 / self.tau - l_f) / self.sigma < self.norm_k * self.norm_k
    }
}

/// `tau = sigma = 0.9/||K||` when the curvature is small relative to
/// `||K||`, otherwise `tau = 1/(L_f + ||K||)`, `sigma = 0.99/(tau ||K||^2)`.
pub fn default_steps(l_f: f64, norm_k: f64) -> (f64, f64) {
    if l_f * 0.9 / norm_k < 0.1 * norm_k {
        (0.9 / norm_k, 0.9 / norm_k)
    } else {
        let tau = 1.0 / (l_f + norm_k);
        (tau, 0.99 / (tau * norm_k * norm_k))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Residuals {
    pub prim_inf_norm: f64,
    /// `NaN` when bound multipliers were not available.
    pub dual_inf_norm: f64,
    pub gap_abs: f64,
    pub iter: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub point: PrimalDualPoint,
    pub residuals: Residuals,
    pub converged: bool,
    pub iters: usize,
    pub norm_k_used: f64,
}

impl SolveReport {
    /// Turns a non-converged report into [`Error::MaxItersExceeded`].
    pub fn into_result(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::MaxItersExceeded { iters: self.iters })
        }
    }
}

/// Iterate of the scheme, including the extrapolated primal `ybar`.
#[derive(Clone, Debug, PartialEq)]
pub struct CpState {
    pub y: Vector,
    pub lambda: Vector,
    pub mu: Vector,
    pub y_bar: Vector,
}

impl CpState {
    pub fn from_point(pt: &PrimalDualPoint) -> Self {
        Self {
            y: pt.y.clone(),
            lambda: pt.lambda.clone(),
            mu: pt.mu.clone(),
            y_bar: pt.y.clone(),
        }
    }

    pub fn point(&self) -> PrimalDualPoint {
        PrimalDualPoint::new(self.y.clone(), self.lambda.clone(), self.mu.clone())
    }
}

pub(crate) fn floored_q(qp: &QpData) -> Vector {
    qp.q_diag.map(|q| q.max(Q_MIN))
}

fn p_diag(q: &Vector, tau: f64) -> Vector {
    q.map(|qi| 1.0 / (1.0 + tau * qi))
}

struct Workspace {
    ky_eq: Vector,
    ky_in: Vector,
    kt: Vector,
}

impl Workspace {
    fn new(qp: &QpData) -> Self {
        Self {
            ky_eq: Vector::zeros(qp.n_eq()),
            ky_in: Vector::zeros(qp.n_ineq()),
            kt: Vector::zeros(qp.n()),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn step_in_place(
    st: &mut CpState,
    qp: &QpData,
    p: &Vector,
    tau: f64,
    sigma: f64,
    theta: f64,
    ws: &mut Workspace,
) {
    if qp.n_eq() > 0 {
        ws.ky_eq.gemv(1.0, &qp.a_eq, &st.y_bar, 0.0);
        for i in 0..qp.n_eq() {
            st.lambda[i] += sigma * (ws.ky_eq[i] - qp.b_eq[i]);
        }
    }
    if qp.n_ineq() > 0 {
        ws.ky_in.gemv(1.0, &qp.a_ineq, &st.y_bar, 0.0);
        for i in 0..qp.n_ineq() {
            st.mu[i] = (st.mu[i] + sigma * (ws.ky_in[i] - qp.b_ineq[i])).max(0.0);
        }
    }
    ws.kt.fill(0.0);
    if qp.n_eq() > 0 {
        ws.kt.gemv_tr(1.0, &qp.a_eq, &st.lambda, 0.0);
    }
    if qp.n_ineq() > 0 {
        ws.kt.gemv_tr(1.0, &qp.a_ineq, &st.mu, 1.0);
    }
    for j in 0..qp.n() {
        let nu = p[j] * (st.y[j] - tau * (ws.kt[j] + qp.c[j]));
        let y_new = box_clamp(nu, qp.lower[j], qp.upper[j]);
        st.y_bar[j] = y_new + theta * (y_new - st.y[j]);
        st.y[j] = y_new;
    }
}

/// `min(u, max(l, v))`; returns `l` when `l == u`.
#[inline]
pub(crate) fn box_clamp(v: f64, l: f64, u: f64) -> f64 {
    if v <= l {
        l
    } else if v >= u {
        u
    } else {
        v
    }
}

/// One plain iteration from `state`.
pub fn cp_step(state: &CpState, qp: &QpData, params: &CpParams) -> Result<CpState> {
    qp.check()?;
    check_state(state, qp)?;
    let q = floored_q(qp);
    let p = p_diag(&q, params.tau);
    let mut next = state.clone();
    let mut ws = Workspace::new(qp);
    step_in_place(&mut next, qp, &p, params.tau, params.sigma, params.theta, &mut ws);
    if !state_finite(&next) {
        return Err(Error::NonFinite("cp_step"));
    }
    Ok(next)
}

fn state_finite(st: &CpState) -> bool {
    all_finite(&st.y) && all_finite(&st.lambda) && all_finite(&st.mu) && all_finite(&st.y_bar)
}

fn check_state(st: &CpState, qp: &QpData) -> Result<()> {
    let pairs = [
        ("cp state: y", qp.n(), st.y.len()),
        ("cp state: ybar", qp.n(), st.y_bar.len()),
        ("cp state: lambda", qp.n_eq(), st.lambda.len()),
        ("cp state: mu", qp.n_ineq(), st.mu.len()),
    ];
    for (context, expected, got) in pairs {
        if expected != got {
            return Err(Error::DimensionMismatch {
                context,
                expected,
                got,
            });
        }
    }
    Ok(())
}

/// `s = Q y + c + A' lambda + C' mu`, the stationarity residual before bound
/// multipliers.
pub(crate) fn stationarity(qp: &QpData, pt: &PrimalDualPoint) -> Vector {
    let mut s = qp.q_diag.component_mul(&pt.y) + &qp.c;
    if qp.n_eq() > 0 {
        s.gemv_tr(1.0, &qp.a_eq, &pt.lambda, 1.0);
    }
    if qp.n_ineq() > 0 {
        s.gemv_tr(1.0, &qp.a_ineq, &pt.mu, 1.0);
    }
    s
}

fn at_bound(y: f64, b: f64) -> bool {
    b.is_finite() && (y - b).abs() <= BOUND_ACTIVE_TOL * b.abs().max(1.0)
}

/// Bound multipliers from stationarity: `alpha = max(0, s)` on the lower
/// bound, `beta = max(0, -s)` on the upper bound, zero where the bound is not
/// touched. For a fixed variable (`l_i == u_i`) the whole of `s_i` is
/// reported in `alpha_i`.
pub fn recover_bound_multipliers(qp: &QpData, pt: &PrimalDualPoint) -> (Vector, Vector) {
    let s = stationarity(qp, pt);
    let n = qp.n();
    let mut alpha = Vector::zeros(n);
    let mut beta = Vector::zeros(n);
    for i in 0..n {
        let (l, u, y) = (qp.lower[i], qp.upper[i], pt.y[i]);
        if l == u {
            alpha[i] = s[i];
        } else if at_bound(y, l) {
            alpha[i] = s[i].max(0.0);
        } else if at_bound(y, u) {
            beta[i] = (-s[i]).max(0.0);
        }
    }
    (alpha, beta)
}

fn point_dims(qp: &QpData, pt: &PrimalDualPoint) -> Result<()> {
    let pairs = [
        ("residuals: y", qp.n(), pt.y.len()),
        ("residuals: lambda", qp.n_eq(), pt.lambda.len()),
        ("residuals: mu", qp.n_ineq(), pt.mu.len()),
    ];
    for (context, expected, got) in pairs {
        if expected != got {
            return Err(Error::DimensionMismatch {
                context,
                expected,
                got,
            });
        }
    }
    Ok(())
}

/// Primal infeasibility, complementarity gap and (when bound multipliers are
/// attached to `pt`) the stationarity residual.
pub fn residuals(qp: &QpData, pt: &PrimalDualPoint) -> Result<Residuals> {
    point_dims(qp, pt)?;
    let (prim, gap) = prim_and_gap(qp, pt);
    let dual = match &pt.bound_mult {
        Some((alpha, beta)) => (stationarity(qp, pt) - alpha + beta).amax(),
        None => f64::NAN,
    };
    Ok(Residuals {
        prim_inf_norm: prim,
        dual_inf_norm: dual,
        gap_abs: gap,
        iter: 0,
    })
}

fn prim_and_gap(qp: &QpData, pt: &PrimalDualPoint) -> (f64, f64) {
    let mut prim = 0.0_f64;
    let mut gap = 0.0;
    if qp.n_eq() > 0 {
        let r = &qp.a_eq * &pt.y - &qp.b_eq;
        prim = prim.max(r.amax());
        gap += pt.lambda.dot(&r);
    }
    if qp.n_ineq() > 0 {
        let r = &qp.a_ineq * &pt.y - &qp.b_ineq;
        prim = r.iter().fold(prim, |m, v| m.max(v.max(0.0)));
        gap += pt.mu.dot(&r);
    }
    (prim, gap.abs())
}

fn dual_residual(qp: &QpData, pt: &PrimalDualPoint) -> f64 {
    let (alpha, beta) = recover_bound_multipliers(qp, pt);
    (stationarity(qp, pt) - alpha + beta).amax()
}

/// Runs plain Chambolle-Pock (`theta` from `params`) from `init`.
pub fn solve_qp(qp: &QpData, init: &PrimalDualPoint, params: &CpParams) -> Result<SolveReport> {
    run(qp, init, params, false, |_, _| {})
}

/// Accelerated variant: when `gamma = max(min_i q_i, 0) > 0` the step sizes
/// follow `theta = 1/sqrt(1 + gamma tau)`, `tau *= theta`, `sigma /= theta`
/// after every iteration. With `gamma = 0` it is the plain scheme.
///
/// The schedule drives `tau` to zero, which is slower than the plain
/// method's linear rate once the iterates are close. With
/// `accel_restart_ratio = Some(r)` the schedule is restarted (steps reset,
/// `y_bar = y`) whenever `tau` falls below the plain `tau`; each cycle
/// starts from `(r tau, sigma / r)`.
pub fn solve_qp_accelerated(
    qp: &QpData,
    init: &PrimalDualPoint,
    params: &CpParams,
) -> Result<SolveReport> {
    run(qp, init, params, true, |_, _| {})
}

/// [`solve_qp`] / [`solve_qp_accelerated`] with a callback after every
/// iteration.
pub fn solve_qp_observed(
    qp: &QpData,
    init: &PrimalDualPoint,
    params: &CpParams,
    accelerated: bool,
    observer: impl FnMut(usize, &CpState),
) -> Result<SolveReport> {
    run(qp, init, params, accelerated, observer)
}

fn run(
    qp: &QpData,
    init: &PrimalDualPoint,
    params: &CpParams,
    accelerated: bool,
    mut observer: impl FnMut(usize, &CpState),
) -> Result<SolveReport> {
    qp.check()?;
    point_dims(qp, init)?;
    if !init.is_finite() {
        return Err(Error::NonFinite("cp initial point"));
    }
    let q = floored_q(qp);
    let gamma = if accelerated {
        qp.q_diag.iter().fold(f64::INFINITY, |m, v| m.min(*v)).max(0.0)
    } else {
        0.0
    };
    let gamma = if gamma.is_finite() { gamma } else { 0.0 };

    let ratio = match params.accel_restart_ratio {
        Some(r) if gamma > 0.0 => r,
        _ => 1.0,
    };
    let (tau0, sigma0) = (params.tau * ratio, params.sigma / ratio);
    let (mut tau, mut sigma, mut theta) = (tau0, sigma0, params.theta);
    let mut p = p_diag(&q, tau);
    let mut st = CpState::from_point(init);
    // keep the first iterate inside the box
    for j in 0..qp.n() {
        st.y[j] = box_clamp(st.y[j], qp.lower[j], qp.upper[j]);
    }
    st.y_bar.copy_from(&st.y);
    let mut ws = Workspace::new(qp);

    let mut best: Option<(f64, PrimalDualPoint, Residuals)> = None;
    let mut iter = 0;

    while iter < params.max_iters {
        step_in_place(&mut st, qp, &p, tau, sigma, theta, &mut ws);
        iter += 1;
        if gamma > 0.0 {
            theta = 1.0 / (1.0 + gamma * tau).sqrt();
            tau *= theta;
            sigma /= theta;
            if params.accel_restart_ratio.is_some() && tau < params.tau {
                tau = tau0;
                sigma = sigma0;
                theta = params.theta;
                st.y_bar.copy_from(&st.y);
            }
            p = p_diag(&q, tau);
        }
        observer(iter, &st);

        if iter % params.check_every == 0 || iter == params.max_iters {
            if !state_finite(&st) {
                return Err(Error::NonFinite("chambolle-pock iterate"));
            }
            let pt = st.point();
            let (prim, gap) = prim_and_gap(qp, &pt);
            let dual = match params.eps_dual {
                Some(_) => dual_residual(qp, &pt),
                None => f64::NAN,
            };
            let res = Residuals {
                prim_inf_norm: prim,
                dual_inf_norm: dual,
                gap_abs: gap,
                iter,
            };
            let score = (prim / params.eps_prim)
                .max(gap / params.eps_gap)
                .max(params.eps_dual.map_or(0.0, |e| dual / e));
            if score <= 1.0 {
                return Ok(finish(qp, pt, res, true, iter, params.norm_k));
            }
            if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
                best = Some((score, pt, res));
            }
        }
    }
    let (pt, res) = match best {
        Some((_, pt, res)) => (pt, res),
        None => {
            let pt = st.point();
            let (prim, gap) = prim_and_gap(qp, &pt);
            let res = Residuals {
                prim_inf_norm: prim,
                dual_inf_norm: dual_residual(qp, &pt),
                gap_abs: gap,
                iter,
            };
            (pt, res)
        }
    };
    Ok(finish(qp, pt, res, false, iter, params.norm_k))
}

fn finish(
    qp: &QpData,
    mut pt: PrimalDualPoint,
    mut res: Residuals,
    converged: bool,
    iters: usize,
    norm_k: f64,
) -> SolveReport {
    let (alpha, beta) = recover_bound_multipliers(qp, &pt);
    res.dual_inf_norm = (stationarity(qp, &pt) - &alpha + &beta).amax();
    pt.bound_mult = Some((alpha, beta));
    SolveReport {
        point: pt,
        residuals: res,
        converged,
        iters,
        norm_k_used: norm_k,
    }
}
