//! k-layer projection: each layer linearizes the constraints at the current
//! point, keeps only the diagonal of the objective Hessian (scaled by `rho`)
//! and solves the resulting QP with Chambolle-Pock.

use serde::{Deserialize, Serialize};

use crate::cp::{
    residuals, solve_qp, solve_qp_accelerated, CpParams, CpSettings, SolveReport, Q_MIN,
};
use crate::error::{Error, Result};
use crate::precond::{ruiz_equilibrate, unscale_solution, DEFAULT_RUIZ_ITERS};
use crate::problem::{all_finite, evaluate, ParametricNlpFamily, PrimalDualPoint, QpData, Vector};

/// Slack allowed by [`check_descent`].
pub const DESCENT_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub k: usize,
    pub rho: f64,
    /// Raise `rho` to the Lipschitz floor on convex families.
    pub apply_rho_floor: bool,
    pub inner: CpSettings,
    pub use_equilibration: bool,
    pub use_acceleration: bool,
    pub feas_tol: f64,
    pub early_stop: bool,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            k: 10,
            rho: 1.0,
            apply_rho_floor: true,
            inner: CpSettings::default(),
            use_equilibration: false,
            use_acceleration: true,
            feas_tol: 1e-8,
            early_stop: true,
        }
    }
}

impl ProjectionConfig {
    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn fixed_layers(mut self, k: usize) -> Self {
        self.k = k;
        self.early_stop = false;
        self
    }

    pub fn check(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("projection needs k >= 1".into()));
        }
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::InvalidConfig(format!("rho must be positive, got {}", self.rho)));
        }
        Ok(())
    }
}

/// `Q = max(rho diag(hess f), q_min)`, `c = grad f - Q y_i`, constraints
/// linearized at `y_i`, box `[l(x), u(x)]`.
///
/// `c` uses the floored `Q`, which keeps `y_i` a fixed point whenever it
/// is a KKT point of the original problem.
pub fn build_subproblem(
    family: &ParametricNlpFamily,
    x: &Vector,
    y_i: &Vector,
    rho: f64,
) -> Result<QpData> {
    let ev = evaluate(family, x, y_i)?;
    let q = ev.hess_diag.map(|h| (rho * h).max(Q_MIN));
    let c = &ev.grad_f - q.component_mul(y_i);
    let b_eq = &ev.jac_h * y_i - &ev.h;
    let b_ineq = &ev.jac_g * y_i - &ev.g;
    let qp = QpData {
        q_diag: q,
        c,
        a_eq: ev.jac_h,
        b_eq,
        a_ineq: ev.jac_g,
        b_ineq,
        lower: ev.lower,
        upper: ev.upper,
    };
    if !all_finite(&qp.q_diag) || !all_finite(&qp.c) || !all_finite(&qp.b_eq) || !all_finite(&qp.b_ineq) {
        return Err(Error::NonFinite("build_subproblem"));
    }
    qp.check()?;
    Ok(qp)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RhoChoice {
    pub rho: f64,
    /// False when the family has no Lipschitz constant (or is not convex)
    /// and the configured `rho` was returned unchanged.
    pub floor_applied: bool,
}

/// `max(rho, L / max(min_i hess_ii, q_min))`.
pub fn rho_floor(family: &ParametricNlpFamily, x: &Vector, y_hat: &Vector, rho: f64) -> RhoChoice {
    let lip = match family.lipschitz() {
        Some(l) if family.kind().is_convex() => l,
        _ => {
            return RhoChoice {
                rho,
                floor_applied: false,
            }
        }
    };
    let hd = family.nlp().hessian_diag(x, y_hat);
    let min_hd = hd.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    let min_hd = if min_hd.is_finite() { min_hd } else { 1.0 };
    RhoChoice {
        rho: rho.max(lip / min_hd.max(Q_MIN)),
        floor_applied: true,
    }
}

/// Solves one subproblem with the inner settings of `cfg`, optionally on
/// the equilibrated data. The returned point is in original coordinates
/// with bound multipliers recovered there.
pub fn solve_subproblem(qp: &QpData, init: &PrimalDualPoint, cfg: &ProjectionConfig) -> Result<SolveReport> {
    let solve = |qp: &QpData, init: &PrimalDualPoint| {
        let params = CpParams::for_qp(qp, &cfg.inner);
        if cfg.use_acceleration {
            solve_qp_accelerated(qp, init, &params)
        } else {
            solve_qp(qp, init, &params)
        }
    };
    if !cfg.use_equilibration {
        return solve(qp, init);
    }
    let (scaled, rec) = ruiz_equilibrate(qp, DEFAULT_RUIZ_ITERS);
    let rep = solve(&scaled, &rec.scale_point(init)?)?;
    let mut pt = unscale_solution(&rep.point, &rec)?;
    for j in 0..qp.n() {
        pt.y[j] = crate::cp::box_clamp(pt.y[j], qp.lower[j], qp.upper[j]);
    }
    pt.bound_mult = Some(crate::cp::recover_bound_multipliers(qp, &pt));
    let mut res = residuals(qp, &pt)?;
    res.iter = rep.iters;
    Ok(SolveReport {
        point: pt,
        residuals: res,
        converged: rep.converged,
        iters: rep.iters,
        norm_k_used: rep.norm_k_used,
    })
}

/// One layer: builds the subproblem at `z.y` and solves it warm-started at
/// `z`.
pub fn project_once(
    family: &ParametricNlpFamily,
    x: &Vector,
    z: &PrimalDualPoint,
    rho: f64,
    cfg: &ProjectionConfig,
) -> Result<SolveReport> {
    let qp = build_subproblem(family, x, &z.y, rho)?;
    let mut init = z.clone();
    init.bound_mult = None;
    solve_subproblem(&qp, &init, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerRecord {
    pub layer: usize,
    pub rho: f64,
    pub y: Vec<f64>,
    /// `max(|h|_inf, |g_+|_inf)` of the original constraints at the output.
    pub violation: f64,
    pub objective: f64,
    pub inner_iters: usize,
    pub inner_converged: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LayerTrace {
    /// Violation of the input point, before any layer.
    pub initial_violation: f64,
    pub layers: Vec<LayerRecord>,
    /// Violation rose on two consecutive layers.
    pub stalled: bool,
    pub rho_floor_applied: bool,
}

impl LayerTrace {
    pub fn final_violation(&self) -> f64 {
        self.layers.last().map_or(self.initial_violation, |l| l.violation)
    }

    /// `v_{i+1} / v_i` for consecutive layers whose violation `v_i` is still
    /// above `floor`.
    pub fn contraction_ratios(&self, floor: f64) -> Vec<f64> {
        self.layers
            .windows(2)
            .filter(|w| w[0].violation > floor)
            .map(|w| w[1].violation / w[0].violation)
            .collect()
    }

    pub fn total_inner_iters(&self) -> usize {
        self.layers.iter().map(|l| l.inner_iters).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub z: PrimalDualPoint,
    pub trace: LayerTrace,
}

/// Composes up to `cfg.k` layers starting from `z_hat`; stops early once the
/// original violation is at most `cfg.feas_tol` when `cfg.early_stop`.
pub fn project_k(
    family: &ParametricNlpFamily,
    x: &Vector,
    z_hat: &PrimalDualPoint,
    cfg: &ProjectionConfig,
) -> Result<Projection> {
    run_layers(family, x, z_hat, cfg, None)
}

/// What the backward pass needs from one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTape {
    pub y_in: Vector,
    pub rho: f64,
    pub qp: QpData,
    pub z_out: PrimalDualPoint,
}

/// [`project_k`] that also keeps every layer's subproblem and output.
pub fn project_k_taped(
    family: &ParametricNlpFamily,
    x: &Vector,
    z_hat: &PrimalDualPoint,
    cfg: &ProjectionConfig,
) -> Result<(Projection, Vec<LayerTape>)> {
    let mut tape = Vec::with_capacity(cfg.k);
    let proj = run_layers(family, x, z_hat, cfg, Some(&mut tape))?;
    Ok((proj, tape))
}

fn run_layers(
    family: &ParametricNlpFamily,
    x: &Vector,
    z_hat: &PrimalDualPoint,
    cfg: &ProjectionConfig,
    mut tape: Option<&mut Vec<LayerTape>>,
) -> Result<Projection> {
    cfg.check()?;
    let d = family.dims();
    if z_hat.y.len() != d.n_vars || z_hat.lambda.len() != d.n_eq || z_hat.mu.len() != d.n_ineq {
        return Err(Error::DimensionMismatch {
            context: "project_k: z_hat",
            expected: d.z_len(),
            got: z_hat.len(),
        });
    }
    let mut trace = LayerTrace {
        initial_violation: family.max_violation(x, &z_hat.y),
        ..LayerTrace::default()
    };
    let mut z = z_hat.clone();
    let mut rises = 0;
    let mut prev = trace.initial_violation;
    for layer in 0..cfg.k {
        let rho = if cfg.apply_rho_floor {
            let choice = rho_floor(family, x, &z.y, cfg.rho);
            trace.rho_floor_applied = choice.floor_applied;
            choice.rho
        } else {
            cfg.rho
        };
        let qp = build_subproblem(family, x, &z.y, rho)?;
        let mut init = z.clone();
        init.bound_mult = None;
        let rep = solve_subproblem(&qp, &init, cfg)?;
        if let Some(t) = tape.as_deref_mut() {
            t.push(LayerTape {
                y_in: z.y.clone(),
                rho,
                qp,
                z_out: rep.point.clone(),
            });
        }
        z = rep.point;
        let violation = family.max_violation(x, &z.y);
        trace.layers.push(LayerRecord {
            layer,
            rho,
            y: z.y.iter().copied().collect(),
            violation,
            objective: family.objective(x, &z.y),
            inner_iters: rep.iters,
            inner_converged: rep.converged,
        });
        if layer > 0 && violation > prev {
            rises += 1;
            if rises >= 2 {
                trace.stalled = true;
            }
        } else {
            rises = 0;
        }
        prev = violation;
        if cfg.early_stop && violation <= cfg.feas_tol {
            break;
        }
    }
    Ok(Projection { z, trace })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DescentReport {
    pub f_before: f64,
    pub f_after: f64,
    pub descended: bool,
}

pub fn check_descent(family: &ParametricNlpFamily, x: &Vector, y_hat: &Vector, y_tilde: &Vector) -> DescentReport {
    let f_before = family.objective(x, y_hat);
    let f_after = family.objective(x, y_tilde);
    DescentReport {
        f_before,
        f_after,
        descended: f_after <= f_before + DESCENT_TOL,
    }
}
