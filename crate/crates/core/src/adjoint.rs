//! Implicit differentiation of the projection.
//!
//! The projected point of one layer is a fixed point `z = F(z; w)` of a
//! plain Chambolle-Pock iteration on the subproblem data `w = M(x, y_in)`.
//! A cotangent `g` on `z` is pulled back by solving
//! `(I - J_F^T) v = g` and chaining `v^T dF/dw` through `dM/dy_in`.
//!
//! Nonsmooth pieces use fixed selections: `d max(0, t)/dt = 1[t > 0]` and the
//! box clamp has derivative 1 strictly inside the box, 0 at or past a bound.

use serde::{Deserialize, Serialize};

use crate::cp::{CpParams, CpSettings, Q_MIN};
use crate::error::{Error, Result};
use crate::problem::{all_finite, Matrix, ParametricNlpFamily, PrimalDualPoint, QpData, Vector};
use crate::projection::LayerTape;

pub const ADJOINT_MAX_ITERS: usize = 500;
pub const ADJOINT_TOL: f64 = 1e-10;
pub const TIKHONOV_SHIFT: f64 = 1e-8;

/// One plain CP iteration (`theta = 1`, fixed steps) with `y_bar = y`.
/// Points are packed as `[y; lambda; mu]`.
#[derive(Clone, Debug)]
pub struct FixedPointMap<'a> {
    pub qp: &'a QpData,
    pub params: CpParams,
    p: Vector,
}

/// Forward intermediates of `F` at one point.
struct Tape {
    lam1: Vector,
    mu1: Vector,
    s: Vector,
    nu: Vector,
    mu_on: Vec<bool>,
    y_free: Vec<bool>,
}

/// `v^T dF/dw`, laid out like [`QpData`].
#[derive(Clone, Debug, PartialEq)]
pub struct QpBar {
    pub q_diag: Vector,
    pub c: Vector,
    pub a_eq: Matrix,
    pub b_eq: Vector,
    pub a_ineq: Matrix,
    pub b_ineq: Vector,
    pub lower: Vector,
    pub upper: Vector,
}

impl QpBar {
    fn zeros(qp: &QpData) -> Self {
        let n = qp.n();
        Self {
            q_diag: Vector::zeros(n),
            c: Vector::zeros(n),
            a_eq: Matrix::zeros(qp.n_eq(), n),
            b_eq: Vector::zeros(qp.n_eq()),
            a_ineq: Matrix::zeros(qp.n_ineq(), n),
            b_ineq: Vector::zeros(qp.n_ineq()),
            lower: Vector::zeros(n),
            upper: Vector::zeros(n),
        }
    }
}

impl<'a> FixedPointMap<'a> {
    /// Steps from [`CpParams::for_qp`], the same rule the forward solve uses.
    pub fn new(qp: &'a QpData, settings: &CpSettings) -> Result<Self> {
        qp.check()?;
        let mut params = CpParams::for_qp(qp, settings);
        params.theta = 1.0;
        Ok(Self::with_params(qp, params))
    }

    pub fn with_params(qp: &'a QpData, params: CpParams) -> Self {
        let q = qp.q_diag.map(|v| v.max(Q_MIN));
        let p = q.map(|qi| 1.0 / (1.0 + params.tau * qi));
        Self { qp, params, p }
    }

    pub fn dim(&self) -> usize {
        self.qp.n() + self.qp.n_eq() + self.qp.n_ineq()
    }

    fn split<'v>(&self, z: &'v Vector) -> (nalgebra::DVectorView<'v, f64>, nalgebra::DVectorView<'v, f64>, nalgebra::DVectorView<'v, f64>) {
        let (n, me) = (self.qp.n(), self.qp.n_eq());
        (z.rows(0, n), z.rows(n, me), z.rows(n + me, self.qp.n_ineq()))
    }

    fn check_len(&self, z: &Vector, context: &'static str) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.dim(),
                got: z.len(),
            });
        }
        Ok(())
    }

    fn forward(&self, z: &Vector) -> Tape {
        let qp = self.qp;
        let (tau, sigma) = (self.params.tau, self.params.sigma);
        let (y, lam, mu) = self.split(z);
        let lam1 = lam + (&qp.a_eq * y - &qp.b_eq) * sigma;
        let pre = mu + (&qp.a_ineq * y - &qp.b_ineq) * sigma;
        let mu_on: Vec<bool> = pre.iter().map(|v| *v > 0.0).collect();
        let mu1 = pre.map(|v| v.max(0.0));
        let s = y - (qp.a_eq.tr_mul(&lam1) + qp.a_ineq.tr_mul(&mu1) + &qp.c) * tau;
        let nu = self.p.component_mul(&s);
        let y_free = (0..qp.n()).map(|j| qp.lower[j] < nu[j] && nu[j] < qp.upper[j]).collect();
        Tape {
            lam1,
            mu1,
            s,
            nu,
            mu_on,
            y_free,
        }
    }

    /// `F(z)`.
    pub fn apply(&self, z: &Vector) -> Result<Vector> {
        self.check_len(z, "FixedPointMap::apply")?;
        let t = self.forward(z);
        let y1 = Vector::from_fn(self.qp.n(), |j, _| {
            crate::cp::box_clamp(t.nu[j], self.qp.lower[j], self.qp.upper[j])
        });
        let mut out = Vector::zeros(self.dim());
        let (n, me) = (self.qp.n(), self.qp.n_eq());
        out.rows_mut(0, n).copy_from(&y1);
        out.rows_mut(n, me).copy_from(&t.lam1);
        out.rows_mut(n + me, self.qp.n_ineq()).copy_from(&t.mu1);
        if !all_finite(&out) {
            return Err(Error::NonFinite("FixedPointMap::apply"));
        }
        Ok(out)
    }

    /// Reverse pass through `F` at the point recorded in `t`. Returns
    /// `J_F^T v` and, when asked, `v^T dF/dw`.
    fn reverse(&self, z: &Vector, t: &Tape, v: &Vector, want_w: bool) -> (Vector, Option<QpBar>) {
        let qp = self.qp;
        let (n, me, mi) = (qp.n(), qp.n_eq(), qp.n_ineq());
        let (tau, sigma) = (self.params.tau, self.params.sigma);
        let (y, _, _) = self.split(z);
        let (vy, vl, vm) = self.split(v);

        let nu_bar = Vector::from_fn(n, |j, _| if t.y_free[j] { vy[j] } else { 0.0 });
        let s_bar = self.p.component_mul(&nu_bar);
        let lam1_bar = vl - &qp.a_eq * &s_bar * tau;
        let mu1_bar = vm - &qp.a_ineq * &s_bar * tau;
        let pre_bar = Vector::from_fn(mi, |i, _| if t.mu_on[i] { mu1_bar[i] } else { 0.0 });

        let y_bar = &s_bar + (qp.a_eq.tr_mul(&lam1_bar) + qp.a_ineq.tr_mul(&pre_bar)) * sigma;
        let mut out = Vector::zeros(n + me + mi);
        out.rows_mut(0, n).copy_from(&y_bar);
        out.rows_mut(n, me).copy_from(&lam1_bar);
        out.rows_mut(n + me, mi).copy_from(&pre_bar);

        if !want_w {
            return (out, None);
        }
        let mut w = QpBar::zeros(qp);
        // p = 1/(1 + tau q): dp/dq = -tau p^2, zero where q is floored
        for j in 0..n {
            if qp.q_diag[j] > Q_MIN {
                w.q_diag[j] = -tau * self.p[j] * self.p[j] * t.s[j] * nu_bar[j];
            }
        }
        w.c = &s_bar * -tau;
        w.a_eq = (&lam1_bar * y.transpose()) * sigma - (&t.lam1 * s_bar.transpose()) * tau;
        w.a_ineq = (&pre_bar * y.transpose()) * sigma - (&t.mu1 * s_bar.transpose()) * tau;
        w.b_eq = &lam1_bar * -sigma;
        w.b_ineq = &pre_bar * -sigma;
        for j in 0..n {
            if t.nu[j] <= qp.lower[j] {
                w.lower[j] = vy[j];
            } else if t.nu[j] >= qp.upper[j] {
                w.upper[j] = vy[j];
            }
        }
        (out, Some(w))
    }

    /// `J_F(z)^T v`.
    pub fn jt_apply(&self, z: &Vector, v: &Vector) -> Result<Vector> {
        self.check_len(z, "FixedPointMap::jt_apply: z")?;
        self.check_len(v, "FixedPointMap::jt_apply: v")?;
        let t = self.forward(z);
        Ok(self.reverse(z, &t, v, false).0)
    }

    /// `v^T dF/dw` at `z`.
    pub fn w_vjp(&self, z: &Vector, v: &Vector) -> Result<QpBar> {
        self.check_len(z, "FixedPointMap::w_vjp: z")?;
        self.check_len(v, "FixedPointMap::w_vjp: v")?;
        let t = self.forward(z);
        Ok(self.reverse(z, &t, v, true).1.expect("requested"))
    }

    /// Dense `J_F(z)`, assembled column by column from transposed products.
    pub fn jacobian(&self, z: &Vector) -> Result<Matrix> {
        self.check_len(z, "FixedPointMap::jacobian")?;
        let t = self.forward(z);
        let dim = self.dim();
        let mut jt = Matrix::zeros(dim, dim);
        for i in 0..dim {
            let mut e = Vector::zeros(dim);
            e[i] = 1.0;
            jt.set_column(i, &self.reverse(z, &t, &e, false).0);
        }
        Ok(jt.transpose())
    }
}

/// `G(z) = F(z) - z`.
pub fn fixed_point_residual(z: &Vector, map: &FixedPointMap) -> Result<Vector> {
    Ok(map.apply(z)? - z)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdjointOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub tikhonov: f64,
    /// Backpropagate through the last layer only, treating earlier layers
    /// as the identity.
    pub last_layer_only: bool,
}

impl Default for AdjointOptions {
    fn default() -> Self {
        Self {
            max_iters: ADJOINT_MAX_ITERS,
            tol: ADJOINT_TOL,
            tikhonov: TIKHONOV_SHIFT,
            last_layer_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdjointSolution {
    pub v: Vector,
    pub iters: usize,
    /// Set when the shifted system `(1 + eta) I - J_F^T` was used.
    pub regularized: bool,
    /// `||(I - J_F^T) v - g||_2` on the unshifted system.
    pub residual: f64,
}

/// Stabilized biconjugate gradients on `op(x) = b`. Returns `None` on
/// breakdown or when `max_iters` is hit.
fn bicgstab(op: impl Fn(&Vector) -> Vector, b: &Vector, x0: Vector, tol: f64, max_iters: usize) -> Option<(Vector, usize)> {
    let b_norm = b.norm();
    let target = tol * b_norm.max(1.0);
    let mut x = x0;
    let mut r = b - op(&x);
    if r.norm() <= target {
        return Some((x, 0));
    }
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = Vector::zeros(b.len());
    let mut p = Vector::zeros(b.len());
    let tiny = f64::MIN_POSITIVE.sqrt();
    for it in 1..=max_iters {
        let rho_new = r_hat.dot(&r);
        if rho_new.abs() < tiny * r_hat.norm() * r.norm() || omega == 0.0 {
            return None;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        p = &r + (&p - &v * omega) * beta;
        v = op(&p);
        let denom = r_hat.dot(&v);
        if denom == 0.0 || !denom.is_finite() {
            return None;
        }
        alpha = rho / denom;
        let s = &r - &v * alpha;
        if s.norm() <= target {
            x += &p * alpha;
            return Some((x, it));
        }
        let t = op(&s);
        let tt = t.norm_squared();
        if tt == 0.0 {
            return None;
        }
        omega = t.dot(&s) / tt;
        x += &p * alpha + &s * omega;
        r = &s - &t * omega;
        if !all_finite(&x) {
            return None;
        }
        if r.norm() <= target {
            return Some((x, it));
        }
    }
    None
}

/// Solves `(I - J_F(z*)^T) v = g`. Falls back to the shifted system with
/// `eta = opts.tikhonov` when the plain solve breaks down or stalls.
pub fn adjoint_solve(z_star: &Vector, map: &FixedPointMap, g: &Vector, opts: &AdjointOptions) -> Result<AdjointSolution> {
    map.check_len(z_star, "adjoint_solve: z_star")?;
    map.check_len(g, "adjoint_solve: g")?;
    if !all_finite(g) || !all_finite(z_star) {
        return Err(Error::NonFinite("adjoint_solve"));
    }
    if g.iter().all(|v| *v == 0.0) {
        return Ok(AdjointSolution {
            v: Vector::zeros(g.len()),
            iters: 0,
            regularized: false,
            residual: 0.0,
        });
    }
    let t = map.forward(z_star);
    let jt = |v: &Vector| map.reverse(z_star, &t, v, false).0;
    let op = |shift: f64| move |v: &Vector| v * (1.0 + shift) - jt(v);
    let unshifted = op(0.0);
    let finish = |v: Vector, iters: usize, regularized: bool| {
        let residual = (unshifted(&v) - g).norm();
        AdjointSolution {
            v,
            iters,
            regularized,
            residual,
        }
    };
    if let Some((v, it)) = bicgstab(op(0.0), g, g.clone(), opts.tol, opts.max_iters) {
        return Ok(finish(v, it, false));
    }
    if let Some((v, it)) = bicgstab(op(opts.tikhonov), g, g.clone(), opts.tol, opts.max_iters) {
        return Ok(finish(v, it, true));
    }
    let fallback = g.clone();
    Err(Error::AdjointNotConverged((unshifted(&fallback) - g).norm()))
}

/// Pulls `w_bar` back through `w = M(x, y_in)`: the diagonal Hessian and
/// its Jacobian, the gradient, and the constraint linearizations.
pub fn subproblem_vjp(family: &ParametricNlpFamily, x: &Vector, y_in: &Vector, rho: f64, w_bar: &QpBar) -> Vector {
    let m = family.nlp();
    let hd = m.hessian_diag(x, y_in);
    let q = hd.map(|h| (rho * h).max(Q_MIN));
    // c = grad f - q * y_in
    let mut g = m.hessian(x, y_in) * &w_bar.c - q.component_mul(&w_bar.c);
    let q_bar = &w_bar.q_diag - w_bar.c.component_mul(y_in);
    let masked = Vector::from_fn(q.len(), |j, _| if rho * hd[j] > Q_MIN { q_bar[j] } else { 0.0 });
    if masked.iter().any(|v| *v != 0.0) {
        g += m.hessian_diag_jacobian(x, y_in).tr_mul(&masked) * rho;
    }
    // A = J(y_in), b = J(y_in) y_in - r(y_in): d b_r / dy = H_r y_in
    let mut pull = |hessians: Vec<Matrix>, a_bar: &Matrix, b_bar: &Vector| {
        for (r, h) in hessians.iter().enumerate() {
            if h.iter().all(|v| *v == 0.0) {
                continue;
            }
            g += h * (y_in * b_bar[r] + a_bar.row(r).transpose());
        }
    };
    if !w_bar.b_eq.is_empty() {
        pull(m.eq_hessians(x, y_in), &w_bar.a_eq, &w_bar.b_eq);
    }
    if !w_bar.b_ineq.is_empty() {
        pull(m.ineq_hessians(x, y_in), &w_bar.a_ineq, &w_bar.b_ineq);
    }
    g
}

/// Per-layer result of the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerVjp {
    pub grad_y_in: Vector,
    pub adjoint_iters: usize,
    pub regularized: bool,
}

pub fn vjp_layer(
    family: &ParametricNlpFamily,
    x: &Vector,
    layer: &LayerTape,
    g_z: &Vector,
    settings: &CpSettings,
    opts: &AdjointOptions,
) -> Result<LayerVjp> {
    let map = FixedPointMap::new(&layer.qp, settings)?;
    let z = layer.z_out.to_vector();
    let sol = adjoint_solve(&z, &map, g_z, opts)?;
    let w_bar = map.w_vjp(&z, &sol.v)?;
    Ok(LayerVjp {
        grad_y_in: subproblem_vjp(family, x, &layer.y_in, layer.rho, &w_bar),
        adjoint_iters: sol.iters,
        regularized: sol.regularized,
    })
}

/// Gradient with respect to `z_hat` of `g_z^T z_tilde`, where `z_tilde`
/// is the output of the layers recorded in `tape`. The dual blocks of the
/// result are zero: the subproblems depend on `z_hat` only through `y`.
pub fn vjp_projection(
    family: &ParametricNlpFamily,
    x: &Vector,
    tape: &[LayerTape],
    g_z: &Vector,
    settings: &CpSettings,
    opts: &AdjointOptions,
) -> Result<Vector> {
    let d = family.dims();
    if g_z.len() != d.z_len() {
        return Err(Error::DimensionMismatch {
            context: "vjp_projection: g_z",
            expected: d.z_len(),
            got: g_z.len(),
        });
    }
    let mut out = Vector::zeros(d.z_len());
    if tape.is_empty() {
        out.copy_from(g_z);
        return Ok(out);
    }
    let mut g = g_z.clone();
    for (i, layer) in tape.iter().enumerate().rev() {
        let res = vjp_layer(family, x, layer, &g, settings, opts)?;
        g = Vector::zeros(d.z_len());
        g.rows_mut(0, d.n_vars).copy_from(&res.grad_y_in);
        if opts.last_layer_only && i + 1 == tape.len() {
            break;
        }
    }
    out.copy_from(&g);
    Ok(out)
}

/// Packs a gradient on `z` as a [`PrimalDualPoint`].
pub fn split_gradient(g: &Vector, n: usize, n_eq: usize, n_ineq: usize) -> Result<PrimalDualPoint> {
    PrimalDualPoint::from_slice(g.as_slice(), n, n_eq, n_ineq)
}
