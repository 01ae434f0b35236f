//! Small dense reference solvers, independent of the Chambolle-Pock code:
//! direct KKT solves, active-set enumeration and a full-Hessian SQP loop.

use nalgebra::{Cholesky, Dyn, LU};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::problem::{all_finite, Matrix, ParametricNlpFamily, PrimalDualPoint, QpData, Vector};

/// Patterns tried before [`solve_qp_active_set`] gives up.
pub const DEFAULT_PATTERN_BUDGET: usize = 50_000_000;

const FEAS_TOL: f64 = 1e-9;
const SIGN_TOL: f64 = 1e-9;

/// `min 1/2 y'Qy + c'y  s.t.  A y = b,  C y <= d,  l <= y <= u` with dense `Q`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseQp {
    pub q: Matrix,
    pub c: Vector,
    pub a_eq: Matrix,
    pub b_eq: Vector,
    pub a_ineq: Matrix,
    pub b_ineq: Vector,
    pub lower: Vector,
    pub upper: Vector,
}

impl DenseQp {
    pub fn from_diag(qp: &QpData) -> Self {
        Self {
            q: Matrix::from_diagonal(&qp.q_diag),
            c: qp.c.clone(),
            a_eq: qp.a_eq.clone(),
            b_eq: qp.b_eq.clone(),
            a_ineq: qp.a_ineq.clone(),
            b_ineq: qp.b_ineq.clone(),
            lower: qp.lower.clone(),
            upper: qp.upper.clone(),
        }
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn objective(&self, y: &Vector) -> f64 {
        0.5 * y.dot(&(&self.q * y)) + self.c.dot(y)
    }
}

/// Solves `[Q A'; A 0] [y; lambda] = [-c; b]`, ignoring inequalities and
/// bounds.
pub fn solve_eq_qp_kkt(qp: &QpData) -> Result<PrimalDualPoint> {
    qp.check()?;
    let (y, lambda) = kkt_solve(&Matrix::from_diagonal(&qp.q_diag), &qp.c, &qp.a_eq, &qp.b_eq)?;
    Ok(PrimalDualPoint::new(y, lambda, Vector::zeros(qp.n_ineq())))
}

fn kkt_solve(q: &Matrix, c: &Vector, e: &Matrix, f: &Vector) -> Result<(Vector, Vector)> {
    let n = q.nrows();
    let m = e.nrows();
    let mut k = Matrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(q);
    k.view_mut((0, n), (n, m)).copy_from(&e.transpose());
    k.view_mut((n, 0), (m, n)).copy_from(e);
    let mut rhs = Vector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-c));
    rhs.rows_mut(n, m).copy_from(f);
    let lu = LU::<f64, Dyn, Dyn>::new(k.clone());
    let sol = lu.solve(&rhs).ok_or(Error::SingularKkt)?;
    if !all_finite(&sol) {
        return Err(Error::SingularKkt);
    }
    let resid = (&k * &sol - &rhs).amax();
    let scale = 1.0 + rhs.amax() + k.amax() * sol.amax();
    if resid > 1e-10 * scale {
        return Err(Error::SingularKkt);
    }
    Ok((sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned()))
}

/// Which original bound a generated inequality row came from.
#[derive(Clone, Copy, Debug, PartialEq)]
enum RowSource {
    Ineq(usize),
    Lower(usize),
    Upper(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActiveSetStats {
    pub patterns_tried: usize,
    pub active: usize,
}

/// Exact solution of a strictly convex dense QP by enumerating active
/// patterns of inequality and bound rows in order of increasing size.
pub fn solve_dense_active_set(qp: &DenseQp, budget: usize) -> Result<(PrimalDualPoint, ActiveSetStats)> {
    let n = qp.n();
    // fixed variables become equality rows
    let fixed: Vec<usize> = (0..n).filter(|&j| qp.lower[j] == qp.upper[j]).collect();
    let m_eq = qp.a_eq.nrows() + fixed.len();
    let mut a = Matrix::zeros(m_eq, n);
    let mut b = Vector::zeros(m_eq);
    a.view_mut((0, 0), (qp.a_eq.nrows(), n)).copy_from(&qp.a_eq);
    b.rows_mut(0, qp.b_eq.len()).copy_from(&qp.b_eq);
    for (k, &j) in fixed.iter().enumerate() {
        a[(qp.a_eq.nrows() + k, j)] = 1.0;
        b[qp.a_eq.nrows() + k] = qp.lower[j];
    }

    let mut rows: Vec<(Vector, f64, RowSource)> = Vec::new();
    for i in 0..qp.a_ineq.nrows() {
        rows.push((qp.a_ineq.row(i).transpose(), qp.b_ineq[i], RowSource::Ineq(i)));
    }
    for j in 0..n {
        if qp.lower[j] == qp.upper[j] {
            continue;
        }
        if qp.lower[j].is_finite() {
            let mut e = Vector::zeros(n);
            e[j] = -1.0;
            rows.push((e, -qp.lower[j], RowSource::Lower(j)));
        }
        if qp.upper[j].is_finite() {
            let mut e = Vector::zeros(n);
            e[j] = 1.0;
            rows.push((e, qp.upper[j], RowSource::Upper(j)));
        }
    }
    let m = rows.len();
    let mut g = Matrix::zeros(m, n);
    let mut h = Vector::zeros(m);
    for (i, (row, rhs, _)) in rows.iter().enumerate() {
        g.set_row(i, &row.transpose());
        h[i] = *rhs;
    }

    // Reduced data: y(W) = y0 - Z G_W' mu_W,  mu_W = M_WW^{-1} r_W.
    let qinv = match Cholesky::new(qp.q.clone()) {
        Some(ch) => ch.inverse(),
        None => LU::new(qp.q.clone()).try_inverse().ok_or(Error::SingularKkt)?,
    };
    let (y0, z) = if m_eq > 0 {
        let qa = &qinv * a.transpose();
        let s = &a * &qa;
        let s_inv = Cholesky::new(s.clone())
            .map(|c| c.inverse())
            .or_else(|| s.try_inverse())
            .ok_or(Error::SingularKkt)?;
        let lambda0 = -(&s_inv * (&b + &a * (&qinv * &qp.c)));
        let y0 = -(&qinv * (&qp.c + a.transpose() * lambda0));
        let z = &qinv - &qa * &s_inv * qa.transpose();
        (y0, z)
    } else {
        (-(&qinv * &qp.c), qinv.clone())
    };
    let mm = &g * &z * g.transpose();
    let r = &g * &y0 - &h;
    let scale_h = 1.0 + h.amax();

    let max_card = m.min(n.saturating_sub(m_eq));
    let mut tried = 0usize;
    for card in 0..=max_card {
        let mut idx: Vec<usize> = (0..card).collect();
        loop {
            tried += 1;
            if tried > budget {
                return Err(Error::TooLarge(tried - 1));
            }
            if try_pattern(&idx, &rows, &mm, &r, scale_h) {
                let pt = polish(qp, &a, &b, m_eq, &fixed, &rows, &idx)?;
                return Ok((
                    pt,
                    ActiveSetStats {
                        patterns_tried: tried,
                        active: card,
                    },
                ));
            }
            if !next_combination(&mut idx, m) {
                break;
            }
        }
    }
    Err(Error::Infeasible)
}

fn next_combination(idx: &mut [usize], m: usize) -> bool {
    let k = idx.len();
    if k == 0 {
        return false;
    }
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < m - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn try_pattern(
    idx: &[usize],
    rows: &[(Vector, f64, RowSource)],
    mm: &Matrix,
    r: &Vector,
    scale_h: f64,
) -> bool {
    let k = idx.len();
    // both bounds of one variable cannot be active together
    for (p, &i) in idx.iter().enumerate() {
        if let RowSource::Lower(j) = rows[i].2 {
            if idx[p + 1..].iter().any(|&o| rows[o].2 == RowSource::Upper(j)) {
                return false;
            }
        }
    }
    let mu = if k == 0 {
        Vector::zeros(0)
    } else {
        let sub = Matrix::from_fn(k, k, |a, b| mm[(idx[a], idx[b])]);
        let rw = Vector::from_fn(k, |a, _| r[idx[a]]);
        let dmax = sub.diagonal().amax();
        let Some(ch) = Cholesky::new(sub) else {
            return false;
        };
        let l = ch.l_dirty();
        if (0..k).any(|i| l[(i, i)] * l[(i, i)] <= 1e-12 * dmax.max(1e-300)) {
            return false;
        }
        ch.solve(&rw)
    };
    let mscale = 1.0 + mu.amax();
    if mu.iter().any(|v| *v < -SIGN_TOL * mscale) {
        return false;
    }
    for i in 0..r.len() {
        if idx.contains(&i) {
            continue;
        }
        let mut s = r[i];
        for (a, &w) in idx.iter().enumerate() {
            s -= mm[(i, w)] * mu[a];
        }
        if s > FEAS_TOL * scale_h {
            return false;
        }
    }
    true
}

fn polish(
    qp: &DenseQp,
    a: &Matrix,
    b: &Vector,
    m_eq: usize,
    fixed: &[usize],
    rows: &[(Vector, f64, RowSource)],
    idx: &[usize],
) -> Result<PrimalDualPoint> {
    let n = qp.n();
    let k = idx.len();
    let mut e = Matrix::zeros(m_eq + k, n);
    let mut f = Vector::zeros(m_eq + k);
    e.view_mut((0, 0), (m_eq, n)).copy_from(a);
    f.rows_mut(0, m_eq).copy_from(b);
    for (p, &i) in idx.iter().enumerate() {
        e.set_row(m_eq + p, &rows[i].0.transpose());
        f[m_eq + p] = rows[i].1;
    }
    let (mut y, mult) = kkt_solve(&qp.q, &qp.c, &e, &f)?;
    let n_orig_eq = qp.a_eq.nrows();
    let lambda = mult.rows(0, n_orig_eq).into_owned();
    let mut mu = Vector::zeros(qp.a_ineq.nrows());
    let mut alpha = Vector::zeros(n);
    let mut beta = Vector::zeros(n);
    for (k, &j) in fixed.iter().enumerate() {
        alpha[j] = -mult[n_orig_eq + k];
        y[j] = qp.lower[j];
    }
    for (p, &i) in idx.iter().enumerate() {
        let v = mult[m_eq + p].max(0.0);
        match rows[i].2 {
            RowSource::Ineq(r) => mu[r] = v,
            RowSource::Lower(j) => {
                alpha[j] = v;
                y[j] = qp.lower[j];
            }
            RowSource::Upper(j) => {
                beta[j] = v;
                y[j] = qp.upper[j];
            }
        }
    }
    let mut pt = PrimalDualPoint::new(y, lambda, mu);
    pt.bound_mult = Some((alpha, beta));
    Ok(pt)
}

/// Active-set solution of a diagonal-Hessian QP.
pub fn solve_qp_active_set(qp: &QpData) -> Result<PrimalDualPoint> {
    qp.check()?;
    let mut dense = DenseQp::from_diag(qp);
    for j in 0..qp.n() {
        dense.q[(j, j)] = qp.q_diag[j].max(crate::cp::Q_MIN);
    }
    solve_dense_active_set(&dense, DEFAULT_PATTERN_BUDGET).map(|(pt, _)| pt)
}

/// KKT residuals of a dense QP at a point with bound multipliers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KktCheck {
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
    pub min_multiplier: f64,
}

pub fn kkt_check(qp: &DenseQp, pt: &PrimalDualPoint) -> KktCheck {
    let (alpha, beta) = pt
        .bound_mult
        .clone()
        .unwrap_or_else(|| (Vector::zeros(qp.n()), Vector::zeros(qp.n())));
    let mut s = &qp.q * &pt.y + &qp.c - &alpha + &beta;
    if qp.a_eq.nrows() > 0 {
        s += qp.a_eq.tr_mul(&pt.lambda);
    }
    let mut feas = 0.0_f64;
    let mut comp = 0.0_f64;
    if qp.a_eq.nrows() > 0 {
        feas = feas.max((&qp.a_eq * &pt.y - &qp.b_eq).amax());
    }
    if qp.a_ineq.nrows() > 0 {
        s += qp.a_ineq.tr_mul(&pt.mu);
        let r = &qp.a_ineq * &pt.y - &qp.b_ineq;
        for i in 0..r.len() {
            feas = feas.max(r[i]);
            comp = comp.max((pt.mu[i] * r[i]).abs());
        }
    }
    for j in 0..qp.n() {
        feas = feas.max(qp.lower[j] - pt.y[j]).max(pt.y[j] - qp.upper[j]);
        if qp.lower[j] != qp.upper[j] {
            if qp.lower[j].is_finite() {
                comp = comp.max((alpha[j] * (pt.y[j] - qp.lower[j])).abs());
            }
            if qp.upper[j].is_finite() {
                comp = comp.max((beta[j] * (qp.upper[j] - pt.y[j])).abs());
            }
        }
    }
    let fixed_ok = |j: usize| qp.lower[j] == qp.upper[j];
    let min_mult = pt
        .mu
        .iter()
        .copied()
        .chain((0..qp.n()).filter(|&j| !fixed_ok(j)).map(|j| alpha[j].min(beta[j])))
        .fold(0.0_f64, f64::min);
    KktCheck {
        stationarity: s.amax(),
        feasibility: feas.max(0.0),
        complementarity: comp,
        min_multiplier: min_mult,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NlpSolution {
    pub point: PrimalDualPoint,
    pub objective: f64,
    pub kkt_residual: f64,
    pub violation: f64,
    pub iterations: usize,
    /// Set for nonconvex families: the point is stationary, not certified
    /// global.
    pub stationary_only: bool,
}

pub const MAX_SQP_ITERS: usize = 100;

/// Sequential QP with the exact Lagrangian Hessian and an l1 merit line
/// search, each QP solved by active-set enumeration. Starts from the
/// family's feasible witness when it has one.
pub fn solve_nlp_reference(family: &ParametricNlpFamily, x: &Vector, tol: f64) -> Result<NlpSolution> {
    let m = family.nlp();
    let d = family.dims();
    let (lower, upper) = m.bounds(x);
    let mut y = match &family.witness {
        Some(w) => w.at(x),
        None => Vector::zeros(d.n_vars),
    };
    for j in 0..d.n_vars {
        y[j] = y[j].max(lower[j]).min(upper[j]);
    }
    let mut lambda = Vector::zeros(d.n_eq);
    let mut mu = Vector::zeros(d.n_ineq);
    let mut nu = 1.0_f64;
    let convex = family.kind().is_convex();

    for it in 1..=MAX_SQP_ITERS {
        let grad = m.gradient(x, &y);
        let h = m.eq_residual(x, &y);
        let g = m.ineq_residual(x, &y);
        let jh = m.eq_jacobian(x, &y);
        let jg = m.ineq_jacobian(x, &y);
        let mut hess = m.hessian(x, &y);
        for (i, hi) in m.eq_hessians(x, &y).iter().enumerate() {
            hess += hi * lambda[i];
        }
        for (i, gi) in m.ineq_hessians(x, &y).iter().enumerate() {
            hess += gi * mu[i];
        }
        hess = (&hess + hess.transpose()) * 0.5;
        let lmin = hess.clone().symmetric_eigenvalues().min();
        let floor = 1e-8 * (1.0 + hess.amax());
        if lmin < floor {
            for j in 0..d.n_vars {
                hess[(j, j)] += floor - lmin;
            }
        }
        let sub = DenseQp {
            q: hess,
            c: grad.clone(),
            a_eq: jh.clone(),
            b_eq: -&h,
            a_ineq: jg.clone(),
            b_ineq: -&g,
            lower: &lower - &y,
            upper: &upper - &y,
        };
        let (sol, _) = solve_dense_active_set(&sub, DEFAULT_PATTERN_BUDGET)?;
        let step = sol.y.clone();
        let new_lambda = sol.lambda.clone();
        let new_mu = sol.mu.clone();
        let mult_max = new_lambda.amax().max(new_mu.amax());
        nu = nu.max(2.0 * mult_max + 1e-3);

        let merit = |yy: &Vector| {
            let hh = m.eq_residual(x, yy);
            let gg = m.ineq_residual(x, yy);
            m.objective(x, yy) + nu * (hh.abs().sum() + gg.map(|v| v.max(0.0)).sum())
        };
        let phi0 = merit(&y);
        let dphi = grad.dot(&step) - nu * (h.abs().sum() + g.map(|v| v.max(0.0)).sum());
        let mut t = 1.0;
        while t > 1e-10 {
            let trial = &y + &step * t;
            if merit(&trial) <= phi0 + 1e-4 * t * dphi.min(0.0) {
                break;
            }
            t *= 0.5;
        }
        if t <= 1e-10 {
            t = 1.0;
        }
        y += &step * t;
        for j in 0..d.n_vars {
            y[j] = y[j].max(lower[j]).min(upper[j]);
        }
        lambda = new_lambda;
        mu = new_mu;

        let step_norm = step.amax() * t;
        let violation = family.max_violation(x, &y);
        if step_norm <= tol * (1.0 + y.amax()) && violation <= tol {
            let (kkt, alpha, beta) = nlp_kkt(family, x, &y, &lambda, &mu, &lower, &upper);
            if kkt <= 10.0 * tol * (1.0 + grad.amax()) {
                let mut pt = PrimalDualPoint::new(y.clone(), lambda, mu);
                pt.bound_mult = Some((alpha, beta));
                return Ok(NlpSolution {
                    objective: m.objective(x, &y),
                    point: pt,
                    kkt_residual: kkt,
                    violation,
                    iterations: it,
                    stationary_only: !convex,
                });
            }
        }
    }
    Err(Error::NoProgress(MAX_SQP_ITERS))
}

/// Stationarity residual of the original problem with bound multipliers
/// recovered from the sign of the remaining gradient.
fn nlp_kkt(
    family: &ParametricNlpFamily,
    x: &Vector,
    y: &Vector,
    lambda: &Vector,
    mu: &Vector,
    lower: &Vector,
    upper: &Vector,
) -> (f64, Vector, Vector) {
    let m = family.nlp();
    let mut s = m.gradient(x, y);
    if !lambda.is_empty() {
        s += m.eq_jacobian(x, y).tr_mul(lambda);
    }
    if !mu.is_empty() {
        s += m.ineq_jacobian(x, y).tr_mul(mu);
    }
    let n = y.len();
    let mut alpha = Vector::zeros(n);
    let mut beta = Vector::zeros(n);
    for j in 0..n {
        let tol = 1e-9 * lower[j].abs().max(upper[j].abs()).max(1.0);
        if lower[j] == upper[j] {
            alpha[j] = s[j];
        } else if (y[j] - lower[j]).abs() <= tol {
            alpha[j] = s[j].max(0.0);
        } else if (upper[j] - y[j]).abs() <= tol {
            beta[j] = (-s[j]).max(0.0);
        }
    }
    ((s - &alpha + &beta).amax(), alpha, beta)
}
