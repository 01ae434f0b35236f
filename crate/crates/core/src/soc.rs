//! Convex quadratic inequalities as second-order cones, solved by a
//! Chambolle-Pock variant whose inequality dual step is a vector
//! soft-threshold.
//!
//! `y'Cy + d'y <= e - E x` becomes `||R y + q|| <= r(x)` with `C = R'R`,
//! `q = 1/2 (R^+)' d` and `r(x)^2 = e - E x + ||q||^2`.

use serde::Serialize;

use crate::cp::{box_clamp, default_steps, CpSettings, Residuals, SolveReport, BOUND_ACTIVE_TOL, Q_MIN};
use crate::error::{Error, Result};
use crate::precond::estimate_spectral_norm;
use crate::problem::{all_finite, max_eigenvalue, Matrix, PrimalDualPoint, QcqpFamily, Vector};

/// Relative eigenvalue cutoff for the factor and pseudo-inverse.
pub const PINV_CUTOFF: f64 = 1e-10;
pub const PSD_TOL: f64 = 1e-10;
pub const RANGE_TOL: f64 = 1e-8;

/// `||R y + q|| <= sqrt(r2_const + r2_lin' x)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SocConstraint {
    #[serde(skip)]
    pub r: Matrix,
    #[serde(skip)]
    pub q: Vector,
    pub r2_const: f64,
    #[serde(skip)]
    pub r2_lin: Vector,
}

impl SocConstraint {
    pub fn rank(&self) -> usize {
        self.r.nrows()
    }

    pub fn radius_sq(&self, x: &Vector) -> f64 {
        self.r2_const + self.r2_lin.dot(x)
    }

    pub fn radius(&self, x: &Vector) -> f64 {
        self.radius_sq(x).max(0.0).sqrt()
    }

    pub fn cone_point(&self, y: &Vector) -> Vector {
        &self.r * y + &self.q
    }

    /// `||R y + q|| - r(x)`; positive when violated.
    pub fn excess(&self, x: &Vector, y: &Vector) -> f64 {
        self.cone_point(y).norm() - self.radius(x)
    }

    /// Smallest `r(x)^2` over the box; exact since it is affine in `x`.
    pub fn min_radius_sq(&self, x_low: &Vector, x_high: &Vector) -> f64 {
        let mut v = self.r2_const;
        for j in 0..self.r2_lin.len() {
            let a = self.r2_lin[j];
            v += (a * x_low[j]).min(a * x_high[j]);
        }
        v
    }
}

/// Converts `y'Cy + d'y <= e - E x` into cone form.
///
/// `C` is symmetrized first. Fails if `C` has an eigenvalue below
/// `-1e-10 max(1, lambda_max)`, if `d` leaves the range of `C`, or if
/// `r(x)^2 < 0` at some point of the box.
pub fn complete_square(
    cmat: &Matrix,
    d: &Vector,
    e: f64,
    e_lin: &Vector,
    x_low: &Vector,
    x_high: &Vector,
) -> Result<SocConstraint> {
    let n = cmat.nrows();
    if cmat.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "complete_square: C columns",
            expected: n,
            got: cmat.ncols(),
        });
    }
    if d.len() != n {
        return Err(Error::DimensionMismatch {
            context: "complete_square: d",
            expected: n,
            got: d.len(),
        });
    }
    if e_lin.len() != x_low.len() || x_low.len() != x_high.len() {
        return Err(Error::DimensionMismatch {
            context: "complete_square: E",
            expected: x_low.len(),
            got: e_lin.len(),
        });
    }
    let sym = (cmat + cmat.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(*v));
    let lmin = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if n > 0 && lmin < -PSD_TOL * lmax.max(1.0) {
        return Err(Error::NotPsd(lmin));
    }
    let cutoff = PINV_CUTOFF * lmax;
    let keep: Vec<usize> = (0..n)
        .filter(|&i| eig.eigenvalues[i] > cutoff && eig.eigenvalues[i] > 0.0)
        .collect();
    let rank = keep.len();
    let mut r = Matrix::zeros(rank, n);
    let mut q = Vector::zeros(rank);
    let mut d_range = Vector::zeros(n);
    for (k, &i) in keep.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        let s = eig.eigenvalues[i].sqrt();
        r.set_row(k, &(v.transpose() * s));
        let vd = v.dot(d);
        // (R^+)' d = Lambda^{-1/2} V' d
        q[k] = 0.5 * vd / s;
        d_range += v * vd;
    }
    let resid = (d - &d_range).amax();
    if resid > RANGE_TOL * d.amax().max(1.0) {
        return Err(Error::RangeViolation(resid));
    }
    let soc = SocConstraint {
        r,
        r2_const: e + q.norm_squared(),
        q,
        r2_lin: -e_lin,
    };
    let min_r2 = soc.min_radius_sq(x_low, x_high);
    if min_r2 < 0.0 {
        return Err(Error::NegativeRadius(min_r2));
    }
    Ok(soc)
}

/// Vector soft-threshold: `(1 - t/||v||) v` when `||v|| > t`, else zero.
pub fn ball_prox(v: &Vector, threshold: f64) -> Vector {
    let nv = v.norm();
    if nv > threshold {
        v * (1.0 - threshold / nv)
    } else {
        Vector::zeros(v.len())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum QuadTerm {
    Diagonal(Vector),
    Dense(Matrix),
}

impl QuadTerm {
    fn apply(&self, y: &Vector) -> Vector {
        match self {
            QuadTerm::Diagonal(q) => q.component_mul(y),
            QuadTerm::Dense(q) => q * y,
        }
    }

    fn largest(&self) -> f64 {
        match self {
            QuadTerm::Diagonal(q) => q.iter().fold(0.0_f64, |m, v| m.max(*v)),
            QuadTerm::Dense(q) => max_eigenvalue(q).max(0.0),
        }
    }
}

/// `min 1/2 y'Qy + c'y  s.t.  A y = b + B x,  C y <= d,
/// ||R_i y + q_i|| <= r_i(x),  l + L x <= y <= u + U x`.
#[derive(Clone, Debug, PartialEq)]
pub struct SocProgram {
    pub q: QuadTerm,
    pub c: Vector,
    pub a_eq: Matrix,
    pub b_eq: Vector,
    pub b_param: Matrix,
    pub a_ineq: Matrix,
    pub b_ineq: Vector,
    pub cones: Vec<SocConstraint>,
    pub lower: Vector,
    pub upper: Vector,
    pub lower_param: Matrix,
    pub upper_param: Matrix,
}

impl SocProgram {
    /// Converts every quadratic constraint of a QCQP family.
    pub fn from_qcqp(family: &QcqpFamily, x_low: &Vector, x_high: &Vector) -> Result<Self> {
        let core = &family.core;
        let n = core.q.nrows();
        let cones = family
            .quads
            .iter()
            .map(|qc| complete_square(&qc.cmat, &qc.d, qc.beta, &(-&qc.e), x_low, x_high))
            .collect::<Result<Vec<_>>>()?;
        let q = if is_diagonal(&core.q) {
            QuadTerm::Diagonal(core.q.diagonal())
        } else {
            QuadTerm::Dense(core.q.clone())
        };
        Ok(Self {
            q,
            c: core.c.clone(),
            a_eq: core.a_eq.clone(),
            b_eq: core.b_eq.clone(),
            b_param: core.b_param.clone(),
            a_ineq: Matrix::zeros(0, n),
            b_ineq: Vector::zeros(0),
            cones,
            lower: core.lower.clone(),
            upper: core.upper.clone(),
            lower_param: core.lower_param.clone(),
            upper_param: core.upper_param.clone(),
        })
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn objective(&self, y: &Vector) -> f64 {
        0.5 * y.dot(&self.q.apply(y)) + self.c.dot(y)
    }

    fn stacked_cones(&self) -> Matrix {
        let rows: usize = self.a_ineq.nrows() + self.cones.iter().map(|c| c.rank()).sum::<usize>();
        let mut k = Matrix::zeros(rows, self.n());
        let mut at = 0;
        for i in 0..self.a_ineq.nrows() {
            k.set_row(at, &self.a_ineq.row(i));
            at += 1;
        }
        for cone in &self.cones {
            for i in 0..cone.rank() {
                k.set_row(at, &cone.r.row(i));
                at += 1;
            }
        }
        k
    }

    /// Largest violation of the original constraints (cone excess,
    /// equalities, linear inequalities) at `(x, y)`.
    pub fn max_violation(&self, x: &Vector, y: &Vector) -> f64 {
        let (prim, _) = self.prim_and_gap(x, y, None);
        prim
    }

    fn rhs_eq(&self, x: &Vector) -> Vector {
        &self.b_eq + &self.b_param * x
    }

    fn prim_and_gap(&self, x: &Vector, y: &Vector, duals: Option<&Duals>) -> (f64, f64) {
        let mut prim = 0.0_f64;
        let mut gap = 0.0;
        if self.a_eq.nrows() > 0 {
            let r = &self.a_eq * y - self.rhs_eq(x);
            prim = prim.max(r.amax());
            if let Some(dl) = duals {
                gap += dl.lambda.dot(&r);
            }
        }
        if self.a_ineq.nrows() > 0 {
            let r = &self.a_ineq * y - &self.b_ineq;
            prim = r.iter().fold(prim, |m, v| m.max(v.max(0.0)));
            if let Some(dl) = duals {
                gap += dl.mu_lin.dot(&r);
            }
        }
        let mut cone_gap = 0.0;
        for (i, cone) in self.cones.iter().enumerate() {
            let w = cone.cone_point(y);
            let rad = cone.radius(x);
            prim = prim.max(w.norm() - rad);
            if let Some(dl) = duals {
                let m = &dl.cones[i];
                cone_gap += (m.dot(&w) - rad * m.norm()).abs();
            }
        }
        (prim, gap.abs() + cone_gap)
    }
}

fn is_diagonal(m: &Matrix) -> bool {
    (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
}

#[derive(Clone, Debug, PartialEq)]
struct Duals {
    lambda: Vector,
    mu_lin: Vector,
    cones: Vec<Vector>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SocSolveReport {
    /// `point.mu` holds the linear-inequality multipliers followed by the
    /// multipliers of the quadratic constraints in their original form,
    /// `||mu_i|| / (2 r_i)`.
    pub report: SolveReport,
    pub cone_duals: Vec<Vector>,
    pub tau: f64,
    pub sigma: f64,
}

/// Chambolle-Pock for the cone program at parameter `x`.
///
/// With a diagonal `Q` the primal step is the exact prox
/// `clamp(P(y - tau g - tau c))`. With a dense `Q` the quadratic is taken
/// explicitly, `y+ = clamp(y - tau (Q y + c + g))`, with steps satisfying
/// `sigma ||K||^2 < 1/tau - L`.
pub fn solve_qcqp_soc(
    program: &SocProgram,
    x: &Vector,
    init: &PrimalDualPoint,
    settings: &CpSettings,
) -> Result<SocSolveReport> {
    let n = program.n();
    if x.len() != program.b_param.ncols() {
        return Err(Error::DimensionMismatch {
            context: "solve_qcqp_soc: x",
            expected: program.b_param.ncols(),
            got: x.len(),
        });
    }
    if init.y.len() != n || init.lambda.len() != program.a_eq.nrows() {
        return Err(Error::DimensionMismatch {
            context: "solve_qcqp_soc: init",
            expected: n,
            got: init.y.len(),
        });
    }
    if !init.is_finite() || !all_finite(x) {
        return Err(Error::NonFinite("solve_qcqp_soc input"));
    }
    let radii: Vec<f64> = program.cones.iter().map(|c| c.radius_sq(x)).collect();
    if let Some(bad) = radii.iter().find(|r| **r < 0.0) {
        return Err(Error::NegativeRadius(*bad));
    }
    let radii: Vec<f64> = radii.iter().map(|r| r.sqrt()).collect();

    let kc = program.stacked_cones();
    let norm_k = estimate_spectral_norm(&program.a_eq, &kc, settings.power_iters, settings.power_seed);
    let l_f = program.q.largest().max(Q_MIN);
    let (tau, sigma, p) = match &program.q {
        QuadTerm::Diagonal(q) => {
            let (tau, sigma) = default_steps(l_f, norm_k);
            let p = q.map(|qi| 1.0 / (1.0 + tau * qi.max(Q_MIN)));
            (tau, sigma, Some(p))
        }
        QuadTerm::Dense(_) => {
            let tau = 1.0 / (l_f + norm_k);
            (tau, 0.99 / norm_k, None)
        }
    };
    let lower = &program.lower + &program.lower_param * x;
    let upper = &program.upper + &program.upper_param * x;
    if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
        return Err(Error::InvalidConfig("bounds cross at this parameter".into()));
    }
    let b = program.rhs_eq(x);
    let theta = settings.theta;
    let m_lin = program.a_ineq.nrows();

    let mut y = init.y.map(|v| v);
    for j in 0..n {
        y[j] = box_clamp(y[j], lower[j], upper[j]);
    }
    let mut y_bar = y.clone();
    let mut duals = Duals {
        lambda: init.lambda.clone(),
        mu_lin: if init.mu.len() >= m_lin {
            init.mu.rows(0, m_lin).into_owned()
        } else {
            Vector::zeros(m_lin)
        },
        cones: program.cones.iter().map(|c| Vector::zeros(c.rank())).collect(),
    };

    let check_every = settings.check_every.max(1);
    let mut best: Option<(f64, Vector, Duals, Residuals)> = None;
    let mut iter = 0;
    let mut converged = None;
    while iter < settings.max_iters {
        if program.a_eq.nrows() > 0 {
            duals.lambda += (&program.a_eq * &y_bar - &b) * sigma;
        }
        if m_lin > 0 {
            let r = &program.a_ineq * &y_bar - &program.b_ineq;
            for i in 0..m_lin {
                duals.mu_lin[i] = (duals.mu_lin[i] + sigma * r[i]).max(0.0);
            }
        }
        for (i, cone) in program.cones.iter().enumerate() {
            let v = &duals.cones[i] + cone.cone_point(&y_bar) * sigma;
            duals.cones[i] = ball_prox(&v, sigma * radii[i]);
        }
        let g = dual_image(program, &duals);
        let y_new = match &p {
            Some(p) => {
                let v = (&y - (&g + &program.c) * tau).component_mul(p);
                clamp_vec(&v, &lower, &upper)
            }
            None => {
                let v = &y - (program.q.apply(&y) + &program.c + &g) * tau;
                clamp_vec(&v, &lower, &upper)
            }
        };
        y_bar = &y_new + (&y_new - &y) * theta;
        y = y_new;
        iter += 1;

        if iter % check_every == 0 || iter == settings.max_iters {
            if !all_finite(&y) || !all_finite(&duals.lambda) || duals.cones.iter().any(|c| !all_finite(c)) {
                return Err(Error::NonFinite("soc iterate"));
            }
            let (prim, gap) = program.prim_and_gap(x, &y, Some(&duals));
            let dual = dual_residual(program, &y, &duals, &lower, &upper).0;
            let res = Residuals {
                prim_inf_norm: prim.max(0.0),
                dual_inf_norm: dual,
                gap_abs: gap,
                iter,
            };
            let score = (prim / settings.eps_prim)
                .max(gap / settings.eps_gap)
                .max(settings.eps_dual.map_or(0.0, |e| dual / e));
            if score <= 1.0 {
                converged = Some((y.clone(), duals.clone(), res));
                break;
            }
            if best.as_ref().is_none_or(|(s, ..)| score < *s) {
                best = Some((score, y.clone(), duals.clone(), res));
            }
        }
    }
    let (ok, (y, duals, res)) = match converged {
        Some(t) => (true, t),
        None => {
            let (_, y, d, r) = best.expect("at least one residual check");
            (false, (y, d, r))
        }
    };
    let (_, alpha, beta) = dual_residual(program, &y, &duals, &lower, &upper);
    let mut mu = Vector::zeros(m_lin + program.cones.len());
    mu.rows_mut(0, m_lin).copy_from(&duals.mu_lin);
    for (i, m) in duals.cones.iter().enumerate() {
        mu[m_lin + i] = if radii[i] > 0.0 { m.norm() / (2.0 * radii[i]) } else { 0.0 };
    }
    let mut point = PrimalDualPoint::new(y, duals.lambda.clone(), mu);
    point.bound_mult = Some((alpha, beta));
    Ok(SocSolveReport {
        report: SolveReport {
            point,
            residuals: res,
            converged: ok,
            iters: iter,
            norm_k_used: norm_k,
        },
        cone_duals: duals.cones,
        tau,
        sigma,
    })
}

fn clamp_vec(v: &Vector, l: &Vector, u: &Vector) -> Vector {
    Vector::from_fn(v.len(), |j, _| box_clamp(v[j], l[j], u[j]))
}

fn dual_image(program: &SocProgram, duals: &Duals) -> Vector {
    let mut g = Vector::zeros(program.n());
    if program.a_eq.nrows() > 0 {
        g += program.a_eq.tr_mul(&duals.lambda);
    }
    if program.a_ineq.nrows() > 0 {
        g += program.a_ineq.tr_mul(&duals.mu_lin);
    }
    for (cone, m) in program.cones.iter().zip(&duals.cones) {
        if cone.rank() > 0 {
            g += cone.r.tr_mul(m);
        }
    }
    g
}

fn dual_residual(
    program: &SocProgram,
    y: &Vector,
    duals: &Duals,
    lower: &Vector,
    upper: &Vector,
) -> (f64, Vector, Vector) {
    let s = program.q.apply(y) + &program.c + dual_image(program, duals);
    let n = y.len();
    let mut alpha = Vector::zeros(n);
    let mut beta = Vector::zeros(n);
    let near = |v: f64, b: f64| b.is_finite() && (v - b).abs() <= BOUND_ACTIVE_TOL * b.abs().max(1.0);
    for i in 0..n {
        if lower[i] == upper[i] {
            alpha[i] = s[i];
        } else if near(y[i], lower[i]) {
            alpha[i] = s[i].max(0.0);
        } else if near(y[i], upper[i]) {
            beta[i] = (-s[i]).max(0.0);
        }
    }
    ((s - &alpha + &beta).amax(), alpha, beta)
}
