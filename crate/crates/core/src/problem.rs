//! Parametric nonlinear programs and the dense QP subproblem data.
//!
//! A family describes
//!
//! ```text
//!   min_y f(x, y)   s.t.  h(x, y) = 0,  g(x, y) <= 0,  l(x) <= y <= u(x)
//! ```
//!
//! for parameters `x` in a box. Built-in families carry closed-form first and
//! second derivatives; custom families implement [`NlpModel`] directly.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_vars: usize,
    pub n_eq: usize,
    pub n_ineq: usize,
    pub n_params: usize,
}

impl Dims {
    /// Length of the stacked primal-dual vector `[y; lambda; mu]`.
    pub fn z_len(&self) -> usize {
        self.n_vars + self.n_eq + self.n_ineq
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Quadratic,
    Qcqp,
    ConvexExp,
    NonconvexSin,
    Custom,
}

impl ObjectiveKind {
    pub fn is_convex(self) -> bool {
        matches!(self, Self::Quadratic | Self::Qcqp | Self::ConvexExp)
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Quadratic => "quadratic",
            Self::Qcqp => "qcqp",
            Self::ConvexExp => "convex-exp",
            Self::NonconvexSin => "nonconvex-sin",
            Self::Custom => "custom",
        };
        f.write_str(s)
    }
}

/// Evaluator callbacks of a parametric NLP.
///
/// Second-order blocks are needed by the backward pass: `hessian` is the full
/// Hessian of `f`, `hessian_diag_jacobian` the Jacobian of `diag(hessian)`
/// with respect to `y`, and `*_hessians` one matrix per constraint row.
pub trait NlpModel: Send + Sync + fmt::Debug {
    fn dims(&self) -> Dims;

    fn kind(&self) -> ObjectiveKind {
        ObjectiveKind::Custom
    }

    fn objective(&self, x: &Vector, y: &Vector) -> f64;
    fn gradient(&self, x: &Vector, y: &Vector) -> Vector;
    fn hessian(&self, x: &Vector, y: &Vector) -> Matrix;

    fn hessian_diag(&self, x: &Vector, y: &Vector) -> Vector {
        self.hessian(x, y).diagonal()
    }

    /// Defaults to central differences of `hessian_diag`.
    fn hessian_diag_jacobian(&self, x: &Vector, y: &Vector) -> Matrix {
        let n = y.len();
        let mut jac = Matrix::zeros(n, n);
        for j in 0..n {
            let h = 1e-5 * y[j].abs().max(1.0);
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[j] += h;
            ym[j] -= h;
            let col = (self.hessian_diag(x, &yp) - self.hessian_diag(x, &ym)) / (2.0 * h);
            jac.set_column(j, &col);
        }
        jac
    }

    fn eq_residual(&self, x: &Vector, y: &Vector) -> Vector;
    fn eq_jacobian(&self, x: &Vector, y: &Vector) -> Matrix;
    fn eq_hessians(&self, x: &Vector, y: &Vector) -> Vec<Matrix>;

    fn ineq_residual(&self, x: &Vector, y: &Vector) -> Vector;
    fn ineq_jacobian(&self, x: &Vector, y: &Vector) -> Matrix;
    fn ineq_hessians(&self, x: &Vector, y: &Vector) -> Vec<Matrix>;

    fn bounds(&self, x: &Vector) -> (Vector, Vector);

    /// Lipschitz constant of `grad_y f`, when known.
    fn lipschitz(&self) -> Option<f64> {
        None
    }
}

/// Shared objective, equality and bound data of the QP-derived families:
/// `f = 1/2 y'Qy + c'y`, `A y = b + B x`, `l + L x <= y <= u + U x`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineCore {
    pub q: Matrix,
    pub c: Vector,
    pub a_eq: Matrix,
    pub b_eq: Vector,
    pub b_param: Matrix,
    pub lower: Vector,
    pub upper: Vector,
    pub lower_param: Matrix,
    pub upper_param: Matrix,
}

impl AffineCore {
    fn objective(&self, y: &Vector) -> f64 {
        0.5 * y.dot(&(&self.q * y)) + self.c.dot(y)
    }

    fn gradient(&self, y: &Vector) -> Vector {
        &self.q * y + &self.c
    }

    fn eq_residual(&self, x: &Vector, y: &Vector) -> Vector {
        &self.a_eq * y - &self.b_eq - &self.b_param * x
    }

    fn bounds(&self, x: &Vector) -> (Vector, Vector) {
        (
            &self.lower + &self.lower_param * x,
            &self.upper + &self.upper_param * x,
        )
    }

    fn lipschitz(&self) -> f64 {
        max_eigenvalue(&self.q)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpFamily {
    pub core: AffineCore,
    pub c_ineq: Matrix,
    pub d_ineq: Vector,
    lipschitz: f64,
}

impl QpFamily {
    pub fn new(core: AffineCore, c_ineq: Matrix, d_ineq: Vector) -> Self {
        let lipschitz = core.lipschitz();
        Self {
            core,
            c_ineq,
            d_ineq,
            lipschitz,
        }
    }
}

/// `y' C y + d' y <= beta + e' x`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadConstraint {
    pub cmat: Matrix,
    pub d: Vector,
    pub beta: f64,
    pub e: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QcqpFamily {
    pub core: AffineCore,
    pub quads: Vec<QuadConstraint>,
    lipschitz: f64,
}

impl QcqpFamily {
    pub fn new(core: AffineCore, quads: Vec<QuadConstraint>) -> Self {
        let lipschitz = core.lipschitz();
        Self {
            core,
            quads,
            lipschitz,
        }
    }
}

/// `a' exp(y) + y' diag(w) y <= beta + e' x`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpConstraint {
    pub a: Vector,
    pub w: Vector,
    pub beta: f64,
    pub e: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpFamily {
    pub core: AffineCore,
    pub exps: Vec<ExpConstraint>,
    lipschitz: f64,
}

impl ExpFamily {
    pub fn new(core: AffineCore, exps: Vec<ExpConstraint>) -> Self {
        let lipschitz = core.lipschitz();
        Self {
            core,
            exps,
            lipschitz,
        }
    }
}

/// `min 1/2 y'Qy + p' sin(y)  s.t.  A y = x,  G y <= h,  l <= y <= u`.
#[derive(Clone, Debug, PartialEq)]
pub struct SinFamily {
    pub q: Matrix,
    pub p: Vector,
    pub a_eq: Matrix,
    pub g_mat: Matrix,
    pub h: Vector,
    pub lower: Vector,
    pub upper: Vector,
    lipschitz: f64,
}

impl SinFamily {
    pub fn new(
        q: Matrix,
        p: Vector,
        a_eq: Matrix,
        g_mat: Matrix,
        h: Vector,
        lower: Vector,
        upper: Vector,
    ) -> Self {
        let lipschitz = max_eigenvalue(&q) + p.amax();
        Self {
            q,
            p,
            a_eq,
            g_mat,
            h,
            lower,
            upper,
            lipschitz,
        }
    }
}

impl NlpModel for QpFamily {
    fn dims(&self) -> Dims {
        Dims {
            n_vars: self.core.q.nrows(),
            n_eq: self.core.a_eq.nrows(),
            n_ineq: self.c_ineq.nrows(),
            n_params: self.core.b_param.ncols(),
        }
    }
    fn kind(&self) -> ObjectiveKind {
        ObjectiveKind::Quadratic
    }
    fn objective(&self, _x: &Vector, y: &Vector) -> f64 {
        self.core.objective(y)
    }
    fn gradient(&self, _x: &Vector, y: &Vector) -> Vector {
        self.core.gradient(y)
    }
    fn hessian(&self, _x: &Vector, _y: &Vector) -> Matrix {
        self.core.q.clone()
    }
    fn hessian_diag_jacobian(&self, _x: &Vector, y: &Vector) -> Matrix {
        Matrix::zeros(y.len(), y.len())
    }
    fn eq_residual(&self, x: &Vector, y: &Vector) -> Vector {
        self.core.eq_residual(x, y)
    }
    fn eq_jacobian(&self, _x: &Vector, _y: &Vector) -> Matrix {
        self.core.a_eq.clone()
    }
    fn eq_hessians(&self, _x: &Vector, y: &Vector) -> Vec<Matrix> {
        zero_hessians(self.core.a_eq.nrows(), y.len())
    }
    fn ineq_residual(&self, _x: &Vector, y: &Vector) -> Vector {
        &self.c_ineq * y - &self.d_ineq
    }
    fn ineq_jacobian(&self, _x: &Vector, _y: &Vector) -> Matrix {
        self.c_ineq.clone()
    }
    fn ineq_hessians(&self, _x: &Vector, y: &Vector) -> Vec<Matrix> {
        zero_hessians(self.c_ineq.nrows(), y.len())
    }
    fn bounds(&self, x: &Vector) -> (Vector, Vector) {
        self.core.bounds(x)
    }
    fn lipschitz(&self) -> Option<f64> {
        Some(self.lipschitz)
    }
}

impl NlpModel for QcqpFamily {
    fn dims(&self) -> Dims {
        Dims {
            n_vars: self.core.q.nrows(),
            n_eq: self.core.a_eq.nrows(),
            n_ineq: self.quads.len(),
            n_params: self.core.b_param.ncols(),
        }
    }
    fn kind(&self) -> ObjectiveKind {
        ObjectiveKind::Qcqp
    }
    fn objective(&self, _x: &Vector, y: &Vector) -> f64 {
        self.core.objective(y)
    }
    fn gradient(&self, _x: &Vector, y: &Vector) -> Vector {
        self.core.gradient(y)
    }
    fn hessian(&self, _x: &Vector, _y: &Vector) -> Matrix {
        self.core.q.clone()
    }
    fn hessian_diag_jacobian(&self, _x: &Vector, y: &Vector) -> Matrix {
        Matrix::zeros(y.len(), y.len())
    }
    fn eq_residual(&self, x: &Vector, y: &Vector) -> Vector {
        self.core.eq_residual(x, y)
    }
    fn eq_jacobian(&self, _x: &Vector, _y: &Vector) -> Matrix {
        self.core.a_eq.clone()
    }
    fn eq_hessians(&self, _x: &Vector, y: &Vector) -> Vec<Matrix> {
        zero_hessians(self.core.a_eq.nrows(), y.len())
    }
    fn ineq_residual(&self, x: &Vector, y: &Vector) -> Vector {
        Vector::from_iterator(
            self.quads.len(),
            self.quads
                .iter()
                .map(|qc| y.dot(&(&qc.cmat * y)) + qc.d.dot(y) - qc.beta - qc.e.dot(x)),
        )
    }
    fn ineq_jacobian(&self, _x: &Vector, y: &Vector) -> Matrix {
        let mut jac = Matrix::zeros(self.quads.len(), y.len());
        for (i, qc) in self.quads.iter().enumerate() {
            let row = (&qc.cmat + qc.cmat.transpose()) * y + &qc.d;
            jac.set_row(i, &row.transpose());
        }
        jac
    }
    fn ineq_hessians(&self, _x: &Vector, _y: &Vector) -> Vec<Matrix> {
        self.quads
            .iter()
            .map(|qc| &qc.cmat + qc.cmat.transpose())
            .collect()
    }
    fn bounds(&self, x: &Vector) -> (Vector, Vector) {
        self.core.bounds(x)
    }
    fn lipschitz(&self) -> Option<f64> {
        Some(self.lipschitz)
    }
}

impl NlpModel for ExpFamily {
    fn dims(&self) -> Dims {
        Dims {
            n_vars: self.core.q.nrows(),
            n_eq: self.core.a_eq.nrows(),
            n_ineq: self.exps.len(),
            n_params: self.core.b_param.ncols(),
        }
    }
    fn kind(&self) -> ObjectiveKind {
        ObjectiveKind::ConvexExp
    }
    fn objective(&self, _x: &Vector, y: &Vector) -> f64 {
        self.core.objective(y)
    }
    fn gradient(&self, _x: &Vector, y: &Vector) -> Vector {
        self.core.gradient(y)
    }
    fn hessian(&self, _x: &Vector, _y: &Vector) -> Matrix {
        self.core.q.clone()
    }
    fn hessian_diag_jacobian(&self, _x: &Vector, y: &Vector) -> Matrix {
        Matrix::zeros(y.len(), y.len())
    }
    fn eq_residual(&self, x: &Vector, y: &Vector) -> Vector {
        self.core.eq_residual(x, y)
    }
    fn eq_jacobian(&self, _x: &Vector, _y: &Vector) -> Matrix {
        self.core.a_eq.clone()
    }
    fn eq_hessians(&self, _x: &Vector, y: &Vector) -> Vec<Matrix> {
        zero_hessians(self.core.a_eq.nrows(), y.len())
    }
    fn ineq_residual(&self, x: &Vector, y: &Vector) -> Vector {
        let ey = y.map(f64::exp);
        Vector::from_iterator(
            self.exps.len(),
            self.exps.iter().map(|ec| {
                ec.a.dot(&ey) + ec.w.dot(&y.component_mul(y)) - ec.beta - ec.e.dot(x)
            }),
        )
    }
    fn ineq_jacobian(&self, _x: &Vector, y: &Vector) -> Matrix {
        let ey = y.map(f64::exp);
        let mut jac = Matrix::zeros(self.exps.len(), y.len());
        for (i, ec) in self.exps.iter().enumerate() {
            let row = ec.a.component_mul(&ey) + 2.0 * ec.w.component_mul(y);
            jac.set_row(i, &row.transpose());
        }
        jac
    }
    fn ineq_hessians(&self, _x: &Vector, y: &Vector) -> Vec<Matrix> {
        let ey = y.map(f64::exp);
        self.exps
            .iter()
            .map(|ec| Matrix::from_diagonal(&(ec.a.component_mul(&ey) + 2.0 * &ec.w)))
            .collect()
    }
    fn bounds(&self, x: &Vector) -> (Vector, Vector) {
        self.core.bounds(x)
    }
    fn lipschitz(&self) -> Option<f64> {
        Some(self.lipschitz)
    }
}

impl NlpModel for SinFamily {
    fn dims(&self) -> Dims {
        Dims {
            n_vars: self.q.nrows(),
            n_eq: self.a_eq.nrows(),
            n_ineq: self.g_mat.nrows(),
            n_params: self.a_eq.nrows(),
        }
    }
    fn kind(&self) -> ObjectiveKind {
        ObjectiveKind::NonconvexSin
    }
    fn objective(&self, _x: &Vector, y: &Vector) -> f64 {
        0.5 * y.dot(&(&self.q * y)) + self.p.dot(&y.map(f64::sin))
    }
    fn gradient(&self, _x: &Vector, y: &Vector) -> Vector {
        &self.q * y + self.p.component_mul(&y.map(f64::cos))
    }
    fn hessian(&self, _x: &Vector, y: &Vector) -> Matrix {
        &self.q - Matrix::from_diagonal(&self.p.component_mul(&y.map(f64::sin)))
    }
    fn hessian_diag_jacobian(&self, _x: &Vector, y: &Vector) -> Matrix {
        Matrix::from_diagonal(&(-self.p.component_mul(&y.map(f64::cos))))
    }
    fn eq_residual(&self, x: &Vector, y: &Vector) -> Vector {
        &self.a_eq * y - x
    }
    fn eq_jacobian(&self, _x: &Vector, _y: &Vector) -> Matrix {
        self.a_eq.clone()
    }
    fn eq_hessians(&self, _x: &Vector, y: &Vector) -> Vec<Matrix> {
        zero_hessians(self.a_eq.nrows(), y.len())
    }
    fn ineq_residual(&self, _x: &Vector, y: &Vector) -> Vector {
        &self.g_mat * y - &self.h
    }
    fn ineq_jacobian(&self, _x: &Vector, _y: &Vector) -> Matrix {
        self.g_mat.clone()
    }
    fn ineq_hessians(&self, _x: &Vector, y: &Vector) -> Vec<Matrix> {
        zero_hessians(self.g_mat.nrows(), y.len())
    }
    fn bounds(&self, _x: &Vector) -> (Vector, Vector) {
        (self.lower.clone(), self.upper.clone())
    }
    fn lipschitz(&self) -> Option<f64> {
        Some(self.lipschitz)
    }
}

fn zero_hessians(rows: usize, n: usize) -> Vec<Matrix> {
    vec![Matrix::zeros(n, n); rows]
}

pub(crate) fn max_eigenvalue(m: &Matrix) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().max()
}

/// Affine point `y_f(x) = y_c + T x` that is feasible for every parameter in
/// the box. Generators attach one to every family they emit.
#[derive(Clone, Debug, PartialEq)]
pub struct Witness {
    pub y_c: Vector,
    pub t: Matrix,
}

impl Witness {
    pub fn at(&self, x: &Vector) -> Vector {
        &self.y_c + &self.t * x
    }
}

#[derive(Clone, Debug)]
pub enum FamilyModel {
    Quadratic(QpFamily),
    Qcqp(QcqpFamily),
    ConvexExp(ExpFamily),
    NonconvexSin(SinFamily),
    Custom(Arc<dyn NlpModel>),
}

#[derive(Clone, Debug)]
pub struct ParametricNlpFamily {
    pub model: FamilyModel,
    pub x_low: Vector,
    pub x_high: Vector,
    pub witness: Option<Witness>,
}

impl ParametricNlpFamily {
    pub fn new(model: FamilyModel, x_low: Vector, x_high: Vector) -> Self {
        Self {
            model,
            x_low,
            x_high,
            witness: None,
        }
    }

    pub fn with_witness(mut self, witness: Witness) -> Self {
        self.witness = Some(witness);
        self
    }

    pub fn nlp(&self) -> &dyn NlpModel {
        match &self.model {
            FamilyModel::Quadratic(m) => m,
            FamilyModel::Qcqp(m) => m,
            FamilyModel::ConvexExp(m) => m,
            FamilyModel::NonconvexSin(m) => m,
            FamilyModel::Custom(m) => m.as_ref(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.nlp().dims()
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.nlp().kind()
    }

    pub fn lipschitz(&self) -> Option<f64> {
        self.nlp().lipschitz()
    }

    pub fn objective(&self, x: &Vector, y: &Vector) -> f64 {
        self.nlp().objective(x, y)
    }

    pub fn contains_param(&self, x: &Vector) -> bool {
        x.len() == self.x_low.len()
            && x.iter()
                .zip(self.x_low.iter().zip(self.x_high.iter()))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Largest original-constraint violation `max(|h|_inf, |g_+|_inf)`.
    pub fn max_violation(&self, x: &Vector, y: &Vector) -> f64 {
        let m = self.nlp();
        let h = m.eq_residual(x, y);
        let g = m.ineq_residual(x, y);
        let veq = h.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        g.iter().fold(veq, |acc, v| acc.max(v.max(0.0)))
    }
}

/// Every block of the local model, evaluated at one `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub f: f64,
    pub grad_f: Vector,
    pub hess_diag: Vector,
    pub h: Vector,
    pub jac_h: Matrix,
    pub g: Vector,
    pub jac_g: Matrix,
    pub lower: Vector,
    pub upper: Vector,
    /// False when `x` was outside the family's parameter box.
    pub x_in_box: bool,
}

/// Dense QP with diagonal Hessian:
/// `min 1/2 y' diag(q) y + c'y  s.t.  A y = b,  C y <= d,  l <= y <= u`.
#[derive(Clone, Debug, PartialEq)]
pub struct QpData {
    pub q_diag: Vector,
    pub c: Vector,
    pub a_eq: Matrix,
    pub b_eq: Vector,
    pub a_ineq: Matrix,
    pub b_ineq: Vector,
    pub lower: Vector,
    pub upper: Vector,
}

impl QpData {
    pub fn n(&self) -> usize {
        self.q_diag.len()
    }
    pub fn n_eq(&self) -> usize {
        self.a_eq.nrows()
    }
    pub fn n_ineq(&self) -> usize {
        self.a_ineq.nrows()
    }

    /// Unconstrained QP on a box; constraint blocks are empty.
    pub fn boxed(q_diag: Vector, c: Vector, lower: Vector, upper: Vector) -> Self {
        let n = q_diag.len();
        Self {
            q_diag,
            c,
            a_eq: Matrix::zeros(0, n),
            b_eq: Vector::zeros(0),
            a_ineq: Matrix::zeros(0, n),
            b_ineq: Vector::zeros(0),
            lower,
            upper,
        }
    }

    pub fn objective(&self, y: &Vector) -> f64 {
        0.5 * y.dot(&self.q_diag.component_mul(y)) + self.c.dot(y)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.n();
        let checks: [(&'static str, usize, usize); 7] = [
            ("QpData.c", n, self.c.len()),
            ("QpData.A cols", n, self.a_eq.ncols()),
            ("QpData.b", self.a_eq.nrows(), self.b_eq.len()),
            ("QpData.C cols", n, self.a_ineq.ncols()),
            ("QpData.d", self.a_ineq.nrows(), self.b_ineq.len()),
            ("QpData.l", n, self.lower.len()),
            ("QpData.u", n, self.upper.len()),
        ];
        for (context, expected, got) in checks {
            if expected != got {
                return Err(Error::DimensionMismatch {
                    context,
                    expected,
                    got,
                });
            }
        }
        if self.lower.iter().zip(self.upper.iter()).any(|(l, u)| l > u) {
            return Err(Error::InvalidConfig("QpData has l > u".into()));
        }
        Ok(())
    }
}

/// Primal-dual point `z = [y; lambda; mu]` with optional bound multipliers.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimalDualPoint {
    pub y: Vector,
    pub lambda: Vector,
    pub mu: Vector,
    /// `(alpha, beta)` for the lower and upper bounds.
    pub bound_mult: Option<(Vector, Vector)>,
}

impl PrimalDualPoint {
    pub fn new(y: Vector, lambda: Vector, mu: Vector) -> Self {
        Self {
            y,
            lambda,
            mu,
            bound_mult: None,
        }
    }

    pub fn zeros(n: usize, n_eq: usize, n_ineq: usize) -> Self {
        Self::new(Vector::zeros(n), Vector::zeros(n_eq), Vector::zeros(n_ineq))
    }

    pub fn from_primal(y: Vector, n_eq: usize, n_ineq: usize) -> Self {
        Self::new(y, Vector::zeros(n_eq), Vector::zeros(n_ineq))
    }

    pub fn len(&self) -> usize {
        self.y.len() + self.lambda.len() + self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vector(&self) -> Vector {
        let mut z = Vector::zeros(self.len());
        let (n, m) = (self.y.len(), self.lambda.len());
        z.rows_mut(0, n).copy_from(&self.y);
        z.rows_mut(n, m).copy_from(&self.lambda);
        z.rows_mut(n + m, self.mu.len()).copy_from(&self.mu);
        z
    }

    pub fn from_slice(z: &[f64], n: usize, n_eq: usize, n_ineq: usize) -> Result<Self> {
        if z.len() != n + n_eq + n_ineq {
            return Err(Error::DimensionMismatch {
                context: "PrimalDualPoint::from_slice",
                expected: n + n_eq + n_ineq,
                got: z.len(),
            });
        }
        Ok(Self::new(
            Vector::from_column_slice(&z[..n]),
            Vector::from_column_slice(&z[n..n + n_eq]),
            Vector::from_column_slice(&z[n + n_eq..]),
        ))
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.y) && all_finite(&self.lambda) && all_finite(&self.mu)
    }
}

pub(crate) fn all_finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}

/// Evaluates every block of the local model at `(x, y)`.
pub fn evaluate(family: &ParametricNlpFamily, x: &Vector, y: &Vector) -> Result<EvalRecord> {
    let dims = family.dims();
    check_len("evaluate: x", dims.n_params, x.len())?;
    check_len("evaluate: y", dims.n_vars, y.len())?;
    let m = family.nlp();
    let (lower, upper) = m.bounds(x);
    let rec = EvalRecord {
        f: m.objective(x, y),
        grad_f: m.gradient(x, y),
        hess_diag: m.hessian_diag(x, y),
        h: m.eq_residual(x, y),
        jac_h: m.eq_jacobian(x, y),
        g: m.ineq_residual(x, y),
        jac_g: m.ineq_jacobian(x, y),
        lower,
        upper,
        x_in_box: family.contains_param(x),
    };
    check_len("evaluate: h", dims.n_eq, rec.h.len())?;
    check_len("evaluate: g", dims.n_ineq, rec.g.len())?;
    if !rec.f.is_finite() {
        return Err(Error::NonFinite("objective"));
    }
    if !all_finite(&rec.grad_f) || !all_finite(&rec.hess_diag) {
        return Err(Error::NonFinite("objective derivatives"));
    }
    if !all_finite(&rec.h) || rec.jac_h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("equality constraints"));
    }
    if !all_finite(&rec.g) || rec.jac_g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("inequality constraints"));
    }
    if rec.lower.iter().chain(rec.upper.iter()).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("bounds"));
    }
    Ok(rec)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    EqExceedsVars,
    BoundsCrossed,
    NonFiniteOutput,
    DerivativeMismatch,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

/// Relative tolerance used by the finite-difference derivative probe.
pub const DERIVATIVE_TOL: f64 = 1e-6;

/// Checks the family invariants on a seeded probe set of parameters.
///
/// Derivatives are compared against central differences; each mismatching
/// block is reported once.
pub fn validate(family: &ParametricNlpFamily) -> Vec<Violation> {
    let mut out = Vec::new();
    let dims = family.dims();
    if dims.n_eq > dims.n_vars {
        out.push(Violation {
            kind: ViolationKind::EqExceedsVars,
            message: format!("n_eq exceeds n_vars ({} > {})", dims.n_eq, dims.n_vars),
        });
    }
    let m = family.nlp();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut mismatched: Vec<&'static str> = Vec::new();
    let mut crossed = false;
    let mut nonfinite = false;
    for _ in 0..8 {
        let x = Vector::from_fn(dims.n_params, |i, _| {
            let (lo, hi) = (family.x_low[i], family.x_high[i]);
            if lo < hi {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        });
        let (l, u) = m.bounds(&x);
        if l.iter().zip(u.iter()).any(|(a, b)| a > b) {
            crossed = true;
        }
        let y = probe_point(family, &x, &l, &u, &mut rng);
        match evaluate(family, &x, &y) {
            Ok(_) => {}
            Err(_) => {
                nonfinite = true;
                continue;
            }
        }
        for (name, ok) in derivative_checks(m, &x, &y) {
            if !ok && !mismatched.contains(&name) {
                mismatched.push(name);
            }
        }
    }
    if crossed {
        out.push(Violation {
            kind: ViolationKind::BoundsCrossed,
            message: "l(x) > u(x) for some probed parameter".into(),
        });
    }
    if nonfinite {
        out.push(Violation {
            kind: ViolationKind::NonFiniteOutput,
            message: "an evaluator returned NaN or Inf on a probe".into(),
        });
    }
    for name in mismatched {
        out.push(Violation {
            kind: ViolationKind::DerivativeMismatch,
            message: format!("{name} disagrees with central finite differences"),
        });
    }
    out
}

fn probe_point(
    family: &ParametricNlpFamily,
    x: &Vector,
    l: &Vector,
    u: &Vector,
    rng: &mut ChaCha8Rng,
) -> Vector {
    let base = match &family.witness {
        Some(w) => w.at(x),
        None => Vector::zeros(l.len()),
    };
    Vector::from_fn(l.len(), |i, _| {
        let v = base[i] + rng.random_range(-0.5..0.5);
        v.clamp(l[i].min(u[i]), u[i].max(l[i]))
    })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= DERIVATIVE_TOL * a.abs().max(b.abs()).max(1.0)
}

fn mats_close(a: &Matrix, b: &Matrix) -> bool {
    a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| close(*x, *y))
}

/// Central-difference Jacobian of a vector map in `y`.
pub(crate) fn fd_jacobian(
    y: &Vector,
    rows: usize,
    step: f64,
    mut map: impl FnMut(&Vector) -> Vector,
) -> Matrix {
    let n = y.len();
    let mut jac = Matrix::zeros(rows, n);
    for j in 0..n {
        let h = step * y[j].abs().max(1.0);
        let mut yp = y.clone();
        let mut ym = y.clone();
        yp[j] += h;
        ym[j] -= h;
        let col = (map(&yp) - map(&ym)) / (2.0 * h);
        jac.set_column(j, &col);
    }
    jac
}

fn derivative_checks(m: &dyn NlpModel, x: &Vector, y: &Vector) -> Vec<(&'static str, bool)> {
    let d = m.dims();
    let step = 1e-5;
    let mut res = Vec::new();

    let fd_grad = fd_jacobian(y, 1, step, |p| Vector::from_element(1, m.objective(x, p)));
    res.push(("gradient", mats_close(&fd_grad.transpose(), &Matrix::from_column_slice(d.n_vars, 1, m.gradient(x, y).as_slice()))));

    let fd_hess = fd_jacobian(y, d.n_vars, step, |p| m.gradient(x, p));
    res.push(("hessian", mats_close(&fd_hess, &m.hessian(x, y))));

    let fd_hdj = fd_jacobian(y, d.n_vars, step, |p| m.hessian_diag(x, p));
    res.push((
        "hessian diagonal jacobian",
        mats_close(&fd_hdj, &m.hessian_diag_jacobian(x, y)),
    ));

    let fd_jh = fd_jacobian(y, d.n_eq, step, |p| m.eq_residual(x, p));
    res.push(("J_h", mats_close(&fd_jh, &m.eq_jacobian(x, y))));

    let fd_jg = fd_jacobian(y, d.n_ineq, step, |p| m.ineq_residual(x, p));
    res.push(("J_g", mats_close(&fd_jg, &m.ineq_jacobian(x, y))));

    let eq_h = m.eq_hessians(x, y);
    let ok = eq_h.len() == d.n_eq
        && (0..d.n_eq).all(|i| {
            let fd = fd_jacobian(y, d.n_vars, step, |p| {
                m.eq_jacobian(x, p).row(i).transpose()
            });
            mats_close(&fd, &eq_h[i])
        });
    res.push(("equality hessians", ok));

    let ineq_h = m.ineq_hessians(x, y);
    let ok = ineq_h.len() == d.n_ineq
        && (0..d.n_ineq).all(|i| {
            let fd = fd_jacobian(y, d.n_vars, step, |p| {
                m.ineq_jacobian(x, p).row(i).transpose()
            });
            mats_close(&fd, &ineq_h[i])
        });
    res.push(("inequality hessians", ok));
    res
}
