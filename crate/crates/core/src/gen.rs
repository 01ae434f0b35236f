//! Random parametric families that are feasible by construction: every
//! family carries an affine witness `y_f(x) = y_c + T x` satisfying all
//! constraints on the whole parameter box.

use nalgebra::linalg::QR;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{
    AffineCore, ExpConstraint, ExpFamily, FamilyModel, Matrix, ParametricNlpFamily, QcqpFamily, QpFamily,
    QuadConstraint, SinFamily, Vector, Witness,
};

/// Exhaustive corner enumeration is used up to this many parameters.
pub const MAX_CORNER_PARAMS: usize = 12;
pub const EXTRA_SAMPLES: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDims {
    pub n: usize,
    pub n_eq: usize,
    pub n_ineq: usize,
    pub p: usize,
    #[serde(default = "default_instances")]
    pub n_instances: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_instances() -> usize {
    100
}

impl GenDims {
    pub fn new(n: usize, n_eq: usize, n_ineq: usize, p: usize, seed: u64) -> Self {
        Self {
            n,
            n_eq,
            n_ineq,
            p,
            n_instances: default_instances(),
            seed,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 {
            return Err(Error::InvalidConfig("generator needs n >= 1 and p >= 1".into()));
        }
        if self.n_eq > self.n {
            return Err(Error::InvalidConfig(format!(
                "n_eq exceeds n_vars ({} > {})",
                self.n_eq, self.n
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenOptions {
    /// Half-width `r` of the variable bounds around the witness.
    pub bound_radius: f64,
    /// Fraction of nonzeros in sparse constraint rows.
    pub support: f64,
    /// Half-width of the parameter box `[-x_range, x_range]`.
    pub x_range: f64,
    pub qcqp_alpha: (f64, f64),
    pub qcqp_margin: f64,
    pub nlp_margin: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            bound_radius: 5.0,
            support: 0.2,
            x_range: 10.0,
            qcqp_alpha: (0.1, 0.3),
            qcqp_margin: 1e-6,
            nlp_margin: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    Qp,
    Qcqp,
    Nlp,
    Nonconvex,
}

impl std::str::FromStr for FamilyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qp" => Ok(Self::Qp),
            "qcqp" => Ok(Self::Qcqp),
            "nlp" => Ok(Self::Nlp),
            "nonconvex" => Ok(Self::Nonconvex),
            other => Err(Error::InvalidConfig(format!("unknown family kind '{other}'"))),
        }
    }
}

pub fn generate(kind: FamilyKind, dims: &GenDims, opts: &GenOptions) -> Result<ParametricNlpFamily> {
    match kind {
        FamilyKind::Qp => generate_qp_family_with(dims, opts),
        FamilyKind::Qcqp => generate_qcqp_family_with(dims, opts),
        FamilyKind::Nlp => generate_convex_nlp_family_with(dims, opts),
        FamilyKind::Nonconvex => generate_nonconvex_family_with(dims, opts),
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vector {
    Vector::from_fn(n, |_, _| rng.random_range(lo..hi))
}

/// `k` distinct indices out of `n`.
fn support(rng: &mut ChaCha8Rng, n: usize, frac: f64) -> Vec<usize> {
    let k = ((frac * n as f64).round() as usize).clamp(1, n);
    rand::seq::index::sample(rng, n, k).into_vec()
}

struct Base {
    core: AffineCore,
    witness: Witness,
    x_low: Vector,
    x_high: Vector,
}

/// Objective, equalities, witness and bounds shared by the QP, QCQP and
/// convex-NLP recipes.
fn base(rng: &mut ChaCha8Rng, dims: &GenDims, opts: &GenOptions) -> Base {
    let (n, p) = (dims.n, dims.p);
    let m = gaussian(rng, n, n);
    let delta = uniform_vec(rng, n, 1.2, 1.8);
    let q = m.transpose() * &m / n as f64 + Matrix::from_diagonal(&delta);
    let c = uniform_vec(rng, n, 0.5, 1.5);

    let qr = QR::new(gaussian(rng, n, n));
    let basis = qr.q();
    let mut a_eq = Matrix::zeros(dims.n_eq, n);
    for i in 0..dims.n_eq {
        let scale: f64 = rng.random_range(0.8..1.2);
        a_eq.set_row(i, &(basis.column(i).transpose() * scale));
    }

    let y_c = uniform_vec(rng, n, -1.0, 1.0);
    let t = gaussian(rng, n, p) * (0.1 / (p as f64).sqrt());
    let b_eq = &a_eq * &y_c;
    let b_param = &a_eq * &t;
    let r = opts.bound_radius;
    let core = AffineCore {
        q,
        c,
        a_eq,
        b_eq,
        b_param,
        lower: y_c.map(|v| v - r),
        upper: y_c.map(|v| v + r),
        lower_param: t.clone(),
        upper_param: t.clone(),
    };
    Base {
        core,
        witness: Witness { y_c, t },
        x_low: Vector::from_element(p, -opts.x_range),
        x_high: Vector::from_element(p, opts.x_range),
    }
}

/// `max_{x in box} w'x`.
fn linear_box_max(w: &Vector, lo: &Vector, hi: &Vector) -> f64 {
    (0..w.len()).map(|j| (w[j] * lo[j]).max(w[j] * hi[j])).sum()
}

/// Candidate points for a box maximum of a function that is convex in `x`:
/// every corner for small `p`, plus uniform samples.
fn box_candidates(rng: &mut ChaCha8Rng, lo: &Vector, hi: &Vector) -> Option<Vec<Vector>> {
    let p = lo.len();
    if p > MAX_CORNER_PARAMS {
        return None;
    }
    let mut pts = Vec::with_capacity((1 << p) + EXTRA_SAMPLES);
    for mask in 0..(1usize << p) {
        pts.push(Vector::from_fn(p, |j, _| if mask >> j & 1 == 1 { hi[j] } else { lo[j] }));
    }
    for _ in 0..EXTRA_SAMPLES {
        pts.push(Vector::from_fn(p, |j, _| rng.random_range(lo[j]..=hi[j])));
    }
    Some(pts)
}

/// Range of `s0 + w'x` over the box.
fn affine_range(s0: f64, w: &Vector, lo: &Vector, hi: &Vector) -> (f64, f64) {
    let top = linear_box_max(w, lo, hi);
    let bottom = -linear_box_max(&(-w), lo, hi);
    (s0 + bottom, s0 + top)
}

pub fn generate_qp_family(dims: &GenDims) -> Result<ParametricNlpFamily> {
    generate_qp_family_with(dims, &GenOptions::default())
}

pub fn generate_qp_family_with(dims: &GenDims, opts: &GenOptions) -> Result<ParametricNlpFamily> {
    dims.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(dims.seed);
    let b = base(&mut rng, dims, opts);
    let n = dims.n;
    let mut c_ineq = Matrix::zeros(dims.n_ineq, n);
    for i in 0..dims.n_ineq {
        let idx = support(&mut rng, n, opts.support);
        let mut row = Vector::zeros(n);
        for j in idx {
            row[j] = StandardNormal.sample(&mut rng);
        }
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
        c_ineq.set_row(i, &row.transpose());
    }
    let ct = &c_ineq * &b.witness.t;
    let d_ineq = Vector::from_fn(dims.n_ineq, |i, _| {
        c_ineq.row(i).dot(&b.witness.y_c.transpose()) + linear_box_max(&ct.row(i).transpose(), &b.x_low, &b.x_high)
    });
    let fam = QpFamily::new(b.core, c_ineq, d_ineq);
    Ok(ParametricNlpFamily::new(FamilyModel::Quadratic(fam), b.x_low, b.x_high).with_witness(b.witness))
}

pub fn generate_qcqp_family(dims: &GenDims) -> Result<ParametricNlpFamily> {
    generate_qcqp_family_with(dims, &GenOptions::default())
}

/// Constraints `1/2 alpha_i (r_i'y)^2 + r_i'y <= beta_i + E_i x`.
pub fn generate_qcqp_family_with(dims: &GenDims, opts: &GenOptions) -> Result<ParametricNlpFamily> {
    dims.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(dims.seed);
    let b = base(&mut rng, dims, opts);
    let (n, p) = (dims.n, dims.p);
    let mut quads = Vec::with_capacity(dims.n_ineq);
    for _ in 0..dims.n_ineq {
        let mut r: Vector = Vector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        r /= r.norm();
        let alpha = rng.random_range(opts.qcqp_alpha.0..opts.qcqp_alpha.1);
        let e = Vector::from_fn(p, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * 0.1 / (p as f64).sqrt()
        });
        let s0 = r.dot(&b.witness.y_c);
        let w = b.witness.t.transpose() * &r;
        let lhs = |x: &Vector| {
            let s = s0 + w.dot(x);
            0.5 * alpha * s * s + s - e.dot(x)
        };
        let max = match box_candidates(&mut rng, &b.x_low, &b.x_high) {
            Some(pts) => pts.iter().map(lhs).fold(f64::NEG_INFINITY, f64::max),
            None => {
                // separable upper bound: the quadratic over the range of r'y_f
                // plus the largest -E x
                let (s_lo, s_hi) = affine_range(s0, &w, &b.x_low, &b.x_high);
                let quad = |s: f64| 0.5 * alpha * s * s + s;
                quad(s_lo).max(quad(s_hi)) + linear_box_max(&(-&e), &b.x_low, &b.x_high)
            }
        };
        quads.push(QuadConstraint {
            cmat: &r * r.transpose() * (0.5 * alpha),
            d: r,
            beta: max + opts.qcqp_margin,
            e,
        });
    }
    let fam = QcqpFamily::new(b.core, quads);
    Ok(ParametricNlpFamily::new(FamilyModel::Qcqp(fam), b.x_low, b.x_high).with_witness(b.witness))
}

pub fn generate_convex_nlp_family(dims: &GenDims) -> Result<ParametricNlpFamily> {
    generate_convex_nlp_family_with(dims, &GenOptions::default())
}

/// Constraints `a_i' exp(y) + y' diag(w_i) y <= beta_i + E_i x` with sparse
/// nonnegative `a_i`, `w_i`.
pub fn generate_convex_nlp_family_with(dims: &GenDims, opts: &GenOptions) -> Result<ParametricNlpFamily> {
    dims.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(dims.seed);
    let b = base(&mut rng, dims, opts);
    let (n, p) = (dims.n, dims.p);
    let mut exps = Vec::with_capacity(dims.n_ineq);
    for _ in 0..dims.n_ineq {
        let mut a = Vector::zeros(n);
        for j in support(&mut rng, n, opts.support) {
            a[j] = rng.random_range(0.1..1.0);
        }
        let mut w = Vector::zeros(n);
        for j in support(&mut rng, n, opts.support) {
            w[j] = rng.random_range(0.1..0.5);
        }
        let e = Vector::from_fn(p, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * 0.1 / (p as f64).sqrt()
        });
        let term = |j: usize, yj: f64| a[j] * yj.exp() + w[j] * yj * yj;
        let lhs = |x: &Vector| {
            let y = b.witness.at(x);
            (0..n).map(|j| term(j, y[j])).sum::<f64>() - e.dot(x)
        };
        let max = match box_candidates(&mut rng, &b.x_low, &b.x_high) {
            Some(pts) => pts.iter().map(lhs).fold(f64::NEG_INFINITY, f64::max),
            None => {
                let mut total = linear_box_max(&(-&e), &b.x_low, &b.x_high);
                for j in 0..n {
                    let tj = b.witness.t.row(j).transpose();
                    let (lo, hi) = affine_range(b.witness.y_c[j], &tj, &b.x_low, &b.x_high);
                    total += term(j, lo).max(term(j, hi));
                }
                total
            }
        };
        exps.push(ExpConstraint {
            a,
            w,
            beta: max + opts.nlp_margin,
            e,
        });
    }
    let fam = ExpFamily::new(b.core, exps);
    Ok(ParametricNlpFamily::new(FamilyModel::ConvexExp(fam), b.x_low, b.x_high).with_witness(b.witness))
}

pub fn generate_nonconvex_family(dims: &GenDims) -> Result<ParametricNlpFamily> {
    generate_nonconvex_family_with(dims, &GenOptions::default())
}

/// `min 1/2 y'Qy + p' sin(y)  s.t.  A y = x,  G y <= h` with `Q = diag(U[0,1])`,
/// `p ~ U[0,1]`, Gaussian `A`, `G` and `h = sum_j |(G A^+)_ij|`. The
/// parameter is the equality right side, so `n_params = n_eq` and
/// `dims.p` is ignored; `x` ranges over `[-1, 1]^n_eq`.
pub fn generate_nonconvex_family_with(dims: &GenDims, opts: &GenOptions) -> Result<ParametricNlpFamily> {
    dims.check()?;
    if dims.n_eq == 0 {
        return Err(Error::InvalidConfig("nonconvex family needs n_eq >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(dims.seed);
    let n = dims.n;
    let q = Matrix::from_diagonal(&uniform_vec(&mut rng, n, 0.0, 1.0));
    let p = uniform_vec(&mut rng, n, 0.0, 1.0);
    let a = gaussian(&mut rng, dims.n_eq, n);
    let g = gaussian(&mut rng, dims.n_ineq, n);
    let a_pinv = a
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::InvalidConfig(format!("pseudo-inverse failed: {e}")))?;
    let ga = &g * &a_pinv;
    let h = Vector::from_fn(dims.n_ineq, |i, _| ga.row(i).abs().sum());
    let reach = Vector::from_fn(n, |j, _| a_pinv.row(j).abs().sum() + opts.bound_radius);
    let fam = SinFamily::new(q, p, a, g, h, -&reach, reach);
    let witness = Witness {
        y_c: Vector::zeros(n),
        t: a_pinv,
    };
    Ok(ParametricNlpFamily::new(
        FamilyModel::NonconvexSin(fam),
        Vector::from_element(dims.n_eq, -1.0),
        Vector::from_element(dims.n_eq, 1.0),
    )
    .with_witness(witness))
}

/// `n` i.i.d. uniform draws from the family's parameter box.
pub fn sample_parameters(family: &ParametricNlpFamily, n: usize, seed: u64) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (&family.x_low, &family.x_high);
    (0..n)
        .map(|_| {
            Vector::from_fn(lo.len(), |j, _| {
                if lo[j] < hi[j] {
                    rng.random_range(lo[j]..=hi[j])
                } else {
                    lo[j]
                }
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::validate;

    fn dims(seed: u64) -> GenDims {
        GenDims::new(6, 2, 3, 3, seed)
    }

    fn witness_ok(fam: &ParametricNlpFamily, tol_ineq: f64) {
        let w = fam.witness.as_ref().unwrap();
        let m = fam.nlp();
        for x in sample_parameters(fam, 100, 3) {
            let y = w.at(&x);
            assert!(m.eq_residual(&x, &y).amax() <= 1e-10);
            assert!(m.ineq_residual(&x, &y).iter().all(|g| *g <= tol_ineq));
            let (l, u) = m.bounds(&x);
            assert!((0..y.len()).all(|j| l[j] <= y[j] && y[j] <= u[j]));
        }
    }

    #[test]
    fn qp_family_is_feasible_and_valid() {
        let fam = generate_qp_family(&dims(1)).unwrap();
        witness_ok(&fam, 1e-12);
        assert!(validate(&fam).is_empty(), "{:?}", validate(&fam));
    }

    #[test]
    fn qp_objective_eigenvalues_above_shift() {
        let fam = generate_qp_family(&dims(2)).unwrap();
        let FamilyModel::Quadratic(qp) = &fam.model else { panic!() };
        let ev = qp.core.q.clone().symmetric_eigenvalues();
        assert!(ev.min() >= 1.2 - 1e-12);
    }

    #[test]
    fn qp_equality_rows_full_rank() {
        let fam = generate_qp_family(&GenDims::new(8, 5, 2, 2, 4)).unwrap();
        let FamilyModel::Quadratic(qp) = &fam.model else { panic!() };
        assert_eq!(qp.core.a_eq.rank(1e-10), 5);
    }

    #[test]
    fn qp_rhs_uses_box_maximum() {
        let fam = generate_qp_family(&dims(5)).unwrap();
        let FamilyModel::Quadratic(qp) = &fam.model else { panic!() };
        let w = fam.witness.as_ref().unwrap();
        let ct = &qp.c_ineq * &w.t;
        for i in 0..qp.d_ineq.len() {
            let expect = qp.c_ineq.row(i).dot(&w.y_c.transpose()) + ct.row(i).abs().sum() * 10.0;
            assert!((qp.d_ineq[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn qcqp_family_is_feasible_and_valid() {
        let fam = generate_qcqp_family(&dims(6)).unwrap();
        witness_ok(&fam, 0.0);
        assert!(validate(&fam).is_empty());
        let FamilyModel::Qcqp(q) = &fam.model else { panic!() };
        for qc in &q.quads {
            assert_eq!(qc.cmat.rank(1e-12), 1);
            assert!(qc.cmat.clone().symmetric_eigenvalues().min() >= -1e-12);
        }
    }

    #[test]
    fn qcqp_many_params_uses_safe_bound() {
        let fam = generate_qcqp_family(&GenDims::new(5, 1, 2, 14, 7)).unwrap();
        witness_ok(&fam, 0.0);
    }

    #[test]
    fn nlp_family_has_margin() {
        let fam = generate_convex_nlp_family(&dims(8)).unwrap();
        witness_ok(&fam, -0.5e-3);
        assert!(validate(&fam).is_empty());
    }

    #[test]
    fn nonconvex_family_is_feasible() {
        let fam = generate_nonconvex_family(&dims(9)).unwrap();
        witness_ok(&fam, 1e-12);
        assert!(validate(&fam).is_empty());
        assert_eq!(fam.dims().n_params, 2);
    }

    #[test]
    fn sampling_is_seeded_and_inside() {
        let fam = generate_qp_family(&dims(1)).unwrap();
        let a = sample_parameters(&fam, 50, 11);
        let b = sample_parameters(&fam, 50, 11);
        assert_eq!(a, b);
        assert!(a.iter().all(|x| fam.contains_param(x)));
    }

    #[test]
    fn same_seed_same_family() {
        let a = generate_convex_nlp_family(&dims(3)).unwrap();
        let b = generate_convex_nlp_family(&dims(3)).unwrap();
        let (FamilyModel::ConvexExp(a), FamilyModel::ConvexExp(b)) = (&a.model, &b.model) else { panic!() };
        assert_eq!(a, b);
    }

    #[test]
    fn qcqp_soc_conversion_matches_constraint() {
        let fam = generate_qcqp_family(&dims(12)).unwrap();
        let FamilyModel::Qcqp(q) = &fam.model else { panic!() };
        let m = fam.nlp();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for x in sample_parameters(&fam, 10, 2) {
            let y = uniform_vec(&mut rng, 6, -3.0, 3.0);
            let g = m.ineq_residual(&x, &y);
            for (i, qc) in q.quads.iter().enumerate() {
                let soc = crate::soc::complete_square(&qc.cmat, &qc.d, qc.beta, &(-&qc.e), &fam.x_low, &fam.x_high)
                    .unwrap();
                let lhs = soc.cone_point(&y).norm_squared() - soc.radius_sq(&x);
                assert!((lhs - g[i]).abs() < 1e-9 * (1.0 + g[i].abs()));
            }
        }
    }

    #[test]
    fn nlp_constraint_hessians_psd() {
        let fam = generate_convex_nlp_family(&dims(13)).unwrap();
        let m = fam.nlp();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for x in sample_parameters(&fam, 5, 3) {
            let y = uniform_vec(&mut rng, 6, -2.0, 2.0);
            let fd = crate::problem::fd_jacobian(&y, 6, 1e-5, |yy| {
                m.ineq_jacobian(&x, yy).row(0).transpose()
            });
            let sym = (&fd + fd.transpose()) * 0.5;
            assert!(sym.symmetric_eigenvalues().min() >= -1e-6);
            for h in m.ineq_hessians(&x, &y) {
                assert!(h.symmetric_eigenvalues().min() >= -1e-10);
            }
        }
    }

    #[test]
    fn sample_mean_near_centre() {
        let fam = generate_qp_family(&dims(1)).unwrap();
        let xs = sample_parameters(&fam, 10_000, 99);
        // uniform on [-10, 10]: sd 20/sqrt(12), mean sd / 100
        let sigma = 20.0 / 12f64.sqrt() / 100.0;
        for j in 0..3 {
            let mean = xs.iter().map(|x| x[j]).sum::<f64>() / xs.len() as f64;
            assert!(mean.abs() <= 3.0 * sigma, "coord {j}: {mean}");
        }
    }

    #[test]
    fn nonconvex_oracle_reaches_stationarity() {
        let fam = generate_nonconvex_family(&dims(14)).unwrap();
        for x in sample_parameters(&fam, 3, 5) {
            let sol = crate::oracle::solve_nlp_reference(&fam, &x, 1e-9).unwrap();
            assert!(sol.stationary_only);
            assert!(sol.violation <= 1e-8);
            assert!(sol.kkt_residual <= 1e-8);
        }
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(generate_qp_family(&GenDims::new(3, 4, 0, 1, 0)).is_err());
    }
}
