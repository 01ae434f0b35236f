//! Spectral-norm estimation and modified Ruiz equilibration for [`QpData`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::problem::{Matrix, PrimalDualPoint, QpData, Vector};

/// Regularizer of the power iteration normalization and output.
pub const POWER_EPS: f64 = 1e-12;
pub const DEFAULT_POWER_ITERS: usize = 100;
pub const DEFAULT_RUIZ_ITERS: usize = 10;
pub const RUIZ_EPS: f64 = 1e-12;

/// Estimates `||[A; C]||_2` by power iteration on `x -> A'Ax + C'Cx`.
///
/// `K'K` is never formed. Returns `sqrt(max(lambda, 0)) + eps` where `lambda`
/// is the last Rayleigh quotient; an all-zero stack yields `eps`.
pub fn estimate_spectral_norm(a: &Matrix, c: &Matrix, n_iters: usize, seed: u64) -> f64 {
    let n = a.ncols().max(c.ncols());
    if n == 0 || (a.nrows() == 0 && c.nrows() == 0) {
        return POWER_EPS;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    x /= x.norm() + POWER_EPS;
    let mut lambda = 0.0;
    for _ in 0..n_iters.max(1) {
        let mut ktk = Vector::zeros(n);
        if a.nrows() > 0 {
            ktk += a.tr_mul(&(a * &x));
        }
        if c.nrows() > 0 {
            ktk += c.tr_mul(&(c * &x));
        }
        lambda = x.dot(&ktk);
        x = &ktk / (ktk.norm() + POWER_EPS);
    }
    lambda.max(0.0).sqrt() + POWER_EPS
}

/// Accumulated diagonal scalings: `y = S y_s`, `lambda = R_eq lambda_s`,
/// `mu = R_ineq mu_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRecord {
    pub s_diag: Vector,
    pub r_eq_diag: Vector,
    pub r_ineq_diag: Vector,
    pub iterations_applied: usize,
}

impl ScalingRecord {
    pub fn identity(n: usize, n_eq: usize, n_ineq: usize) -> Self {
        Self {
            s_diag: Vector::from_element(n, 1.0),
            r_eq_diag: Vector::from_element(n_eq, 1.0),
            r_ineq_diag: Vector::from_element(n_ineq, 1.0),
            iterations_applied: 0,
        }
    }

    /// Maps an unscaled point into the scaled coordinates (warm starts).
    pub fn scale_point(&self, pt: &PrimalDualPoint) -> Result<PrimalDualPoint> {
        self.check(pt)?;
        Ok(PrimalDualPoint::new(
            pt.y.component_div(&self.s_diag),
            pt.lambda.component_div(&self.r_eq_diag),
            pt.mu.component_div(&self.r_ineq_diag),
        ))
    }

    fn check(&self, pt: &PrimalDualPoint) -> Result<()> {
        let pairs = [
            ("scaling: y", self.s_diag.len(), pt.y.len()),
            ("scaling: lambda", self.r_eq_diag.len(), pt.lambda.len()),
            ("scaling: mu", self.r_ineq_diag.len(), pt.mu.len()),
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
}

fn inv_sqrt_floor(v: f64) -> f64 {
    1.0 / v.max(RUIZ_EPS).sqrt()
}

/// Modified Ruiz equilibration: alternately rescales the columns of
/// `[A; C; Q]` and the rows of `A` and `C` towards unit max-magnitude.
pub fn ruiz_equilibrate(qp: &QpData, n_iters: usize) -> (QpData, ScalingRecord) {
    let mut s = qp.clone();
    let (n, n_eq, n_ineq) = (qp.n(), qp.n_eq(), qp.n_ineq());
    let mut rec = ScalingRecord::identity(n, n_eq, n_ineq);

    for _ in 0..n_iters {
        let delta = Vector::from_fn(n, |j, _| {
            let mut m = s.q_diag[j].abs();
            for i in 0..n_eq {
                m = m.max(s.a_eq[(i, j)].abs());
            }
            for i in 0..n_ineq {
                m = m.max(s.a_ineq[(i, j)].abs());
            }
            inv_sqrt_floor(m)
        });
        for j in 0..n {
            let dj = delta[j];
            s.a_eq.column_mut(j).scale_mut(dj);
            s.a_ineq.column_mut(j).scale_mut(dj);
            s.q_diag[j] *= dj * dj;
            s.c[j] *= dj;
            s.lower[j] /= dj;
            s.upper[j] /= dj;
            rec.s_diag[j] *= dj;
        }

        if n_eq != 0 {
            for i in 0..n_eq {
                let eta = inv_sqrt_floor(s.a_eq.row(i).amax());
                s.a_eq.row_mut(i).scale_mut(eta);
                s.b_eq[i] *= eta;
                rec.r_eq_diag[i] *= eta;
            }
        }
        if n_ineq != 0 {
            for i in 0..n_ineq {
                let zeta = inv_sqrt_floor(s.a_ineq.row(i).amax());
                s.a_ineq.row_mut(i).scale_mut(zeta);
                s.b_ineq[i] *= zeta;
                rec.r_ineq_diag[i] *= zeta;
            }
        }
        rec.iterations_applied += 1;
    }
    (s, rec)
}

/// Maps a scaled solution back: `y = S y_s`, `lambda = R_eq lambda_s`,
/// `mu = R_ineq mu_s`. Bound multipliers, if present, map as `S^-1`.
pub fn unscale_solution(sol: &PrimalDualPoint, scaling: &ScalingRecord) -> Result<PrimalDualPoint> {
    scaling.check(sol)?;
    let mut out = PrimalDualPoint::new(
        sol.y.component_mul(&scaling.s_diag),
        sol.lambda.component_mul(&scaling.r_eq_diag),
        sol.mu.component_mul(&scaling.r_ineq_diag),
    );
    out.bound_mult = sol.bound_mult.as_ref().map(|(a, b)| {
        (
            a.component_div(&scaling.s_diag),
            b.component_div(&scaling.s_diag),
        )
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_stack_norm() {
        let a = Matrix::from_row_slice(1, 2, &[3.0, 0.0]);
        let c = Matrix::from_row_slice(1, 2, &[0.0, 4.0]);
        let k = estimate_spectral_norm(&a, &c, 100, 7);
        assert!((k - 4.0).abs() < 1e-6, "{k}");
    }

    #[test]
    fn single_inequality_norm() {
        let a = Matrix::zeros(0, 1);
        let c = Matrix::from_element(1, 1, 1.0);
        assert!((estimate_spectral_norm(&a, &c, 100, 1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_stack_returns_eps() {
        let a = Matrix::zeros(2, 3);
        let c = Matrix::zeros(0, 3);
        assert_eq!(estimate_spectral_norm(&a, &c, 10, 0), POWER_EPS);
        assert_eq!(
            estimate_spectral_norm(&Matrix::zeros(0, 3), &Matrix::zeros(0, 3), 10, 0),
            POWER_EPS
        );
    }

    fn scalar_eq_qp() -> QpData {
        QpData {
            q_diag: Vector::from_element(1, 0.0),
            c: Vector::from_element(1, 1.0),
            a_eq: Matrix::from_element(1, 1, 4.0),
            b_eq: Vector::from_element(1, 4.0),
            a_ineq: Matrix::zeros(0, 1),
            b_ineq: Vector::zeros(0),
            lower: Vector::from_element(1, f64::NEG_INFINITY),
            upper: Vector::from_element(1, f64::INFINITY),
        }
    }

    #[test]
    fn zero_iterations_is_identity() {
        let qp = scalar_eq_qp();
        let (s, rec) = ruiz_equilibrate(&qp, 0);
        assert_eq!(s, qp);
        assert_eq!(rec, ScalingRecord::identity(1, 1, 0));
    }

    #[test]
    fn one_iteration_hand_arithmetic() {
        let (s, rec) = ruiz_equilibrate(&scalar_eq_qp(), 1);
        let sqrt2 = 2f64.sqrt();
        assert!((rec.s_diag[0] - 0.5).abs() < 1e-15);
        assert!((rec.r_eq_diag[0] - 1.0 / sqrt2).abs() < 1e-15);
        assert!((s.a_eq[(0, 0)] - sqrt2).abs() < 1e-14);
        assert!((s.b_eq[0] - 4.0 / sqrt2).abs() < 1e-14);
        // infinite bounds pass through
        assert_eq!(s.lower[0], f64::NEG_INFINITY);
        assert_eq!(s.upper[0], f64::INFINITY);
    }

    #[test]
    fn unscale_identity_and_diag() {
        let pt = PrimalDualPoint::new(
            Vector::from_element(1, 3.0),
            Vector::zeros(0),
            Vector::zeros(0),
        );
        let id = ScalingRecord::identity(1, 0, 0);
        assert_eq!(unscale_solution(&pt, &id).unwrap(), pt);
        let mut two = id.clone();
        two.s_diag[0] = 2.0;
        assert_eq!(unscale_solution(&pt, &two).unwrap().y[0], 6.0);
    }

    #[test]
    fn unscale_rejects_bad_dims() {
        let pt = PrimalDualPoint::zeros(2, 0, 0);
        let rec = ScalingRecord::identity(1, 0, 0);
        assert!(matches!(
            unscale_solution(&pt, &rec),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
