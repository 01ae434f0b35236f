#![allow(dead_code)]

pub mod cli;

use nlproj::problem::{Matrix, QpData, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random strictly convex diagonal QP with a strictly feasible point inside
/// the box `[-1, 1]^n`.
pub fn random_qp(seed: u64, n: usize, n_eq: usize, n_ineq: usize) -> QpData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0 = Vector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
    let mut qp = QpData::boxed(
        Vector::from_fn(n, |_, _| rng.random_range(0.5..3.0)),
        Vector::from_fn(n, |_, _| rng.random_range(-2.0..2.0)),
        Vector::from_element(n, -1.0),
        Vector::from_element(n, 1.0),
    );
    qp.a_eq = Matrix::from_fn(n_eq, n, |_, _| rng.random_range(-1.0..1.0));
    qp.b_eq = &qp.a_eq * &y0;
    qp.a_ineq = Matrix::from_fn(n_ineq, n, |_, _| rng.random_range(-1.0..1.0));
    qp.b_ineq = &qp.a_ineq * &y0 + Vector::from_fn(n_ineq, |_, _| rng.random_range(0.0..0.5));
    qp
}

/// Sizes drawn from `n <= 12`, `m_eq <= min(4, n - 1)`, `m_ineq <= 6`.
pub fn random_sizes(seed: u64) -> (usize, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(1));
    let n = rng.random_range(2..=12);
    let n_eq = rng.random_range(0..=4.min(n - 1));
    let n_ineq = rng.random_range(0..=6);
    (n, n_eq, n_ineq)
}

use nlproj::problem::ParametricNlpFamily;

/// Feasible point near the family witness: a random step along the null
/// space of the equality Jacobian, halved until every constraint holds.
pub fn feasible_point(family: &ParametricNlpFamily, x: &Vector, seed: u64, spread: f64) -> Vector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = family.witness.as_ref().expect("witness").at(x);
    let m = family.nlp();
    let a = m.eq_jacobian(x, &w);
    let n = w.len();
    let d = Vector::from_fn(n, |_, _| rng.random_range(-spread..spread));
    let d = if a.nrows() > 0 {
        let proj = Matrix::identity(n, n) - a.clone().pseudo_inverse(1e-12).unwrap() * &a;
        proj * d
    } else {
        d
    };
    let (lo, hi) = m.bounds(x);
    let mut t = 1.0;
    for _ in 0..60 {
        let y = &w + &d * t;
        let in_box = (0..n).all(|j| y[j] >= lo[j] && y[j] <= hi[j]);
        if in_box && m.ineq_residual(x, &y).iter().all(|g| *g <= 0.0) && m.eq_residual(x, &y).amax() <= 1e-12 {
            return y;
        }
        t *= 0.5;
    }
    w
}
