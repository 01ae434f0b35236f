//! Finite-difference checks of the projection VJP and of the training
//! gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adjoint::{vjp_projection, AdjointOptions};
use crate::error::{Error, Result};
use crate::gen::sample_parameters;
use crate::mlp::{mlp_forward, MlpParams};
use crate::problem::{ParametricNlpFamily, PrimalDualPoint, Vector};
use crate::projection::{project_k, project_k_taped, LayerTape, ProjectionConfig};
use crate::trainer::{loss, sample_loss_and_grad, TrainConfig};

/// Components smaller than this fraction of the largest reference entry are
/// compared against that scale instead of their own magnitude.
pub const REL_SCALE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Smallest strict-complementarity margin over all layers; infinite
    /// when not measured.
    pub margin: f64,
}

/// `|a - b| / max(|a|, |b|, REL_SCALE_FLOOR * |b|_inf)`, maximized over
/// components.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())) * REL_SCALE_FLOOR;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| {
            let d = (a - b).abs();
            if d == 0.0 {
                0.0
            } else {
                d / a.abs().max(b.abs()).max(scale)
            }
        })
        .fold(0.0, f64::max)
}

fn report(analytic: Vec<f64>, numeric: Vec<f64>, margin: f64) -> GradCheckReport {
    let max_abs_err = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    GradCheckReport {
        max_rel_err: max_relative_error(&analytic, &numeric),
        analytic,
        numeric,
        max_abs_err,
        margin,
    }
}

/// Smallest strict-complementarity margin of the layer subproblems: for each
/// inequality row `max(mu_i, -slack_i)` and for each variable the distance
/// to the nearer bound or its bound multiplier.
pub fn complementarity_margin(tape: &[LayerTape]) -> f64 {
    let mut m = f64::INFINITY;
    for layer in tape {
        let qp = &layer.qp;
        let z = &layer.z_out;
        if qp.n_ineq() > 0 {
            let slack = &qp.a_ineq * &z.y - &qp.b_ineq;
            for i in 0..qp.n_ineq() {
                m = m.min(z.mu[i].max(-slack[i]));
            }
        }
        for j in 0..qp.n() {
            let dist = (z.y[j] - qp.lower[j]).min(qp.upper[j] - z.y[j]);
            let mult = z.bound_mult.as_ref().map_or(0.0, |(lo, up)| lo[j].abs().max(up[j].abs()));
            m = m.min(dist.max(mult));
        }
    }
    m
}

/// Central differences of `g' P(z_hat)` with respect to the primal block of
/// `z_hat`.
pub fn fd_projection_vjp(
    family: &ParametricNlpFamily,
    x: &Vector,
    z_hat: &PrimalDualPoint,
    g: &Vector,
    cfg: &ProjectionConfig,
    step: f64,
) -> Result<Vector> {
    let n = z_hat.y.len();
    let mut out = Vector::zeros(n);
    for j in 0..n {
        let mut zp = z_hat.clone();
        let mut zm = z_hat.clone();
        zp.y[j] += step;
        zm.y[j] -= step;
        let fp = project_k(family, x, &zp, cfg)?.z.to_vector().dot(g);
        let fm = project_k(family, x, &zm, cfg)?.z.to_vector().dot(g);
        out[j] = (fp - fm) / (2.0 * step);
    }
    Ok(out)
}

/// Compares the adjoint VJP of the projection with central differences on
/// the primal block. The dual block of the VJP must be exactly zero.
pub fn check_projection_vjp(
    family: &ParametricNlpFamily,
    x: &Vector,
    z_hat: &PrimalDualPoint,
    g: &Vector,
    cfg: &ProjectionConfig,
    opts: &AdjointOptions,
    step: f64,
) -> Result<GradCheckReport> {
    let (_, tape) = project_k_taped(family, x, z_hat, cfg)?;
    let grad = vjp_projection(family, x, &tape, g, &cfg.inner, opts)?;
    let n = z_hat.y.len();
    if grad.rows(n, grad.len() - n).iter().any(|v| *v != 0.0) {
        return Err(Error::InvalidConfig("dual block of the projection gradient is not zero".into()));
    }
    let fd = fd_projection_vjp(family, x, z_hat, g, cfg, step)?;
    Ok(report(
        grad.rows(0, n).iter().copied().collect(),
        fd.iter().copied().collect(),
        complementarity_margin(&tape),
    ))
}

/// Draws random `(x, z_hat, g)` triples from `family` and keeps those whose
/// margin is at least `min_margin`, until `count` are found or
/// `max_attempts` are spent. `z_hat` perturbs the family witness by
/// `U(-spread, spread)` per entry.
#[allow(clippy::too_many_arguments)]
pub fn sampled_projection_checks(
    family: &ParametricNlpFamily,
    cfg: &ProjectionConfig,
    opts: &AdjointOptions,
    count: usize,
    min_margin: f64,
    spread: f64,
    seed: u64,
    max_attempts: usize,
) -> Result<Vec<GradCheckReport>> {
    let witness = family
        .witness
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("gradient check needs a family witness".into()))?;
    let d = family.dims();
    let xs = sample_parameters(family, max_attempts, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut out = Vec::new();
    for x in &xs {
        if out.len() == count {
            break;
        }
        let y_hat = witness.at(x).map(|v| v + rng.random_range(-spread..spread));
        let z_hat = PrimalDualPoint::from_primal(y_hat, d.n_eq, d.n_ineq);
        let g = Vector::from_fn(d.z_len(), |_, _| rng.random_range(-1.0..1.0));
        let (_, tape) = project_k_taped(family, x, &z_hat, cfg)?;
        if complementarity_margin(&tape) < min_margin {
            continue;
        }
        out.push(check_projection_vjp(family, x, &z_hat, &g, cfg, opts, 1e-6)?);
    }
    Ok(out)
}

/// Compares `dL/dTheta` from [`sample_loss_and_grad`] with central
/// differences of the loss over every network weight.
pub fn check_training_gradient(
    params: &MlpParams,
    family: &ParametricNlpFamily,
    x: &Vector,
    cfg: &TrainConfig,
    step: f64,
) -> Result<GradCheckReport> {
    let analytic = sample_loss_and_grad(params, family, x, cfg)?.grad;
    let theta = params.to_flat();
    let loss_at = |t: &[f64]| -> Result<f64> {
        let mut p = params.clone();
        p.set_flat(t)?;
        let z_hat = mlp_forward(&p, x)?;
        let z = project_k(family, x, &z_hat, &cfg.projection)?.z;
        Ok(loss(family, x, &z_hat, &z, cfg)?.total)
    };
    let mut numeric = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let mut tp = theta.clone();
        let mut tm = theta.clone();
        tp[i] += step;
        tm[i] -= step;
        numeric.push((loss_at(&tp)? - loss_at(&tm)?) / (2.0 * step));
    }
    Ok(report(analytic, numeric, f64::INFINITY))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cp::CpSettings;
    use crate::gen::{generate_convex_nlp_family, GenDims};

    #[test]
    fn relative_error_uses_scale_floor() {
        assert_eq!(max_relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((max_relative_error(&[1.1], &[1.0]) - 0.1 / 1.1).abs() < 1e-15);
        // tiny component judged against 1e-3 of the largest entry
        let e = max_relative_error(&[10.0, 1e-9], &[10.0, 0.0]);
        assert!((e - 1e-9 / 1e-2).abs() < 1e-18);
    }

    #[test]
    fn sampled_checks_pass_on_convex_nlp() {
        let fam = generate_convex_nlp_family(&GenDims::new(5, 2, 3, 2, 4)).unwrap();
        let mut cfg = ProjectionConfig::default().fixed_layers(1);
        cfg.inner = CpSettings::default().with_tolerance(1e-12);
        cfg.use_acceleration = false;
        let reps = sampled_projection_checks(&fam, &cfg, &AdjointOptions::default(), 3, 1e-3, 0.5, 0, 50).unwrap();
        assert_eq!(reps.len(), 3);
        for r in &reps {
            assert!(r.margin >= 1e-3);
            assert!(r.max_rel_err <= 1e-4, "{r:?}");
        }
    }
}
