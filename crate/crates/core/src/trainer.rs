//! Loss, training loop and inference for the projected network.
//!
//! Loss per instance, with `z~` the projection of `z^ = Phi(x)`:
//!
//! ```text
//!   L = f(y~) + (lambda~' h(y~))^2 + mu~' max(0, g(y~)) + (alpha / M) ||z^ - z~||^2
//! ```

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{vjp_projection, AdjointOptions};
use crate::error::{Error, Result};
use crate::metrics::{agreement_count, compute_aog, instance_violation, InstanceRow, MetricsReport, ACTIVE_THRESHOLD};
use crate::mlp::{Adam, AdamConfig, MlpParams};
use crate::oracle::{solve_nlp_reference, NlpSolution};
use crate::problem::{all_finite, ParametricNlpFamily, PrimalDualPoint, Vector};
use crate::projection::{project_k, project_k_taped, LayerTrace, Projection, ProjectionConfig};

/// Tolerance handed to the reference solver for held-out objectives.
pub const ORACLE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EqPenalty {
    /// `(lambda' h)^2`.
    Scalar,
    /// `sum_i (lambda_i h_i)^2`.
    PerRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    /// Normalizer `M` of the consistency term; `None` means `dim(z)`.
    pub consistency_norm: Option<f64>,
    pub eq_penalty: EqPenalty,
    pub epochs: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Cosine decay of the learning rate from `adam.lr` to this value over
    /// `epochs`; `None` keeps it constant.
    pub lr_final: Option<f64>,
    /// Hidden widths; `None` means two layers of `4 n_vars`.
    pub hidden: Option<Vec<usize>>,
    pub seed: u64,
    pub split: f64,
    pub projection: ProjectionConfig,
    pub adjoint: AdjointOptions,
    /// Held-out AOG is computed every `eval_every` epochs and at the end.
    pub eval_every: usize,
    /// Worker threads; 0 uses the global pool.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            consistency_norm: None,
            eq_penalty: EqPenalty::Scalar,
            epochs: 200,
            batch_size: 0,
            adam: AdamConfig::default(),
            lr_final: None,
            hidden: None,
            seed: 0,
            split: 0.8,
            projection: ProjectionConfig::default().with_k(1),
            adjoint: AdjointOptions::default(),
            eval_every: 50,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_final {
            None => self.adam.lr,
            Some(lo) => {
                let t = epoch as f64 / self.epochs.saturating_sub(1).max(1) as f64;
                lo + 0.5 * (self.adam.lr - lo) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::InvalidConfig(format!("split must lie in (0, 1), got {}", self.split)));
        }
        if let Some(m) = self.consistency_norm {
            if !(m > 0.0) {
                return Err(Error::InvalidConfig("consistency_norm must be positive".into()));
            }
        }
        if !(self.adam.lr >= 0.0) || !self.adam.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("learning rate must be >= 0, got {}", self.adam.lr)));
        }
        if let Some(lo) = self.lr_final {
            if !(lo >= 0.0) || !lo.is_finite() {
                return Err(Error::InvalidConfig(format!("lr_final must be >= 0, got {lo}")));
            }
        }
        self.projection.check()
    }

    pub fn hidden_for(&self, n_vars: usize) -> Vec<usize> {
        self.hidden.clone().unwrap_or_else(|| vec![4 * n_vars, 4 * n_vars])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub objective: f64,
    pub eq_penalty: f64,
    pub ineq_penalty: f64,
    pub consistency: f64,
    pub total: f64,
}

impl LossTerms {
    fn add(&mut self, o: &LossTerms) {
        self.objective += o.objective;
        self.eq_penalty += o.eq_penalty;
        self.ineq_penalty += o.ineq_penalty;
        self.consistency += o.consistency;
        self.total += o.total;
    }

    fn scale(&mut self, s: f64) {
        self.objective *= s;
        self.eq_penalty *= s;
        self.ineq_penalty *= s;
        self.consistency *= s;
        self.total *= s;
    }
}

/// The loss from already evaluated pieces.
#[allow(clippy::too_many_arguments)]
pub fn loss_from_parts(
    f: f64,
    lambda: &Vector,
    h: &Vector,
    mu: &Vector,
    g: &Vector,
    diff_sq: f64,
    alpha: f64,
    m_norm: f64,
    eq: EqPenalty,
) -> LossTerms {
    let eq_penalty = match eq {
        EqPenalty::Scalar => lambda.dot(h).powi(2),
        EqPenalty::PerRow => lambda.component_mul(h).norm_squared(),
    };
    let ineq_penalty = mu.dot(&g.map(|v| v.max(0.0)));
    let consistency = alpha / m_norm * diff_sq;
    LossTerms {
        objective: f,
        eq_penalty,
        ineq_penalty,
        consistency,
        total: f + eq_penalty + ineq_penalty + consistency,
    }
}

fn m_norm(cfg: &TrainConfig, family: &ParametricNlpFamily) -> f64 {
    cfg.consistency_norm.unwrap_or(family.dims().z_len() as f64)
}

pub fn loss(
    family: &ParametricNlpFamily,
    x: &Vector,
    z_hat: &PrimalDualPoint,
    z_tilde: &PrimalDualPoint,
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    Ok(loss_and_grads(family, x, z_hat, z_tilde, cfg)?.0)
}

/// Loss, `dL/dz~` (partial) and `dL/dz^` (direct consistency path only).
fn loss_and_grads(
    family: &ParametricNlpFamily,
    x: &Vector,
    z_hat: &PrimalDualPoint,
    z_tilde: &PrimalDualPoint,
    cfg: &TrainConfig,
) -> Result<(LossTerms, Vector, Vector)> {
    let m = family.nlp();
    let d = family.dims();
    let y = &z_tilde.y;
    let h = m.eq_residual(x, y);
    let g = m.ineq_residual(x, y);
    let diff = z_hat.to_vector() - z_tilde.to_vector();
    let mn = m_norm(cfg, family);
    let terms = loss_from_parts(
        m.objective(x, y),
        &z_tilde.lambda,
        &h,
        &z_tilde.mu,
        &g,
        diff.norm_squared(),
        cfg.alpha,
        mn,
        cfg.eq_penalty,
    );
    if !terms.total.is_finite() {
        return Err(Error::NonFinite("loss"));
    }

    let mut gy = m.gradient(x, y);
    let (g_lam, w_eq) = match cfg.eq_penalty {
        EqPenalty::Scalar => {
            let s = z_tilde.lambda.dot(&h);
            (&h * (2.0 * s), &z_tilde.lambda * (2.0 * s))
        }
        EqPenalty::PerRow => {
            let lh = z_tilde.lambda.component_mul(&h);
            (lh.component_mul(&h) * 2.0, lh.component_mul(&z_tilde.lambda) * 2.0)
        }
    };
    if d.n_eq > 0 {
        gy += m.eq_jacobian(x, y).tr_mul(&w_eq);
    }
    let g_mu = g.map(|v| v.max(0.0));
    if d.n_ineq > 0 {
        let w_in = Vector::from_fn(d.n_ineq, |i, _| if g[i] > 0.0 { z_tilde.mu[i] } else { 0.0 });
        gy += m.ineq_jacobian(x, y).tr_mul(&w_in);
    }
    let direct = &diff * (2.0 * cfg.alpha / mn);
    let mut g_tilde = Vector::zeros(d.z_len());
    g_tilde.rows_mut(0, d.n_vars).copy_from(&gy);
    g_tilde.rows_mut(d.n_vars, d.n_eq).copy_from(&g_lam);
    g_tilde.rows_mut(d.n_vars + d.n_eq, d.n_ineq).copy_from(&g_mu);
    g_tilde -= &direct;
    Ok((terms, g_tilde, direct))
}

/// Per-instance result of one forward/backward pass.
#[derive(Clone, Debug)]
pub struct SampleGrad {
    pub terms: LossTerms,
    pub grad: Vec<f64>,
    pub violation: f64,
    /// Set when the adjoint solve failed and only the direct path was used.
    pub adjoint_failed: bool,
}

/// `L(Theta)` at one instance and its gradient with respect to the flat
/// network weights.
pub fn sample_loss_and_grad(
    params: &MlpParams,
    family: &ParametricNlpFamily,
    x: &Vector,
    cfg: &TrainConfig,
) -> Result<SampleGrad> {
    let (z_raw, cache) = params.forward_cached(x)?;
    let d = family.dims();
    let z_hat = PrimalDualPoint::from_slice(z_raw.as_slice(), d.n_vars, d.n_eq, d.n_ineq)?;
    let (proj, tape) = project_k_taped(family, x, &z_hat, &cfg.projection)?;
    let (terms, g_tilde, direct) = loss_and_grads(family, x, &z_hat, &proj.z, cfg)?;
    let (through, adjoint_failed) =
        match vjp_projection(family, x, &tape, &g_tilde, &cfg.projection.inner, &cfg.adjoint) {
            Ok(v) => (v, false),
            Err(Error::AdjointNotConverged(_)) => (Vector::zeros(d.z_len()), true),
            Err(e) => return Err(e),
        };
    let g_hat = direct + through;
    let grad = params.backward(&cache, &g_hat).to_flat();
    Ok(SampleGrad {
        terms,
        grad,
        violation: proj.trace.final_violation(),
        adjoint_failed,
    })
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: f64,
    pub objective: f64,
    pub eq_penalty: f64,
    pub ineq_penalty: f64,
    pub consistency: f64,
    pub max_violation: f64,
    pub adjoint_failures: usize,
    pub aog_percent: Option<f64>,
    pub probe_max_violation: Option<f64>,
}

pub fn write_history_csv<W: Write>(rows: &[HistoryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: MlpParams,
    pub history: Vec<HistoryRow>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

/// Shuffles `0..n` with `seed` and splits off the first `round(split n)`
/// (at least one) as the training set.
pub fn split_indices(n: usize, split: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let k = ((split * n as f64).round() as usize).clamp(1, n.max(1));
    let test = idx.split_off(k.min(n));
    (idx, test)
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Reference solutions for a list of parameters.
pub fn oracle_solutions(family: &ParametricNlpFamily, xs: &[Vector]) -> Result<Vec<NlpSolution>> {
    xs.par_iter().map(|x| solve_nlp_reference(family, x, ORACLE_TOL)).collect()
}

pub fn train(cfg: &TrainConfig, family: &ParametricNlpFamily, xs: &[Vector]) -> Result<TrainOutput> {
    cfg.check()?;
    if xs.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    with_pool(cfg.threads, || train_inner(cfg, family, xs))?
}

fn train_inner(cfg: &TrainConfig, family: &ParametricNlpFamily, xs: &[Vector]) -> Result<TrainOutput> {
    let d = family.dims();
    let (train_idx, test_idx) = split_indices(xs.len(), cfg.split, cfg.seed);
    let probe: Vec<Vector> = test_idx.iter().map(|&i| xs[i].clone()).collect();
    let probe_obj: Vec<f64> = oracle_solutions(family, &probe)?.iter().map(|s| s.objective).collect();

    let mut params =
        MlpParams::init(d, &cfg.hidden_for(d.n_vars), cfg.seed)?.with_input_box(&family.x_low, &family.x_high);
    let mut theta = params.to_flat();
    let mut adam = Adam::new(cfg.adam, theta.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let batch = if cfg.batch_size == 0 { train_idx.len() } else { cfg.batch_size };
    let mut order = train_idx.clone();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        adam.cfg.lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = LossTerms::default();
        let mut max_violation: f64 = 0.0;
        let mut failures = 0;
        for chunk in order.chunks(batch) {
            let samples: Vec<SampleGrad> = chunk
                .par_iter()
                .map(|&i| sample_loss_and_grad(&params, family, &xs[i], cfg))
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::TrainingNonFinite(epoch),
                    other => other,
                })?;
            let mut grad = vec![0.0; theta.len()];
            for s in &samples {
                for (g, v) in grad.iter_mut().zip(&s.grad) {
                    *g += v;
                }
                sum.add(&s.terms);
                max_violation = max_violation.max(s.violation);
                failures += s.adjoint_failed as usize;
            }
            let inv = 1.0 / samples.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingNonFinite(epoch));
            }
            adam.step(&mut theta, &grad);
            params.set_flat(&theta)?;
        }
        sum.scale(1.0 / order.len() as f64);
        let last = epoch + 1 == cfg.epochs;
        let (aog, probe_viol) = if !probe.is_empty() && cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last) {
            let (objs, viol) = probe_objectives(&params, family, &probe, &cfg.projection)?;
            (compute_aog(&objs, &probe_obj).ok(), Some(viol))
        } else {
            (None, None)
        };
        history.push(HistoryRow {
            epoch,
            loss: sum.total,
            objective: sum.objective,
            eq_penalty: sum.eq_penalty,
            ineq_penalty: sum.ineq_penalty,
            consistency: sum.consistency,
            max_violation,
            adjoint_failures: failures,
            aog_percent: aog,
            probe_max_violation: probe_viol,
        });
    }
    Ok(TrainOutput {
        params,
        history,
        train_idx,
        test_idx,
    })
}

fn probe_objectives(
    params: &MlpParams,
    family: &ParametricNlpFamily,
    xs: &[Vector],
    proj: &ProjectionConfig,
) -> Result<(Vec<f64>, f64)> {
    let out: Vec<(f64, f64)> = xs
        .par_iter()
        .map(|x| {
            let p = infer(params, family, x, proj)?;
            Ok((family.objective(x, &p.z.y), p.trace.final_violation()))
        })
        .collect::<Result<_>>()?;
    let viol = out.iter().fold(0.0f64, |a, o| a.max(o.1));
    Ok((out.into_iter().map(|o| o.0).collect(), viol))
}

/// `project_k(family, x, Phi(x))`.
pub fn infer(params: &MlpParams, family: &ParametricNlpFamily, x: &Vector, proj: &ProjectionConfig) -> Result<Projection> {
    let d = family.dims();
    if params.out_dims.z_len() != d.z_len() || params.sizes[0] != d.n_params {
        return Err(Error::DimensionMismatch {
            context: "infer: network shape",
            expected: d.z_len(),
            got: params.out_dims.z_len(),
        });
    }
    let z_hat = crate::mlp::mlp_forward(params, x)?;
    project_k(family, x, &z_hat, proj)
}

/// Runs inference on every `x`, compares against reference solutions and
/// collects per-instance rows.
pub fn evaluate_model(
    params: &MlpParams,
    family: &ParametricNlpFamily,
    xs: &[Vector],
    oracle: &[NlpSolution],
    proj: &ProjectionConfig,
) -> Result<MetricsReport> {
    Ok(evaluate_model_traced(params, family, xs, oracle, proj)?.0)
}

/// [`evaluate_model`] that also returns the per-instance layer traces.
pub fn evaluate_model_traced(
    params: &MlpParams,
    family: &ParametricNlpFamily,
    xs: &[Vector],
    oracle: &[NlpSolution],
    proj: &ProjectionConfig,
) -> Result<(MetricsReport, Vec<LayerTrace>)> {
    if xs.len() != oracle.len() {
        return Err(Error::DimensionMismatch {
            context: "evaluate_model: oracle",
            expected: xs.len(),
            got: oracle.len(),
        });
    }
    let d = family.dims();
    let out: Vec<(InstanceRow, LayerTrace)> = xs
        .par_iter()
        .zip(oracle.par_iter())
        .enumerate()
        .map(|(i, (x, sol))| {
            let p = infer(params, family, x, proj)?;
            if !all_finite(&p.z.y) {
                return Err(Error::NonFinite("evaluate_model"));
            }
            let agree = agreement_count(&p.z.mu, &sol.point.mu, ACTIVE_THRESHOLD);
            let mut row = InstanceRow::new(
                i,
                family.objective(x, &p.z.y),
                sol.objective,
                instance_violation(family, x, &p.z.y),
                agree,
                d.n_ineq,
            );
            row.layers = p.trace.layers.len();
            row.inner_iters = p.trace.total_inner_iters();
            Ok((row, p.trace))
        })
        .collect::<Result<_>>()?;
    let (rows, traces): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    Ok((MetricsReport::from_rows(rows, d.n_eq)?, traces))
}
