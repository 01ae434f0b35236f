//! Objective gap, feasibility and active-set metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{ParametricNlpFamily, Vector};

/// Dual threshold above which an inequality counts as active.
pub const ACTIVE_THRESHOLD: f64 = 1e-6;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `(mean(model) - mean(oracle)) / |mean(model)| * 100`.
pub fn compute_aog(model_objs: &[f64], oracle_objs: &[f64]) -> Result<f64> {
    if model_objs.is_empty() || model_objs.len() != oracle_objs.len() {
        return Err(Error::DimensionMismatch {
            context: "compute_aog",
            expected: model_objs.len().max(1),
            got: oracle_objs.len(),
        });
    }
    let m = mean(model_objs);
    if m == 0.0 {
        return Err(Error::DivideByZero("mean model objective is zero"));
    }
    Ok((m - mean(oracle_objs)) / m.abs() * 100.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViolationStats {
    pub max_eq: f64,
    pub mean_eq: f64,
    pub max_ineq: f64,
    pub mean_ineq: f64,
}

/// Per-instance violation sums, kept so summaries can be rebuilt exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceViolation {
    pub max_eq: f64,
    pub sum_eq: f64,
    pub max_ineq: f64,
    pub sum_ineq: f64,
}

pub fn instance_violation(family: &ParametricNlpFamily, x: &Vector, y: &Vector) -> InstanceViolation {
    let m = family.nlp();
    let h = m.eq_residual(x, y).map(f64::abs);
    let g = m.ineq_residual(x, y).map(|v| v.max(0.0));
    InstanceViolation {
        max_eq: h.iter().fold(0.0, |a, v| a.max(*v)),
        sum_eq: h.sum(),
        max_ineq: g.iter().fold(0.0, |a, v| a.max(*v)),
        sum_ineq: g.sum(),
    }
}

fn aggregate(per: &[InstanceViolation], n_eq: usize, n_ineq: usize) -> ViolationStats {
    let count = |rows: usize| (rows * per.len()).max(1) as f64;
    ViolationStats {
        max_eq: per.iter().fold(0.0, |a, v| a.max(v.max_eq)),
        mean_eq: per.iter().map(|v| v.sum_eq).sum::<f64>() / count(n_eq),
        max_ineq: per.iter().fold(0.0, |a, v| a.max(v.max_ineq)),
        mean_ineq: per.iter().map(|v| v.sum_ineq).sum::<f64>() / count(n_ineq),
    }
}

/// Max and mean of `|h|` and `max(0, g)` over all instances and rows.
pub fn compute_violations(family: &ParametricNlpFamily, xs: &[Vector], ys: &[Vector]) -> Result<ViolationStats> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            context: "compute_violations",
            expected: xs.len(),
            got: ys.len(),
        });
    }
    let per: Vec<_> = xs.iter().zip(ys).map(|(x, y)| instance_violation(family, x, y)).collect();
    let d = family.dims();
    Ok(aggregate(&per, d.n_eq, d.n_ineq))
}

/// Number of rows where `(model > t) == (oracle > t)`.
pub fn agreement_count(mu_model: &Vector, mu_oracle: &Vector, threshold: f64) -> usize {
    mu_model
        .iter()
        .zip(mu_oracle.iter())
        .filter(|(a, b)| (**a > threshold) == (**b > threshold))
        .count()
}

/// Fraction of (instance, inequality row) pairs with matching activity.
/// Returns 1 when there are no inequality rows.
pub fn active_set_agreement(mu_model: &[Vector], mu_oracle: &[Vector], threshold: f64) -> Result<f64> {
    if mu_model.len() != mu_oracle.len() {
        return Err(Error::DimensionMismatch {
            context: "active_set_agreement",
            expected: mu_model.len(),
            got: mu_oracle.len(),
        });
    }
    let mut agree = 0;
    let mut total = 0;
    for (a, b) in mu_model.iter().zip(mu_oracle) {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch {
                context: "active_set_agreement: row",
                expected: b.len(),
                got: a.len(),
            });
        }
        agree += agreement_count(a, b, threshold);
        total += a.len();
    }
    Ok(if total == 0 { 1.0 } else { agree as f64 / total as f64 })
}

/// One evaluated instance. Everything the summary needs is here, so the
/// summary can be recomputed from a CSV of these rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    pub index: usize,
    pub objective: f64,
    pub oracle_objective: f64,
    /// `(model - oracle) / |model| * 100` for this instance alone.
    pub gap_percent: f64,
    pub max_eq: f64,
    pub sum_eq: f64,
    pub max_ineq: f64,
    pub sum_ineq: f64,
    pub active_agree: usize,
    pub n_ineq: usize,
    pub layers: usize,
    pub inner_iters: usize,
}

impl InstanceRow {
    pub fn new(
        index: usize,
        objective: f64,
        oracle_objective: f64,
        viol: InstanceViolation,
        active_agree: usize,
        n_ineq: usize,
    ) -> Self {
        Self {
            index,
            objective,
            oracle_objective,
            gap_percent: (objective - oracle_objective) / objective.abs() * 100.0,
            max_eq: viol.max_eq,
            sum_eq: viol.sum_eq,
            max_ineq: viol.max_ineq,
            sum_ineq: viol.sum_ineq,
            active_agree,
            n_ineq,
            layers: 0,
            inner_iters: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_instances: usize,
    pub avg_objective: f64,
    pub avg_oracle_objective: f64,
    /// NaN when the mean model objective is zero.
    pub aog_percent: f64,
    pub max_eq: f64,
    pub mean_eq: f64,
    pub max_ineq: f64,
    pub mean_ineq: f64,
    pub active_set_agreement: f64,
    /// Wall-clock numbers; kept out of the serialized report so reports are
    /// byte-reproducible.
    #[serde(skip)]
    pub time_per_batch_s: Option<f64>,
    #[serde(skip)]
    pub time_per_instance_s: Option<f64>,
    #[serde(skip)]
    pub rows: Vec<InstanceRow>,
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<InstanceRow>, n_eq: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidConfig("metrics need at least one instance".into()));
        }
        let model: Vec<f64> = rows.iter().map(|r| r.objective).collect();
        let oracle: Vec<f64> = rows.iter().map(|r| r.oracle_objective).collect();
        let per: Vec<InstanceViolation> = rows
            .iter()
            .map(|r| InstanceViolation {
                max_eq: r.max_eq,
                sum_eq: r.sum_eq,
                max_ineq: r.max_ineq,
                sum_ineq: r.sum_ineq,
            })
            .collect();
        let n_ineq = rows[0].n_ineq;
        let v = aggregate(&per, n_eq, n_ineq);
        let total: usize = rows.iter().map(|r| r.n_ineq).sum();
        let agree: usize = rows.iter().map(|r| r.active_agree).sum();
        Ok(Self {
            n_instances: rows.len(),
            avg_objective: mean(&model),
            avg_oracle_objective: mean(&oracle),
            aog_percent: compute_aog(&model, &oracle).unwrap_or(f64::NAN),
            max_eq: v.max_eq,
            mean_eq: v.mean_eq,
            max_ineq: v.max_ineq,
            mean_ineq: v.mean_ineq,
            active_set_agreement: if total == 0 { 1.0 } else { agree as f64 / total as f64 },
            time_per_batch_s: None,
            time_per_instance_s: None,
            rows,
        })
    }

    pub fn with_timing(mut self, total_s: f64, batch_size: usize) -> Self {
        let n = self.n_instances as f64;
        let batches = (n / batch_size.max(1) as f64).ceil().max(1.0);
        self.time_per_batch_s = Some(total_s / batches);
        self.time_per_instance_s = Some(total_s / n);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{generate_qp_family, sample_parameters, GenDims};

    #[test]
    fn aog_examples() {
        assert_eq!(compute_aog(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let a = compute_aog(&[-8.0], &[-8.730]).unwrap();
        assert!((a - 9.125).abs() < 1e-12);
        assert!((compute_aog(&[2.0], &[1.0]).unwrap() - 50.0).abs() < 1e-12);
        assert!(matches!(compute_aog(&[1.0, -1.0], &[0.0, 0.0]), Err(Error::DivideByZero(_))));
        assert!(compute_aog(&[], &[]).is_err());
    }

    #[test]
    fn violation_examples() {
        let fam = generate_qp_family(&GenDims::new(4, 2, 2, 2, 0)).unwrap();
        let xs = sample_parameters(&fam, 3, 0);
        let ys: Vec<_> = xs.iter().map(|x| fam.witness.as_ref().unwrap().at(x)).collect();
        let v = compute_violations(&fam, &xs, &ys).unwrap();
        assert!(v.max_eq < 1e-12 && v.max_ineq == 0.0);

        let mut y = ys[0].clone();
        let a = fam.nlp().eq_jacobian(&xs[0], &y);
        // move along a direction with A d = (0.2, -0.2)
        let d = a.clone().pseudo_inverse(1e-12).unwrap() * Vector::from_column_slice(&[0.2, -0.2]);
        y += d;
        let one = instance_violation(&fam, &xs[0], &y);
        assert!((one.max_eq - 0.2).abs() < 1e-10);
    }

    #[test]
    fn ineq_mean_counts_positive_part() {
        let per = [InstanceViolation {
            max_eq: 0.0,
            sum_eq: 0.0,
            max_ineq: 0.3,
            sum_ineq: 0.3,
        }];
        let v = aggregate(&per, 0, 2);
        assert_eq!(v.max_ineq, 0.3);
        assert!((v.mean_ineq - 0.15).abs() < 1e-15);
    }

    #[test]
    fn agreement_examples() {
        let a = vec![Vector::from_column_slice(&[0.0, 1.0, 2e-6])];
        assert_eq!(active_set_agreement(&a, &a, ACTIVE_THRESHOLD).unwrap(), 1.0);
        let zero = vec![Vector::zeros(10)];
        let mut o = Vector::zeros(10);
        o[1] = 0.5;
        o[4] = 1e-3;
        o[7] = 2.0;
        assert!((active_set_agreement(&zero, &[o], ACTIVE_THRESHOLD).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn report_from_rows_matches_direct() {
        let rows = vec![
            InstanceRow::new(0, 2.0, 1.0, InstanceViolation::default(), 3, 3),
            InstanceRow::new(1, 4.0, 4.0, InstanceViolation::default(), 2, 3),
        ];
        let r = MetricsReport::from_rows(rows, 1).unwrap();
        assert!((r.aog_percent - (3.0 - 2.5) / 3.0 * 100.0).abs() < 1e-12);
        assert!((r.active_set_agreement - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(r.rows[0].gap_percent, 50.0);
        let t = r.with_timing(2.0, 1);
        assert_eq!(t.time_per_batch_s, Some(1.0));
    }
}
