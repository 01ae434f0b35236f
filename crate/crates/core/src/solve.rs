//! Solving single family instances by one of four routes.

use serde::{Deserialize, Serialize};

use crate::cp::CpSettings;
use crate::error::{Error, Result};
use crate::io::PointJson;
use crate::oracle::solve_nlp_reference;
use crate::problem::{FamilyModel, ParametricNlpFamily, PrimalDualPoint, Vector};
use crate::projection::{project_k, ProjectionConfig};
use crate::soc::{solve_qcqp_soc, SocProgram};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Repeated linearized layers with plain Chambolle-Pock inner solves.
    Cp,
    /// Same with the accelerated inner solver.
    CpAccel,
    /// Second-order-cone reformulation (QCQP families only).
    Soc,
    /// Reference SQP solver.
    Oracle,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cp" => Ok(Self::Cp),
            "cp-accel" => Ok(Self::CpAccel),
            "soc" => Ok(Self::Soc),
            "oracle" => Ok(Self::Oracle),
            other => Err(Error::InvalidConfig(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Number of layers for the `cp` routes.
    pub layers: usize,
    /// Layer loop stops once consecutive primal iterates differ by at most
    /// this in the max norm.
    pub step_tol: f64,
    pub inner: CpSettings,
    pub oracle_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            layers: 200,
            step_tol: 1e-9,
            inner: CpSettings::default().with_tolerance(1e-10),
            oracle_tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSolution {
    pub index: usize,
    pub method: Method,
    pub point: PointJson,
    pub objective: f64,
    pub max_violation: f64,
    /// Inner iterations (cp routes, soc) or SQP iterations (oracle).
    pub iterations: usize,
    pub converged: bool,
}

fn start_point(family: &ParametricNlpFamily, x: &Vector) -> PrimalDualPoint {
    let d = family.dims();
    let y = match &family.witness {
        Some(w) => w.at(x),
        None => Vector::zeros(d.n_vars),
    };
    PrimalDualPoint::from_primal(y, d.n_eq, d.n_ineq)
}

fn layered(
    family: &ParametricNlpFamily,
    x: &Vector,
    accelerated: bool,
    opts: &SolveOptions,
) -> Result<(PrimalDualPoint, usize, bool)> {
    let mut cfg = ProjectionConfig::default().fixed_layers(1);
    cfg.use_acceleration = accelerated;
    cfg.inner = opts.inner.clone();
    let mut z = start_point(family, x);
    let mut iters = 0;
    for _ in 0..opts.layers.max(1) {
        let p = project_k(family, x, &z, &cfg)?;
        iters += p.trace.total_inner_iters();
        let step = (&p.z.y - &z.y).amax();
        z = p.z;
        if step <= opts.step_tol {
            return Ok((z, iters, true));
        }
    }
    Ok((z, iters, false))
}

pub fn solve_instance(
    family: &ParametricNlpFamily,
    x: &Vector,
    index: usize,
    method: Method,
    opts: &SolveOptions,
) -> Result<InstanceSolution> {
    let (point, iterations, converged) = match method {
        Method::Cp => layered(family, x, false, opts)?,
        Method::CpAccel => layered(family, x, true, opts)?,
        Method::Soc => {
            let FamilyModel::Qcqp(q) = &family.model else {
                return Err(Error::InvalidConfig("the soc route needs a qcqp family".into()));
            };
            let program = SocProgram::from_qcqp(q, &family.x_low, &family.x_high)?;
            let r = solve_qcqp_soc(&program, x, &start_point(family, x), &opts.inner)?;
            (r.report.point, r.report.iters, r.report.converged)
        }
        Method::Oracle => {
            let s = solve_nlp_reference(family, x, opts.oracle_tol)?;
            (s.point, s.iterations, s.kkt_residual <= opts.oracle_tol.sqrt())
        }
    };
    if !point.is_finite() {
        return Err(Error::NonFinite("solve_instance"));
    }
    Ok(InstanceSolution {
        index,
        method,
        objective: family.objective(x, &point.y),
        max_violation: family.max_violation(x, &point.y),
        point: PointJson::from(&point),
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{generate_qcqp_family, generate_qp_family, sample_parameters, GenDims};

    #[test]
    fn routes_agree_on_qp() {
        let fam = generate_qp_family(&GenDims::new(6, 2, 3, 2, 5)).unwrap();
        let x = sample_parameters(&fam, 1, 0).remove(0);
        let o = solve_instance(&fam, &x, 0, Method::Oracle, &SolveOptions::default()).unwrap();
        for m in [Method::Cp, Method::CpAccel] {
            let s = solve_instance(&fam, &x, 0, m, &SolveOptions::default()).unwrap();
            assert!(s.converged, "{m:?}");
            assert!((s.objective - o.objective).abs() <= 1e-6, "{m:?}: {} vs {}", s.objective, o.objective);
            assert!(s.max_violation <= 1e-8);
        }
    }

    #[test]
    fn soc_route_matches_oracle_on_qcqp() {
        let fam = generate_qcqp_family(&GenDims::new(5, 2, 2, 2, 1)).unwrap();
        let x = sample_parameters(&fam, 1, 3).remove(0);
        let o = solve_instance(&fam, &x, 0, Method::Oracle, &SolveOptions::default()).unwrap();
        let s = solve_instance(&fam, &x, 0, Method::Soc, &SolveOptions::default()).unwrap();
        assert!((s.objective - o.objective).abs() <= 1e-5, "{} vs {}", s.objective, o.objective);
    }

    #[test]
    fn soc_rejects_other_families() {
        let fam = generate_qp_family(&GenDims::new(3, 1, 1, 1, 0)).unwrap();
        let x = sample_parameters(&fam, 1, 0).remove(0);
        assert!(solve_instance(&fam, &x, 0, Method::Soc, &SolveOptions::default()).is_err());
        assert!("bogus".parse::<Method>().is_err());
    }
}
