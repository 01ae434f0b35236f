//! A generated QCQP family solved through its second-order-cone form and
//! through repeated linearized layers.

use nlproj::cp::CpSettings;
use nlproj::gen::{generate_qcqp_family, sample_parameters, GenDims};
use nlproj::problem::{FamilyModel, PrimalDualPoint};
use nlproj::soc::{ball_prox, solve_qcqp_soc, SocProgram};
use nlproj::solve::{solve_instance, Method, SolveOptions};

fn main() -> nlproj::Result<()> {
    let v = nalgebra::DVector::from_column_slice(&[3.0, 4.0]);
    println!("ball_prox([3, 4], 1) = {:?}", ball_prox(&v, 1.0).as_slice());

    let fam = generate_qcqp_family(&GenDims::new(8, 3, 3, 3, 2))?;
    let FamilyModel::Qcqp(q) = &fam.model else { unreachable!() };
    let program = SocProgram::from_qcqp(q, &fam.x_low, &fam.x_high)?;
    let d = fam.dims();
    let settings = CpSettings::default().with_tolerance(1e-10);

    for (i, x) in sample_parameters(&fam, 4, 9).iter().enumerate() {
        let init = PrimalDualPoint::from_primal(fam.witness.as_ref().unwrap().at(x), d.n_eq, d.n_ineq);
        let soc = solve_qcqp_soc(&program, x, &init, &settings)?;
        let lin = solve_instance(&fam, x, i, Method::Cp, &SolveOptions::default())?;
        let f_soc = fam.objective(x, &soc.report.point.y);
        println!(
            "instance {i}: soc {f_soc:.9} ({} iters)  layered {:.9}  |diff| {:.1e}  viol {:.1e}",
            soc.report.iters,
            lin.objective,
            (f_soc - lin.objective).abs(),
            fam.max_violation(x, &soc.report.point.y)
        );
    }
    Ok(())
}
