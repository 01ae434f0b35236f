//! Ruiz equilibration of a badly scaled QP and power-iteration estimates of
//! the constraint operator norm.

use nlproj::cp::{solve_qp, CpParams, CpSettings};
use nlproj::precond::{estimate_spectral_norm, ruiz_equilibrate, unscale_solution, DEFAULT_RUIZ_ITERS};
use nlproj::problem::{Matrix, PrimalDualPoint, QpData, Vector};

fn main() -> nlproj::Result<()> {
    let n = 4;
    let mut qp = QpData::boxed(
        Vector::from_column_slice(&[100.0, 0.01, 1.0, 5.0]),
        Vector::from_column_slice(&[1.0, -0.02, 0.5, -3.0]),
        Vector::from_element(n, -10.0),
        Vector::from_element(n, 10.0),
    );
    qp.a_eq = Matrix::from_row_slice(1, n, &[50.0, 0.1, 1.0, 2.0]);
    qp.b_eq = Vector::from_column_slice(&[3.0]);
    qp.a_ineq = Matrix::from_row_slice(2, n, &[0.0, 0.02, 1.0, 0.0, 10.0, 0.0, 0.0, -1.0]);
    qp.b_ineq = Vector::from_column_slice(&[0.5, 4.0]);

    let k = Matrix::from_fn(3, n, |i, j| if i == 0 { qp.a_eq[(0, j)] } else { qp.a_ineq[(i - 1, j)] });
    let exact = k.singular_values().max();
    for iters in [5, 20, 100] {
        let est = estimate_spectral_norm(&qp.a_eq, &qp.a_ineq, iters, 0);
        println!("power iteration ({iters:>3} steps): {est:.8}  (svd {exact:.8})");
    }

    let settings = CpSettings::default();
    let init = PrimalDualPoint::zeros(n, 1, 2);
    let direct = solve_qp(&qp, &init, &CpParams::for_qp(&qp, &settings))?;

    let (scaled, rec) = ruiz_equilibrate(&qp, DEFAULT_RUIZ_ITERS);
    println!("column scaling {:.4?}", rec.s_diag.as_slice());
    let sol = solve_qp(&scaled, &rec.scale_point(&init)?, &CpParams::for_qp(&scaled, &settings))?;
    let back = unscale_solution(&sol.point, &rec)?;

    println!("direct   {} iters  y = {:.6?}", direct.iters, direct.point.y.as_slice());
    println!("scaled   {} iters  y = {:.6?}", sol.iters, back.y.as_slice());
    println!("difference {:.2e}", (&direct.point.y - &back.y).amax());
    Ok(())
}
