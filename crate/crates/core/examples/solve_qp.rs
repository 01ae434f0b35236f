//! Solve a small boxed QP with plain and accelerated Chambolle-Pock and
//! compare against the active-set reference.

use nlproj::cp::{residuals, solve_qp, solve_qp_accelerated, CpParams, CpSettings};
use nlproj::oracle::solve_qp_active_set;
use nlproj::problem::{Matrix, PrimalDualPoint, QpData, Vector};

fn main() -> nlproj::Result<()> {
    // min 1/2 (2 y0^2 + y1^2 + 3 y2^2) - y0 + y2
    // s.t. y0 + y1 + y2 = 1, y0 - y2 <= 0.2, -1 <= y <= 1
    let mut qp = QpData::boxed(
        Vector::from_column_slice(&[2.0, 1.0, 3.0]),
        Vector::from_column_slice(&[-1.0, 0.0, 1.0]),
        Vector::from_element(3, -1.0),
        Vector::from_element(3, 1.0),
    );
    qp.a_eq = Matrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
    qp.b_eq = Vector::from_column_slice(&[1.0]);
    qp.a_ineq = Matrix::from_row_slice(1, 3, &[1.0, 0.0, -1.0]);
    qp.b_ineq = Vector::from_column_slice(&[0.2]);

    let params = CpParams::for_qp(&qp, &CpSettings::default());
    println!("tau {:.4}  sigma {:.4}  |K| {:.4}", params.tau, params.sigma, params.norm_k);
    let init = PrimalDualPoint::zeros(3, 1, 1);

    let plain = solve_qp(&qp, &init, &params)?;
    let accel = solve_qp_accelerated(&qp, &init, &params)?;
    let exact = solve_qp_active_set(&qp)?;

    for (name, pt, iters) in [("plain", &plain.point, plain.iters), ("accelerated", &accel.point, accel.iters)] {
        let r = residuals(&qp, pt)?;
        println!(
            "{name:>12}: y = {:.6?}  iters {iters}  prim {:.1e}  gap {:.1e}",
            pt.y.as_slice(),
            r.prim_inf_norm,
            r.gap_abs
        );
    }
    println!("{:>12}: y = {:.6?}  mu = {:.6?}", "active-set", exact.y.as_slice(), exact.mu.as_slice());
    println!("|y_cp - y_ref|_inf = {:.2e}", (&plain.point.y - &exact.y).amax());
    Ok(())
}
