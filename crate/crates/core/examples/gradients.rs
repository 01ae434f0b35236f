//! Gradient of a scalar function of the projected point with respect to the
//! network output, by the adjoint and by finite differences.

use nlproj::adjoint::AdjointOptions;
use nlproj::cp::CpSettings;
use nlproj::gen::{generate_convex_nlp_family, GenDims};
use nlproj::gradcheck::sampled_projection_checks;
use nlproj::projection::ProjectionConfig;

fn main() -> nlproj::Result<()> {
    let fam = generate_convex_nlp_family(&GenDims::new(6, 2, 3, 2, 11))?;
    let mut cfg = ProjectionConfig::default().fixed_layers(2);
    cfg.inner = CpSettings::default().with_tolerance(1e-12);
    cfg.use_acceleration = false;

    let reports = sampled_projection_checks(&fam, &cfg, &AdjointOptions::default(), 4, 1e-3, 0.5, 0, 200)?;
    for r in &reports {
        println!("margin {:.2e}  max rel err {:.2e}", r.margin, r.max_rel_err);
        for (a, n) in r.analytic.iter().zip(&r.numeric).take(3) {
            println!("    adjoint {a:+.8}  fd {n:+.8}");
        }
    }
    Ok(())
}
