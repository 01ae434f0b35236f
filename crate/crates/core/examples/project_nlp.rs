//! Project infeasible points of a convex NLP family and watch the
//! constraint violation shrink layer by layer.

use nlproj::gen::{generate_convex_nlp_family, sample_parameters, GenDims};
use nlproj::problem::PrimalDualPoint;
use nlproj::projection::{check_descent, project_k, ProjectionConfig};
use rand::{Rng, SeedableRng};

fn main() -> nlproj::Result<()> {
    let fam = generate_convex_nlp_family(&GenDims::new(10, 4, 4, 3, 1))?;
    let d = fam.dims();
    let cfg = ProjectionConfig::default().with_k(10);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);

    for x in sample_parameters(&fam, 3, 5) {
        let y_hat = fam.witness.as_ref().unwrap().at(&x).map(|v| v + rng.random_range(-1.0..1.0));
        let p = project_k(&fam, &x, &PrimalDualPoint::from_primal(y_hat.clone(), d.n_eq, d.n_ineq), &cfg)?;
        let viol: Vec<String> = p.trace.layers.iter().map(|l| format!("{:.1e}", l.violation)).collect();
        let desc = check_descent(&fam, &x, &y_hat, &p.z.y);
        println!(
            "start {:.2e} -> [{}]  f {:.4} -> {:.4}",
            p.trace.initial_violation,
            viol.join(", "),
            desc.f_before,
            desc.f_after
        );
    }
    Ok(())
}
