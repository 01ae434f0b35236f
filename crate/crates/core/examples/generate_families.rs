//! Generate one family of each kind, check the witness on sampled
//! parameters and print the JSON size.

use nlproj::gen::{generate, sample_parameters, FamilyKind, GenDims, GenOptions};
use nlproj::io::{to_json, FamilyJson};

fn main() -> nlproj::Result<()> {
    for kind in [FamilyKind::Qp, FamilyKind::Qcqp, FamilyKind::Nlp, FamilyKind::Nonconvex] {
        let fam = generate(kind, &GenDims::new(8, 3, 4, 3, 0), &GenOptions::default())?;
        let w = fam.witness.as_ref().unwrap();
        let worst = sample_parameters(&fam, 100, 1)
            .iter()
            .map(|x| fam.max_violation(x, &w.at(x)))
            .fold(0.0, f64::max);
        let json = to_json(&FamilyJson::from_family(&fam)?)?;
        println!("{kind:?}: dims {:?}  witness violation {worst:.1e}  json {} bytes", fam.dims(), json.len());
    }
    Ok(())
}
