mod common;

use nlproj::gen::{generate, sample_parameters, FamilyKind, GenDims, GenOptions};
use nlproj::io::{to_json, FamilyJson};
use nlproj::problem::Vector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn kind_strategy() -> impl Strategy<Value = FamilyKind> {
    prop_oneof![
        Just(FamilyKind::Qp),
        Just(FamilyKind::Qcqp),
        Just(FamilyKind::Nlp),
        Just(FamilyKind::Nonconvex)
    ]
}

// n_eq >= 1 so the nonconvex generator accepts every draw
fn dims_strategy() -> impl Strategy<Value = GenDims> {
    (2usize..10, 1usize..4, 0usize..5, 1usize..4, 0u64..10_000)
        .prop_map(|(n, e, i, p, seed)| GenDims::new(n, e.min(n - 1), i, p, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn witness_is_feasible_for_every_sample(kind in kind_strategy(), dims in dims_strategy()) {
        let fam = generate(kind, &dims, &GenOptions::default()).unwrap();
        let w = fam.witness.as_ref().unwrap();
        for x in sample_parameters(&fam, 100, dims.seed) {
            let v = fam.max_violation(&x, &w.at(&x));
            prop_assert!(v <= 1e-9, "violation {v}");
        }
    }

    #[test]
    fn same_seed_gives_identical_json(kind in kind_strategy(), dims in dims_strategy()) {
        let a = generate(kind, &dims, &GenOptions::default()).unwrap();
        let b = generate(kind, &dims, &GenOptions::default()).unwrap();
        let ja = to_json(&FamilyJson::from_family(&a).unwrap()).unwrap();
        let jb = to_json(&FamilyJson::from_family(&b).unwrap()).unwrap();
        prop_assert_eq!(ja, jb);
        let xa = sample_parameters(&a, 10, dims.seed);
        prop_assert_eq!(xa, sample_parameters(&b, 10, dims.seed));
    }

    #[test]
    fn json_round_trip_preserves_the_family(kind in kind_strategy(), dims in dims_strategy()) {
        let fam = generate(kind, &dims, &GenOptions::default()).unwrap();
        let json = FamilyJson::from_family(&fam).unwrap();
        let text = to_json(&json).unwrap();
        let back: FamilyJson = serde_json::from_str(&text).unwrap();
        let fam2 = back.to_family().unwrap();
        prop_assert_eq!(&text, &to_json(&FamilyJson::from_family(&fam2).unwrap()).unwrap());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(dims.seed);
        for x in sample_parameters(&fam, 5, dims.seed) {
            let y = Vector::from_fn(dims.n, |_, _| rng.random_range(-2.0..2.0));
            prop_assert_eq!(fam.objective(&x, &y), fam2.objective(&x, &y));
            prop_assert_eq!(fam.max_violation(&x, &y), fam2.max_violation(&x, &y));
        }
    }

    #[test]
    fn convex_kinds_have_psd_hessians(
        kind in prop_oneof![Just(FamilyKind::Qp), Just(FamilyKind::Qcqp), Just(FamilyKind::Nlp)],
        dims in dims_strategy(),
    ) {
        let fam = generate(kind, &dims, &GenOptions::default()).unwrap();
        let m = fam.nlp();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(dims.seed);
        for x in sample_parameters(&fam, 3, dims.seed) {
            let y = Vector::from_fn(dims.n, |_, _| rng.random_range(-2.0..2.0));
            let mut hs = vec![m.hessian(&x, &y)];
            hs.extend(m.ineq_hessians(&x, &y));
            for h in hs {
                let sym = (&h + h.transpose()) * 0.5;
                prop_assert!((&h - &sym).amax() <= 1e-12);
                let min = sym.symmetric_eigenvalues().min();
                prop_assert!(min >= -1e-10, "min eigenvalue {min}");
            }
        }
    }
}
