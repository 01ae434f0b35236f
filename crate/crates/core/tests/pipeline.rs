mod common;

use std::fs;
use std::path::Path;

use common::cli::{files, run_all};
use nlproj::bench::{recompute_metrics, run_pipeline, write_outputs, BenchConfig, FamilySource, GenerateSpec};
use nlproj::gen::{generate, sample_parameters, FamilyKind, GenDims, GenOptions};
use nlproj::metrics::compute_aog;
use nlproj::mlp::MlpParams;
use nlproj::projection::ProjectionConfig;
use nlproj::solve::{solve_instance, Method, SolveOptions};
use nlproj::trainer::{infer, oracle_solutions, TrainConfig};

#[test]
fn cli_pipelines_are_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_all(a.path());
    run_all(b.path());
    let fa = files(a.path());
    assert_eq!(fa, files(b.path()));
    assert!(fa.len() >= 20, "{fa:?}");
    for f in &fa {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{}", f.display());
    }
}

#[test]
fn projection_of_random_networks_is_feasible() {
    let fam = generate(FamilyKind::Qp, &GenDims::new(8, 3, 4, 3, 11), &GenOptions::default()).unwrap();
    let xs = sample_parameters(&fam, 100, 5);
    let cfg = ProjectionConfig::default().with_k(1);
    for (i, x) in xs.iter().enumerate() {
        let params = MlpParams::init(fam.dims(), &[16, 16], i as u64).unwrap();
        let p = infer(&params, &fam, x, &cfg).unwrap();
        assert!(fam.max_violation(x, &p.z.y) <= 1e-8, "theta seed {i}");
    }
}

fn small_bench() -> BenchConfig {
    let mut cfg = BenchConfig::new(FamilySource::Generate(GenerateSpec {
        kind: FamilyKind::Qp,
        n: 5,
        n_eq: 2,
        n_ineq: 3,
        p: 2,
        seed: 4,
        options: GenOptions::default(),
    }));
    cfg.n_samples = 40;
    cfg.train = TrainConfig {
        epochs: 60,
        batch_size: 8,
        hidden: Some(vec![16]),
        eval_every: 20,
        threads: 1,
        ..TrainConfig::default()
    };
    cfg
}

#[test]
fn training_lowers_the_loss() {
    let cfg = small_bench();
    let fam = cfg.family.load(Path::new(".")).unwrap();
    let out = run_pipeline(&cfg, &fam).unwrap();
    let h = &out.training.history;
    assert!(h.last().unwrap().loss < h.first().unwrap().loss, "{:?} -> {:?}", h.first(), h.last());
}

#[test]
fn metrics_recompute_from_instance_csv() {
    let cfg = small_bench();
    let fam = cfg.family.load(Path::new(".")).unwrap();
    let out = run_pipeline(&cfg, &fam).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(dir.path(), &out).unwrap();
    let again = recompute_metrics(dir.path().join("instances.csv"), fam.dims().n_eq).unwrap();
    let r = &out.report;
    assert_eq!(again.rows, r.rows);
    assert_eq!(again.n_instances, r.n_instances);
    assert_eq!(again.avg_objective, r.avg_objective);
    assert_eq!(again.avg_oracle_objective, r.avg_oracle_objective);
    assert_eq!(again.aog_percent, r.aog_percent);
    assert_eq!(
        (again.max_eq, again.mean_eq, again.max_ineq, again.mean_ineq),
        (r.max_eq, r.mean_eq, r.max_ineq, r.mean_ineq)
    );
    assert_eq!(again.active_set_agreement, r.active_set_agreement);
}

const KINDS: [FamilyKind; 4] = [FamilyKind::Qp, FamilyKind::Qcqp, FamilyKind::Nlp, FamilyKind::Nonconvex];

#[test]
fn oracle_against_itself_has_zero_gap() {
    for kind in KINDS {
        let fam = generate(kind, &GenDims::new(5, 2, 3, 2, 1), &GenOptions::default()).unwrap();
        let xs = sample_parameters(&fam, 8, 2);
        let objs: Vec<f64> = oracle_solutions(&fam, &xs).unwrap().iter().map(|s| s.objective).collect();
        assert_eq!(compute_aog(&objs, &objs).unwrap(), 0.0, "{kind:?}");
    }
}

#[test]
fn layered_solve_never_beats_the_oracle() {
    for kind in [FamilyKind::Qp, FamilyKind::Qcqp, FamilyKind::Nlp] {
        let fam = generate(kind, &GenDims::new(6, 2, 3, 2, 9), &GenOptions::default()).unwrap();
        for (i, x) in sample_parameters(&fam, 10, 3).iter().enumerate() {
            let o = solve_instance(&fam, x, i, Method::Oracle, &SolveOptions::default()).unwrap();
            for m in [Method::Cp, Method::CpAccel] {
                let s = solve_instance(&fam, x, i, m, &SolveOptions::default()).unwrap();
                assert!(s.objective >= o.objective - 1e-8, "{kind:?} {m:?}: {} < {}", s.objective, o.objective);
            }
        }
    }
}
