//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{feasible_point, random_qp, random_sizes};
use nlproj::adjoint::AdjointOptions;
use nlproj::bench::{run_pipeline, BenchConfig, BenchOutcome, FamilySource, GenerateSpec};
use nlproj::cp::{solve_qp, solve_qp_accelerated, CpParams, CpSettings};
use nlproj::gen::{generate, sample_parameters, FamilyKind, GenDims, GenOptions};
use nlproj::gradcheck::{check_training_gradient, sampled_projection_checks};
use nlproj::mlp::MlpParams;
use nlproj::oracle::{solve_nlp_reference, solve_qp_active_set};
use nlproj::precond::{estimate_spectral_norm, ruiz_equilibrate, unscale_solution, DEFAULT_RUIZ_ITERS};
use nlproj::problem::{ExpFamily, FamilyModel, Matrix, ParametricNlpFamily, PrimalDualPoint, Vector};
use nlproj::projection::{check_descent, project_k, ProjectionConfig};
use nlproj::soc::ball_prox;
use nlproj::solve::{solve_instance, Method, SolveOptions};
use nlproj::trainer::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn perturb(y: &Vector, rng: &mut ChaCha8Rng, spread: f64) -> Vector {
    y.map(|v| v + rng.random_range(-spread..spread))
}

fn median(mut v: Vec<usize>) -> f64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2]) as f64
    }
}

fn c1_solver_correctness() -> Outcome {
    let t0 = Instant::now();
    let settings = CpSettings::default().with_tolerance(1e-10);
    let (mut worst_y, mut worst_f) = (0.0f64, 0.0f64);
    for seed in 0..100 {
        let (n, m, p) = random_sizes(seed);
        let qp = random_qp(seed, n, m, p);
        let cp = solve_qp(&qp, &PrimalDualPoint::zeros(n, m, p), &CpParams::for_qp(&qp, &settings)).map_err(|e| e.to_string())?;
        let ora = solve_qp_active_set(&qp).map_err(|e| e.to_string())?;
        worst_y = worst_y.max((&cp.point.y - &ora.y).amax());
        worst_f = worst_f.max((qp.objective(&cp.point.y) - qp.objective(&ora.y)).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        worst_y <= 1e-6 && worst_f <= 1e-8 && secs < 30.0,
        format!("100 QPs: max |dy| {worst_y:.2e}, max objective gap {worst_f:.2e}, {secs:.1} s"),
    )
}

fn c2_feasibility() -> Outcome {
    let mut worst_qp = 0.0f64;
    let mut worst_nl = 0.0f64;
    let mut layers_used = 0;
    let mut count = 0;
    for seed in 0..10u64 {
        for (kind, k) in [(FamilyKind::Qp, 1), (FamilyKind::Qcqp, 10), (FamilyKind::Nlp, 10)] {
            let n = 8 + 12 * (seed as usize % 2);
            let fam = generate(kind, &GenDims::new(n, 4, 6, 4, seed), &GenOptions::default()).map_err(|e| e.to_string())?;
            let d = fam.dims();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = if kind == FamilyKind::Qp {
                ProjectionConfig::default().fixed_layers(1)
            } else {
                ProjectionConfig::default().with_k(k)
            };
            for x in sample_parameters(&fam, 10, seed) {
                let y_hat = perturb(&fam.witness.as_ref().unwrap().at(&x), &mut rng, 3.0);
                let p = project_k(&fam, &x, &PrimalDualPoint::from_primal(y_hat, d.n_eq, d.n_ineq), &cfg).map_err(|e| e.to_string())?;
                let v = fam.max_violation(&x, &p.z.y);
                if kind == FamilyKind::Qp {
                    worst_qp = worst_qp.max(v);
                } else {
                    worst_nl = worst_nl.max(v);
                    layers_used = layers_used.max(p.trace.layers.len());
                }
                count += 1;
            }
        }
    }
    verdict(
        worst_qp <= 1e-8 && worst_nl <= 1e-8,
        format!("{count} instances, n <= 20: QP k=1 max {worst_qp:.2e}; QCQP/NLP max {worst_nl:.2e} using <= {layers_used} layers"),
    )
}

fn c3_descent() -> Outcome {
    let kinds = [FamilyKind::Qp, FamilyKind::Qcqp, FamilyKind::Nlp];
    let mut ok = 0;
    let mut worst = f64::NEG_INFINITY;
    for trial in 0..100u64 {
        let kind = kinds[trial as usize % 3];
        let fam = generate(kind, &GenDims::new(8, 3, 4, 3, trial), &GenOptions::default()).map_err(|e| e.to_string())?;
        let d = fam.dims();
        let x = sample_parameters(&fam, 1, trial).remove(0);
        let y_hat = feasible_point(&fam, &x, trial, 2.0);
        let p = project_k(&fam, &x, &PrimalDualPoint::from_primal(y_hat.clone(), d.n_eq, d.n_ineq), &ProjectionConfig::default().fixed_layers(1))
            .map_err(|e| e.to_string())?;
        if !p.trace.rho_floor_applied {
            return Err(format!("trial {trial}: rho floor not applied"));
        }
        let r = check_descent(&fam, &x, &y_hat, &p.z.y);
        worst = worst.max(r.f_after - r.f_before);
        if r.f_after <= r.f_before + 1e-9 {
            ok += 1;
        }
    }
    verdict(ok == 100, format!("{ok}/100 trials, max f(after) - f(before) = {worst:.3e}"))
}

fn c4_fixed_point() -> Outcome {
    let mut worst = [0.0f64; 3];
    let kinds = [FamilyKind::Qp, FamilyKind::Qcqp, FamilyKind::Nlp, FamilyKind::Nonconvex];
    let mut cfg = ProjectionConfig::default().fixed_layers(1);
    cfg.inner = CpSettings::default().with_tolerance(1e-11);
    for kind in kinds {
        let fam = generate(kind, &GenDims::new(6, 2, 3, 2, 17), &GenOptions::default()).map_err(|e| e.to_string())?;
        for x in sample_parameters(&fam, 20, 5) {
            let sol = solve_nlp_reference(&fam, &x, 1e-10).map_err(|e| format!("{kind:?}: {e}"))?;
            let p = project_k(&fam, &x, &sol.point, &cfg).map_err(|e| e.to_string())?;
            worst[0] = worst[0].max((&p.z.y - &sol.point.y).amax());
            worst[1] = worst[1].max((&p.z.lambda - &sol.point.lambda).amax());
            worst[2] = worst[2].max((&p.z.mu - &sol.point.mu).amax());
        }
    }
    verdict(
        worst.iter().all(|w| *w <= 1e-6),
        format!("4 kinds x 20: max |dy| {:.2e}, |dlambda| {:.2e}, |dmu| {:.2e}", worst[0], worst[1], worst[2]),
    )
}

/// Copy of a convex-NLP family whose nonlinear constraints pass through
/// the witness at `x`, so they bind near the optimum.
fn tightened(fam: &ParametricNlpFamily, x: &Vector) -> ParametricNlpFamily {
    let FamilyModel::ConvexExp(e) = &fam.model else { panic!("expected a convex NLP family") };
    let w = fam.witness.as_ref().unwrap().at(x);
    let g = fam.nlp().ineq_residual(x, &w);
    let offset = g.len() - e.exps.len();
    let mut exps = e.exps.clone();
    for (i, c) in exps.iter_mut().enumerate() {
        c.beta += g[offset + i];
    }
    let mut out = fam.clone();
    out.model = FamilyModel::ConvexExp(ExpFamily::new(e.core.clone(), exps));
    out
}

const CONTRACTION_FLOOR: f64 = 1e-10;

fn c5_contraction() -> Outcome {
    let mut contracted = 0;
    let mut vacuous = 0;
    let mut worst_ratio = 0.0f64;
    let mut cfg = ProjectionConfig::default().fixed_layers(8);
    cfg.inner = CpSettings::default().with_tolerance(1e-13);
    for trial in 0..50u64 {
        let base = generate(FamilyKind::Nlp, &GenDims::new(8, 2, 4, 3, trial), &GenOptions::default()).map_err(|e| e.to_string())?;
        let x = sample_parameters(&base, 1, trial).remove(0);
        let fam = tightened(&base, &x);
        let d = fam.dims();
        let sol = solve_nlp_reference(&fam, &x, 1e-10).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let y_hat = perturb(&sol.point.y, &mut rng, 0.1);
        let p = project_k(&fam, &x, &PrimalDualPoint::from_primal(y_hat, d.n_eq, d.n_ineq), &cfg).map_err(|e| e.to_string())?;
        // ratios v_{i+1}/v_i for i >= 1
        let ratios: Vec<f64> = p.trace.contraction_ratios(CONTRACTION_FLOOR);
        if ratios.is_empty() {
            vacuous += 1;
        }
        let max = ratios.iter().copied().fold(0.0, f64::max);
        worst_ratio = worst_ratio.max(max);
        if max <= 0.9 {
            contracted += 1;
        }
    }
    let mut v1 = 0.0f64;
    for seed in 0..10u64 {
        let fam = generate(FamilyKind::Qp, &GenDims::new(10, 4, 5, 3, seed), &GenOptions::default()).map_err(|e| e.to_string())?;
        let d = fam.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in sample_parameters(&fam, 5, seed) {
            let y_hat = perturb(&fam.witness.as_ref().unwrap().at(&x), &mut rng, 3.0);
            let p = project_k(&fam, &x, &PrimalDualPoint::from_primal(y_hat, d.n_eq, d.n_ineq), &ProjectionConfig::default().fixed_layers(1))
                .map_err(|e| e.to_string())?;
            v1 = v1.max(p.trace.layers[0].violation);
        }
    }
    verdict(
        contracted >= 45 && v1 <= 1e-8,
        format!(
            "{contracted}/50 trials with every ratio <= 0.9 ({vacuous} below the {CONTRACTION_FLOOR:.0e} floor after one layer), worst ratio {worst_ratio:.3}; affine v1 max {v1:.2e}"
        ),
    )
}

fn c6_gradients() -> Outcome {
    let mut cfg = ProjectionConfig::default().fixed_layers(1);
    cfg.inner = CpSettings::default().with_tolerance(1e-12);
    cfg.use_acceleration = false;
    let mut reports = Vec::new();
    for (kind, seed) in [(FamilyKind::Nlp, 4u64), (FamilyKind::Qcqp, 5), (FamilyKind::Qp, 6)] {
        let fam = generate(kind, &GenDims::new(5, 2, 3, 2, seed), &GenOptions::default()).map_err(|e| e.to_string())?;
        reports.extend(
            sampled_projection_checks(&fam, &cfg, &AdjointOptions::default(), 10, 1e-3, 0.5, seed, 500).map_err(|e| e.to_string())?,
        );
    }
    let n = reports.len();
    let vjp_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let min_margin = reports.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);

    let tiny = generate(FamilyKind::Nlp, &GenDims::new(2, 1, 1, 1, 3), &GenOptions::default()).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        projection: cfg.clone(),
        ..TrainConfig::default()
    };
    let params = MlpParams::init(tiny.dims(), &[2], 1).map_err(|e| e.to_string())?;
    let mut e2e = 0.0f64;
    for x in sample_parameters(&tiny, 3, 9) {
        let r = check_training_gradient(&params, &tiny, &x, &tc, 1e-6).map_err(|e| e.to_string())?;
        e2e = e2e.max(r.max_rel_err);
    }
    verdict(
        n == 30 && vjp_err <= 1e-4 && e2e <= 1e-3,
        format!("{n} instances (margin >= {min_margin:.1e}): VJP max rel err {vjp_err:.2e}; end-to-end dL/dTheta max rel err {e2e:.2e}"),
    )
}

fn training_run() -> Result<BenchOutcome, String> {
    let mut cfg = BenchConfig::new(FamilySource::Generate(GenerateSpec {
        kind: FamilyKind::Qp,
        n: 10,
        n_eq: 5,
        n_ineq: 5,
        p: 5,
        seed: 0,
        options: GenOptions::default(),
    }));
    cfg.n_samples = 250;
    cfg.train.split = 0.8;
    cfg.train.epochs = 2000;
    cfg.train.batch_size = 16;
    cfg.train.adam.lr = 1e-2;
    cfg.train.lr_final = Some(1e-4);
    cfg.train.eval_every = 500;
    cfg.train.threads = 1;
    let fam = cfg.family.load(Path::new(".")).map_err(|e| e.to_string())?;
    run_pipeline(&cfg, &fam).map_err(|e| e.to_string())
}

fn c7_training(run: &BenchOutcome) -> Outcome {
    let r = &run.report;
    let viol = r.max_eq.max(r.max_ineq);
    let minutes = run.timing.train_s / 60.0;
    verdict(
        r.aog_percent <= 1.0 && viol <= 1e-8 && minutes <= 10.0 && run.training.train_idx.len() == 200,
        format!(
            "{} train / {} test, {} epochs: held-out AOG {:.4}%, max violation {viol:.2e}, training {:.1} s single-threaded",
            run.training.train_idx.len(),
            r.n_instances,
            run.training.history.len(),
            r.aog_percent,
            run.timing.train_s
        ),
    )
}

fn c8_agreement(run: &BenchOutcome) -> Outcome {
    let a = run.report.active_set_agreement;
    verdict(a >= 0.95, format!("active-set agreement {a:.4} at threshold 1e-6"))
}

fn c9_preconditioning() -> Outcome {
    let settings = CpSettings::default().with_tolerance(1e-10);
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let (n, m, p) = random_sizes(1000 + seed);
        let qp = random_qp(1000 + seed, n, m, p);
        let init = PrimalDualPoint::zeros(n, m, p);
        let direct = solve_qp(&qp, &init, &CpParams::for_qp(&qp, &settings)).map_err(|e| e.to_string())?;
        let (scaled, rec) = ruiz_equilibrate(&qp, DEFAULT_RUIZ_ITERS);
        let s = solve_qp(&scaled, &rec.scale_point(&init).map_err(|e| e.to_string())?, &CpParams::for_qp(&scaled, &settings))
            .map_err(|e| e.to_string())?;
        let back = unscale_solution(&s.point, &rec).map_err(|e| e.to_string())?;
        worst = worst.max((&direct.point.y - &back.y).amax());
    }
    let mut worst_rel = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=20);
        let m = rng.random_range(0..=6);
        let p = rng.random_range(1..=8);
        let k = Matrix::from_fn(m + p, n, |_, _| rng.random_range(-2.0..2.0));
        let a = k.rows(0, m).into_owned();
        let c = k.rows(m, p).into_owned();
        let exact = k.singular_values().max();
        let est = estimate_spectral_norm(&a, &c, 100, seed);
        worst_rel = worst_rel.max((est - exact).abs() / exact);
    }
    verdict(
        worst <= 1e-6 && worst_rel <= 1e-4,
        format!("50 round trips: max |dy| {worst:.2e}; 50 stacks: power iteration max rel err {worst_rel:.2e}"),
    )
}

fn c10_soc() -> Outcome {
    let mut worst = 0.0f64;
    let mut count = 0;
    for seed in 0..10u64 {
        let fam = generate(FamilyKind::Qcqp, &GenDims::new(6, 2, 3, 2, seed), &GenOptions::default()).map_err(|e| e.to_string())?;
        for (i, x) in sample_parameters(&fam, 2, seed).iter().enumerate() {
            let s = solve_instance(&fam, x, i, Method::Soc, &SolveOptions::default()).map_err(|e| e.to_string())?;
            let l = solve_instance(&fam, x, i, Method::Cp, &SolveOptions::default()).map_err(|e| e.to_string())?;
            worst = worst.max((s.objective - l.objective).abs());
            count += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut expansive = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=8);
        let t = rng.random_range(0.0..5.0);
        let u = Vector::from_fn(n, |_, _| rng.random_range(-10.0..10.0));
        let v = Vector::from_fn(n, |_, _| rng.random_range(-10.0..10.0));
        if (ball_prox(&u, t) - ball_prox(&v, t)).norm() > (&u - &v).norm() + 1e-12 {
            expansive += 1;
        }
    }
    verdict(
        count == 20 && worst <= 1e-4 && expansive == 0,
        format!("{count} QCQP instances: max objective diff {worst:.2e}; ball prox expansive on {expansive}/1000 pairs"),
    )
}

fn c11_acceleration() -> Outcome {
    let settings = CpSettings::default().with_tolerance(1e-10);
    let (mut plain, mut accel) = (Vec::new(), Vec::new());
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let (n, m, p) = random_sizes(5000 + seed);
        let qp = random_qp(5000 + seed, n, m, p);
        let init = PrimalDualPoint::zeros(n, m, p);
        let params = CpParams::for_qp(&qp, &settings);
        let a = solve_qp(&qp, &init, &params).map_err(|e| e.to_string())?;
        let b = solve_qp_accelerated(&qp, &init, &params).map_err(|e| e.to_string())?;
        if !(a.converged && b.converged) {
            return Err(format!("seed {seed} did not converge"));
        }
        worst = worst.max((&a.point.y - &b.point.y).amax());
        plain.push(a.iters);
        accel.push(b.iters);
    }
    let (mp, ma) = (median(plain), median(accel));
    verdict(
        worst <= 1e-6 && ma <= mp,
        format!("50 seeds: median iterations accelerated {ma} vs plain {mp}; max |dy| {worst:.2e}"),
    )
}

fn c12_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    common::cli::run_all(a.path());
    common::cli::run_all(b.path());
    let fa = common::cli::files(a.path());
    if fa != common::cli::files(b.path()) {
        return Err("runs produced different file sets".into());
    }
    let differing: Vec<String> = fa
        .iter()
        .filter(|f| fs::read(a.path().join(f)).ok() != fs::read(b.path().join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    verdict(
        differing.is_empty(),
        format!("{} output files from gen/solve/project/train/eval/grad-check/bench, differing: {differing:?}", fa.len()),
    )
}

/// Runs criterion `id` unless the command line names others.
fn run(selected: &[usize], id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    if !selected.is_empty() && !selected.contains(&id) {
        return true;
    }
    let t0 = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let took = Duration::from_secs_f64(t0.elapsed().as_secs_f64());
    match &res {
        Ok(d) => println!("PASS {id} {name}: {d} [{took:.1?}]"),
        Err(d) => println!("FAIL {id} {name}: {d} [{took:.1?}]"),
    }
    res.is_ok()
}

fn main() -> ExitCode {
    // `cargo test --test acceptance -- 4 5` runs criteria 4 and 5 only
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |id| selected.is_empty() || selected.contains(&id);
    let mut ok = true;
    ok &= run(&selected, 1, "solver correctness", c1_solver_correctness);
    ok &= run(&selected, 2, "feasibility", c2_feasibility);
    ok &= run(&selected, 3, "descent", c3_descent);
    ok &= run(&selected, 4, "fixed point at the optimum", c4_fixed_point);
    ok &= run(&selected, 5, "layer contraction", c5_contraction);
    ok &= run(&selected, 6, "gradient fidelity", c6_gradients);
    let training = if want(7) || want(8) { training_run() } else { Err("not run".into()) };
    ok &= run(&selected, 7, "training", || c7_training(training.as_ref().map_err(Clone::clone)?));
    ok &= run(&selected, 8, "active-set agreement", || c8_agreement(training.as_ref().map_err(Clone::clone)?));
    ok &= run(&selected, 9, "preconditioning", c9_preconditioning);
    ok &= run(&selected, 10, "soc route", c10_soc);
    ok &= run(&selected, 11, "acceleration", c11_acceleration);
    ok &= run(&selected, 12, "determinism", c12_determinism);
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
