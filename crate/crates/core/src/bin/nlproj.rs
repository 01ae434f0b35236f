use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use nlproj::adjoint::AdjointOptions;
use nlproj::bench::{load_model, run_benchmark, run_pipeline, write_instances_csv, BenchConfig};
use nlproj::cp::CpSettings;
use nlproj::gen::{generate, sample_parameters, FamilyKind, GenDims, GenOptions};
use nlproj::gradcheck::{sampled_projection_checks, GradCheckReport};
use nlproj::io::{read_family, read_json, read_params, write_family, write_json, write_params, PointJson};
use nlproj::mlp::MlpCheckpoint;
use nlproj::problem::PrimalDualPoint;
use nlproj::projection::{project_k, LayerTrace, ProjectionConfig};
use nlproj::solve::{solve_instance, Method, SolveOptions};
use nlproj::trainer::{evaluate_model_traced, oracle_solutions, write_history_csv};

#[derive(Parser)]
#[command(name = "nlproj", version, about = "Parametric NLP solvers, projection layers and learned solution maps")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a family and a parameter set.
    Gen {
        #[arg(long)]
        kind: FamilyKind,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        neq: usize,
        #[arg(long)]
        nineq: usize,
        #[arg(long)]
        p: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of parameter samples written to params.json.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve every instance of a parameter set.
    Solve {
        #[arg(long)]
        family: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long, default_value = "cp")]
        method: Method,
        #[arg(long, default_value_t = 200)]
        layers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project given points onto the constraint set.
    Project {
        #[arg(long)]
        family: PathBuf,
        #[arg(long)]
        params: PathBuf,
        /// One point, or one point per parameter vector.
        #[arg(long)]
        zhat: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 1.0)]
        rho: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a network; writes the checkpoint and `<out>.history.csv`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained network against the reference solver.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        family: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Report JSON; instance rows go to `<out>.instances.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the projection VJP with finite differences.
    GradCheck {
        #[arg(long)]
        family: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 1e-3)]
        min_margin: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate or load, train, evaluate and write reports.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PointsFile {
    One(PointJson),
    Many(Vec<PointJson>),
}

#[derive(Serialize)]
struct ProjectedInstance {
    index: usize,
    point: PointJson,
    objective: f64,
    max_violation: f64,
    trace: LayerTrace,
}

#[derive(Serialize)]
struct GradCheckSummary {
    checked: usize,
    max_rel_err: f64,
    tol: f64,
    passed: bool,
    reports: Vec<GradCheckReport>,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Gen {
            kind,
            n,
            neq,
            nineq,
            p,
            seed,
            samples,
            out,
        } => {
            let mut dims = GenDims::new(n, neq, nineq, p, seed);
            dims.n_instances = samples;
            let family = generate(kind, &dims, &GenOptions::default())?;
            let xs = sample_parameters(&family, samples, seed);
            write_family(out.join("family.json"), &family)?;
            write_params(out.join("params.json"), family.dims().n_params, &xs)?;
            println!("wrote {} and {}", out.join("family.json").display(), out.join("params.json").display());
            Ok(true)
        }
        Cmd::Solve {
            family,
            params,
            method,
            layers,
            out,
        } => {
            let family = read_family(&family)?;
            let xs = read_params(&params)?;
            let opts = SolveOptions {
                layers,
                ..SolveOptions::default()
            };
            let sols = xs
                .par_iter()
                .enumerate()
                .map(|(i, x)| solve_instance(&family, x, i, method, &opts))
                .collect::<nlproj::Result<Vec<_>>>()?;
            write_json(&out, &sols)?;
            let unconverged = sols.iter().filter(|s| !s.converged).count();
            println!("solved {} instances, {unconverged} not converged", sols.len());
            Ok(true)
        }
        Cmd::Project {
            family,
            params,
            zhat,
            k,
            rho,
            out,
        } => {
            let family = read_family(&family)?;
            let xs = read_params(&params)?;
            let points: Vec<PrimalDualPoint> = match read_json::<PointsFile>(&zhat)? {
                PointsFile::One(p) => vec![PrimalDualPoint::from(&p); xs.len()],
                PointsFile::Many(ps) => ps.iter().map(PrimalDualPoint::from).collect(),
            };
            if points.len() != xs.len() {
                bail!("{} points for {} parameter vectors", points.len(), xs.len());
            }
            let cfg = ProjectionConfig {
                k,
                rho,
                ..ProjectionConfig::default()
            };
            cfg.check()?;
            let res = xs
                .par_iter()
                .zip(points.par_iter())
                .enumerate()
                .map(|(i, (x, z))| {
                    let p = project_k(&family, x, z, &cfg)?;
                    Ok(ProjectedInstance {
                        index: i,
                        objective: family.objective(x, &p.z.y),
                        max_violation: family.max_violation(x, &p.z.y),
                        point: PointJson::from(&p.z),
                        trace: p.trace,
                    })
                })
                .collect::<nlproj::Result<Vec<_>>>()?;
            match out {
                Some(path) => write_json(path, &res)?,
                None => print!("{}", nlproj::io::to_json(&res)?),
            }
            Ok(true)
        }
        Cmd::Train { config, out } => {
            let cfg = BenchConfig::from_file(&config)?;
            let base = config.parent().unwrap_or(Path::new("."));
            let family = cfg.family.load(base)?;
            let outcome = run_pipeline(&cfg, &family)?;
            write_json(&out, &MlpCheckpoint::from(&outcome.training.params))?;
            write_history_csv(&outcome.training.history, File::create(sibling(&out, "history.csv"))?)?;
            println!(
                "held-out AOG {:.4}%  max eq {:.2e}  max ineq {:.2e}",
                outcome.report.aog_percent, outcome.report.max_eq, outcome.report.max_ineq
            );
            Ok(true)
        }
        Cmd::Eval {
            model,
            family,
            params,
            k,
            out,
        } => {
            let params_net = load_model(&model)?;
            let family = read_family(&family)?;
            let xs = read_params(&params)?;
            let oracle = oracle_solutions(&family, &xs)?;
            let cfg = ProjectionConfig::default().with_k(k);
            cfg.check()?;
            let (report, _) = evaluate_model_traced(&params_net, &family, &xs, &oracle, &cfg)?;
            write_json(&out, &report)?;
            write_instances_csv(sibling(&out, "instances.csv"), &report.rows)?;
            println!(
                "AOG {:.4}%  max eq {:.2e}  max ineq {:.2e}  agreement {:.4}",
                report.aog_percent, report.max_eq, report.max_ineq, report.active_set_agreement
            );
            Ok(true)
        }
        Cmd::GradCheck {
            family,
            seed,
            count,
            k,
            min_margin,
            tol,
            out,
        } => {
            let family = read_family(&family)?;
            let mut cfg = ProjectionConfig::default().fixed_layers(k);
            cfg.inner = CpSettings::default().with_tolerance(1e-12);
            cfg.use_acceleration = false;
            let reports =
                sampled_projection_checks(&family, &cfg, &AdjointOptions::default(), count, min_margin, 0.5, seed, 50 * count.max(1))?;
            let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
            let passed = !reports.is_empty() && max_rel_err <= tol;
            let summary = GradCheckSummary {
                checked: reports.len(),
                max_rel_err,
                tol,
                passed,
                reports,
            };
            if let Some(path) = out {
                write_json(path, &summary)?;
            }
            println!("checked {} instances, max relative error {max_rel_err:.3e}", summary.checked);
            Ok(passed)
        }
        Cmd::Bench { config } => {
            let outcome = run_benchmark(&config).with_context(|| format!("benchmark {}", config.display()))?;
            for c in &outcome.checks {
                println!("{} {} = {:.6e} (limit {:.3e})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.limit);
            }
            Ok(outcome.passed())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
