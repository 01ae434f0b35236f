//! End-to-end benchmark runs: generate or load a family, sample parameters,
//! train, evaluate on the held-out split and write reports.
//!
//! Files written to `out_dir`:
//!
//! * `metrics.json`: the summary, byte-reproducible for a fixed config;
//! * `instances.csv`: one row per evaluated instance;
//! * `layers.csv`: one row per (instance, projection layer);
//! * `history.csv`: training history;
//! * `model.json`: network checkpoint;
//! * `timing.json`: wall-clock numbers (not reproducible).

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gen::{generate, sample_parameters, FamilyKind, GenDims, GenOptions};
use crate::io::{read_family, read_json, write_json};
use crate::metrics::{InstanceRow, MetricsReport};
use crate::mlp::{MlpCheckpoint, MlpParams};
use crate::problem::{ParametricNlpFamily, Vector};
use crate::projection::{LayerTrace, ProjectionConfig};
use crate::trainer::{evaluate_model_traced, oracle_solutions, train, write_history_csv, TrainConfig, TrainOutput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSpec {
    pub kind: FamilyKind,
    pub n: usize,
    pub n_eq: usize,
    pub n_ineq: usize,
    pub p: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub options: GenOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySource {
    Generate(GenerateSpec),
    /// Path to a family JSON, relative to the config file.
    File(PathBuf),
}

impl FamilySource {
    pub fn load(&self, base: &Path) -> Result<ParametricNlpFamily> {
        match self {
            FamilySource::Generate(g) => {
                let mut dims = GenDims::new(g.n, g.n_eq, g.n_ineq, g.p, g.seed);
                dims.n_instances = 0;
                generate(g.kind, &dims, &g.options)
            }
            FamilySource::File(p) => read_family(base.join(p)),
        }
    }
}

/// Thresholds the run must meet; unset entries are not checked.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub max_eq: Option<f64>,
    pub max_ineq: Option<f64>,
    pub aog_percent: Option<f64>,
    pub active_set_agreement: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub family: FamilySource,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_sample_seed")]
    pub sample_seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    /// Projection used at evaluation; defaults to the training projection.
    #[serde(default)]
    pub eval_projection: Option<ProjectionConfig>,
    /// Batch size used to report time per batch.
    #[serde(default = "default_timing_batch")]
    pub timing_batch: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub thresholds: Thresholds,
}

fn default_samples() -> usize {
    250
}
fn default_sample_seed() -> u64 {
    1
}
fn default_timing_batch() -> usize {
    50
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("bench_out")
}

impl BenchConfig {
    pub fn new(family: FamilySource) -> Self {
        Self {
            family,
            n_samples: default_samples(),
            sample_seed: default_sample_seed(),
            train: TrainConfig::default(),
            eval_projection: None,
            timing_batch: default_timing_batch(),
            out_dir: default_out_dir(),
            thresholds: Thresholds::default(),
        }
    }

    /// Reads a config; parse errors carry line and column.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::InvalidConfig("n_samples must be at least 2".into()));
        }
        self.train.check()?;
        if let Some(p) = &self.eval_projection {
            p.check()?;
        }
        Ok(())
    }

    pub fn eval_projection(&self) -> &ProjectionConfig {
        self.eval_projection.as_ref().unwrap_or(&self.train.projection)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCheck {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

impl Thresholds {
    pub fn evaluate(&self, r: &MetricsReport) -> Vec<ThresholdCheck> {
        let upper = |name: &str, value: f64, limit: Option<f64>| {
            limit.map(|limit| ThresholdCheck {
                name: name.into(),
                value,
                limit,
                pass: value <= limit,
            })
        };
        let mut out: Vec<ThresholdCheck> = [
            upper("max_eq", r.max_eq, self.max_eq),
            upper("max_ineq", r.max_ineq, self.max_ineq),
            upper("aog_percent", r.aog_percent, self.aog_percent),
        ]
        .into_iter()
        .flatten()
        .collect();
        if let Some(limit) = self.active_set_agreement {
            out.push(ThresholdCheck {
                name: "active_set_agreement".into(),
                value: r.active_set_agreement,
                limit,
                pass: r.active_set_agreement >= limit,
            });
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_s: f64,
    pub eval_s: f64,
    pub time_per_batch_s: f64,
    pub time_per_instance_s: f64,
    pub timing_batch: usize,
}

#[derive(Clone, Debug)]
pub struct BenchOutcome {
    pub report: MetricsReport,
    pub traces: Vec<LayerTrace>,
    pub training: TrainOutput,
    pub checks: Vec<ThresholdCheck>,
    pub timing: Timing,
}

impl BenchOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Summary file contents: the report plus the threshold verdicts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    #[serde(flatten)]
    pub report: MetricsReport,
    pub checks: Vec<ThresholdCheck>,
    pub passed: bool,
}

/// Trains on the training split and evaluates on the held-out split.
pub fn run_pipeline(cfg: &BenchConfig, family: &ParametricNlpFamily) -> Result<BenchOutcome> {
    cfg.check()?;
    let xs = sample_parameters(family, cfg.n_samples, cfg.sample_seed);
    let t0 = Instant::now();
    let training = train(&cfg.train, family, &xs)?;
    let train_s = t0.elapsed().as_secs_f64();

    let test: Vec<Vector> = training.test_idx.iter().map(|&i| xs[i].clone()).collect();
    let oracle = oracle_solutions(family, &test)?;
    let t1 = Instant::now();
    let (mut report, traces) = evaluate_model_traced(&training.params, family, &test, &oracle, cfg.eval_projection())?;
    let eval_s = t1.elapsed().as_secs_f64();
    for (row, &i) in report.rows.iter_mut().zip(&training.test_idx) {
        row.index = i;
    }
    let report = report.with_timing(eval_s, cfg.timing_batch);
    let timing = Timing {
        train_s,
        eval_s,
        time_per_batch_s: report.time_per_batch_s.unwrap_or(f64::NAN),
        time_per_instance_s: report.time_per_instance_s.unwrap_or(f64::NAN),
        timing_batch: cfg.timing_batch,
    };
    let checks = cfg.thresholds.evaluate(&report);
    Ok(BenchOutcome {
        report,
        traces,
        training,
        checks,
        timing,
    })
}

#[derive(Serialize)]
struct LayerRow {
    index: usize,
    layer: usize,
    rho: f64,
    violation: f64,
    objective: f64,
    inner_iters: usize,
    inner_converged: bool,
}

pub fn write_instances_csv(path: impl AsRef<Path>, rows: &[InstanceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_instances_csv(path: impl AsRef<Path>) -> Result<Vec<InstanceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_layers_csv(path: impl AsRef<Path>, rows: &[InstanceRow], traces: &[LayerTrace]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (row, trace) in rows.iter().zip(traces) {
        w.serialize(LayerRow {
            index: row.index,
            layer: 0,
            rho: f64::NAN,
            violation: trace.initial_violation,
            objective: f64::NAN,
            inner_iters: 0,
            inner_converged: true,
        })?;
        for l in &trace.layers {
            w.serialize(LayerRow {
                index: row.index,
                layer: l.layer,
                rho: l.rho,
                violation: l.violation,
                objective: l.objective,
                inner_iters: l.inner_iters,
                inner_converged: l.inner_converged,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds the summary from `instances.csv`.
pub fn recompute_metrics(instances_csv: impl AsRef<Path>, n_eq: usize) -> Result<MetricsReport> {
    MetricsReport::from_rows(read_instances_csv(instances_csv)?, n_eq)
}

pub fn write_outputs(out_dir: &Path, outcome: &BenchOutcome) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    write_json(
        out_dir.join("metrics.json"),
        &MetricsFile {
            report: outcome.report.clone(),
            checks: outcome.checks.clone(),
            passed: outcome.passed(),
        },
    )?;
    write_instances_csv(out_dir.join("instances.csv"), &outcome.report.rows)?;
    write_layers_csv(out_dir.join("layers.csv"), &outcome.report.rows, &outcome.traces)?;
    write_history_csv(&outcome.training.history, File::create(out_dir.join("history.csv"))?)?;
    write_json(out_dir.join("model.json"), &MlpCheckpoint::from(&outcome.training.params))?;
    write_json(out_dir.join("timing.json"), &outcome.timing)?;
    Ok(())
}

/// Loads the config at `path`, runs it and writes all files. Relative
/// paths in the config resolve against the config's directory.
pub fn run_benchmark(path: impl AsRef<Path>) -> Result<BenchOutcome> {
    let path = path.as_ref();
    let cfg = BenchConfig::from_file(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let family = cfg.family.load(base)?;
    let outcome = run_pipeline(&cfg, &family)?;
    write_outputs(&base.join(&cfg.out_dir), &outcome)?;
    Ok(outcome)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MlpParams> {
    MlpParams::try_from(read_json::<MlpCheckpoint>(path)?)
}
