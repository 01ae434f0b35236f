//! Runs the `nlproj` binary through every subcommand.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

pub fn nlproj(dir: &Path, args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_nlproj")).current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "nlproj {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const BENCH_CONFIG: &str = r#"{
  "family": { "file": "qp/family.json" },
  "n_samples": 20,
  "train": { "epochs": 15, "batch_size": 8, "hidden": [8], "eval_every": 5, "threads": 1 },
  "out_dir": "bench"
}"#;

/// Runs every subcommand once inside `dir`.
pub fn run_all(dir: &Path) {
    nlproj(dir, &["gen", "--kind", "qp", "--n", "5", "--neq", "2", "--nineq", "3", "--p", "2", "--seed", "7", "--samples", "6", "--out", "qp"]);
    nlproj(dir, &["gen", "--kind", "qcqp", "--n", "4", "--neq", "1", "--nineq", "2", "--p", "2", "--seed", "8", "--samples", "4", "--out", "qcqp"]);
    for m in ["cp", "cp-accel", "oracle"] {
        nlproj(dir, &["solve", "--family", "qp/family.json", "--params", "qp/params.json", "--method", m, "--out", &format!("solve_{m}.json")]);
    }
    nlproj(dir, &["solve", "--family", "qcqp/family.json", "--params", "qcqp/params.json", "--method", "soc", "--out", "solve_soc.json"]);
    fs::write(dir.join("zhat.json"), r#"{"y": [3, -3, 1, 0, 2], "lambda": [0, 0], "mu": [0, 0, 0]}"#).unwrap();
    nlproj(dir, &["project", "--family", "qp/family.json", "--params", "qp/params.json", "--zhat", "zhat.json", "--k", "2", "--rho", "1", "--out", "project.json"]);
    fs::write(dir.join("bench.json"), BENCH_CONFIG).unwrap();
    nlproj(dir, &["train", "--config", "bench.json", "--out", "model.json"]);
    nlproj(dir, &["eval", "--model", "model.json", "--family", "qp/family.json", "--params", "qp/params.json", "--out", "report.json"]);
    nlproj(dir, &["grad-check", "--family", "qp/family.json", "--seed", "2", "--count", "2", "--out", "gradcheck.json"]);
    nlproj(dir, &["bench", "--config", "bench.json"]);
}

/// Relative paths of every file under `root` except the wall-clock timings.
pub fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "timing.json" {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}
