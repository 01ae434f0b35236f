//! Train a small network on a generated QP family and report held-out
//! metrics. Pass the number of epochs as the first argument (default 300).

use nlproj::bench::{run_pipeline, BenchConfig, FamilySource, GenerateSpec};
use nlproj::gen::{FamilyKind, GenOptions};

fn main() -> nlproj::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let spec = GenerateSpec {
        kind: FamilyKind::Qp,
        n: 10,
        n_eq: 5,
        n_ineq: 5,
        p: 5,
        seed: 0,
        options: GenOptions::default(),
    };
    let mut cfg = BenchConfig::new(FamilySource::Generate(spec.clone()));
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 16;
    cfg.train.adam.lr = 1e-2;
    cfg.train.lr_final = Some(1e-4);
    cfg.train.eval_every = (epochs / 5).max(1);

    let family = cfg.family.load(std::path::Path::new("."))?;
    let out = run_pipeline(&cfg, &family)?;
    for h in out.training.history.iter().filter(|h| h.aog_percent.is_some()) {
        println!("epoch {:>4}  loss {:.5}  held-out AOG {:.3}%", h.epoch + 1, h.loss, h.aog_percent.unwrap());
    }
    let r = &out.report;
    println!(
        "test: AOG {:.3}%  max eq {:.1e}  max ineq {:.1e}  active-set agreement {:.3}",
        r.aog_percent, r.max_eq, r.max_ineq, r.active_set_agreement
    );
    println!("training took {:.1} s", out.timing.train_s);
    Ok(())
}
