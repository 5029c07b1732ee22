//! Trains a short baseline over three seeds, re-evaluates each saved
//! checkpoint, and merges the metrics into a per-group summary.
//!
//! cargo run --release --example eval_export -- [work_dir]

use std::path::PathBuf;

use nkd::harness::{eval_checkpoint, export_metrics, run, ExperimentConfig};
use nkd::nets::load_checkpoint;

fn main() -> nkd::Result<()> {
    let work = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/eval_export".into()));
    let base = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/baseline.toml");
    for seed in [1, 2, 3] {
        let out = work.join("baseline").join(format!("seed-{seed}"));
        let cfg = ExperimentConfig::from_file(
            &base,
            &[
                "epochs=3".into(),
                format!("seed={seed}"),
                format!("output_dir=\"{}\"", out.display()),
            ],
        )?;
        let s = run(&cfg)?;
        let ck = load_checkpoint(&s.checkpoint_path)?;
        let (_, test) = cfg.dataset.load(cfg.seed)?;
        let top1 = eval_checkpoint(&ck, &test, 500)?;
        println!("seed {seed}: logged {:.2}, re-evaluated {top1:.2}", s.final_row.test_top1);
    }
    let report = export_metrics(&work)?;
    for g in &report.groups {
        println!("{}: {:.2} +/- {:.2} over {} seeds", g.group, g.mean_top1, g.std_top1, g.per_seed.len());
    }
    println!("{}", report.summary_path.display());
    Ok(())
}
