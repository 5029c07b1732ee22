//! Trains one recipe from a config file, with optional dotted overrides.
//!
//! cargo run --release --example train_run -- configs/uskd.toml epochs=5 uskd.beta=0.2

use std::path::PathBuf;

use nkd::harness::{read_metrics, run, ExperimentConfig};

fn main() -> nkd::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let default = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/uskd.toml");
    let path = args.next().map(PathBuf::from).unwrap_or(default);
    let overrides: Vec<String> = args.collect();
    let cfg = ExperimentConfig::from_file(&path, &overrides)?;

    let summary = run(&cfg)?;
    let (rows, _) = read_metrics(&summary.metrics_path)?;
    println!("epoch  train_loss  l_ori    l_target l_non    l_weak   top1");
    for r in rows {
        println!(
            "{:>5}  {:>10.4}  {:.4}  {:.4}  {:.4}  {:.4}  {:.2}",
            r.epoch, r.train_loss, r.l_ori, r.l_target, r.l_non, r.l_weak, r.test_top1
        );
    }
    println!("checkpoint {}", summary.checkpoint_path.display());
    Ok(())
}
