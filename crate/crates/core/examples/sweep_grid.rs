//! Lists the runs a sweep file expands to; pass `--run` to train them.
//!
//! cargo run --release --example sweep_grid -- configs/sweeps/uskd_mu.toml [--run] [key=value...]

use std::path::PathBuf;

use nkd::harness::{expand_sweep, sweep};

fn main() -> nkd::Result<()> {
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    let default = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/sweeps/uskd_mu.toml");
    let path = if args.first().is_some_and(|a| a.ends_with(".toml")) { PathBuf::from(args.remove(0)) } else { default };
    let execute = args.iter().any(|a| a == "--run");
    args.retain(|a| a != "--run");

    for p in expand_sweep(&path, &args)? {
        println!("{:<40} seed {:<3} -> {}", p.label, p.config.seed, p.config.output_dir.display());
    }
    if execute {
        for s in sweep(&path, &args)? {
            println!("{}: top1 {:.2}", s.metrics_path.display(), s.final_row.test_top1);
        }
    }
    Ok(())
}
