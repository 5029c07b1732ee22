//! Desk-scale comparison: a wide CNN teacher, then baseline, KD, NKD, DKD
//! and USKD students over three seeds on the synthetic corpus written as IDX.
//!
//! cargo run --release --example trend_experiment -- [work_dir] [seeds...]

use std::path::PathBuf;

use nkd::data::synth::SynthSpec;
use nkd::harness::{recipe_means, run_trend, Recipe, TrendPlan};

fn main() -> nkd::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let work_dir = PathBuf::from(args.next().unwrap_or_else(|| "runs/trend".into()));
    let mut seeds: Vec<u64> = args.filter_map(|a| a.parse().ok()).collect();
    if seeds.is_empty() {
        seeds = vec![1, 2, 3];
    }

    let configs = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs");
    let students = [Recipe::Baseline, Recipe::Kd, Recipe::Nkd, Recipe::Dkd, Recipe::Uskd];
    let plan = TrendPlan::desk_scale(&configs, &work_dir, &students, &seeds, &SynthSpec::default())?;
    let report = run_trend(&plan)?;
    for g in &report.groups {
        println!(
            "{:<10} {:<8} mean {:6.2}  std {:5.2}  per seed {:?}",
            g.group,
            g.recipe.as_str(),
            g.mean_top1,
            g.std_top1,
            g.per_seed
        );
    }
    let m = recipe_means(&report);
    let (base, kd, nkd, uskd) = (m[&Recipe::Baseline], m[&Recipe::Kd], m[&Recipe::Nkd], m[&Recipe::Uskd]);
    println!("nkd >= kd - 0.2: {}", nkd >= kd - 0.2);
    println!("nkd >= baseline: {}", nkd >= base);
    println!("uskd >= baseline + 0.2: {}", uskd >= base + 0.2);
    println!("summary: {}", report.summary_path.display());
    Ok(())
}
