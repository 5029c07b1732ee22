//! Command-line front end. Exit codes: 0 ok, 1 usage or I/O error,
//! 2 configuration error, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nkd::data::{load_cifar_binary, load_idx, Split};
use nkd::harness::{self, ExperimentConfig};
use nkd::nets::load_checkpoint;
use nkd::{Error, Result};

#[derive(Parser)]
#[command(name = "nkd", version, about = "Distillation experiments at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one config to completion.
    Run {
        config: PathBuf,
        /// Dotted-key override, e.g. `kd.gamma=2.0`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Compare analytic and finite-difference gradients of the config's objective.
    Gradcheck {
        config: PathBuf,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Top-1 accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate on this config's test split.
        #[arg(long, conflicts_with_all = ["images", "cifar"])]
        config: Option<PathBuf>,
        /// IDX image file; needs `--labels`.
        #[arg(long, requires = "labels")]
        images: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// CIFAR-10 binary record file.
        #[arg(long)]
        cifar: Option<PathBuf>,
    },
    /// Merge every metrics.csv below a directory and summarize over seeds.
    ExportMetrics { dir: PathBuf },
    /// Run every point of a sweep file.
    Sweep {
        sweep: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, set } => {
            let cfg = ExperimentConfig::from_file(&config, &set)?;
            let s = harness::run(&cfg)?;
            println!(
                "{} seed {}: top1 {:.2}% after {} epochs; metrics {}, checkpoint {}",
                cfg.recipe.as_str(),
                cfg.seed,
                s.final_row.test_top1,
                s.final_row.epoch,
                s.metrics_path.display(),
                s.checkpoint_path.display()
            );
        }
        Command::Gradcheck { config, samples, set } => {
            let cfg = ExperimentConfig::from_file(&config, &set)?;
            let r = harness::gradcheck(&cfg, samples)?;
            println!(
                "{}: max relative error {:.3e} (parameters {:.3e} over {}, worst {}[{}]; logits {:.3e} over {})",
                r.recipe.as_str(),
                r.max_rel_err(),
                r.max_param_rel_err,
                r.param_coordinates,
                r.worst_param.0,
                r.worst_param.1,
                r.max_logit_rel_err,
                r.logit_coordinates
            );
            if !r.passed() {
                eprintln!("gradient check failed: tolerance {:e}", harness::GRADCHECK_TOL);
                return Ok(ExitCode::from(3));
            }
        }
        Command::Eval {
            checkpoint,
            config,
            images,
            labels,
            cifar,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let data = match (config, images, labels, cifar) {
                (Some(c), ..) => {
                    let cfg = ExperimentConfig::from_file(&c, &[])?;
                    cfg.dataset.load(cfg.seed)?.1
                }
                (None, Some(i), Some(l), None) => load_idx(&i, &l, Split::Test)?,
                (None, None, None, Some(f)) => load_cifar_binary(&f, Split::Test)?,
                _ => return Err(Error::usage("give --config, --images/--labels or --cifar")),
            };
            println!("{:.2}", harness::eval_checkpoint(&ck, &data, 500)?);
        }
        Command::ExportMetrics { dir } => {
            let r = harness::export_metrics(&dir)?;
            for g in &r.groups {
                println!(
                    "{:<28} {:<8} n={} top1 {:.2} +/- {:.2}",
                    g.group,
                    g.recipe.as_str(),
                    g.per_seed.len(),
                    g.mean_top1,
                    g.std_top1
                );
            }
            if r.skipped_rows > 0 {
                eprintln!("warning: skipped {} malformed rows", r.skipped_rows);
            }
            println!("wrote {} and {}", r.merged_path.display(), r.summary_path.display());
        }
        Command::Sweep { sweep, set } => {
            for s in harness::sweep(&sweep, &set)? {
                println!("{}: top1 {:.2}", s.metrics_path.display(), s.final_row.test_top1);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
