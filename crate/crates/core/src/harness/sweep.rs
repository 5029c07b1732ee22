//! Grid sweeps over a base experiment config.
//!
//! ```toml
//! base = "nkd.toml"           # relative to this file
//! output_dir = "runs/lambda"
//! seeds = [1, 2, 3]
//! [grid]
//! "kd.lambda" = [1.0, 2.0, 3.0, 4.0]
//! ```
//!
//! Each grid point and seed runs into
//! `output_dir/<key>=<value>[,<key>=<value>...]/seed-<seed>/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::config::ExperimentConfig;
use super::train::{run, RunSummary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub grid: BTreeMap<String, Vec<toml::Value>>,
}

/// One expanded run of a sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub label: String,
    pub config: ExperimentConfig,
}

fn cartesian(grid: &BTreeMap<String, Vec<toml::Value>>) -> Vec<Vec<(String, toml::Value)>> {
    let mut points = vec![Vec::new()];
    for (key, values) in grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

/// Expands a sweep file into concrete configs, in grid order then seed order.
pub fn expand_sweep(path: &Path, overrides: &[String]) -> Result<Vec<SweepPoint>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let sweep: SweepConfig = toml::from_str(&text).map_err(|e| Error::config(e.to_string()))?;
    let base_path = path.parent().unwrap_or(Path::new(".")).join(&sweep.base);
    let base_text = std::fs::read_to_string(&base_path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", base_path.display())))?;
    if sweep.grid.values().any(Vec::is_empty) {
        return Err(Error::config("sweep grid axes must list at least one value"));
    }
    let mut out = Vec::new();
    for point in cartesian(&sweep.grid) {
        let label = if point.is_empty() {
            "base".to_string()
        } else {
            point.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",")
        };
        let mut sets: Vec<String> = overrides.to_vec();
        sets.extend(point.iter().map(|(k, v)| format!("{k}={v}")));
        let first = ExperimentConfig::from_toml_str(&base_text, &sets)?;
        let seeds = if sweep.seeds.is_empty() { vec![first.seed] } else { sweep.seeds.clone() };
        for seed in seeds {
            let dir = sweep.output_dir.join(&label).join(format!("seed-{seed}"));
            let mut s = sets.clone();
            s.push(format!("seed={seed}"));
            s.push(format!("output_dir={}", toml::Value::String(dir.to_string_lossy().into_owned())));
            out.push(SweepPoint {
                label: label.clone(),
                config: ExperimentConfig::from_toml_str(&base_text, &s)?,
            });
        }
    }
    Ok(out)
}

/// Runs every point of a sweep sequentially.
pub fn sweep(path: &Path, overrides: &[String]) -> Result<Vec<RunSummary>> {
    expand_sweep(path, overrides)?
        .iter()
        .map(|p| {
            log::info!("sweep point {} seed {}", p.label, p.config.seed);
            run(&p.config)
        })
        .collect()
}
