//! Metrics CSV schema, writers and the multi-run export.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::config::Recipe;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,recipe,seed,train_loss,l_ori,l_target,l_non,l_weak,test_top1,wall_seconds";

/// One line of `metrics.csv`; field order is the column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub recipe: Recipe,
    pub seed: u64,
    pub train_loss: f64,
    pub l_ori: f64,
    pub l_target: f64,
    pub l_non: f64,
    pub l_weak: f64,
    /// Percent in `[0, 100]`.
    pub test_top1: f64,
    pub wall_seconds: f64,
}

impl MetricsRow {
    fn is_valid(&self) -> bool {
        let finite = [
            self.train_loss,
            self.l_ori,
            self.l_target,
            self.l_non,
            self.l_weak,
            self.wall_seconds,
        ]
        .iter()
        .all(|v| v.is_finite());
        finite && (0.0..=100.0).contains(&self.test_top1)
    }
}

/// One line of `timing.csv`: measured seconds of an epoch's training steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub epoch: usize,
    pub recipe: Recipe,
    pub seed: u64,
    pub train_seconds: f64,
}

pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            inner: csv::Writer::from_path(path).map_err(csv_err)?,
        })
    }

    pub fn create_timing(path: &Path) -> Result<Self> {
        Self::create(path)
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row).map_err(csv_err)
    }

    pub fn write_timing(&mut self, row: &TimingRow) -> Result<()> {
        self.inner.serialize(row).map_err(csv_err)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format(format!("{other:?}")),
    }
}

/// Rows of one `metrics.csv`, skipping malformed lines.
pub fn read_metrics(path: &Path) -> Result<(Vec<MetricsRow>, usize)> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let mut rows = Vec::new();
    let mut skipped = 0;
    for (line, rec) in reader.deserialize::<MetricsRow>().enumerate() {
        match rec {
            Ok(r) if r.is_valid() => rows.push(r),
            Ok(_) | Err(_) => {
                warn!("{}: skipping malformed row {}", path.display(), line + 2);
                skipped += 1;
            }
        }
    }
    Ok((rows, skipped))
}

/// Final-epoch accuracy over seeds for one recipe within one run group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    /// Run directory relative to the export root, `seed-*` component removed.
    pub group: String,
    pub recipe: Recipe,
    pub per_seed: Vec<(u64, f64)>,
    pub mean_top1: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std_top1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportReport {
    pub files: Vec<PathBuf>,
    pub rows: Vec<MetricsRow>,
    pub skipped_rows: usize,
    pub groups: Vec<GroupSummary>,
    pub merged_path: PathBuf,
    pub summary_path: PathBuf,
}

fn group_of(root: &Path, file: &Path) -> String {
    let parent = file.parent().unwrap_or(root);
    let rel = parent.strip_prefix(root).unwrap_or(parent);
    let mut parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
    if parts.last().is_some_and(|p| p.starts_with("seed-")) {
        parts.pop();
    }
    if parts.is_empty() {
        ".".into()
    } else {
        parts.join("/")
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Merges every `metrics.csv` below `root` into `all_metrics.csv` and writes
/// per-recipe seed statistics of the final epoch to `summary.csv`.
pub fn export_metrics(root: &Path) -> Result<ExportReport> {
    let mut files: Vec<PathBuf> = WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == "metrics.csv")
        .map(|e| e.into_path())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::usage(format!("no metrics.csv found under {}", root.display())));
    }
    let mut rows = Vec::new();
    let mut skipped = 0;
    let mut finals: BTreeMap<(String, Recipe), Vec<(u64, f64)>> = BTreeMap::new();
    for f in &files {
        let (r, s) = read_metrics(f)?;
        skipped += s;
        let group = group_of(root, f);
        let mut last: BTreeMap<(Recipe, u64), MetricsRow> = BTreeMap::new();
        for row in &r {
            let key = (row.recipe, row.seed);
            if last.get(&key).is_none_or(|prev| row.epoch >= prev.epoch) {
                last.insert(key, *row);
            }
        }
        for ((recipe, seed), row) in last {
            finals.entry((group.clone(), recipe)).or_default().push((seed, row.test_top1));
        }
        rows.extend(r);
    }
    if skipped > 0 {
        warn!("skipped {skipped} malformed metrics rows");
    }
    let groups: Vec<GroupSummary> = finals
        .into_iter()
        .map(|((group, recipe), mut per_seed)| {
            per_seed.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let vals: Vec<f64> = per_seed.iter().map(|p| p.1).collect();
            let (mean_top1, std_top1) = mean_std(&vals);
            GroupSummary {
                group,
                recipe,
                per_seed,
                mean_top1,
                std_top1,
            }
        })
        .collect();

    let merged_path = root.join("all_metrics.csv");
    let mut w = MetricsWriter::create(&merged_path)?;
    for r in &rows {
        w.write(r)?;
    }
    w.flush()?;
    let summary_path = root.join("summary.csv");
    write_summary(&summary_path, &groups)?;
    Ok(ExportReport {
        files,
        rows,
        skipped_rows: skipped,
        groups,
        merged_path,
        summary_path,
    })
}

fn write_summary(path: &Path, groups: &[GroupSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["group", "recipe", "n_seeds", "mean_top1", "std_top1", "per_seed_top1"])
        .map_err(csv_err)?;
    for g in groups {
        let per_seed = g
            .per_seed
            .iter()
            .map(|(s, v)| format!("{s}:{v}"))
            .collect::<Vec<_>>()
            .join(" ");
        w.write_record([
            g.group.clone(),
            g.recipe.as_str().to_string(),
            g.per_seed.len().to_string(),
            g.mean_top1.to_string(),
            g.std_top1.to_string(),
            per_seed,
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
