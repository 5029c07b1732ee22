//! Teacher, then every student recipe over several seeds, then a summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::{DataFormat, ExperimentConfig, Recipe, TeacherSource};
use super::metrics::{export_metrics, ExportReport};
use super::train::run;
use crate::data::synth::{generate, SynthSpec};
use crate::data::write_idx;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct TrendPlan {
    /// Trained once; its checkpoint feeds every student that needs a teacher.
    pub teacher: ExperimentConfig,
    pub students: Vec<ExperimentConfig>,
    pub seeds: Vec<u64>,
    /// Receives `teacher/`, `<recipe>/seed-<s>/`, `all_metrics.csv` and `summary.csv`.
    pub work_dir: PathBuf,
}

impl TrendPlan {
    /// Writes the synthetic corpus as IDX files under `work_dir/data` and
    /// loads `teacher.toml` plus `<recipe>.toml` for each student from
    /// `config_dir`, pointing every config at those files.
    pub fn desk_scale(
        config_dir: &Path,
        work_dir: &Path,
        students: &[Recipe],
        seeds: &[u64],
        synth: &SynthSpec,
    ) -> Result<Self> {
        let data_dir = work_dir.join("data");
        fs::create_dir_all(&data_dir)?;
        let (train, test) = generate(synth)?;
        let file = |name: &str| data_dir.join(name);
        write_idx(&train, &file("train-images.idx"), &file("train-labels.idx"))?;
        write_idx(&test, &file("test-images.idx"), &file("test-labels.idx"))?;
        let load = |name: &str| -> Result<ExperimentConfig> {
            let mut cfg = ExperimentConfig::from_file(&config_dir.join(format!("{name}.toml")), &[])?;
            let d = &mut cfg.dataset;
            d.format = DataFormat::Idx;
            d.classes = synth.classes;
            d.train_images = Some(file("train-images.idx"));
            d.train_labels = Some(file("train-labels.idx"));
            d.test_images = Some(file("test-images.idx"));
            d.test_labels = Some(file("test-labels.idx"));
            Ok(cfg)
        };
        Ok(TrendPlan {
            teacher: load("teacher")?,
            students: students.iter().map(|r| load(r.as_str())).collect::<Result<_>>()?,
            seeds: seeds.to_vec(),
            work_dir: work_dir.to_path_buf(),
        })
    }
}

pub fn run_trend(plan: &TrendPlan) -> Result<ExportReport> {
    let mut teacher = plan.teacher.clone();
    teacher.output_dir = plan.work_dir.join("teacher");
    let ck = run(&teacher)?.checkpoint_path;
    for student in &plan.students {
        for &seed in &plan.seeds {
            let mut cfg = student.clone();
            cfg.seed = seed;
            cfg.output_dir = plan.work_dir.join(cfg.recipe.as_str()).join(format!("seed-{seed}"));
            if let Some(t) = cfg.teacher.as_mut() {
                if t.source == TeacherSource::Checkpoint {
                    t.checkpoint = Some(ck.clone());
                }
            }
            run(&cfg)?;
        }
    }
    export_metrics(&plan.work_dir)
}

/// Mean final top-1 per student recipe, ignoring the teacher group.
pub fn recipe_means(report: &ExportReport) -> BTreeMap<Recipe, f64> {
    report
        .groups
        .iter()
        .filter(|g| g.group != "teacher")
        .map(|g| (g.recipe, g.mean_top1))
        .collect()
}
