//! Experiment configuration: a TOML document plus dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synth::SynthSpec;
use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::kd::{DkdConfig, KdConfig};
use crate::nets::{NetKind, NetSpec};
use crate::numkit::PoolKind;
use crate::uskd::{SmoothVariant, UskdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    /// Cross-entropy only.
    Baseline,
    /// `L_ori` plus tempered KD.
    Kd,
    /// `L_ori` plus normalized KD.
    Nkd,
    /// `L_ori` plus decoupled KD.
    Dkd,
    /// Teacher-free self-distillation.
    Uskd,
}

impl Recipe {
    pub fn as_str(self) -> &'static str {
        match self {
            Recipe::Baseline => "baseline",
            Recipe::Kd => "kd",
            Recipe::Nkd => "nkd",
            Recipe::Dkd => "dkd",
            Recipe::Uskd => "uskd",
        }
    }

    pub fn needs_teacher(self) -> bool {
        matches!(self, Recipe::Kd | Recipe::Nkd | Recipe::Dkd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: NetKind,
    pub widths: Vec<usize>,
    #[serde(default)]
    pub pool: PoolKind,
    /// Defaults to the last stage.
    #[serde(default)]
    pub tap_stage: Option<usize>,
}

impl ModelConfig {
    pub fn spec(&self, input: data::ImageShape, classes: usize, weak_head: bool) -> NetSpec {
        NetSpec {
            kind: self.kind,
            input,
            widths: self.widths.clone(),
            classes,
            tap_stage: self.tap_stage.unwrap_or(self.widths.len().saturating_sub(1)),
            pool: self.pool,
            weak_head,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherSource {
    /// A trained network loaded from `checkpoint`.
    Checkpoint,
    /// The ground-truth one-hot vector; only meaningful for degenerate checks.
    OneHot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub source: TeacherSource,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Idx,
    Cifar,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub format: DataFormat,
    /// Number of classes; must match the data.
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default)]
    pub train_images: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    /// CIFAR record files of the training split.
    #[serde(default)]
    pub train_files: Vec<PathBuf>,
    #[serde(default)]
    pub test_file: Option<PathBuf>,
    #[serde(default)]
    pub synth: SynthSpec,
    #[serde(default)]
    pub train_subset: Option<usize>,
    #[serde(default)]
    pub test_subset: Option<usize>,
}

fn default_classes() -> usize {
    10
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::config(format!("dataset.{key} is required for this format")))
}

impl DatasetConfig {
    /// Loads raw (unnormalized) train and test splits.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.format {
            DataFormat::Idx => (
                data::load_idx(
                    required(&self.train_images, "train_images")?,
                    required(&self.train_labels, "train_labels")?,
                    Split::Train,
                )?,
                data::load_idx(
                    required(&self.test_images, "test_images")?,
                    required(&self.test_labels, "test_labels")?,
                    Split::Test,
                )?,
            ),
            DataFormat::Cifar => {
                if self.train_files.is_empty() {
                    return Err(Error::config("dataset.train_files is required for cifar"));
                }
                let mut train = data::load_cifar_binary(&self.train_files[0], Split::Train)?;
                for f in &self.train_files[1..] {
                    let more = data::load_cifar_binary(f, Split::Train)?;
                    train.images.extend(more.images);
                    train.labels.extend(more.labels);
                }
                let test = data::load_cifar_binary(required(&self.test_file, "test_file")?, Split::Test)?;
                (train, test)
            }
            DataFormat::Synthetic => {
                let spec = SynthSpec {
                    classes: self.classes,
                    ..self.synth
                };
                data::synth::generate(&spec)?
            }
        };
        if train.shape != test.shape {
            return Err(Error::config("train and test images differ in shape"));
        }
        for d in [&train, &test] {
            if let Some(&bad) = d.labels.iter().find(|&&l| l >= self.classes) {
                return Err(Error::config(format!(
                    "label {bad} out of range for {} classes",
                    self.classes
                )));
            }
        }
        let train = match self.train_subset {
            Some(n) => train.subsample(n, seed),
            None => train,
        };
        let test = match self.test_subset {
            Some(n) => test.subsample(n, seed),
            None => test,
        };
        Ok((train, test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier applied at each milestone epoch.
    pub lr_decay: f64,
    pub milestones: Vec<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay: 0.1,
            milestones: Vec::new(),
        }
    }
}

fn default_batch() -> usize {
    64
}

fn default_eval_batch() -> usize {
    500
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub recipe: Recipe,
    pub seed: u64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Writes measured seconds into the metrics CSV instead of 0, at the
    /// cost of byte-identical reruns. `timing.csv` is always written.
    #[serde(default)]
    pub record_wall_clock: bool,
    pub model: ModelConfig,
    #[serde(default)]
    pub teacher: Option<TeacherConfig>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub optimizer: OptimConfig,
    #[serde(default)]
    pub kd: KdConfig,
    #[serde(default)]
    pub dkd: DkdConfig,
    #[serde(default)]
    pub uskd: UskdConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        self.kd.validate()?;
        self.dkd.validate()?;
        self.uskd.validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) || !(o.lr_decay > 0.0) {
            return Err(Error::config("optimizer settings out of range"));
        }
        let passthrough = self.recipe == Recipe::Uskd && self.uskd.smooth_variant == SmoothVariant::TeacherPassthrough;
        if self.recipe.needs_teacher() || passthrough {
            let t = self.teacher.as_ref().ok_or_else(|| {
                Error::config(format!("recipe {} needs a [teacher] section", self.recipe.as_str()))
            })?;
            if t.source == TeacherSource::Checkpoint && t.checkpoint.is_none() {
                return Err(Error::config("teacher.checkpoint is required for source = \"checkpoint\""));
            }
            if passthrough && t.source != TeacherSource::Checkpoint {
                return Err(Error::config("teacher_passthrough smoothing needs a teacher checkpoint"));
            }
        }
        Ok(())
    }
}

/// Parses `a.b.c=value`; the value is read as a TOML literal, falling back
/// to a bare string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("`{key}` descends into a non-table value")))?;
        if i + 1 == parts.len() {
            table.insert((*part).to_string(), parsed);
            return Ok(());
        }
        cur = table
            .entry((*part).to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::config("empty override key"))
}
