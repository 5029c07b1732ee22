#![allow(dead_code)]

use std::path::{Path, PathBuf};

use nkd::harness::{run, ExperimentConfig};

/// A two-epoch run on a small synthetic corpus with a narrow CNN.
pub fn small_cfg(recipe: &str, seed: u64, out: &Path, overrides: &[&str]) -> ExperimentConfig {
    let text = format!(
        r#"recipe = "{recipe}"
seed = {seed}
epochs = 2
batch_size = 32
output_dir = "{}"

[model]
kind = "cnn2stage"
widths = [4, 8]

[dataset]
format = "synthetic"
classes = 10

[dataset.synth]
n_train = 192
n_test = 96
"#,
        out.display()
    );
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_toml_str(&text, &overrides).unwrap()
}

/// Trains a wider baseline for two epochs and returns its checkpoint.
pub fn small_teacher(dir: &Path) -> PathBuf {
    let cfg = small_cfg("baseline", 100, &dir.join("teacher"), &["model.widths=[8,12]"]);
    run(&cfg).unwrap().checkpoint_path
}

pub fn teacher_overrides(ck: &Path) -> Vec<String> {
    vec![
        "teacher.source=\"checkpoint\"".to_string(),
        format!("teacher.checkpoint=\"{}\"", ck.display()),
    ]
}

pub fn with_teacher<'a>(t: &'a [String], extra: &[&'a str]) -> Vec<&'a str> {
    t.iter().map(String::as_str).chain(extra.iter().copied()).collect()
}
