//! Dataset ingestion, normalization, seeded batching and label utilities.

mod formats;
pub mod synth;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Purpose};

pub use formats::{load_cifar_binary, load_idx, write_cifar_binary, write_idx};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Images in `[N, C_in, H, W]` order with one class index per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub shape: ImageShape,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Vec<usize>, shape: ImageShape, split: Split) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::format("dataset has no samples"));
        }
        if shape.is_empty() || images.len() != labels.len() * shape.len() {
            return Err(Error::format(format!(
                "{} pixel values for {} images of shape {:?}",
                images.len(),
                labels.len(),
                shape
            )));
        }
        Ok(Dataset {
            images,
            labels,
            shape,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Largest label plus one.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.shape.len();
        &self.images[i * d..(i + 1) * d]
    }

    /// Copies the selected samples into one contiguous batch.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(indices.len() * self.shape.len());
        for &i in indices {
            x.extend_from_slice(self.image(i));
        }
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples of a seeded permutation, in ascending index order.
    pub fn subsample(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seed::stream(seed, Purpose::Subsample, self.split as u64));
        let mut keep = idx[..n].to_vec();
        keep.sort_unstable();
        let (images, labels) = self.gather(&keep);
        Dataset {
            images,
            labels,
            shape: self.shape,
            split: self.split,
        }
    }

    pub fn normalized(&self, stats: &Normalization) -> Dataset {
        let mut out = self.clone();
        stats.apply(&mut out.images, self.shape);
        out
    }
}

/// Per-channel mean and standard deviation of a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(train: &Dataset) -> Normalization {
        let plane = train.shape.height * train.shape.width;
        let ch = train.shape.channels;
        let mut sum = vec![0.0; ch];
        let mut sq = vec![0.0; ch];
        for (k, chunk) in train.images.chunks_exact(plane).enumerate() {
            let c = k % ch;
            for &v in chunk {
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        let n = (train.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                // constant channels keep unit scale
                if var > 1e-12 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Normalization { mean, std }
    }

    pub fn identity(channels: usize) -> Normalization {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn apply(&self, images: &mut [f64], shape: ImageShape) {
        let plane = shape.height * shape.width;
        for (k, chunk) in images.chunks_exact_mut(plane).enumerate() {
            let c = k % shape.channels;
            for v in chunk {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }
}

/// Label-smoothed one-hot vector: the target gets `1 - eps + eps / C`,
/// every other class `eps / C`.
pub fn smooth_labels(target: usize, classes: usize, epsilon: f64) -> Vec<f64> {
    let off = epsilon / classes as f64;
    let mut v = vec![off; classes];
    v[target] = 1.0 - epsilon + off;
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
    pub epoch: u64,
}

/// Index batches for one epoch: a seeded Fisher-Yates permutation cut into
/// chunks of `batch_size`, the last partial chunk kept.
pub fn batches(n: usize, plan: BatchPlan) -> Result<Vec<Vec<usize>>> {
    if plan.batch_size == 0 || plan.batch_size > n {
        return Err(Error::usage(format!(
            "batch size {} invalid for {} samples",
            plan.batch_size, n
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::stream(plan.seed, Purpose::Shuffle, plan.epoch));
    Ok(idx.chunks(plan.batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;

    #[test]
    fn smooth_label_examples() {
        assert_eq!(smooth_labels(2, 5, 0.0), vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let v = smooth_labels(0, 4, 0.1);
        for (a, b) in v.iter().zip([0.925, 0.025, 0.025, 0.025]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn smooth_labels_are_distributions(c in 2usize..200, t_frac in 0.0f64..1.0, eps in 0.0f64..0.999) {
            let t = ((c as f64 * t_frac) as usize).min(c - 1);
            let v = smooth_labels(t, c, eps);
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-15 * c as f64);
            prop_assert!(v.iter().all(|x| *x >= 0.0));
        }

        #[test]
        fn batches_cover_each_index_once(n in 1usize..500, b_frac in 0.0f64..1.0, seed: u64, epoch in 0u64..1000) {
            let b = 1 + ((n - 1) as f64 * b_frac) as usize;
            let plan = BatchPlan { seed, batch_size: b, epoch };
            let out = batches(n, plan).unwrap();
            let mut all: Vec<usize> = out.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert!(out[..out.len() - 1].iter().all(|c| c.len() == b));
        }
    }

    #[test]
    fn batches_are_deterministic() {
        let plan = BatchPlan { seed: 3, batch_size: 7, epoch: 2 };
        assert_eq!(batches(50, plan).unwrap(), batches(50, plan).unwrap());
    }

    #[test]
    fn epochs_give_distinct_permutations() {
        let mut seen = HashSet::new();
        for epoch in 0..100 {
            let plan = BatchPlan { seed: 5, batch_size: 10, epoch };
            assert!(seen.insert(batches(40, plan).unwrap().concat()));
        }
    }

    #[test]
    fn bad_batch_size() {
        let plan = BatchPlan { seed: 0, batch_size: 11, epoch: 0 };
        assert!(batches(10, plan).is_err());
    }

    #[test]
    fn normalization_centers_channels() {
        let shape = ImageShape { channels: 2, height: 1, width: 2 };
        let d = Dataset::new(vec![0.0, 1.0, 5.0, 5.0, 1.0, 0.0, 5.0, 5.0], vec![0, 1], shape, Split::Train).unwrap();
        let stats = Normalization::fit(&d);
        assert_eq!(stats.mean, vec![0.5, 5.0]);
        assert_eq!(stats.std, vec![0.5, 1.0]);
        let n = d.normalized(&stats);
        assert_eq!(n.images, vec![-1.0, 1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn subsample_is_seeded() {
        let shape = ImageShape { channels: 1, height: 1, width: 1 };
        let d = Dataset::new((0..100).map(f64::from).collect(), vec![0; 100], shape, Split::Train).unwrap();
        let a = d.subsample(10, 4);
        assert_eq!(a, d.subsample(10, 4));
        assert_ne!(a, d.subsample(10, 5));
        assert_eq!(a.len(), 10);
    }
}
