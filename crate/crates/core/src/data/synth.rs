//! Procedural 10-class grayscale image corpus with confusable class pairs.
//!
//! Each class is a sum of Gaussian strokes; classes `2k` and `2k + 1` share
//! all but one stroke. Samples are shifted, rescaled, blended toward the
//! partner class and noised, then quantized to bytes so they survive an IDX
//! round trip unchanged.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, ImageShape, Split};
use crate::error::{Error, Result};
use crate::seed::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub classes: usize,
    pub side: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Seeds the class prototypes and the samples.
    pub seed: u64,
    /// Strokes per class.
    pub strokes: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Upper bound of the blend weight toward the partner prototype.
    pub blend: f64,
    /// Fraction of training labels replaced by the partner class.
    pub label_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 10,
            side: 12,
            n_train: 2000,
            n_test: 2000,
            seed: 2024,
            strokes: 3,
            noise: 0.2,
            blend: 0.3,
            label_noise: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Stroke {
    cy: f64,
    cx: f64,
    sy: f64,
    sx: f64,
    amp: f64,
}

impl Stroke {
    fn random(rng: &mut ChaCha8Rng, side: f64) -> Stroke {
        Stroke {
            cy: rng.gen_range(0.2..0.8) * side,
            cx: rng.gen_range(0.2..0.8) * side,
            sy: rng.gen_range(0.6..2.5),
            sx: rng.gen_range(0.6..2.5),
            amp: rng.gen_range(0.5..1.0),
        }
    }

    fn render(&self, out: &mut [f64], side: usize, dy: f64, dx: f64, gain: f64) {
        for y in 0..side {
            for x in 0..side {
                let u = (y as f64 - self.cy - dy) / self.sy;
                let v = (x as f64 - self.cx - dx) / self.sx;
                out[y * side + x] += gain * self.amp * (-0.5 * (u * u + v * v)).exp();
            }
        }
    }
}

fn partner(c: usize, classes: usize) -> usize {
    let p = c ^ 1;
    if p < classes { p } else { c }
}

fn prototypes(spec: &SynthSpec) -> Vec<Vec<Stroke>> {
    let mut rng = seed::stream(spec.seed, Purpose::Synth, 0);
    let side = spec.side as f64;
    let mut out: Vec<Vec<Stroke>> = Vec::with_capacity(spec.classes);
    for c in 0..spec.classes {
        if c % 2 == 1 {
            let mut s = out[c - 1].clone();
            let last = s.len() - 1;
            s[last] = Stroke::random(&mut rng, side);
            out.push(s);
        } else {
            out.push((0..spec.strokes).map(|_| Stroke::random(&mut rng, side)).collect());
        }
    }
    out
}

fn sample(
    protos: &[Vec<Stroke>],
    spec: &SynthSpec,
    class: usize,
    rng: &mut ChaCha8Rng,
    noise: &Normal<f64>,
) -> Vec<f64> {
    let side = spec.side;
    let mut img = vec![0.0; side * side];
    let dy = rng.gen_range(-1.0..1.0);
    let dx = rng.gen_range(-1.0..1.0);
    let gain = rng.gen_range(0.7..1.3);
    let mix = rng.gen_range(0.0..spec.blend.max(f64::MIN_POSITIVE));
    for s in &protos[class] {
        s.render(&mut img, side, dy, dx, gain * (1.0 - mix));
    }
    for s in &protos[partner(class, spec.classes)] {
        s.render(&mut img, side, dy, dx, gain * mix);
    }
    img.iter()
        .map(|v| {
            let q = (v + noise.sample(rng)).clamp(0.0, 1.0);
            (q * 255.0).round() / 255.0
        })
        .collect()
}

fn build(spec: &SynthSpec, protos: &[Vec<Stroke>], n: usize, split: Split) -> Result<Dataset> {
    let mut rng = seed::stream(spec.seed, Purpose::Synth, 1 + split as u64);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::config(e.to_string()))?;
    let mut images = Vec::with_capacity(n * spec.side * spec.side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // balanced classes
        let class = i % spec.classes;
        images.extend(sample(protos, spec, class, &mut rng, &noise));
        let flip = split == Split::Train && rng.gen_bool(spec.label_noise);
        labels.push(if flip { partner(class, spec.classes) } else { class });
    }
    let shape = ImageShape {
        channels: 1,
        height: spec.side,
        width: spec.side,
    };
    Dataset::new(images, labels, shape, split)
}

/// Generates the train and test splits.
pub fn generate(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 || spec.classes > 256 || spec.side < 4 || spec.strokes == 0 {
        return Err(Error::config(format!("unsupported synthetic corpus {spec:?}")));
    }
    if spec.n_train == 0 || spec.n_test == 0 {
        return Err(Error::config("synthetic splits need at least one sample"));
    }
    if !(0.0..=1.0).contains(&spec.label_noise) || !(0.0..1.0).contains(&spec.blend) {
        return Err(Error::config("label_noise must lie in [0, 1] and blend in [0, 1)"));
    }
    let protos = prototypes(spec);
    Ok((
        build(spec, &protos, spec.n_train, Split::Train)?,
        build(spec, &protos, spec.n_test, Split::Test)?,
    ))
}
