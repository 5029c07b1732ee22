//! Writes the synthetic corpus as IDX files, reads it back and prints the
//! class balance. Any MNIST-style IDX pair loads the same way.
//!
//! cargo run --example idx_corpus -- [out_dir]

use std::path::PathBuf;

use nkd::data::synth::{generate, SynthSpec};
use nkd::data::{load_idx, write_idx, Split};

fn main() -> nkd::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/idx".into()));
    std::fs::create_dir_all(&dir)?;
    let (train, test) = generate(&SynthSpec::default())?;
    for (name, d) in [("train", &train), ("test", &test)] {
        let images = dir.join(format!("{name}-images.idx"));
        let labels = dir.join(format!("{name}-labels.idx"));
        write_idx(d, &images, &labels)?;
        let back = load_idx(&images, &labels, Split::Test)?;
        assert_eq!(back.images, d.images);
        let mut counts = vec![0usize; back.num_classes()];
        back.labels.iter().for_each(|&l| counts[l] += 1);
        println!("{name}: {} images of {:?}, per class {counts:?} -> {}", back.len(), back.shape, images.display());
    }
    Ok(())
}
