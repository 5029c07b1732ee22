//! Builds a CNN with a weak head, runs a forward pass, saves it and checks
//! that the reloaded network produces the same logits.
//!
//! cargo run --example checkpoint_roundtrip

use nkd::data::{ImageShape, Normalization};
use nkd::nets::{decode_checkpoint, encode_checkpoint, forward_with_tap, init_params, Checkpoint, NetSpec};

fn main() -> nkd::Result<()> {
    let shape = ImageShape { channels: 1, height: 8, width: 8 };
    let spec = NetSpec::cnn2stage(shape, [4, 8], 10, true);
    let params = init_params(&spec, 42);
    let input: Vec<f64> = (0..2 * 64).map(|i| (i % 13) as f64 / 13.0).collect();
    let before = forward_with_tap(&spec, &params, &input, 2, true)?;

    let ck = Checkpoint { spec, params, normalization: Normalization::identity(1) };
    let bytes = encode_checkpoint(&ck)?;
    println!("{} parameters in {} tensors, {} bytes, header {:?}", ck.params.total_len(), ck.params.len(), bytes.len(), &bytes[..4]);
    for p in &ck.params.params {
        println!("  {:<16} {:?}", p.name, p.shape);
    }

    let back = decode_checkpoint(&bytes)?;
    let after = forward_with_tap(&back.spec, &back.params, &input, 2, true)?;
    assert_eq!(before.logits(), after.logits());
    assert_eq!(before.weak(), after.weak());
    println!("logits identical after reload: {:?}", &after.logits()[..4]);
    Ok(())
}
