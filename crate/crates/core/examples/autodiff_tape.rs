//! Reverse-mode differentiation on a hand-built graph, checked against
//! central differences.
//!
//! cargo run --example autodiff_tape

use nkd::numkit::{finite_diff_grad, max_relative_error, PoolKind, TapeGraph};

fn loss_and_grad(kernel: &[f64]) -> (f64, Vec<f64>) {
    let image: Vec<f64> = (0..32).map(|i| ((i * 7) % 11) as f64 / 10.0 - 0.5).collect();
    let mut g = TapeGraph::new();
    let x = g.leaf(image, vec![2, 1, 4, 4]).unwrap();
    let k = g.param(0, kernel.to_vec(), vec![3, 1, 3, 3]).unwrap();
    let b = g.param(1, vec![0.0; 3], vec![3]).unwrap();
    let c = g.conv3x3(x, k, b).unwrap();
    let r = g.relu(c);
    let p = g.pool2x2(r, PoolKind::Avg).unwrap();
    let logits = g.global_avg_pool(p).unwrap();
    let loss = g.softmax_cross_entropy(logits, &[0, 2]).unwrap();
    let grads = g.backward(loss, 1.0).unwrap();
    (g.value(loss)[0], grads.get_or_zero(k, kernel.len()))
}

fn main() {
    let kernel: Vec<f64> = (0..27).map(|i| ((i * 5) % 9) as f64 / 9.0 - 0.4).collect();
    let (loss, analytic) = loss_and_grad(&kernel);
    let numeric = finite_diff_grad(|k| loss_and_grad(k).0, &kernel, 1e-5);
    println!("loss {loss:.6}");
    println!("max relative error over {} kernel weights: {:.2e}", kernel.len(), max_relative_error(&analytic, &numeric));
}
