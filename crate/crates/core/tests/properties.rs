//! Randomized invariants of the numerical kernels, losses and label builder.

use nkd::kd::{ce_loss, kd_decomposed, kd_loss, nkd_from_logits, nkd_loss, total_kd_objective, KdConfig};
use nkd::numkit::{
    finite_diff_grad, max_relative_error, nontarget_renormalize, softmax_stable, LogitVector, NodeId, PoolKind,
    ProbVector, TapeGraph,
};
use nkd::uskd::{nontarget_rank_from_logits, rank_scores, zipf_distribution, RankVariant};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn logits(c: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-5.0f64..5.0, c)
}

fn softmax(z: &[f64]) -> ProbVector {
    softmax_stable(&LogitVector::new(z.to_vec()).unwrap(), 1.0).unwrap()
}

fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    -p.iter().zip(q).map(|(a, b)| a * b.ln()).sum::<f64>()
}

proptest! {
    #[test]
    fn softmax_sums_to_one_at_any_magnitude(z in proptest::collection::vec(-1e3f64..1e3, 2..40), t in 0.1f64..10.0) {
        let p = softmax_stable(&LogitVector::new(z.clone()).unwrap(), t).unwrap();
        prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
        let q = softmax_stable(&LogitVector::new(scaled).unwrap(), 1.0).unwrap();
        for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn renormalized_nontarget_mass(z in logits(12), t in 0usize..12) {
        let p = softmax(&z);
        let n = nontarget_renormalize(&p, t).unwrap();
        prop_assert!((n.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (k, i) in (0..12).filter(|&i| i != t).enumerate() {
            prop_assert!((n[k] - p[i] / (1.0 - p[t])).abs() <= 1e-12);
        }
    }

    #[test]
    fn kd_splits_into_target_and_nontarget(c in prop_oneof![Just(3usize), Just(10), Just(100)], seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || softmax(&(0..c).map(|_| rng.gen_range(-4.0..4.0)).collect::<Vec<_>>());
        let (teacher, student) = (draw(), draw());
        let t = (seed % c as u64) as usize;
        let (a, b) = kd_decomposed(&teacher, &student, t).unwrap();
        prop_assert!((a + b - kd_loss(&teacher, &student).unwrap().value).abs() <= 1e-12);
    }

    #[test]
    fn nontarget_cross_entropy_is_minimized_at_teacher(tz in logits(8), sz in logits(8), t in 0usize..8) {
        let nt = nontarget_renormalize(&softmax(&tz), t).unwrap();
        let ns = nontarget_renormalize(&softmax(&sz), t).unwrap();
        let entropy = cross_entropy(nt.as_slice(), nt.as_slice());
        prop_assert!(cross_entropy(nt.as_slice(), ns.as_slice()) >= entropy - 1e-9);
    }

    #[test]
    fn matched_nontarget_distribution_has_no_nontarget_gradient(
        z in logits(9), shift in -3.0f64..3.0, t in 0usize..9, lambda in 0.5f64..4.0
    ) {
        // same non-target logits, different target logit
        let mut student = z.clone();
        student[t] += shift;
        let cfg = KdConfig { gamma: 1.5, lambda, ..KdConfig::default() };
        let (r, parts) = nkd_from_logits(&z, &student, t, &cfg);
        let ce_only = nkd_from_logits(&z, &student, t, &KdConfig { gamma: 0.0, ..cfg }).0;
        for i in (0..9).filter(|&i| i != t) {
            let nontarget_part = r.grad_student_logits[i] - ce_only.grad_student_logits[i];
            prop_assert!(nontarget_part.abs() <= 1e-9, "class {i}: {nontarget_part}");
        }
        prop_assert!(parts.nontarget.is_finite());
    }

    #[test]
    fn kd_objective_is_ce_plus_nkd(tz in logits(6), sz in logits(6), t in 0usize..6, v in 0.5f64..1.0) {
        let (teacher, student) = (softmax(&tz), softmax(&sz));
        let zl = LogitVector::new(sz).unwrap();
        let cfg = KdConfig::default();
        let total = total_kd_objective(&student, &teacher, &zl, t, v, &cfg).unwrap();
        let ce = ce_loss(&student, t, v).unwrap();
        let nkd = nkd_loss(&teacher, &student, &zl, t, &cfg).unwrap();
        prop_assert!((total.value - ce.value - nkd.value).abs() <= 1e-12);
    }

    #[test]
    fn fused_rank_terms_are_each_normalized(wz in logits(10), sz in logits(10), t in 0usize..10) {
        let (w, s) = (softmax(&wz), softmax(&sz));
        let r = rank_scores(&w, &s, t, RankVariant::CombinedNormalized).unwrap();
        prop_assert!((r.iter().sum::<f64>() - 2.0).abs() <= 1e-12);
        let weak_part: f64 = (0..10).filter(|&i| i != t).map(|i| w[i] / (1.0 - w[t])).sum();
        prop_assert!((weak_part - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn rank_is_precision_independent(wz in logits(10), sz in logits(10), t in 0usize..10) {
        // round through f32 so both precisions see the same inputs
        let wz: Vec<f64> = wz.iter().map(|&v| v as f32 as f64).collect();
        let sz: Vec<f64> = sz.iter().map(|&v| v as f32 as f64).collect();
        let a = nontarget_rank_from_logits(&wz, &sz, t, RankVariant::CombinedNormalized);
        prop_assert_eq!(a, rank_f32(&wz, &sz, t));
    }
}

/// Single-precision reference of the combined normalized rank.
fn rank_f32(wz: &[f64], sz: &[f64], t: usize) -> Vec<usize> {
    let norm = |z: &[f64]| -> Vec<f32> {
        let m = z.iter().enumerate().filter(|&(i, _)| i != t).map(|(_, &v)| v as f32).fold(f32::MIN, f32::max);
        let e: Vec<f32> = z.iter().map(|&v| (v as f32 - m).exp()).collect();
        let sum: f32 = e.iter().enumerate().filter(|&(i, _)| i != t).map(|(_, v)| v).sum();
        e.iter().map(|v| v / sum).collect()
    };
    let (w, s) = (norm(wz), norm(sz));
    let mut classes: Vec<usize> = (0..wz.len()).filter(|&i| i != t).collect();
    classes.sort_by(|&a, &b| (w[b] + s[b]).total_cmp(&(w[a] + s[a])).then(a.cmp(&b)));
    classes
}

#[test]
fn rank_ties_break_by_class_index() {
    let z = [0.5, 0.5, 2.0, 0.5, 0.5];
    assert_eq!(nontarget_rank_from_logits(&z, &z, 2, RankVariant::CombinedNormalized), vec![0, 1, 3, 4]);
}

#[test]
fn zipf_is_a_decreasing_distribution_up_to_ten_thousand() {
    for n in (1..=10_000).step_by(37).chain([10_000]) {
        let z = zipf_distribution(n).unwrap();
        assert!((z.iter().sum::<f64>() - 1.0).abs() <= 1e-12, "n = {n}");
        assert!(z.windows(2).all(|w| w[0] > w[1]), "n = {n}");
    }
}

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Values at least 0.1 from zero, so relu has no kink within the step.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.1..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

/// Distinct values 0.01 apart, so max pooling has no ties within the step.
fn distinct(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    v.shuffle(rng);
    v
}

type Build = fn(&mut TapeGraph, &[NodeId]) -> NodeId;

struct OpCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    inputs: fn(&mut ChaCha8Rng, usize) -> Vec<f64>,
    build: Build,
}

/// `sum(r * op(params))` and its gradient with respect to every parameter.
fn readout(case: &OpCase, values: &[Vec<f64>], r_seed: u64) -> (f64, Vec<Vec<f64>>) {
    let mut g = TapeGraph::new();
    let ids: Vec<NodeId> = values
        .iter()
        .zip(&case.shapes)
        .enumerate()
        .map(|(k, (v, s))| g.param(k, v.clone(), s.clone()).unwrap())
        .collect();
    let out = (case.build)(&mut g, &ids);
    let len = g.value(out).len();
    let shape = g.shape(out).to_vec();
    let r = g.leaf(random(&mut ChaCha8Rng::seed_from_u64(r_seed), len), shape).unwrap();
    let prod = g.mul(out, r).unwrap();
    let s = g.sum(prod);
    let grads = g.backward(s, 1.0).unwrap();
    let per_param = ids.iter().zip(values).map(|(&id, v)| grads.get_or_zero(id, v.len())).collect();
    (g.value(s)[0], per_param)
}

#[test]
fn every_primitive_matches_finite_differences_on_100_seeds() {
    let cases = vec![
        OpCase { name: "affine", shapes: vec![vec![3, 4], vec![2, 4], vec![2]], inputs: random, build: |g, p| g.affine(p[0], p[1], p[2]).unwrap() },
        OpCase { name: "conv3x3", shapes: vec![vec![1, 2, 4, 5], vec![3, 2, 3, 3], vec![3]], inputs: random, build: |g, p| g.conv3x3(p[0], p[1], p[2]).unwrap() },
        OpCase { name: "relu", shapes: vec![vec![2, 7]], inputs: away_from_zero, build: |g, p| g.relu(p[0]) },
        OpCase { name: "max_pool", shapes: vec![vec![2, 2, 4, 4]], inputs: distinct, build: |g, p| g.pool2x2(p[0], PoolKind::Max).unwrap() },
        OpCase { name: "avg_pool", shapes: vec![vec![2, 2, 4, 4]], inputs: random, build: |g, p| g.pool2x2(p[0], PoolKind::Avg).unwrap() },
        OpCase { name: "global_avg_pool", shapes: vec![vec![2, 3, 2, 3]], inputs: random, build: |g, p| g.global_avg_pool(p[0]).unwrap() },
        OpCase { name: "flatten", shapes: vec![vec![2, 2, 2, 2]], inputs: random, build: |g, p| g.flatten(p[0]).unwrap() },
        OpCase { name: "mul", shapes: vec![vec![6], vec![6]], inputs: random, build: |g, p| g.mul(p[0], p[1]).unwrap() },
        OpCase { name: "sum", shapes: vec![vec![5]], inputs: random, build: |g, p| g.sum(p[0]) },
        OpCase { name: "softmax_cross_entropy", shapes: vec![vec![3, 5]], inputs: random, build: |g, p| g.softmax_cross_entropy(p[0], &[0, 4, 2]).unwrap() },
    ];
    for case in &cases {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<Vec<f64>> = case.shapes.iter().map(|s| (case.inputs)(&mut rng, s.iter().product())).collect();
            let (_, analytic) = readout(case, &values, seed + 1000);
            for k in 0..values.len() {
                let numeric = finite_diff_grad(
                    |x| {
                        let mut v = values.clone();
                        v[k] = x.to_vec();
                        readout(case, &v, seed + 1000).0
                    },
                    &values[k],
                    1e-5,
                );
                let err = max_relative_error(&analytic[k], &numeric);
                assert!(err < 1e-4, "{} seed {seed} input {k}: {err:e}", case.name);
            }
        }
    }
}
