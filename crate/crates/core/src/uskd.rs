//! Teacher-free customized soft labels and the self-distillation objective.
//!
//! Per batch, the student's own target probabilities are squared and
//! mean-shifted into a soft target weight `P_t`; the non-target classes
//! are ranked by a fused score of a weakly supervised auxiliary head and
//! the final head, and Zipf values are dealt out by that rank. Both label
//! parts are constants for the optimizer.

use serde::{Deserialize, Serialize};

use crate::data::smooth_labels;
use crate::error::{Error, Result};
use crate::kd::{ce_from_logits, ce_loss, LossResult};
use crate::numkit::{
    log_softmax_scaled, nontarget_indices, nontarget_log_softmax, nontarget_renormalize,
    nontarget_softmax, softmax_scaled, ProbVector, DEGENERATE_EPS,
};

/// How the soft target weight is derived from the batch of target probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothVariant {
    /// `S_t^2 + V_t - mean(S_t^2)`.
    #[default]
    SqMeanShift,
    /// `S_t + V_t - mean(S_t)`, the unsquared form.
    MeanShift,
    /// `softmax(S_t) * sum(V_t)`, softmax taken across the batch.
    SoftmaxRescale,
    /// `sqrt(S_t - min(S_t))`.
    SqrtMinShift,
    /// `S_t / max(S_t)`.
    MaxDiv,
    /// `S_t / mean(S_t)`.
    MeanDiv,
    /// An external model's target probability used as is.
    TeacherPassthrough,
}

/// Score used to order the non-target classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankVariant {
    WeakOnly,
    FinalOnly,
    /// `W_i + S_i`.
    CombinedRaw,
    /// `W_i / (1 - W_t) + S_i / (1 - S_t)`.
    #[default]
    CombinedNormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UskdConfig {
    /// Weight of the soft-target loss.
    pub alpha: f64,
    /// Weight of the Zipf non-target loss.
    pub beta: f64,
    /// Weak-supervision strength of the auxiliary head.
    pub mu: f64,
    pub smooth_variant: SmoothVariant,
    pub rank_variant: RankVariant,
    /// Label smoothing applied to the auxiliary head's targets.
    pub ls_epsilon: f64,
    /// Stop the auxiliary loss at the feature tap so it trains only the head.
    pub stop_weak_grad: bool,
}

impl Default for UskdConfig {
    fn default() -> Self {
        UskdConfig {
            alpha: 1.0,
            beta: 0.1,
            mu: 0.005,
            smooth_variant: SmoothVariant::SqMeanShift,
            rank_variant: RankVariant::CombinedNormalized,
            ls_epsilon: 0.1,
            stop_weak_grad: true,
        }
    }
}

impl UskdConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(Error::config(format!("mu must lie in (0, 1], got {}", self.mu)));
        }
        if !(0.0..1.0).contains(&self.ls_epsilon) {
            return Err(Error::config(format!(
                "ls_epsilon must lie in [0, 1), got {}",
                self.ls_epsilon
            )));
        }
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Batch-level soft target weights `P_t`.
///
/// `s_t` holds each sample's target probability (the external model's for
/// [`SmoothVariant::TeacherPassthrough`]) and `v_t` the hard label value.
pub fn soft_target_label(s_t: &[f64], v_t: &[f64], variant: SmoothVariant) -> Result<Vec<f64>> {
    if s_t.is_empty() {
        return Err(Error::usage("soft target labels need a non-empty batch"));
    }
    if s_t.len() != v_t.len() {
        return Err(Error::usage(format!(
            "batch of {} target probabilities with {} label values",
            s_t.len(),
            v_t.len()
        )));
    }
    if s_t.iter().any(|s| !s.is_finite()) || v_t.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("soft target inputs"));
    }
    let out = match variant {
        SmoothVariant::SqMeanShift => {
            let sq: Vec<f64> = s_t.iter().map(|s| s * s).collect();
            let m = mean(&sq);
            sq.iter().zip(v_t).map(|(s, v)| s + v - m).collect()
        }
        SmoothVariant::MeanShift => {
            let m = mean(s_t);
            s_t.iter().zip(v_t).map(|(s, v)| s + v - m).collect()
        }
        SmoothVariant::SoftmaxRescale => {
            let total: f64 = v_t.iter().sum();
            softmax_scaled(s_t, 1.0).into_iter().map(|p| p * total).collect()
        }
        SmoothVariant::SqrtMinShift => {
            let min = s_t.iter().copied().fold(f64::INFINITY, f64::min);
            s_t.iter().map(|s| (s - min).sqrt()).collect()
        }
        SmoothVariant::MaxDiv => {
            let max = s_t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            s_t.iter().map(|s| s / max).collect()
        }
        SmoothVariant::MeanDiv => {
            let m = mean(s_t);
            s_t.iter().map(|s| s / m).collect()
        }
        SmoothVariant::TeacherPassthrough => s_t.to_vec(),
    };
    Ok(out)
}

/// `-P_t ln S_t`; gradient flows only through the student.
pub fn target_loss(p_target: f64, student: &ProbVector, target: usize) -> Result<LossResult> {
    ce_loss(student, target, p_target)
}

/// Whether the weak head reads a spatial map (pooled first) or a token vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeakMode {
    CnnGap,
    VitToken,
}

/// Auxiliary linear classifier on an intermediate feature.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakHead {
    /// Row-major `[classes, dim]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl WeakHead {
    pub fn new(weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if bias.is_empty() || !weight.len().is_multiple_of(bias.len()) || weight.is_empty() {
            return Err(Error::usage(format!(
                "weak head weight of {} values does not match {} classes",
                weight.len(),
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("weak head parameters"));
        }
        Ok(WeakHead { weight, bias })
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.weight.len() / self.bias.len()
    }

    pub fn logits(&self, pooled: &[f64]) -> Vec<f64> {
        let d = self.dim();
        self.bias
            .iter()
            .enumerate()
            .map(|(c, b)| b + self.weight[c * d..(c + 1) * d].iter().zip(pooled).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }
}

/// Weak-head class distribution for a single sample.
///
/// `shape` is `[D, H, W]` for [`WeakMode::CnnGap`] and `[D]` for
/// [`WeakMode::VitToken`].
pub fn weak_logit(feature: &[f64], shape: &[usize], head: &WeakHead, mode: WeakMode) -> Result<ProbVector> {
    let pooled = match (mode, shape) {
        (WeakMode::CnnGap, &[d, h, w]) if d * h * w == feature.len() && h * w > 0 => feature
            .chunks_exact(h * w)
            .map(|plane| plane.iter().sum::<f64>() / (h * w) as f64)
            .collect::<Vec<_>>(),
        (WeakMode::VitToken, &[d]) if d == feature.len() => feature.to_vec(),
        _ => {
            return Err(Error::usage(format!(
                "feature of shape {shape:?} ({} values) unsuitable for {mode:?}",
                feature.len()
            )))
        }
    };
    if pooled.len() != head.dim() {
        return Err(Error::usage(format!(
            "feature width {} does not match weak head width {}",
            pooled.len(),
            head.dim()
        )));
    }
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("weak feature"));
    }
    ProbVector::new(softmax_scaled(&head.logits(&pooled), 1.0))
}

/// `mu * CE(labels, W)`. The gradient is with respect to the weak-head logits.
pub fn weak_loss(weak: &ProbVector, smoothed_labels: &[f64], mu: f64) -> Result<LossResult> {
    if smoothed_labels.len() != weak.len() {
        return Err(Error::usage(format!(
            "{} label values for {} classes",
            smoothed_labels.len(),
            weak.len()
        )));
    }
    if !(mu > 0.0 && mu <= 1.0) {
        return Err(Error::usage(format!("mu must lie in (0, 1], got {mu}")));
    }
    let mut value = 0.0;
    let mut clamped = false;
    for (&v, &w) in smoothed_labels.iter().zip(weak.as_slice()) {
        if v != 0.0 {
            let (l, c) = crate::numkit::floored_ln(w);
            value -= v * l;
            clamped |= c;
        }
    }
    let mass: f64 = smoothed_labels.iter().sum();
    let grad = weak
        .as_slice()
        .iter()
        .zip(smoothed_labels)
        .map(|(w, v)| mu * (w * mass - v))
        .collect();
    Ok(LossResult {
        value: mu * value,
        grad_student_logits: grad,
        clamped,
    })
}

fn weak_loss_from_logits(weak_logits: &[f64], labels: &[f64], mu: f64) -> LossResult {
    let logw = log_softmax_scaled(weak_logits, 1.0);
    let mass: f64 = labels.iter().sum();
    LossResult {
        value: -mu * labels.iter().zip(&logw).map(|(v, l)| v * l).sum::<f64>(),
        grad_student_logits: logw
            .iter()
            .zip(labels)
            .map(|(l, v)| mu * (l.exp() * mass - v))
            .collect(),
        clamped: false,
    }
}

/// Sorts indices by descending score, ties broken by ascending index.
fn argsort_desc(classes: &[usize], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = classes.iter().copied().zip(scores.iter().copied()).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.into_iter().map(|(c, _)| c).collect()
}

/// Fused rank score per non-target class, in ascending class order.
pub fn rank_scores(weak: &ProbVector, student: &ProbVector, target: usize, variant: RankVariant) -> Result<Vec<f64>> {
    if weak.len() != student.len() {
        return Err(Error::usage(format!(
            "class count mismatch: {} vs {}",
            weak.len(),
            student.len()
        )));
    }
    if target >= student.len() {
        return Err(Error::usage(format!("target {target} out of range")));
    }
    let raw = |p: &ProbVector| -> Vec<f64> { nontarget_indices(p.len(), target).map(|i| p[i]).collect() };
    let scores = match variant {
        RankVariant::WeakOnly => {
            check_nondegenerate(weak, target)?;
            raw(weak)
        }
        RankVariant::FinalOnly => {
            check_nondegenerate(student, target)?;
            raw(student)
        }
        RankVariant::CombinedRaw => {
            check_nondegenerate(weak, target)?;
            check_nondegenerate(student, target)?;
            raw(weak).iter().zip(raw(student)).map(|(a, b)| a + b).collect()
        }
        RankVariant::CombinedNormalized => {
            let w = nontarget_renormalize(weak, target)?;
            let s = nontarget_renormalize(student, target)?;
            w.as_slice().iter().zip(s.as_slice()).map(|(a, b)| a + b).collect()
        }
    };
    Ok(scores)
}

fn check_nondegenerate(p: &ProbVector, target: usize) -> Result<()> {
    if p[target] >= 1.0 - DEGENERATE_EPS {
        return Err(Error::DegenerateTarget {
            target,
            mass: p[target],
        });
    }
    Ok(())
}

/// Non-target classes ordered by descending fused score.
pub fn nontarget_rank(weak: &ProbVector, student: &ProbVector, target: usize, variant: RankVariant) -> Result<Vec<usize>> {
    let scores = rank_scores(weak, student, target, variant)?;
    let classes: Vec<usize> = nontarget_indices(student.len(), target).collect();
    Ok(argsort_desc(&classes, &scores))
}

/// [`nontarget_rank`] computed from logits; never degenerate.
pub fn nontarget_rank_from_logits(
    weak_logits: &[f64],
    student_logits: &[f64],
    target: usize,
    variant: RankVariant,
) -> Vec<usize> {
    let classes: Vec<usize> = nontarget_indices(student_logits.len(), target).collect();
    let raw = |z: &[f64]| -> Vec<f64> {
        let p = softmax_scaled(z, 1.0);
        classes.iter().map(|&i| p[i]).collect()
    };
    let scores: Vec<f64> = match variant {
        RankVariant::WeakOnly => raw(weak_logits),
        RankVariant::FinalOnly => raw(student_logits),
        RankVariant::CombinedRaw => raw(weak_logits)
            .iter()
            .zip(raw(student_logits))
            .map(|(a, b)| a + b)
            .collect(),
        RankVariant::CombinedNormalized => nontarget_softmax(weak_logits, target, 1.0)
            .iter()
            .zip(nontarget_softmax(student_logits, target, 1.0))
            .map(|(a, b)| a + b)
            .collect(),
    };
    argsort_desc(&classes, &scores)
}

/// Zipf weights `(1/k) / H_n` for ranks `k = 1..=n`.
pub fn zipf_distribution(n_ranks: usize) -> Result<Vec<f64>> {
    if n_ranks == 0 {
        return Err(Error::usage("Zipf distribution needs at least one rank"));
    }
    let raw: Vec<f64> = (1..=n_ranks).map(|k| 1.0 / k as f64).collect();
    // sum smallest terms first
    let harmonic: f64 = raw.iter().rev().sum();
    Ok(raw.into_iter().map(|v| v / harmonic).collect())
}

/// Per-sample customized label.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelSet {
    pub p_target: f64,
    /// Zipf value of each non-target class, ascending class order.
    pub z_nontarget: Vec<f64>,
    /// Non-target classes, highest rank first.
    pub rank_order: Vec<usize>,
}

impl SoftLabelSet {
    /// Deals Zipf values over `C - 1` ranks to the classes in `rank_order`.
    pub fn from_rank(p_target: f64, rank_order: Vec<usize>, target: usize, classes: usize) -> Result<Self> {
        let zipf = zipf_distribution(classes.saturating_sub(1).max(1))?;
        Ok(Self::with_zipf(p_target, rank_order, target, classes, &zipf))
    }

    fn with_zipf(p_target: f64, rank_order: Vec<usize>, target: usize, classes: usize, zipf: &[f64]) -> Self {
        let mut by_class = vec![0.0; classes];
        for (z, &c) in zipf.iter().zip(&rank_order) {
            by_class[c] = *z;
        }
        let z_nontarget = nontarget_indices(classes, target).map(|i| by_class[i]).collect();
        SoftLabelSet {
            p_target,
            z_nontarget,
            rank_order,
        }
    }
}

/// `CE(N(Z), N(S))` over the non-target classes. `z_assigned` is in
/// ascending non-target class order and is treated as a constant.
pub fn uskd_nontarget_loss(
    z_assigned: &[f64],
    student: &ProbVector,
    student_logits: &[f64],
    target: usize,
) -> Result<LossResult> {
    nontarget_renormalize(student, target)?;
    if student_logits.len() != student.len() {
        return Err(Error::usage("student logits and probabilities differ in length"));
    }
    nontarget_loss_from_logits(z_assigned, student_logits, target)
}

fn nontarget_loss_from_logits(z_assigned: &[f64], student_logits: &[f64], target: usize) -> Result<LossResult> {
    let classes = student_logits.len();
    if z_assigned.len() + 1 != classes {
        return Err(Error::usage(format!(
            "{} Zipf values for {} classes",
            z_assigned.len(),
            classes
        )));
    }
    let z_mass: f64 = z_assigned.iter().sum();
    if !(z_mass > 0.0) {
        return Err(Error::usage("Zipf labels carry no mass"));
    }
    let log_ns = nontarget_log_softmax(student_logits, target, 1.0);
    let mut grad = vec![0.0; classes];
    let mut value = 0.0;
    for ((i, &z), &l) in nontarget_indices(classes, target).zip(z_assigned).zip(&log_ns) {
        let nz = z / z_mass;
        value -= nz * l;
        grad[i] = l.exp() - nz;
    }
    Ok(LossResult {
        value,
        grad_student_logits: grad,
        clamped: false,
    })
}

/// Raw (unweighted) loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UskdComponents {
    pub l_ori: f64,
    pub l_target: f64,
    pub l_non: f64,
    /// Already includes the `mu` factor.
    pub l_weak: f64,
}

impl UskdComponents {
    /// `L_ori + alpha * L_target + beta * L_non + L_weak`.
    pub fn total(&self, cfg: &UskdConfig) -> f64 {
        self.l_ori + cfg.alpha * self.l_target + cfg.beta * self.l_non + self.l_weak
    }
}

/// Everything needed to evaluate one sample once the batch-level labels exist.
#[derive(Debug, Clone)]
pub struct UskdSampleState<'a> {
    pub student_logits: &'a [f64],
    pub weak_logits: &'a [f64],
    pub target: usize,
    pub v_t: f64,
    pub labels: &'a SoftLabelSet,
}

/// One sample's objective with its gradient split by destination.
#[derive(Debug, Clone, PartialEq)]
pub struct UskdLoss {
    /// Value and gradient for the student (backbone) logits.
    pub student: LossResult,
    /// Gradient for the weak-head logits; only `L_weak` contributes.
    pub grad_weak_logits: Vec<f64>,
    pub components: UskdComponents,
}

impl UskdLoss {
    pub fn value(&self) -> f64 {
        self.student.value
    }
}

/// Single-sample objective with `P_t` and `Z` held fixed.
pub fn uskd_total_loss(state: &UskdSampleState<'_>, cfg: &UskdConfig) -> Result<UskdLoss> {
    let classes = state.student_logits.len();
    if state.weak_logits.len() != classes {
        return Err(Error::usage("weak and final heads disagree on class count"));
    }
    if state.target >= classes {
        return Err(Error::usage(format!("target {} out of range", state.target)));
    }
    // both terms are -w ln S_t; share one softmax
    let ce = ce_from_logits(state.student_logits, state.target, 1.0);
    let non = nontarget_loss_from_logits(&state.labels.z_nontarget, state.student_logits, state.target)?;
    let weak_labels = smooth_labels(state.target, classes, cfg.ls_epsilon);
    let weak = weak_loss_from_logits(state.weak_logits, &weak_labels, cfg.mu);

    let components = UskdComponents {
        l_ori: state.v_t * ce.value,
        l_target: state.labels.p_target * ce.value,
        l_non: non.value,
        l_weak: weak.value,
    };
    let mut student = LossResult::zero(classes);
    student.add_scaled(&ce, state.v_t + cfg.alpha * state.labels.p_target);
    student.add_scaled(&non, cfg.beta);
    student.value += weak.value;
    Ok(UskdLoss {
        student,
        grad_weak_logits: weak.grad_student_logits,
        components,
    })
}

/// Builds the batch's soft labels from detached student and weak outputs.
///
/// `external_target_probs` feeds [`SmoothVariant::TeacherPassthrough`].
pub fn build_soft_labels(
    student_logits: &[Vec<f64>],
    weak_logits: &[Vec<f64>],
    targets: &[usize],
    v_t: &[f64],
    cfg: &UskdConfig,
    external_target_probs: Option<&[f64]>,
) -> Result<Vec<SoftLabelSet>> {
    let batch = student_logits.len();
    if batch == 0 || weak_logits.len() != batch || targets.len() != batch || v_t.len() != batch {
        return Err(Error::usage("inconsistent or empty self-distillation batch"));
    }
    let s_t: Vec<f64> = match (cfg.smooth_variant, external_target_probs) {
        (SmoothVariant::TeacherPassthrough, Some(p)) if p.len() == batch => p.to_vec(),
        (SmoothVariant::TeacherPassthrough, _) => {
            return Err(Error::usage(
                "teacher_passthrough smoothing needs one external target probability per sample",
            ))
        }
        _ => student_logits
            .iter()
            .zip(targets)
            .map(|(z, &t)| softmax_scaled(z, 1.0)[t])
            .collect(),
    };
    let p_t = soft_target_label(&s_t, v_t, cfg.smooth_variant)?;
    let classes = student_logits[0].len();
    let zipf = zipf_distribution(classes.saturating_sub(1).max(1))?;
    student_logits
        .iter()
        .zip(weak_logits)
        .zip(targets)
        .zip(p_t)
        .map(|(((z, w), &t), p)| {
            let order = nontarget_rank_from_logits(w, z, t, cfg.rank_variant);
            if z.len() != classes {
                return Err(Error::usage("rows of the batch disagree on class count"));
            }
            Ok(SoftLabelSet::with_zipf(p, order, t, classes, &zipf))
        })
        .collect()
}

/// Batch-mean objective and per-sample gradients of that mean.
#[derive(Debug, Clone)]
pub struct UskdBatchLoss {
    pub value: f64,
    pub components: UskdComponents,
    pub grad_student_logits: Vec<Vec<f64>>,
    pub grad_weak_logits: Vec<Vec<f64>>,
    pub labels: Vec<SoftLabelSet>,
}

pub fn uskd_batch_loss(
    student_logits: &[Vec<f64>],
    weak_logits: &[Vec<f64>],
    targets: &[usize],
    v_t: &[f64],
    cfg: &UskdConfig,
    external_target_probs: Option<&[f64]>,
) -> Result<UskdBatchLoss> {
    cfg.validate()?;
    let labels = build_soft_labels(student_logits, weak_logits, targets, v_t, cfg, external_target_probs)?;
    let batch = labels.len();
    let inv = 1.0 / batch as f64;
    let mut out = UskdBatchLoss {
        value: 0.0,
        components: UskdComponents::default(),
        grad_student_logits: Vec::with_capacity(batch),
        grad_weak_logits: Vec::with_capacity(batch),
        labels: Vec::new(),
    };
    for n in 0..batch {
        let state = UskdSampleState {
            student_logits: &student_logits[n],
            weak_logits: &weak_logits[n],
            target: targets[n],
            v_t: v_t[n],
            labels: &labels[n],
        };
        let loss = uskd_total_loss(&state, cfg)?;
        out.value += loss.value();
        out.components.l_ori += loss.components.l_ori;
        out.components.l_target += loss.components.l_target;
        out.components.l_non += loss.components.l_non;
        out.components.l_weak += loss.components.l_weak;
        let (mut gs, mut gw) = (loss.student.grad_student_logits, loss.grad_weak_logits);
        gs.iter_mut().chain(gw.iter_mut()).for_each(|g| *g *= inv);
        out.grad_student_logits.push(gs);
        out.grad_weak_logits.push(gw);
    }
    out.value *= inv;
    out.components.l_ori *= inv;
    out.components.l_target *= inv;
    out.components.l_non *= inv;
    out.components.l_weak *= inv;
    out.labels = labels;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numkit::{finite_diff_grad, max_relative_error};

    fn p(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn soft_target_examples() {
        let r = soft_target_label(&[0.5, 0.5], &[1.0, 1.0], SmoothVariant::SqMeanShift).unwrap();
        assert_eq!(r, vec![1.0, 1.0]);
        let r = soft_target_label(&[0.6, 0.8], &[1.0, 1.0], SmoothVariant::SqMeanShift).unwrap();
        assert!((r[0] - 0.86).abs() < 1e-12 && (r[1] - 1.14).abs() < 1e-12);
    }

    #[test]
    fn soft_target_empty_batch_is_usage_error() {
        assert!(matches!(
            soft_target_label(&[], &[], SmoothVariant::SqMeanShift),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn smoothing_variants() {
        let s = [0.2, 0.4, 0.6];
        let v = [1.0; 3];
        let r = soft_target_label(&s, &v, SmoothVariant::MeanShift).unwrap();
        assert!((r[0] - 0.8).abs() < 1e-12 && (r[2] - 1.2).abs() < 1e-12);
        let r = soft_target_label(&s, &v, SmoothVariant::MaxDiv).unwrap();
        assert!((r[0] - 1.0 / 3.0).abs() < 1e-12 && r[2] == 1.0);
        let r = soft_target_label(&s, &v, SmoothVariant::MeanDiv).unwrap();
        assert!((r[1] - 1.0).abs() < 1e-12);
        let r = soft_target_label(&s, &v, SmoothVariant::SqrtMinShift).unwrap();
        assert!(r[0] == 0.0 && (r[2] - 0.4f64.sqrt()).abs() < 1e-12);
        let r = soft_target_label(&s, &v, SmoothVariant::SoftmaxRescale).unwrap();
        assert!((r.iter().sum::<f64>() - 3.0).abs() < 1e-12);
        let r = soft_target_label(&s, &v, SmoothVariant::TeacherPassthrough).unwrap();
        assert_eq!(r, s.to_vec());
    }

    #[test]
    fn target_loss_examples() {
        assert_eq!(target_loss(1.0, &p(&[1.0, 0.0]), 0).unwrap().value, 0.0);
        let r = target_loss(1.14, &p(&[0.5, 0.5]), 0).unwrap();
        assert!((r.value - 1.14 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn weak_logit_zero_head_is_uniform() {
        let head = WeakHead::new(vec![0.0; 5 * 3], vec![0.0; 5]).unwrap();
        let w = weak_logit(&[0.0; 3 * 2 * 2], &[3, 2, 2], &head, WeakMode::CnnGap).unwrap();
        for &v in w.as_slice() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn weak_logit_identity_head_selects_row() {
        let mut weight = vec![0.0; 3 * 3];
        for i in 0..3 {
            weight[i * 3 + i] = 1.0;
        }
        let head = WeakHead::new(weight, vec![0.0; 3]).unwrap();
        let w = weak_logit(&[0.0, 1.0, 0.0], &[3], &head, WeakMode::VitToken).unwrap();
        let expect = softmax_scaled(&[0.0, 1.0, 0.0], 1.0);
        assert_eq!(w.as_slice(), expect.as_slice());
    }

    #[test]
    fn weak_logit_shape_mismatch() {
        let head = WeakHead::new(vec![0.0; 8], vec![0.0; 2]).unwrap();
        assert!(weak_logit(&[0.0; 3], &[3], &head, WeakMode::VitToken).is_err());
        assert!(weak_logit(&[0.0; 4], &[4], &head, WeakMode::CnnGap).is_err());
    }

    #[test]
    fn weak_logit_matches_matrix_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (d, c, h, w) = (8, 5, 3, 3);
        let feature: Vec<f64> = (0..d * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weight: Vec<f64> = (0..c * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let head = WeakHead::new(weight.clone(), bias.clone()).unwrap();
        let got = weak_logit(&feature, &[d, h, w], &head, WeakMode::CnnGap).unwrap();

        let mut pooled = vec![0.0; d];
        for (k, v) in feature.iter().enumerate() {
            pooled[k / (h * w)] += v / (h * w) as f64;
        }
        let mut z = bias.clone();
        for ci in 0..c {
            for di in 0..d {
                z[ci] += weight[ci * d + di] * pooled[di];
            }
        }
        let zmax = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let sum: f64 = e.iter().sum();
        for (g, ev) in got.as_slice().iter().zip(&e) {
            assert!((g - ev / sum).abs() < 1e-14);
        }
    }

    #[test]
    fn weak_loss_examples() {
        let x = p(&[0.9, 0.1]);
        let r = weak_loss(&x, &[0.9, 0.1], 1.0).unwrap();
        let entropy = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((r.value - entropy).abs() < 1e-15);
        let r = weak_loss(&x, &[0.9, 0.1], 0.1).unwrap();
        assert!((r.value - 0.1 * entropy).abs() < 1e-15);
        let r = weak_loss(&p(&[0.25; 4]), &[1.0, 0.0, 0.0, 0.0], 1.0).unwrap();
        assert!((r.value - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn rank_examples() {
        let s = p(&[0.5, 0.3, 0.2]);
        assert_eq!(nontarget_rank(&s, &s, 0, RankVariant::CombinedNormalized).unwrap(), vec![1, 2]);
        let w = p(&[0.4, 0.35, 0.25]);
        let r = rank_scores(&w, &s, 0, RankVariant::CombinedNormalized).unwrap();
        assert!((r[0] - (0.35 / 0.6 + 0.6)).abs() < 1e-15);
        assert_eq!(nontarget_rank(&w, &s, 0, RankVariant::CombinedNormalized).unwrap(), vec![1, 2]);
        let flat = p(&[0.4, 0.2, 0.2, 0.2]);
        for v in [RankVariant::WeakOnly, RankVariant::FinalOnly, RankVariant::CombinedRaw, RankVariant::CombinedNormalized] {
            assert_eq!(nontarget_rank(&flat, &flat, 0, v).unwrap(), vec![1, 2, 3]);
        }
    }

    #[test]
    fn rank_variants_differ() {
        // weak head prefers class 2, final head prefers class 1
        let w = p(&[0.1, 0.2, 0.7]);
        let s = p(&[0.8, 0.15, 0.05]);
        assert_eq!(nontarget_rank(&w, &s, 0, RankVariant::WeakOnly).unwrap(), vec![2, 1]);
        assert_eq!(nontarget_rank(&w, &s, 0, RankVariant::FinalOnly).unwrap(), vec![1, 2]);
        // raw: 0.35 vs 0.75; normalized: 0.222+0.75 vs 0.778+0.25
        assert_eq!(nontarget_rank(&w, &s, 0, RankVariant::CombinedRaw).unwrap(), vec![2, 1]);
        assert_eq!(nontarget_rank(&w, &s, 0, RankVariant::CombinedNormalized).unwrap(), vec![2, 1]);
    }

    #[test]
    fn rank_degenerate_logit() {
        let s = p(&[1.0, 0.0, 0.0]);
        let w = p(&[0.2, 0.4, 0.4]);
        assert!(matches!(
            nontarget_rank(&w, &s, 0, RankVariant::CombinedNormalized),
            Err(Error::DegenerateTarget { .. })
        ));
        assert!(nontarget_rank(&w, &s, 0, RankVariant::WeakOnly).is_ok());
    }

    #[test]
    fn zipf_examples() {
        assert_eq!(zipf_distribution(1).unwrap(), vec![1.0]);
        let z = zipf_distribution(3).unwrap();
        for (a, b) in z.iter().zip([6.0 / 11.0, 3.0 / 11.0, 2.0 / 11.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let z = zipf_distribution(4).unwrap();
        for (a, b) in z.iter().zip([12.0 / 25.0, 6.0 / 25.0, 4.0 / 25.0, 3.0 / 25.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(zipf_distribution(0).is_err());
    }

    #[test]
    fn soft_label_assignment_follows_rank() {
        let set = SoftLabelSet::from_rank(1.0, vec![3, 0, 2], 1, 4).unwrap();
        // class order 0, 2, 3 -> ranks 2, 3, 1
        let z = zipf_distribution(3).unwrap();
        assert_eq!(set.z_nontarget, vec![z[1], z[2], z[0]]);
    }

    #[test]
    fn nontarget_loss_singleton() {
        let s = p(&[0.7, 0.3]);
        let z = [0.7f64.ln(), 0.3f64.ln()];
        let r = uskd_nontarget_loss(&[1.0], &s, &z, 0).unwrap();
        assert!(r.value.abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn batch_mean_is_preserved(s in proptest::collection::vec(0.001f64..0.999, 1..64), v in 0.5f64..1.0) {
            let vt = vec![v; s.len()];
            let p = soft_target_label(&s, &vt, SmoothVariant::SqMeanShift).unwrap();
            prop_assert!((mean(&p) - v).abs() < 1e-12);
        }

        #[test]
        fn zipf_sums_to_one_and_decreases(n in 1usize..2000) {
            let z = zipf_distribution(n).unwrap();
            prop_assert!((z.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(z.windows(2).all(|w| w[0] > w[1]));
        }

        #[test]
        fn total_gradient_matches_detached_finite_differences(
            z in proptest::collection::vec(-3.0f64..3.0, 6),
            w in proptest::collection::vec(-3.0f64..3.0, 6),
            t in 0usize..6,
            p_t in 0.5f64..1.5,
        ) {
            let cfg = UskdConfig { mu: 0.3, ..UskdConfig::default() };
            let order = nontarget_rank_from_logits(&w, &z, t, cfg.rank_variant);
            let labels = SoftLabelSet::from_rank(p_t, order, t, 6).unwrap();
            let eval = |zz: &[f64], ww: &[f64]| {
                uskd_total_loss(&UskdSampleState { student_logits: zz, weak_logits: ww, target: t, v_t: 1.0, labels: &labels }, &cfg).unwrap()
            };
            let r = eval(&z, &w);
            let fd = finite_diff_grad(|zz| eval(zz, &w).components.total(&cfg) - eval(zz, &w).components.l_weak, &z, 1e-5);
            prop_assert!(max_relative_error(&r.student.grad_student_logits, &fd) < 1e-4);
            let fdw = finite_diff_grad(|ww| eval(&z, ww).components.l_weak, &w, 1e-5);
            prop_assert!(max_relative_error(&r.grad_weak_logits, &fdw) < 1e-4);
            prop_assert!((r.value() - r.components.total(&cfg)).abs() < 1e-12);
        }
    }
}
