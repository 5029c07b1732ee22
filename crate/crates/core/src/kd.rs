//! Teacher-supervised distillation losses.
//!
//! Every loss reports its value in nats and its gradient with respect to
//! the student's (untempered) logits. Teacher outputs are constants.
//!
//! Two entry styles exist for the normalized and decoupled losses: the
//! probability form mirrors the textbook definitions and rejects
//! degenerate targets, while the `*_from_logits` form computes the same
//! quantities from logits and stays defined when the target probability
//! rounds to one. Training uses the logit form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{
    floored_ln, log_softmax_scaled, nontarget_indices, nontarget_log_softmax,
    nontarget_renormalize, nontarget_softmax, retemper, softmax_scaled, LogitVector, ProbVector,
    TemperatureMode, DEGENERATE_EPS,
};

/// Scalar loss plus its gradient with respect to the student logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad_student_logits: Vec<f64>,
    /// Set when a probability hit the log floor.
    pub clamped: bool,
}

impl LossResult {
    pub fn zero(classes: usize) -> Self {
        LossResult {
            value: 0.0,
            grad_student_logits: vec![0.0; classes],
            clamped: false,
        }
    }

    /// `self + weight * other`.
    pub fn add_scaled(&mut self, other: &LossResult, weight: f64) {
        self.value += weight * other.value;
        for (g, o) in self.grad_student_logits.iter_mut().zip(&other.grad_student_logits) {
            *g += weight * o;
        }
        self.clamped |= other.clamped;
    }
}

/// Normalized-KD hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdConfig {
    /// Weight of the non-target term.
    pub gamma: f64,
    /// Distillation temperature.
    pub lambda: f64,
    pub temperature_mode: TemperatureMode,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            gamma: 1.5,
            lambda: 1.0,
            temperature_mode: TemperatureMode::Classical,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::config(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::config(format!("lambda must be finite and > 0, got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn logit_scale(&self) -> f64 {
        self.temperature_mode.logit_scale(self.lambda)
    }
}

/// Decoupled-KD weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DkdConfig {
    pub alpha_dkd: f64,
    pub beta_dkd: f64,
}

impl Default for DkdConfig {
    fn default() -> Self {
        DkdConfig {
            alpha_dkd: 1.0,
            beta_dkd: 8.0,
        }
    }
}

impl DkdConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha_dkd", self.alpha_dkd), ("beta_dkd", self.beta_dkd)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_target(target: usize, classes: usize) -> Result<()> {
    if target >= classes {
        return Err(Error::usage(format!(
            "target {target} out of range for {classes} classes"
        )));
    }
    Ok(())
}

fn check_same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::usage(format!("class count mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// Cross-entropy against a scaled hard label: `-v_t * ln S_t`.
pub fn ce_loss(student: &ProbVector, target: usize, v_t: f64) -> Result<LossResult> {
    check_target(target, student.len())?;
    let (ln_s, clamped) = floored_ln(student[target]);
    let grad = student
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &s)| v_t * (s - if i == target { 1.0 } else { 0.0 }))
        .collect();
    Ok(LossResult {
        value: -v_t * ln_s,
        grad_student_logits: grad,
        clamped,
    })
}

/// [`ce_loss`] evaluated through log-softmax of the logits.
pub fn ce_from_logits(logits: &[f64], target: usize, v_t: f64) -> LossResult {
    let logp = log_softmax_scaled(logits, 1.0);
    let grad = logp
        .iter()
        .enumerate()
        .map(|(i, l)| v_t * (l.exp() - if i == target { 1.0 } else { 0.0 }))
        .collect();
    LossResult {
        value: -v_t * logp[target],
        grad_student_logits: grad,
        clamped: false,
    }
}

/// Full cross-entropy of the teacher distribution against the student.
pub fn kd_loss(teacher: &ProbVector, student: &ProbVector) -> Result<LossResult> {
    check_same_len(teacher.len(), student.len())?;
    let mut value = 0.0;
    let mut clamped = false;
    for (&t, &s) in teacher.as_slice().iter().zip(student.as_slice()) {
        if t > 0.0 {
            let (l, c) = floored_ln(s);
            value -= t * l;
            clamped |= c;
        }
    }
    let mass: f64 = teacher.as_slice().iter().sum();
    let grad = teacher
        .as_slice()
        .iter()
        .zip(student.as_slice())
        .map(|(&t, &s)| s * mass - t)
        .collect();
    Ok(LossResult {
        value,
        grad_student_logits: grad,
        clamped,
    })
}

/// Splits [`kd_loss`] into `(-T_t ln S_t, -sum_{i != t} T_i ln S_i)`.
pub fn kd_decomposed(teacher: &ProbVector, student: &ProbVector, target: usize) -> Result<(f64, f64)> {
    check_same_len(teacher.len(), student.len())?;
    check_target(target, student.len())?;
    let term = |i: usize| {
        let t = teacher[i];
        if t > 0.0 {
            -t * floored_ln(student[i]).0
        } else {
            0.0
        }
    };
    let nontarget = nontarget_indices(student.len(), target).map(term).sum();
    Ok((term(target), nontarget))
}

/// Target and non-target parts of a KD-family loss.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KdParts {
    pub target: f64,
    pub nontarget: f64,
}

/// Classical tempered KD from logits: `lambda^2 * CE(T^lambda, S^lambda)`.
pub fn kd_from_logits(
    teacher_logits: &[f64],
    student_logits: &[f64],
    target: usize,
    cfg: &KdConfig,
) -> (LossResult, KdParts) {
    let scale = cfg.logit_scale();
    let weight = cfg.lambda * cfg.lambda;
    let t = softmax_scaled(teacher_logits, scale);
    let log_s = log_softmax_scaled(student_logits, scale);
    let mut parts = KdParts::default();
    for (i, (&ti, &ls)) in t.iter().zip(&log_s).enumerate() {
        let term = -weight * ti * ls;
        if i == target {
            parts.target += term;
        } else {
            parts.nontarget += term;
        }
    }
    let grad = t
        .iter()
        .zip(&log_s)
        .map(|(&ti, &ls)| weight * scale * (ls.exp() - ti))
        .collect();
    (
        LossResult {
            value: parts.target + parts.nontarget,
            grad_student_logits: grad,
            clamped: false,
        },
        parts,
    )
}

/// Target term and unweighted non-target cross-entropy of the normalized loss.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NkdParts {
    /// `-T_t ln S_t`.
    pub target: f64,
    /// `CE(N(T^lambda), N(S^lambda))`, before the `gamma * lambda^2` weight.
    pub nontarget: f64,
}

/// Normalized KD from the teacher's target probability and its tempered,
/// renormalized non-target distribution (`None` skips the non-target term).
pub fn nkd_core(
    teacher_target: f64,
    teacher_nontarget: Option<&[f64]>,
    student_logits: &[f64],
    target: usize,
    cfg: &KdConfig,
) -> (LossResult, NkdParts) {
    let mut result = ce_from_logits(student_logits, target, teacher_target);
    let mut parts = NkdParts {
        target: result.value,
        nontarget: 0.0,
    };
    if let Some(q) = teacher_nontarget {
        let scale = cfg.logit_scale();
        let weight = cfg.gamma * cfg.lambda * cfg.lambda;
        let log_ns = nontarget_log_softmax(student_logits, target, scale);
        let q_mass: f64 = q.iter().sum();
        parts.nontarget = -q.iter().zip(&log_ns).map(|(a, b)| a * b).sum::<f64>();
        result.value += weight * parts.nontarget;
        for ((i, &qi), &l) in nontarget_indices(student_logits.len(), target).zip(q).zip(&log_ns) {
            result.grad_student_logits[i] += weight * scale * (l.exp() * q_mass - qi);
        }
    }
    (result, parts)
}

/// Normalized KD:
/// `-T_t ln S_t + gamma * lambda^2 * CE(N(T^lambda), N(S^lambda))`.
///
/// The target term uses untempered probabilities. With `gamma == 0` the
/// non-target term is skipped entirely, so a one-hot teacher is accepted.
pub fn nkd_loss(
    teacher: &ProbVector,
    student: &ProbVector,
    student_logits: &LogitVector,
    target: usize,
    cfg: &KdConfig,
) -> Result<LossResult> {
    nkd_loss_parts(teacher, student, student_logits, target, cfg).map(|(r, _)| r)
}

pub fn nkd_loss_parts(
    teacher: &ProbVector,
    student: &ProbVector,
    student_logits: &LogitVector,
    target: usize,
    cfg: &KdConfig,
) -> Result<(LossResult, NkdParts)> {
    cfg.validate()?;
    check_same_len(teacher.len(), student.len())?;
    check_same_len(student.len(), student_logits.len())?;
    check_target(target, student.len())?;
    let teacher_nontarget = if cfg.gamma == 0.0 {
        None
    } else {
        // surfaces DegenerateTarget for either side
        nontarget_renormalize(student, target)?;
        nontarget_renormalize(teacher, target)?;
        let tempered = retemper(teacher, cfg.logit_scale());
        Some(nontarget_renormalize(&tempered, target)?.into_inner())
    };
    let (mut result, parts) = nkd_core(
        teacher[target],
        teacher_nontarget.as_deref(),
        student_logits.as_slice(),
        target,
        cfg,
    );
    result.clamped |= student[target] < crate::numkit::LOG_FLOOR;
    Ok((result, parts))
}

/// [`nkd_loss`] with the teacher given as logits.
pub fn nkd_from_logits(
    teacher_logits: &[f64],
    student_logits: &[f64],
    target: usize,
    cfg: &KdConfig,
) -> (LossResult, NkdParts) {
    let t_target = softmax_scaled(teacher_logits, 1.0)[target];
    let q = (cfg.gamma != 0.0).then(|| nontarget_softmax(teacher_logits, target, cfg.logit_scale()));
    nkd_core(t_target, q.as_deref(), student_logits, target, cfg)
}

/// `L_ori + L_nkd` for one sample.
pub fn total_kd_objective(
    student: &ProbVector,
    teacher: &ProbVector,
    student_logits: &LogitVector,
    target: usize,
    v_t: f64,
    cfg: &KdConfig,
) -> Result<LossResult> {
    let mut total = ce_loss(student, target, v_t)?;
    total.add_scaled(&nkd_loss(teacher, student, student_logits, target, cfg)?, 1.0);
    Ok(total)
}

/// Binary target-class and hat-normalized non-target parts of DKD.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DkdParts {
    /// `-T_t ln S_t - (1 - T_t) ln(1 - S_t)`.
    pub tckd: f64,
    /// `-sum_{i != t} That_i ln Shat_i`.
    pub nckd: f64,
}

fn dkd_core(
    t_target: f64,
    t_hat: &[f64],
    student_logits: &[f64],
    target: usize,
    cfg: &DkdConfig,
) -> (LossResult, DkdParts) {
    let classes = student_logits.len();
    let log_s = log_softmax_scaled(student_logits, 1.0);
    let s: Vec<f64> = log_s.iter().map(|l| l.exp()).collect();
    let log_s_hat = nontarget_log_softmax(student_logits, target, 1.0);
    // ln(1 - S_t) = logsumexp over non-target logits - logsumexp over all
    let ln_rest = log_s_hat
        .iter()
        .zip(nontarget_indices(classes, target))
        .map(|(lh, i)| log_s[i] - lh)
        .next()
        .unwrap_or(f64::NEG_INFINITY);
    let s_t = s[target];
    let s_rest = ln_rest.exp();

    let tckd = -t_target * log_s[target]
        - if t_target < 1.0 { (1.0 - t_target) * ln_rest } else { 0.0 };
    let nckd = -t_hat.iter().zip(&log_s_hat).map(|(a, b)| a * b).sum::<f64>();

    let mut grad = vec![0.0; classes];
    grad[target] = cfg.alpha_dkd * (s_t - t_target);
    let off_coeff = cfg.alpha_dkd * (t_target - s_t) / s_rest;
    let t_hat_mass: f64 = t_hat.iter().sum();
    for ((i, &th), &lh) in nontarget_indices(classes, target).zip(t_hat).zip(&log_s_hat) {
        grad[i] = off_coeff * s[i] + cfg.beta_dkd * (lh.exp() * t_hat_mass - th);
    }
    (
        LossResult {
            value: cfg.alpha_dkd * tckd + cfg.beta_dkd * nckd,
            grad_student_logits: grad,
            clamped: false,
        },
        DkdParts { tckd, nckd },
    )
}

/// Decoupled KD: `alpha * TCKD + beta * NCKD`.
///
/// Requires `T_t` and `S_t` strictly inside `(eps, 1 - eps)`; a one-hot
/// teacher leaves the hat-normalized teacher undefined.
pub fn dkd_loss(
    teacher: &ProbVector,
    student: &ProbVector,
    target: usize,
    cfg: &DkdConfig,
) -> Result<LossResult> {
    dkd_loss_parts(teacher, student, target, cfg).map(|(r, _)| r)
}

pub fn dkd_loss_parts(
    teacher: &ProbVector,
    student: &ProbVector,
    target: usize,
    cfg: &DkdConfig,
) -> Result<(LossResult, DkdParts)> {
    cfg.validate()?;
    check_same_len(teacher.len(), student.len())?;
    check_target(target, student.len())?;
    for p in [teacher, student] {
        if p[target] <= DEGENERATE_EPS {
            return Err(Error::DegenerateTarget {
                target,
                mass: p[target],
            });
        }
    }
    let t_hat = nontarget_renormalize(teacher, target)?;
    nontarget_renormalize(student, target)?;
    // logits reproducing the student distribution up to a constant shift
    let logits: Vec<f64> = student.as_slice().iter().map(|&p| floored_ln(p).0).collect();
    let clamped = student.as_slice().iter().any(|&p| floored_ln(p).1);
    let (mut r, parts) = dkd_core(teacher[target], t_hat.as_slice(), &logits, target, cfg);
    r.clamped = clamped;
    Ok((r, parts))
}

/// [`dkd_loss`] with both sides given as logits.
pub fn dkd_from_logits(
    teacher_logits: &[f64],
    student_logits: &[f64],
    target: usize,
    cfg: &DkdConfig,
) -> (LossResult, DkdParts) {
    let t_target = softmax_scaled(teacher_logits, 1.0)[target];
    let t_hat = nontarget_softmax(teacher_logits, target, 1.0);
    dkd_core(t_target, &t_hat, student_logits, target, cfg)
}

/// `T1 = -T_t ln S_t` and `T2 = -(1 - T_t) ln(1 - S_t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetTerms {
    pub t1: f64,
    pub t2: f64,
    pub clamped: bool,
}

pub fn t1_t2_terms(t_t: f64, s_t: f64) -> TargetTerms {
    let (ln_s, c1) = floored_ln(s_t);
    let (ln_rest, c2) = floored_ln(1.0 - s_t);
    let t2 = if t_t == 1.0 { 0.0 } else { -(1.0 - t_t) * ln_rest };
    TargetTerms {
        t1: if t_t == 0.0 { 0.0 } else { -t_t * ln_s },
        t2,
        clamped: c1 || c2,
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::numkit::{finite_diff_grad, max_relative_error, max_relative_error_floored, softmax_stable};

    const LN2: f64 = std::f64::consts::LN_2;

    fn p(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn logits_of(v: &[f64]) -> LogitVector {
        LogitVector::new(v.iter().map(|x| x.ln()).collect()).unwrap()
    }

    fn unit() -> KdConfig {
        KdConfig {
            gamma: 1.0,
            ..KdConfig::default()
        }
    }

    #[test]
    fn ce_examples() {
        assert_eq!(ce_loss(&p(&[1.0, 0.0]), 0, 1.0).unwrap().value, 0.0);
        assert!((ce_loss(&p(&[0.5, 0.5]), 0, 1.0).unwrap().value - LN2).abs() < 1e-15);
        assert!((ce_loss(&p(&[0.5, 0.5]), 0, 0.8).unwrap().value - 0.8 * LN2).abs() < 1e-15);
    }

    #[test]
    fn ce_zero_probability_is_clamped() {
        let r = ce_loss(&p(&[0.0, 1.0]), 0, 1.0).unwrap();
        assert!(r.clamped);
        assert!((r.value - 1e-30f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn kd_examples() {
        assert!((kd_loss(&p(&[0.5, 0.5]), &p(&[0.5, 0.5])).unwrap().value - LN2).abs() < 1e-15);
        assert!((kd_loss(&p(&[1.0, 0.0]), &p(&[0.5, 0.5])).unwrap().value - LN2).abs() < 1e-15);
    }

    #[test]
    fn decomposition_examples() {
        let (a, b) = kd_decomposed(&p(&[1.0, 0.0]), &p(&[0.5, 0.5]), 0).unwrap();
        assert!((a - LN2).abs() < 1e-15 && b == 0.0);
        let x = p(&[0.5, 0.25, 0.25]);
        let (a, b) = kd_decomposed(&x, &x, 0).unwrap();
        assert!((a - 0.5 * LN2).abs() < 1e-15);
        assert!((b - LN2).abs() < 1e-15);
    }

    #[test]
    fn nkd_symmetric_example() {
        let x = p(&[0.5, 0.25, 0.25]);
        let r = nkd_loss(&x, &x, &logits_of(&[0.5, 0.25, 0.25]), 0, &unit()).unwrap();
        assert!((r.value - (0.5 * LN2 + LN2)).abs() < 1e-12);
    }

    #[test]
    fn nkd_gamma_zero_accepts_one_hot_teacher() {
        let s = p(&[0.5, 0.5]);
        let cfg = KdConfig {
            gamma: 0.0,
            lambda: 1.0,
            ..KdConfig::default()
        };
        let total = total_kd_objective(&s, &p(&[1.0, 0.0]), &logits_of(&[0.5, 0.5]), 0, 1.0, &cfg)
            .unwrap();
        assert!((total.value - 2.0 * LN2).abs() < 1e-15);
    }

    #[test]
    fn nkd_degenerate_teacher_rejected() {
        let s = p(&[0.5, 0.5]);
        let err = nkd_loss(&p(&[1.0, 0.0]), &s, &logits_of(&[0.5, 0.5]), 0, &unit()).unwrap_err();
        assert!(matches!(err, Error::DegenerateTarget { .. }));
    }

    #[test]
    fn dkd_one_hot_teacher_is_degenerate() {
        let err = dkd_loss(&p(&[1.0, 0.0, 0.0]), &p(&[0.5, 0.3, 0.2]), 0, &DkdConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::DegenerateTarget { .. }));
    }

    #[test]
    fn dkd_symmetric_binary_tckd() {
        let x = p(&[0.5, 0.25, 0.25]);
        let cfg = DkdConfig {
            alpha_dkd: 1.0,
            beta_dkd: 0.0,
        };
        assert!((dkd_loss(&x, &x, 0, &cfg).unwrap().value - LN2).abs() < 1e-12);
    }

    #[test]
    fn t1_t2_examples() {
        let r = t1_t2_terms(1.0, 0.5);
        assert!((r.t1 - LN2).abs() < 1e-15 && r.t2 == 0.0);
        let r = t1_t2_terms(0.7, 0.5);
        assert!((r.t1 - 0.7 * LN2).abs() < 1e-15 && (r.t2 - 0.3 * LN2).abs() < 1e-15);
        let r = t1_t2_terms(0.5, 0.5);
        assert!((r.t1 - r.t2).abs() < 1e-15);
    }

    #[test]
    fn t1_t2_clamps_at_boundaries() {
        assert!(t1_t2_terms(0.5, 1.0).clamped);
        assert!(t1_t2_terms(0.5, 0.0).clamped);
        assert!(t1_t2_terms(0.5, 0.0).t1.is_finite());
    }

    #[test]
    fn logit_and_probability_routes_agree() {
        let tl = [1.2, -0.4, 0.3, 2.0];
        let sl = [0.1, 0.5, -1.0, 0.7];
        let t = softmax_stable(&LogitVector::new(tl.to_vec()).unwrap(), 1.0).unwrap();
        let s = softmax_stable(&LogitVector::new(sl.to_vec()).unwrap(), 1.0).unwrap();
        let slv = LogitVector::new(sl.to_vec()).unwrap();
        for lambda in [1.0, 2.5] {
            let cfg = KdConfig { gamma: 1.5, lambda, ..KdConfig::default() };
            let a = nkd_loss(&t, &s, &slv, 1, &cfg).unwrap();
            let (b, _) = nkd_from_logits(&tl, &sl, 1, &cfg);
            assert!((a.value - b.value).abs() < 1e-12);
            assert!(max_relative_error(&a.grad_student_logits, &b.grad_student_logits) < 1e-10);
        }
        let cfg = DkdConfig { alpha_dkd: 1.3, beta_dkd: 4.0 };
        let a = dkd_loss(&t, &s, 2, &cfg).unwrap();
        let (b, _) = dkd_from_logits(&tl, &sl, 2, &cfg);
        assert!((a.value - b.value).abs() < 1e-12);
        assert!(max_relative_error(&a.grad_student_logits, &b.grad_student_logits) < 1e-10);
    }

    fn logit_strategy(c: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-4.0f64..4.0, c)
    }

    proptest! {
        #[test]
        fn kd_gradient_matches_finite_differences(tl in logit_strategy(6), sl in logit_strategy(6), t in 0usize..6) {
            let cfg = KdConfig { gamma: 1.5, lambda: 2.0, ..KdConfig::default() };
            let (r, _) = kd_from_logits(&tl, &sl, t, &cfg);
            let fd = finite_diff_grad(|z| kd_from_logits(&tl, z, t, &cfg).0.value, &sl, 1e-5);
            prop_assert!(max_relative_error(&r.grad_student_logits, &fd) < 1e-4);
        }

        #[test]
        fn nkd_gradient_matches_finite_differences(tl in logit_strategy(7), sl in logit_strategy(7), t in 0usize..7, lambda in 0.5f64..2.5) {
            let cfg = KdConfig { gamma: 1.5, lambda, temperature_mode: TemperatureMode::Classical };
            let (r, _) = nkd_from_logits(&tl, &sl, t, &cfg);
            let fd = finite_diff_grad(|z| nkd_from_logits(&tl, z, t, &cfg).0.value, &sl, 1e-5);
            prop_assert!(max_relative_error(&r.grad_student_logits, &fd) < 1e-4);

            // literal exponents multiply logits by lambda, inflating loss values and
            // with them the cancellation noise of the difference quotient
            let cfg = KdConfig { temperature_mode: TemperatureMode::LiteralExponent, ..cfg };
            let (r, _) = nkd_from_logits(&tl, &sl, t, &cfg);
            let fd = finite_diff_grad(|z| nkd_from_logits(&tl, z, t, &cfg).0.value, &sl, 1e-5);
            prop_assert!(max_relative_error_floored(&r.grad_student_logits, &fd, 1e-4) < 1e-4);
        }

        #[test]
        fn dkd_gradient_matches_finite_differences(tl in logit_strategy(5), sl in logit_strategy(5), t in 0usize..5) {
            let cfg = DkdConfig { alpha_dkd: 0.7, beta_dkd: 3.0 };
            let (r, _) = dkd_from_logits(&tl, &sl, t, &cfg);
            let fd = finite_diff_grad(|z| dkd_from_logits(&tl, z, t, &cfg).0.value, &sl, 1e-5);
            prop_assert!(max_relative_error(&r.grad_student_logits, &fd) < 1e-4);
        }

        #[test]
        fn doubling_gamma_doubles_nontarget_contribution(tl in logit_strategy(5), sl in logit_strategy(5), t in 0usize..5) {
            let base = KdConfig { gamma: 1.0, lambda: 1.0, ..KdConfig::default() };
            let double = KdConfig { gamma: 2.0, ..base };
            let zero = KdConfig { gamma: 0.0, ..base };
            let v0 = nkd_from_logits(&tl, &sl, t, &zero).0.value;
            let v1 = nkd_from_logits(&tl, &sl, t, &base).0.value;
            let v2 = nkd_from_logits(&tl, &sl, t, &double).0.value;
            prop_assert!(((v2 - v0) - 2.0 * (v1 - v0)).abs() < 1e-12);
        }
    }
}
