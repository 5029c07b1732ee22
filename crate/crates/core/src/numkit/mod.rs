//! Numeric primitives shared by the loss and network modules.
//!
//! Everything here works in `f64`. Probability vectors are validated on
//! construction; the restricted ("non-target") renormalization used by the
//! normalized losses lives here too, in both a probability form (which
//! rejects degenerate targets) and a logit form (which cannot degenerate).

mod tape;

pub use tape::{Gradients, NodeId, Op, PoolKind, TapeGraph, TensorShape};

use crate::error::{Error, Result};

/// `1 - p[t]` below this is treated as all mass on the target.
pub const DEGENERATE_EPS: f64 = 1e-12;

/// Probabilities are clamped to this floor before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-30;

/// Tolerance on `sum(p) == 1` accepted by [`ProbVector::new`].
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Pre-softmax class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::usage(format!(
                "logit vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logit vector"));
        }
        Ok(LogitVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A categorical distribution: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::usage("empty probability vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("probability vector"));
        }
        if let Some(v) = values.iter().find(|&&v| v < 0.0) {
            return Err(Error::usage(format!("negative probability {v}")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::usage(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(ProbVector(values))
    }

    /// Wraps values produced by a softmax without re-validating them.
    pub(crate) fn from_softmax(values: Vec<f64>) -> Self {
        ProbVector(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Mass on every class except `target`, summed directly rather than as
    /// `1 - p[target]` so it stays accurate when the target dominates.
    pub fn nontarget_mass(&self, target: usize) -> f64 {
        self.0
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != target)
            .map(|(_, p)| p)
            .sum()
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// How a temperature is applied to a distribution.
///
/// `Classical` divides logits by the temperature (equivalently raises
/// probabilities to `1/temperature` and renormalizes), so temperatures
/// above one flatten the distribution. `LiteralExponent` raises
/// probabilities to the power `temperature` and renormalizes, which
/// sharpens instead; it is kept for side-by-side comparison only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    #[default]
    Classical,
    LiteralExponent,
}

impl TemperatureMode {
    /// Multiplier applied to logits (or log-probabilities) before softmax.
    pub fn logit_scale(self, temperature: f64) -> f64 {
        match self {
            TemperatureMode::Classical => 1.0 / temperature,
            TemperatureMode::LiteralExponent => temperature,
        }
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::usage(format!(
            "temperature must be finite and > 0, got {temperature}"
        )));
    }
    Ok(())
}

/// `log(sum(exp(scale * x)))` over the selected entries, max-shifted.
fn logsumexp_scaled<'a>(values: impl Iterator<Item = &'a f64> + Clone, scale: f64) -> f64 {
    let max = values
        .clone()
        .map(|v| v * scale)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.map(|v| (v * scale - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of `logits * scale` on a raw slice. Callers guarantee finiteness.
pub fn softmax_scaled(logits: &[f64], scale: f64) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|v| v * scale)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v * scale - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Log-softmax of `logits * scale`.
pub fn log_softmax_scaled(logits: &[f64], scale: f64) -> Vec<f64> {
    let lse = logsumexp_scaled(logits.iter(), scale);
    logits.iter().map(|v| v * scale - lse).collect()
}

/// Numerically stable softmax of `z / temperature`.
pub fn softmax_stable(z: &LogitVector, temperature: f64) -> Result<ProbVector> {
    check_temperature(temperature)?;
    Ok(ProbVector::from_softmax(softmax_scaled(
        z.as_slice(),
        1.0 / temperature,
    )))
}

/// Softmax under an explicit [`TemperatureMode`].
pub fn softmax_with_mode(
    z: &LogitVector,
    temperature: f64,
    mode: TemperatureMode,
) -> Result<ProbVector> {
    check_temperature(temperature)?;
    Ok(ProbVector::from_softmax(softmax_scaled(
        z.as_slice(),
        mode.logit_scale(temperature),
    )))
}

/// Re-temper an existing distribution: `softmax(scale * log p)`.
///
/// Zero entries stay zero.
pub fn retemper(p: &ProbVector, scale: f64) -> ProbVector {
    if scale == 1.0 {
        return p.clone();
    }
    let logs: Vec<f64> = p
        .as_slice()
        .iter()
        .map(|&v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY })
        .collect();
    let max = logs
        .iter()
        .filter(|v| v.is_finite())
        .map(|v| v * scale)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logs
        .iter()
        .map(|&l| if l.is_finite() { (l * scale - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    ProbVector::from_softmax(out)
}

/// Indices of all classes except `target`, in ascending order.
pub fn nontarget_indices(num_classes: usize, target: usize) -> impl Iterator<Item = usize> {
    (0..num_classes).filter(move |&i| i != target)
}

/// Restricts `p` to the non-target classes and rescales them to sum to one.
///
/// The result has `C - 1` entries in ascending class order with the target
/// removed. Each entry is `p[i] / (1 - p[t])`.
pub fn nontarget_renormalize(p: &ProbVector, target: usize) -> Result<ProbVector> {
    if target >= p.len() {
        return Err(Error::usage(format!(
            "target {target} out of range for {} classes",
            p.len()
        )));
    }
    if p.len() < 2 {
        return Err(Error::usage("non-target renormalization needs at least 2 classes"));
    }
    let mass = p.nontarget_mass(target);
    if p[target] >= 1.0 - DEGENERATE_EPS || mass <= DEGENERATE_EPS {
        return Err(Error::DegenerateTarget {
            target,
            mass: p[target],
        });
    }
    Ok(ProbVector::from_softmax(
        nontarget_indices(p.len(), target)
            .map(|i| p[i] / mass)
            .collect(),
    ))
}

/// Non-target softmax computed directly from logits:
/// `softmax(scale * z)` restricted to `i != target` and renormalized.
///
/// Mathematically equal to `nontarget_renormalize(softmax(scale * z))` but
/// never degenerate, since the target logit drops out entirely.
pub fn nontarget_softmax(logits: &[f64], target: usize, scale: f64) -> Vec<f64> {
    let rest: Vec<f64> = nontarget_indices(logits.len(), target)
        .map(|i| logits[i])
        .collect();
    softmax_scaled(&rest, scale)
}

/// Log of [`nontarget_softmax`].
pub fn nontarget_log_softmax(logits: &[f64], target: usize, scale: f64) -> Vec<f64> {
    let rest: Vec<f64> = nontarget_indices(logits.len(), target)
        .map(|i| logits[i])
        .collect();
    log_softmax_scaled(&rest, scale)
}

/// `ln(max(p, LOG_FLOOR))`, reporting whether the floor was hit.
pub fn floored_ln(p: f64) -> (f64, bool) {
    if p < LOG_FLOOR {
        (LOG_FLOOR.ln(), true)
    } else {
        (p.ln(), false)
    }
}

/// Central finite differences: `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Floor on the denominator of [`relative_error`].
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Largest [`relative_error`] over paired entries.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    max_relative_error_floored(a, b, REL_ERR_FLOOR)
}

/// As [`max_relative_error`] with an explicit denominator floor.
pub fn max_relative_error_floored(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    fn probs(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform_for_equal_logits() {
        let p = softmax_stable(&logits(&[0.0, 0.0, 0.0]), 1.0).unwrap();
        for &v in p.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_exact_exponentials() {
        let p = softmax_stable(&logits(&[2f64.ln(), 0.0]), 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let p = softmax_stable(&logits(&[1000.0, 0.0]), 1.0).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
    }

    #[test]
    fn nonfinite_logits_rejected() {
        assert!(matches!(
            LogitVector::new(vec![0.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(LogitVector::new(vec![f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn bad_temperature_rejected() {
        let z = logits(&[1.0, 2.0]);
        assert!(softmax_stable(&z, 0.0).is_err());
        assert!(softmax_stable(&z, -1.0).is_err());
        assert!(softmax_stable(&z, f64::NAN).is_err());
    }

    #[test]
    fn literal_exponent_sharpens() {
        let z = logits(&[1.0, 0.0, -1.0]);
        let classical = softmax_with_mode(&z, 2.0, TemperatureMode::Classical).unwrap();
        let literal = softmax_with_mode(&z, 2.0, TemperatureMode::LiteralExponent).unwrap();
        let base = softmax_stable(&z, 1.0).unwrap();
        assert!(classical[0] < base[0]);
        assert!(literal[0] > base[0]);
    }

    #[test]
    fn retemper_matches_tempered_softmax() {
        let z = logits(&[0.3, -1.2, 2.0, 0.7]);
        let p = softmax_stable(&z, 1.0).unwrap();
        let direct = softmax_stable(&z, 3.0).unwrap();
        let via = retemper(&p, 1.0 / 3.0);
        for (a, b) in direct.as_slice().iter().zip(via.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn renormalize_examples() {
        let r = nontarget_renormalize(&probs(&[0.5, 0.3, 0.2]), 0).unwrap();
        assert!((r[0] - 0.6).abs() < 1e-15 && (r[1] - 0.4).abs() < 1e-15);

        let r = nontarget_renormalize(&probs(&[0.25; 4]), 2).unwrap();
        assert_eq!(r.len(), 3);
        for &v in r.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn renormalize_degenerate_target() {
        let err = nontarget_renormalize(&probs(&[1.0, 0.0]), 0).unwrap_err();
        assert!(matches!(err, Error::DegenerateTarget { target: 0, .. }));
    }

    #[test]
    fn renormalize_target_out_of_range() {
        assert!(matches!(
            nontarget_renormalize(&probs(&[0.5, 0.5]), 2),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn nontarget_softmax_agrees_with_probability_route() {
        let z = [0.4, -0.3, 1.7, 0.0, -2.2];
        let p = softmax_stable(&logits(&z), 1.0).unwrap();
        let a = nontarget_renormalize(&p, 2).unwrap();
        let b = nontarget_softmax(&z, 2, 1.0);
        for (x, y) in a.as_slice().iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn finite_diff_of_sum_is_ones() {
        let g = finite_diff_grad(|x| x.iter().sum(), &[0.3, -2.0, 5.5], 1e-5);
        for v in g {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_diff_of_square() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[2.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn floored_ln_flags_zero() {
        let (v, clamped) = floored_ln(0.0);
        assert!(clamped);
        assert!((v - LOG_FLOOR.ln()).abs() < 1e-12);
        assert!(!floored_ln(0.5).1);
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![1.5, -0.5]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
        assert!(ProbVector::new(vec![1.0]).is_ok());
    }
}
