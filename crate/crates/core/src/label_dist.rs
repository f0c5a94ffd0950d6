//! Gaussian label distributions over integer ages and the K-L divergence loss.
//!
//! An age `a` is encoded as a truncated Gaussian over the classes
//! `a-2 ..= a+2` (clipped to the valid range and renormalized). The model is
//! trained by minimizing the cross-entropy `-Σ l·ln softmax(f)`, which equals
//! `KL(l ‖ softmax(f))` plus the constant entropy of `l`. Its gradient with
//! respect to the logits is `softmax(f) - l`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Number of classes on either side of the true age that receive mass.
pub const SUPPORT_RADIUS: u32 = 2;

pub const DEFAULT_THETA: f64 = 1.0;

/// Contiguous range of integer ages `min_age..=max_age`, one class per year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeClassSet {
    min_age: u32,
    max_age: u32,
}

impl AgeClassSet {
    pub fn new(min_age: u32, max_age: u32) -> Result<Self> {
        if min_age < 1 {
            return Err(Error::Domain(format!(
                "min_age must be >= 1, got {min_age}"
            )));
        }
        if max_age < min_age {
            return Err(Error::Domain(format!(
                "max_age {max_age} is below min_age {min_age}"
            )));
        }
        Ok(Self { min_age, max_age })
    }

    /// Class set with `c` classes starting at `min_age`.
    pub fn with_count(min_age: u32, c: usize) -> Result<Self> {
        if c == 0 {
            return Err(Error::Domain("class count must be >= 1".into()));
        }
        let max = u64::from(min_age) + c as u64 - 1;
        let max_age = u32::try_from(max)
            .map_err(|_| Error::Domain(format!("class count {c} overflows the age range")))?;
        Self::new(min_age, max_age)
    }

    pub fn min_age(&self) -> u32 {
        self.min_age
    }

    pub fn max_age(&self) -> u32 {
        self.max_age
    }

    /// Number of classes.
    pub fn c(&self) -> usize {
        (self.max_age - self.min_age) as usize + 1
    }

    pub fn contains(&self, age: u32) -> bool {
        (self.min_age..=self.max_age).contains(&age)
    }

    pub fn index_of(&self, age: u32) -> Option<usize> {
        self.contains(age).then(|| (age - self.min_age) as usize)
    }

    pub fn age_of(&self, index: usize) -> u32 {
        self.min_age + index as u32
    }

    pub fn ages(&self) -> impl Iterator<Item = u32> {
        self.min_age..=self.max_age
    }
}

/// Target distribution over the age classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution(Vec<f64>);

impl LabelDistribution {
    /// Wraps an arbitrary probability vector after checking it is one.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        validate_distribution(&probs, false)?;
        Ok(Self(probs))
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

    /// Shannon entropy `-Σ l ln l` (natural log).
    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

impl AsRef<[f64]> for LabelDistribution {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Raw network outputs before the softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("logit {i} is not finite")));
        }
        Ok(Self(values))
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

impl AsRef<[f64]> for LogitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        validate_distribution(&probs, false)?;
        Ok(Self(probs))
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

impl AsRef<[f64]> for ProbabilityVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

fn validate_distribution(probs: &[f64], strictly_positive: bool) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::Domain("empty distribution".into()));
    }
    for (i, &p) in probs.iter().enumerate() {
        if !p.is_finite() || p < 0.0 || (strictly_positive && p == 0.0) {
            return Err(Error::Domain(format!(
                "invalid probability {p} at index {i}"
            )));
        }
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(())
}

/// Encodes `age` as a Gaussian of variance `theta` over `age-2 ..= age+2`,
/// truncated to `classes` and normalized to sum to one.
pub fn gaussian_label_distribution(
    age: u32,
    theta: f64,
    classes: &AgeClassSet,
) -> Result<LabelDistribution> {
    if !classes.contains(age) {
        return Err(Error::Range {
            value: i64::from(age),
            min: i64::from(classes.min_age()),
            max: i64::from(classes.max_age()),
        });
    }
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(Error::Domain(format!(
            "theta must be positive and finite, got {theta}"
        )));
    }
    let mut probs = vec![0.0; classes.c()];
    let lo = age.saturating_sub(SUPPORT_RADIUS).max(classes.min_age());
    let hi = age.saturating_add(SUPPORT_RADIUS).min(classes.max_age());
    let mut total = 0.0;
    for a in lo..=hi {
        let d = f64::from(a) - f64::from(age);
        let w = (-(d * d) / (2.0 * theta)).exp();
        probs[(a - classes.min_age()) as usize] = w;
        total += w;
    }
    for p in &mut probs[(lo - classes.min_age()) as usize..=(hi - classes.min_age()) as usize] {
        *p /= total;
    }
    Ok(LabelDistribution(probs))
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &f) in out.iter_mut().zip(logits) {
        *o = (f - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Max-shifted softmax.
pub fn softmax(logits: &LogitVector) -> ProbabilityVector {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits.as_slice(), &mut out);
    ProbabilityVector(out)
}

/// `Σ p_i ln(p_i / q_i)` with `0·ln(0/q) = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_len(p.len(), q.len())?;
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(Error::DivergenceUndefined { index: i });
        }
        total += pi * (pi / qi).ln();
    }
    // Rounding can push an exact zero slightly negative.
    Ok(total.max(0.0))
}

/// Loss and logit-gradient in one pass; `grad` receives `softmax(logits) - label`.
pub(crate) fn loss_and_gradient_into(label: &[f64], logits: &[f64], grad: &mut [f64]) -> f64 {
    let lse = log_sum_exp(logits);
    let mut loss = 0.0;
    for ((g, &l), &f) in grad.iter_mut().zip(label).zip(logits) {
        if l != 0.0 {
            loss += l * (lse - f);
        }
        *g = (f - lse).exp() - l;
    }
    loss
}

pub(crate) fn loss_only(label: &[f64], logits: &[f64]) -> f64 {
    let lse = log_sum_exp(logits);
    label
        .iter()
        .zip(logits)
        .filter(|(&l, _)| l != 0.0)
        .map(|(&l, &f)| l * (lse - f))
        .sum()
}

/// Cross-entropy form of the K-L loss, `-Σ l_j ln softmax(f)_j`, computed via
/// log-sum-exp so it stays finite for extreme logits.
pub fn kl_loss(label: &LabelDistribution, logits: &LogitVector) -> Result<f64> {
    check_len(label.len(), logits.len())?;
    Ok(loss_only(label.as_slice(), logits.as_slice()))
}

/// `∂loss/∂f = softmax(f) - l`.
pub fn kl_loss_gradient(label: &LabelDistribution, logits: &LogitVector) -> Result<Vec<f64>> {
    check_len(label.len(), logits.len())?;
    let mut grad = vec![0.0; logits.len()];
    loss_and_gradient_into(label.as_slice(), logits.as_slice(), &mut grad);
    Ok(grad)
}
