//! Age-estimation measures: MAE, age-group accuracy and absolute-error histograms.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::label_dist::{AgeClassSet, ProbabilityVector};

/// How a probability vector is turned into a single age.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Predictor {
    /// Expected age under the distribution.
    #[default]
    Expectation,
    Argmax,
}

impl FromStr for Predictor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expectation" => Ok(Predictor::Expectation),
            "argmax" => Ok(Predictor::Argmax),
            _ => Err(Error::Argument(format!("unknown predictor {s:?}"))),
        }
    }
}

/// When a prediction counts as inside the right age group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupRule {
    /// `|prediction - truth| <= gap / 2`.
    #[default]
    Centered,
    /// Prediction and truth fall in the same `[k·gap, (k+1)·gap)` bin.
    FixedBins,
}

impl FromStr for GroupRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "centered" => Ok(GroupRule::Centered),
            "fixed-bins" => Ok(GroupRule::FixedBins),
            _ => Err(Error::Argument(format!("unknown group rule {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgePrediction {
    pub expected_age: f64,
    pub prob: ProbabilityVector,
}

pub fn predict_age(prob: ProbabilityVector, classes: &AgeClassSet) -> Result<AgePrediction> {
    predict_age_with(prob, classes, Predictor::Expectation)
}

pub fn predict_age_with(
    prob: ProbabilityVector,
    classes: &AgeClassSet,
    predictor: Predictor,
) -> Result<AgePrediction> {
    check_len(classes.c(), prob.len())?;
    let expected_age =
        match predictor {
            Predictor::Expectation => {
                let e: f64 = prob
                    .as_slice()
                    .iter()
                    .enumerate()
                    .map(|(j, &p)| f64::from(classes.age_of(j)) * p)
                    .sum();
                e.clamp(f64::from(classes.min_age()), f64::from(classes.max_age()))
            }
            Predictor::Argmax => {
                let (j, _) = prob.as_slice().iter().enumerate().fold(
                    (0, f64::NEG_INFINITY),
                    |best, (j, &p)| if p > best.1 { (j, p) } else { best },
                );
                f64::from(classes.age_of(j))
            }
        };
    Ok(AgePrediction { expected_age, prob })
}

fn check_pairs(predictions: &[f64], truths: &[f64]) -> Result<()> {
    check_len(predictions.len(), truths.len())?;
    if predictions.is_empty() {
        return Err(Error::Argument("no predictions to evaluate".into()));
    }
    Ok(())
}

fn check_width(width: f64, what: &str) -> Result<()> {
    if width > 0.0 && width.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "{what} must be positive, got {width}"
        )))
    }
}

/// Mean absolute error `(1/N) Σ |truth - prediction|`.
pub fn mae(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    check_pairs(predictions, truths)?;
    let total: f64 = predictions
        .iter()
        .zip(truths)
        .map(|(y, l)| (l - y).abs())
        .sum();
    Ok(total / predictions.len() as f64)
}

pub fn age_group_accuracy(predictions: &[f64], truths: &[f64], gap: f64) -> Result<f64> {
    age_group_accuracy_with(predictions, truths, gap, GroupRule::Centered)
}

pub fn age_group_accuracy_with(
    predictions: &[f64],
    truths: &[f64],
    gap: f64,
    rule: GroupRule,
) -> Result<f64> {
    check_pairs(predictions, truths)?;
    check_width(gap, "age gap")?;
    let hits = predictions
        .iter()
        .zip(truths)
        .filter(|(&y, &l)| match rule {
            GroupRule::Centered => (y - l).abs() <= gap / 2.0,
            GroupRule::FixedBins => (y / gap).floor() == (l / gap).floor(),
        })
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub count: u64,
}

/// Counts of `|error|` in `[0, w), [w, 2w), ...` up to the largest error.
pub fn error_histogram(
    predictions: &[f64],
    truths: &[f64],
    bin_width: f64,
) -> Result<Vec<HistogramBin>> {
    check_pairs(predictions, truths)?;
    check_width(bin_width, "bin width")?;
    let bins: Vec<usize> = predictions
        .iter()
        .zip(truths)
        .map(|(y, l)| ((l - y).abs() / bin_width).floor() as usize)
        .collect();
    let mut counts = vec![0u64; bins.iter().max().map_or(0, |m| m + 1)];
    for b in bins {
        counts[b] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin {
            low: k as f64 * bin_width,
            high: (k + 1) as f64 * bin_width,
            count,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub mae: f64,
    pub rule: GroupRule,
    pub group_accuracy: Vec<(f64, f64)>,
    pub error_histogram: Vec<HistogramBin>,
}

pub const DEFAULT_GAPS: [f64; 4] = [5.0, 10.0, 15.0, 20.0];

pub fn evaluate(
    predictions: &[f64],
    truths: &[f64],
    gaps: &[f64],
    bin_width: f64,
    rule: GroupRule,
) -> Result<EvalReport> {
    let group_accuracy = gaps
        .iter()
        .map(|&g| Ok((g, age_group_accuracy_with(predictions, truths, g, rule)?)))
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        n: predictions.len(),
        mae: mae(predictions, truths)?,
        rule,
        group_accuracy,
        error_histogram: error_histogram(predictions, truths, bin_width)?,
    })
}

impl EvalReport {
    /// Renders the report as CSV sections separated by `# section:` comment lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# section: summary");
        let _ = writeln!(s, "metric,value");
        let _ = writeln!(s, "n,{}", self.n);
        let _ = writeln!(s, "mae,{}", self.mae);
        let _ = writeln!(s, "# section: group_accuracy");
        let _ = writeln!(
            s,
            "# rule: {}",
            match self.rule {
                GroupRule::Centered => "centered",
                GroupRule::FixedBins => "fixed-bins",
            }
        );
        let _ = writeln!(s, "gap,accuracy");
        for (g, a) in &self.group_accuracy {
            let _ = writeln!(s, "{g},{a}");
        }
        let _ = writeln!(s, "# section: error_histogram");
        let _ = writeln!(s, "bin_low,bin_high,count");
        for b in &self.error_histogram {
            let _ = writeln!(s, "{},{},{}", b.low, b.high, b.count);
        }
        s
    }
}
