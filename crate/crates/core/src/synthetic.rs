//! Synthetic age-estimation data: latent ages drawn uniformly from the class
//! range, features a noisy random linear embedding of the age.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::agemodel::Sample;
use crate::error::{Error, Result};
use crate::label_dist::{gaussian_label_distribution, AgeClassSet};

/// Standard deviation of the per-feature noise.
pub const NOISE_STD: f64 = 0.3;

/// Generates `n` samples and splits them 80/20 into train and test sets.
pub fn generate_synthetic(
    n: usize,
    input_dim: usize,
    classes: &AgeClassSet,
    theta: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if n < 2 {
        return Err(Error::Argument(format!("need at least 2 samples, got {n}")));
    }
    if input_dim == 0 {
        return Err(Error::Argument("input_dim must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction: Vec<f64> = (0..input_dim).map(|_| rng.sample(StandardNormal)).collect();
    let offset: Vec<f64> = (0..input_dim)
        .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let noise = Normal::new(0.0, NOISE_STD).expect("constant std is valid");
    let span = f64::from(classes.max_age() - classes.min_age()).max(1.0);

    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let age = rng.random_range(classes.min_age()..=classes.max_age());
        let t = 2.0 * f64::from(age - classes.min_age()) / span - 1.0;
        let features = direction
            .iter()
            .zip(&offset)
            .map(|(d, o)| t * d + o + noise.sample(&mut rng))
            .collect();
        samples.push(Sample {
            age,
            features,
            label: gaussian_label_distribution(age, theta, classes)?,
        });
    }
    let n_train = (4 * n / 5).clamp(1, n - 1);
    let test = samples.split_off(n_train);
    Ok((samples, test))
}

/// CSV with header `age,f_0,...,f_{d-1}`.
pub fn dataset_to_csv(samples: &[Sample]) -> String {
    let dim = samples.first().map_or(0, |s| s.features.len());
    let mut s = String::from("age");
    for j in 0..dim {
        let _ = write!(s, ",f_{j}");
    }
    s.push('\n');
    for sample in samples {
        let _ = write!(s, "{}", sample.age);
        for f in &sample.features {
            let _ = write!(s, ",{f}");
        }
        s.push('\n');
    }
    s
}

/// Parses [`dataset_to_csv`] output, rebuilding labels from the ages.
pub fn parse_dataset(text: &str, classes: &AgeClassSet, theta: f64) -> Result<Vec<Sample>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(None, e.to_string()))?;
    if headers.get(0).map(str::trim) != Some("age") {
        return Err(Error::parse(
            Some(1),
            "dataset header must start with `age`",
        ));
    }
    let dim = headers.len() - 1;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record
            .map_err(|e| Error::parse(e.position().map(|p| p.line() as usize), e.to_string()))?;
        let line = record.position().map(|p| p.line() as usize);
        let age: u32 = record[0]
            .trim()
            .parse()
            .map_err(|_| Error::parse(line, "bad age"))?;
        let features = record
            .iter()
            .skip(1)
            .map(|f| match f.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::parse(line, format!("bad feature {f:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if features.len() != dim {
            return Err(Error::parse(
                line,
                format!("expected {dim} features, got {}", features.len()),
            ));
        }
        let label = gaussian_label_distribution(age, theta, classes)
            .map_err(|e| Error::parse(line, e.to_string()))?;
        out.push(Sample {
            age,
            features,
            label,
        });
    }
    Ok(out)
}
