//! Feed-forward age classifier.
//!
//! Parameters are kept in one flat vector. Each layer stores its weight
//! matrix row-major (`out × in`) followed by its bias vector; layers appear in
//! order from input to output. Hidden layers use ReLU, the output layer is
//! linear and feeds the softmax inside the K-L loss.

use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::label_dist::{self, LabelDistribution, LogitVector};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub c: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, c: usize, seed: u64) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims,
            c,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.c == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Domain(format!(
                "all layer sizes must be >= 1 (input {}, hidden {:?}, c {})",
                self.input_dim, self.hidden_dims, self.c
            )));
        }
        self.checked_param_count()
            .ok_or_else(|| Error::Domain("parameter count overflows".into()))?;
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.c);
        dims
    }

    pub(crate) fn checked_param_count(&self) -> Option<usize> {
        self.layer_dims().windows(2).try_fold(0usize, |acc, w| {
            w[0].checked_mul(w[1])?.checked_add(w[1])?.checked_add(acc)
        })
    }

    /// Total parameter count `Σ (in·out + out)`.
    pub fn param_count(&self) -> usize {
        self.checked_param_count().expect("validated spec")
    }

    fn layers(&self) -> Vec<Layer> {
        let mut offset = 0;
        self.layer_dims()
            .windows(2)
            .map(|w| {
                let layer = Layer {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset += w[0] * w[1] + w[1];
                layer
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl Layer {
    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.fan_in * self.fan_out]
    }

    fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.fan_in * self.fan_out;
        &params[start..start + self.fan_out]
    }

    fn bias_offset(&self) -> usize {
        self.offset + self.fan_in * self.fan_out
    }

    fn affine(&self, params: &[f64], input: &[f64], out: &mut Vec<f64>) {
        let w = self.weights(params);
        out.clear();
        out.extend(self.bias(params).iter().enumerate().map(|(o, &b)| {
            let row = &w[o * self.fan_in..(o + 1) * self.fan_in];
            b + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
        }));
    }
}

/// Flat model parameters `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("parameter {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ParameterVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Flat update vector `U`, same layout as [`ParameterVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateVector(Vec<f64>);

impl UpdateVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("update entry {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for UpdateVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// One training or test example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub age: u32,
    pub features: Vec<f64>,
    pub label: LabelDistribution,
}

/// Glorot-uniform weights, zero biases, fully determined by `spec.seed`.
pub fn init_model(spec: &ModelSpec) -> Result<ParameterVector> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut params = vec![0.0; spec.param_count()];
    for layer in spec.layers() {
        let scale = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
        for w in &mut params[layer.offset..layer.bias_offset()] {
            *w = rng.random_range(-scale..scale);
        }
    }
    Ok(ParameterVector(params))
}

fn check_dims(params: &[f64], spec: &ModelSpec, features: &[f64]) -> Result<()> {
    check_len(spec.param_count(), params.len())?;
    check_len(spec.input_dim, features.len())
}

/// Runs the network; `activations[0]` is the input copy and the last entry the logits.
fn forward_trace(params: &[f64], layers: &[Layer], features: &[f64]) -> Vec<Vec<f64>> {
    let mut activations = Vec::with_capacity(layers.len() + 1);
    activations.push(features.to_vec());
    for (k, layer) in layers.iter().enumerate() {
        let mut z = Vec::with_capacity(layer.fan_out);
        layer.affine(params, &activations[k], &mut z);
        if k + 1 < layers.len() {
            for v in &mut z {
                *v = v.max(0.0);
            }
        }
        activations.push(z);
    }
    activations
}

pub fn forward(
    params: &ParameterVector,
    spec: &ModelSpec,
    features: &[f64],
) -> Result<LogitVector> {
    check_dims(params, spec, features)?;
    let mut trace = forward_trace(params, &spec.layers(), features);
    LogitVector::new(trace.pop().expect("at least one layer"))
}

/// Mean K-L loss of `params` over `samples`.
pub fn mean_loss(params: &ParameterVector, spec: &ModelSpec, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Argument(
            "cannot evaluate loss on an empty sample set".into(),
        ));
    }
    let layers = spec.layers();
    let mut total = 0.0;
    for s in samples {
        check_dims(params, spec, &s.features)?;
        check_len(spec.c, s.label.len())?;
        let trace = forward_trace(params, &layers, &s.features);
        total += label_dist::loss_only(s.label.as_slice(), trace.last().expect("logits"));
    }
    Ok(total / samples.len() as f64)
}

/// Mean loss and mean parameter gradient over a mini-batch.
pub fn batch_loss_and_gradient(
    params: &ParameterVector,
    spec: &ModelSpec,
    batch: &[Sample],
) -> Result<(f64, UpdateVector)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let layers = spec.layers();
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let mut delta = Vec::new();
    let mut prev_delta = Vec::new();
    for sample in batch {
        check_dims(params, spec, &sample.features)?;
        check_len(spec.c, sample.label.len())?;
        let trace = forward_trace(params, &layers, &sample.features);

        delta.clear();
        delta.resize(spec.c, 0.0);
        loss += label_dist::loss_and_gradient_into(
            sample.label.as_slice(),
            trace.last().expect("logits"),
            &mut delta,
        );

        for (k, layer) in layers.iter().enumerate().rev() {
            let input = &trace[k];
            let w_grad = &mut grad[layer.offset..layer.bias_offset()];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut w_grad[o * layer.fan_in..(o + 1) * layer.fan_in];
                for (g, &x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            for (g, &d) in grad[layer.bias_offset()..layer.bias_offset() + layer.fan_out]
                .iter_mut()
                .zip(&delta)
            {
                *g += d;
            }
            if k == 0 {
                break;
            }
            // Back through W and the ReLU feeding this layer.
            let w = layer.weights(params);
            prev_delta.clear();
            prev_delta.resize(layer.fan_in, 0.0);
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                for (p, &wv) in prev_delta.iter_mut().zip(row) {
                    *p += d * wv;
                }
            }
            for (p, &a) in prev_delta.iter_mut().zip(input) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
            std::mem::swap(&mut delta, &mut prev_delta);
        }
    }
    let n = batch.len() as f64;
    for g in &mut grad {
        *g /= n;
    }
    Ok((loss / n, UpdateVector(grad)))
}

/// Mean over the batch of `∂loss/∂params`.
pub fn batch_gradient(
    params: &ParameterVector,
    spec: &ModelSpec,
    batch: &[Sample],
) -> Result<UpdateVector> {
    batch_loss_and_gradient(params, spec, batch).map(|(_, g)| g)
}

/// Averaged-gradient SGD step, `W - lr · aggregate / n_workers`, in place.
pub fn apply_update_in_place(
    params: &mut ParameterVector,
    aggregate: &[f64],
    lr: f64,
    n_workers: usize,
) -> Result<()> {
    check_len(params.len(), aggregate.len())?;
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Domain(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if n_workers == 0 {
        return Err(Error::Domain("n_workers must be >= 1".into()));
    }
    let n = n_workers as f64;
    for (w, &a) in params.0.iter_mut().zip(aggregate) {
        *w -= lr * (a / n);
    }
    Ok(())
}

pub fn apply_update(
    params: &ParameterVector,
    aggregate: &UpdateVector,
    lr: f64,
    n_workers: usize,
) -> Result<ParameterVector> {
    let mut next = params.clone();
    apply_update_in_place(&mut next, aggregate, lr, n_workers)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_dist::{gaussian_label_distribution, softmax, AgeClassSet};
    use rand::Rng;

    fn random_sample(rng: &mut ChaCha8Rng, spec: &ModelSpec) -> Sample {
        let classes = AgeClassSet::with_count(1, spec.c).unwrap();
        let age = rng.random_range(1..=spec.c as u32);
        Sample {
            age,
            features: (0..spec.input_dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            label: gaussian_label_distribution(age, 1.0, &classes).unwrap(),
        }
    }

    /// Straight matrix-vector reimplementation used as the forward oracle.
    fn reference_forward(params: &[f64], dims: &[usize], x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let mut off = 0;
        for (l, w) in dims.windows(2).enumerate() {
            let (fi, fo) = (w[0], w[1]);
            let mut z = vec![0.0; fo];
            for o in 0..fo {
                let mut s = params[off + fi * fo + o];
                for i in 0..fi {
                    s += params[off + o * fi + i] * a[i];
                }
                z[o] = if l + 2 < dims.len() { s.max(0.0) } else { s };
            }
            off += fi * fo + fo;
            a = z;
        }
        a
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(ModelSpec::new(4, vec![], 3, 0).unwrap().param_count(), 15);
        assert_eq!(
            ModelSpec::new(8, vec![16], 5, 0).unwrap().param_count(),
            229
        );
        assert!(ModelSpec::new(0, vec![], 3, 0).is_err());
        assert!(ModelSpec::new(4, vec![0], 3, 0).is_err());
        assert!(ModelSpec::new(usize::MAX, vec![usize::MAX], 3, 0).is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = ModelSpec::new(8, vec![16], 5, 42).unwrap();
        let a = init_model(&spec).unwrap();
        let b = init_model(&spec).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let other = init_model(&ModelSpec {
            seed: 43,
            ..spec.clone()
        })
        .unwrap();
        assert_ne!(a, other);
        let s0 = (6.0f64 / 24.0).sqrt();
        assert!(a[..128].iter().all(|w| w.abs() < s0));
        assert!(a[128..144].iter().all(|&b| b == 0.0));
        assert!(a[224..].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let spec = ModelSpec::new(3, vec![4], 6, 0).unwrap();
        let params = ParameterVector::zeros(spec.param_count());
        let logits = forward(&params, &spec, &[1.0, 2.0, 3.0]).unwrap();
        assert!(logits.as_slice().iter().all(|&v| v == 0.0));
        assert!(softmax(&logits)
            .as_slice()
            .iter()
            .all(|&p| (p - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn linear_model_hand_arithmetic() {
        // two inputs, two classes, W = [[2, 0], [0, -1]], b = [0.5, 0]
        let spec = ModelSpec::new(2, vec![], 2, 0).unwrap();
        let params = ParameterVector::new(vec![2.0, 0.0, 0.0, -1.0, 0.5, 0.0]).unwrap();
        let logits = forward(&params, &spec, &[3.0, 4.0]).unwrap();
        assert_eq!(logits.as_slice(), &[6.5, -4.0]);
        assert!(matches!(
            forward(&params, &spec, &[1.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn forward_matches_reference_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for seed in 0..20 {
            let spec = ModelSpec::new(5, vec![7, 4], 6, seed).unwrap();
            let params = init_model(&spec).unwrap();
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = forward(&params, &spec, &x).unwrap();
            let want = reference_forward(&params, &spec.layer_dims(), &x);
            for (g, w) in got.as_slice().iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_self_consistent_labels() {
        let spec = ModelSpec::new(4, vec![6], 5, 3).unwrap();
        let params = init_model(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch: Vec<Sample> = (0..4)
            .map(|_| {
                let features: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let q = softmax(&forward(&params, &spec, &features).unwrap());
                Sample {
                    age: 1,
                    features,
                    label: LabelDistribution::from_probs(q.into_inner()).unwrap(),
                }
            })
            .collect();
        let g = batch_gradient(&params, &spec, &batch).unwrap();
        assert!(g.iter().all(|v| v.abs() <= 1e-9));
    }

    #[test]
    fn empty_batch_rejected() {
        let spec = ModelSpec::new(4, vec![], 3, 0).unwrap();
        let params = init_model(&spec).unwrap();
        assert!(matches!(
            batch_gradient(&params, &spec, &[]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn linear_model_matches_finite_differences() {
        let spec = ModelSpec::new(6, vec![], 8, 11).unwrap();
        let params = init_model(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let sample = random_sample(&mut rng, &spec);
        let g = batch_gradient(&params, &spec, std::slice::from_ref(&sample)).unwrap();
        let h = 1e-5;
        for j in 0..params.len() {
            let mut p = params.clone().into_inner();
            p[j] += h;
            let lp = mean_loss(
                &ParameterVector(p.clone()),
                &spec,
                std::slice::from_ref(&sample),
            )
            .unwrap();
            p[j] -= 2.0 * h;
            let lm = mean_loss(&ParameterVector(p), &spec, std::slice::from_ref(&sample)).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let denom = g[j].abs().max(fd.abs()).max(1e-4);
            assert!(
                (g[j] - fd).abs() / denom <= 1e-4,
                "param {j}: {} vs {fd}",
                g[j]
            );
        }
    }

    #[test]
    fn duplicated_batch_gives_same_gradient() {
        let spec = ModelSpec::new(4, vec![5], 6, 2).unwrap();
        let params = init_model(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch: Vec<Sample> = (0..3).map(|_| random_sample(&mut rng, &spec)).collect();
        let doubled: Vec<Sample> = batch.iter().chain(batch.iter()).cloned().collect();
        let a = batch_gradient(&params, &spec, &batch).unwrap();
        let b = batch_gradient(&params, &spec, &doubled).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn concatenated_batches_are_size_weighted_means() {
        let spec = ModelSpec::new(3, vec![4], 5, 8).unwrap();
        let params = init_model(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a: Vec<Sample> = (0..2).map(|_| random_sample(&mut rng, &spec)).collect();
        let b: Vec<Sample> = (0..5).map(|_| random_sample(&mut rng, &spec)).collect();
        let all: Vec<Sample> = a.iter().chain(&b).cloned().collect();
        let ga = batch_gradient(&params, &spec, &a).unwrap();
        let gb = batch_gradient(&params, &spec, &b).unwrap();
        let gall = batch_gradient(&params, &spec, &all).unwrap();
        for j in 0..gall.len() {
            let weighted = (2.0 * ga[j] + 5.0 * gb[j]) / 7.0;
            assert!((gall[j] - weighted).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_update_examples() {
        let params = ParameterVector::new(vec![1.0, 1.0]).unwrap();
        let zero = UpdateVector::zeros(2);
        assert_eq!(apply_update(&params, &zero, 0.1, 3).unwrap(), params);

        let agg = UpdateVector::new(vec![1.0, -1.0]).unwrap();
        let next = apply_update(&params, &agg, 0.1, 1).unwrap();
        assert!((next[0] - 0.9).abs() < 1e-15 && (next[1] - 1.1).abs() < 1e-15);

        // four identical contributions averaged equal one
        let four = UpdateVector::new(vec![4.0, -4.0]).unwrap();
        assert_eq!(apply_update(&params, &four, 0.1, 4).unwrap(), next);

        assert!(apply_update(&params, &UpdateVector::zeros(3), 0.1, 1).is_err());
        assert!(apply_update(&params, &agg, 0.0, 1).is_err());
        assert!(apply_update(&params, &agg, 0.1, 0).is_err());
    }
}
