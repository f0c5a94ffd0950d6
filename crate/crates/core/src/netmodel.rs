//! Analytic push/pull cost model. Sizes are in bytes, `MB` is 10^6 bytes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wire;

pub const MB: f64 = 1e6;
pub const BYTES_PER_VALUE: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkModel {
    pub bandwidth_bps: f64,
    #[serde(default)]
    pub latency_s: f64,
}

impl LinkModel {
    pub fn new(bandwidth_bps: f64, latency_s: f64) -> Result<Self> {
        let link = Self {
            bandwidth_bps,
            latency_s,
        };
        link.validate()?;
        Ok(link)
    }

    pub fn gbps(g: f64) -> Self {
        Self {
            bandwidth_bps: g * 1e9,
            latency_s: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_bps > 0.0) || !self.bandwidth_bps.is_finite() {
            return Err(Error::Domain(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth_bps
            )));
        }
        if !(self.latency_s >= 0.0) || !self.latency_s.is_finite() {
            return Err(Error::Domain(format!(
                "latency must be >= 0, got {}",
                self.latency_s
            )));
        }
        Ok(())
    }

    /// Seconds to move `bytes` across the link as one message.
    pub fn transfer_seconds(&self, bytes: u64) -> f64 {
        self.latency_s + 8.0 * bytes as f64 / self.bandwidth_bps
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationTiming {
    pub compute_seconds: f64,
    pub push_seconds: f64,
    pub pull_seconds: f64,
    pub total_seconds: f64,
}

impl IterationTiming {
    pub fn communication_seconds(&self) -> f64 {
        self.push_seconds + self.pull_seconds
    }
}

pub fn dense_bytes(num_params: u64, bytes_per_value: u64) -> u64 {
    num_params * bytes_per_value
}

/// Encoded size of a sparse frame carrying `num_entries` coordinates.
pub fn sparse_bytes(num_entries: u64) -> u64 {
    wire::HEADER_BYTES as u64 + num_entries * wire::ENTRY_BYTES as u64
}

pub fn iteration_time(
    compute_seconds: f64,
    push_bytes: u64,
    pull_bytes: u64,
    link: &LinkModel,
) -> Result<IterationTiming> {
    link.validate()?;
    if !(compute_seconds >= 0.0) || !compute_seconds.is_finite() {
        return Err(Error::Domain(format!(
            "compute time must be >= 0, got {compute_seconds}"
        )));
    }
    let push_seconds = link.transfer_seconds(push_bytes);
    let pull_seconds = link.transfer_seconds(pull_bytes);
    Ok(IterationTiming {
        compute_seconds,
        push_seconds,
        pull_seconds,
        total_seconds: compute_seconds + push_seconds + pull_seconds,
    })
}

pub fn speedup_ratio(baseline: &IterationTiming, candidate: &IterationTiming) -> Result<f64> {
    if !(candidate.total_seconds > 0.0) {
        return Err(Error::Domain(
            "candidate iteration time must be positive".into(),
        ));
    }
    Ok(baseline.total_seconds / candidate.total_seconds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dense_byte_examples() {
        assert_eq!(dense_bytes(135_000_000, 4), 540_000_000);
        assert_eq!(dense_bytes(135_000_000, 4) as f64 / MB, 540.0);
        assert_eq!(dense_bytes(0, 4), 0);
        assert_eq!(dense_bytes(1000, 4), 4000);
    }

    #[test]
    fn sparse_byte_examples() {
        assert_eq!(sparse_bytes(1_620_000), 12_960_024);
        assert_eq!(sparse_bytes(0), 24);
        assert_eq!(sparse_bytes(1), 32);
    }

    #[test]
    fn timing_examples() {
        let t = iteration_time(0.0, 540_000_000, 540_000_000, &LinkModel::gbps(1.0)).unwrap();
        assert!((t.communication_seconds() - 8.64).abs() < 1e-12);
        let zero = iteration_time(0.0, 0, 0, &LinkModel::gbps(1.0)).unwrap();
        assert_eq!(zero.communication_seconds(), 0.0);
        let fast = iteration_time(0.0, 540_000_000, 540_000_000, &LinkModel::gbps(10.0)).unwrap();
        assert!((fast.communication_seconds() * 10.0 - t.communication_seconds()).abs() < 1e-12);
        assert!(iteration_time(-1.0, 0, 0, &LinkModel::gbps(1.0)).is_err());
        assert!(LinkModel::new(0.0, 0.0).is_err());
        assert!(LinkModel::new(1e9, -1.0).is_err());
    }

    fn timing(compute: f64, comm: f64) -> IterationTiming {
        IterationTiming {
            compute_seconds: compute,
            push_seconds: comm / 2.0,
            pull_seconds: comm / 2.0,
            total_seconds: compute + comm,
        }
    }

    #[test]
    fn speedup_examples() {
        let t = timing(2.0, 8.64);
        assert_eq!(speedup_ratio(&t, &t).unwrap(), 1.0);
        // (2 + 8.64) / (2 + 8.64 / 41.5)
        let r = speedup_ratio(&t, &timing(2.0, 8.64 / 41.5)).unwrap();
        assert!((r - 4.818419903972065).abs() < 1e-9);
        let r = speedup_ratio(&t, &timing(2.0, 0.0)).unwrap();
        assert!((r - 10.64 / 2.0).abs() < 1e-12);
        assert!(speedup_ratio(&t, &timing(0.0, 0.0)).is_err());
    }

    proptest! {
        #[test]
        fn comm_reduction_equals_byte_ratio(dense in 1u64..1_000_000_000, sparse in 1u64..1_000_000_000, g in 0.1f64..100.0) {
            let link = LinkModel::gbps(g);
            let a = iteration_time(0.0, dense, dense, &link).unwrap();
            let b = iteration_time(0.0, sparse, sparse, &link).unwrap();
            let ratio = a.communication_seconds() / b.communication_seconds();
            prop_assert!((ratio / (dense as f64 / sparse as f64) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn speedup_decreases_with_bandwidth(compute in 1e-3f64..100.0, g1 in 0.1f64..100.0, g2 in 0.1f64..100.0) {
            let (slow, fast) = if g1 < g2 { (g1, g2) } else { (g2, g1) };
            prop_assume!(fast > slow * 1.01);
            let s = |g: f64| {
                let link = LinkModel::gbps(g);
                let base = iteration_time(compute, 540_000_000, 540_000_000, &link).unwrap();
                let cand = iteration_time(compute, sparse_bytes(1_620_000), sparse_bytes(1_620_000), &link).unwrap();
                speedup_ratio(&base, &cand).unwrap()
            };
            prop_assert!(s(slow) > s(fast));
        }

        #[test]
        fn self_speedup_is_one(compute in 1e-6f64..1e3, comm in 0.0f64..1e3) {
            let t = timing(compute, comm);
            prop_assert_eq!(speedup_ratio(&t, &t).unwrap(), 1.0);
        }
    }
}
