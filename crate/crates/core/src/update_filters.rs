//! Push-side update filters.
//!
//! * `RAW` pushes every non-zero coordinate.
//! * `DSU` pushes coordinates with `|u| > delta` and discards the rest.
//! * `ASU` first adds the residual carried over from earlier pushes, pushes
//!   coordinates with `|e| > delta` and keeps the rest as the new residual.
//!
//! Coordinates with `|e| == delta` are dropped.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FilterKind {
    #[serde(rename = "RAW")]
    Raw,
    #[serde(rename = "DSU")]
    Dsu,
    #[serde(rename = "ASU")]
    Asu,
}

impl FilterKind {
    pub const ALL: [FilterKind; 3] = [FilterKind::Raw, FilterKind::Dsu, FilterKind::Asu];

    pub fn as_str(&self) -> &'static str {
        match self {
            FilterKind::Raw => "RAW",
            FilterKind::Dsu => "DSU",
            FilterKind::Asu => "ASU",
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RAW" => Ok(FilterKind::Raw),
            "DSU" => Ok(FilterKind::Dsu),
            "ASU" => Ok(FilterKind::Asu),
            _ => Err(Error::Argument(format!(
                "unknown filter kind {s:?} (expected RAW, DSU or ASU)"
            ))),
        }
    }
}

/// Coordinates that survived a filter, sorted by index.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseUpdate {
    entries: Vec<(u32, f64)>,
    total_dims: usize,
}

impl SparseUpdate {
    /// Checks that indices are strictly increasing and below `total_dims`.
    pub fn new(entries: Vec<(u32, f64)>, total_dims: usize) -> Result<Self> {
        let mut prev: Option<u32> = None;
        for &(i, v) in &entries {
            if (i as usize) >= total_dims {
                return Err(Error::Corrupt(format!(
                    "index {i} out of range for {total_dims} dims"
                )));
            }
            if prev.is_some_and(|p| p >= i) {
                return Err(Error::Corrupt(format!(
                    "index {i} is not strictly increasing"
                )));
            }
            if !v.is_finite() {
                return Err(Error::Corrupt(format!("non-finite value at index {i}")));
            }
            prev = Some(i);
        }
        Ok(Self {
            entries,
            total_dims,
        })
    }

    pub fn empty(total_dims: usize) -> Self {
        Self {
            entries: Vec::new(),
            total_dims,
        }
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn total_dims(&self) -> usize {
        self.total_dims
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fraction of coordinates withheld, `1 - entries / total_dims`.
    pub fn drop_fraction(&self) -> Result<f64> {
        if self.total_dims == 0 {
            return Err(Error::Domain(
                "drop fraction of a zero-dimensional update".into(),
            ));
        }
        Ok(1.0 - self.entries.len() as f64 / self.total_dims as f64)
    }

    /// Dense reconstruction with zeros for absent coordinates.
    pub fn densify(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.total_dims];
        self.add_into(&mut dense);
        dense
    }

    /// Adds the entries onto `dense` (which must have `total_dims` entries).
    pub fn add_into(&self, dense: &mut [f64]) {
        for &(i, v) in &self.entries {
            dense[i as usize] += v;
        }
    }
}

pub fn drop_fraction(pushed: &SparseUpdate) -> Result<f64> {
    pushed.drop_fraction()
}

pub fn densify(sparse: &SparseUpdate) -> Vec<f64> {
    sparse.densify()
}

/// Per-worker filter with its residual of withheld update mass.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    kind: FilterKind,
    delta: f64,
    residual: Vec<f64>,
}

impl FilterState {
    pub fn new(kind: FilterKind, delta: f64, dims: usize) -> Result<Self> {
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::Domain(format!(
                "threshold must be finite and >= 0, got {delta}"
            )));
        }
        if u32::try_from(dims.saturating_sub(1)).is_err() {
            return Err(Error::Domain(format!(
                "{dims} dims do not fit 32-bit indices"
            )));
        }
        Ok(Self {
            kind,
            delta,
            residual: vec![0.0; dims],
        })
    }

    pub fn kind(&self) -> FilterKind {
        self.kind
    }

    /// Threshold actually applied; RAW always uses 0.
    pub fn delta(&self) -> f64 {
        match self.kind {
            FilterKind::Raw => 0.0,
            _ => self.delta,
        }
    }

    pub fn residual(&self) -> &[f64] {
        &self.residual
    }

    /// Filters one update vector, updating the residual for ASU.
    pub fn push(&mut self, update: &[f64]) -> Result<SparseUpdate> {
        check_len(self.residual.len(), update.len())?;
        let delta = self.delta();
        let mut entries = Vec::new();
        match self.kind {
            FilterKind::Asu => {
                for (j, (r, &u)) in self.residual.iter_mut().zip(update).enumerate() {
                    let e = u + *r;
                    if e.abs() > delta {
                        entries.push((j as u32, e));
                        *r = 0.0;
                    } else {
                        *r = e;
                    }
                }
            }
            FilterKind::Raw | FilterKind::Dsu => {
                entries.extend(
                    update
                        .iter()
                        .enumerate()
                        .filter(|(_, u)| u.abs() > delta)
                        .map(|(j, &u)| (j as u32, u)),
                );
            }
        }
        if let Some(&(j, _)) = entries.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite update at coordinate {j}"
            )));
        }
        Ok(SparseUpdate {
            entries,
            total_dims: self.residual.len(),
        })
    }
}

/// Functional form: returns the pushed coordinates and the successor state.
pub fn filter_push(state: &FilterState, update: &[f64]) -> Result<(SparseUpdate, FilterState)> {
    let mut next = state.clone();
    let pushed = next.push(update)?;
    Ok((pushed, next))
}
