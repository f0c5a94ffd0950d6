//! Parameter-server training with aggregated sparse updates.
//!
//! Workers train an age-estimation MLP on label distributions, filter their
//! gradients before pushing them (raw, dropped or aggregated sparse updates),
//! and a server applies averaged SGD. Around that loop sit an analytic
//! communication cost model, evaluation metrics, a binary checkpoint and wire
//! format, and interval-batched stream scoring with an age-group histogram.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agemodel;
pub mod checkpoint;
pub mod demographics_stream;
pub mod error;
pub mod experiment;
pub mod label_dist;
pub mod metrics;
pub mod netmodel;
pub mod output;
pub mod ps_core;
pub mod synthetic;
pub mod update_filters;
pub mod wire;

pub use error::{Error, Result};
