//! Binary frame shared by pushes and pulls.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size  field
//!      0     4  sender       u32   worker id, or SERVER_ID for pulls
//!      4     8  iteration    u64
//!     12     4  entry_count  u32
//!     16     8  total_dims   u64
//!     24   8·n  entries      n × (index u32, value f32)
//! ```
//!
//! Indices are strictly increasing and below `total_dims`. Values are
//! narrowed to `f32` on encode.

use crate::error::{Error, Result};
use crate::update_filters::SparseUpdate;

pub const HEADER_BYTES: usize = 24;
pub const ENTRY_BYTES: usize = 8;

/// Sender id used for frames written by the server.
pub const SERVER_ID: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub sender: u32,
    pub iteration: u64,
    pub update: SparseUpdate,
}

pub fn encoded_len(entry_count: usize) -> usize {
    HEADER_BYTES + entry_count * ENTRY_BYTES
}

pub fn encode_frame(sender: u32, iteration: u64, update: &SparseUpdate) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(update.len()));
    out.extend_from_slice(&sender.to_le_bytes());
    out.extend_from_slice(&iteration.to_le_bytes());
    out.extend_from_slice(&(update.len() as u32).to_le_bytes());
    out.extend_from_slice(&(update.total_dims() as u64).to_le_bytes());
    for &(i, v) in update.entries() {
        out.extend_from_slice(&i.to_le_bytes());
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn read_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

/// Decodes one frame; the buffer must contain exactly one frame.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Corrupt(format!(
            "frame of {} bytes is shorter than the {HEADER_BYTES}-byte header",
            bytes.len()
        )));
    }
    let sender = read_u32(bytes, 0);
    let iteration = read_u64(bytes, 4);
    let count = read_u32(bytes, 12) as usize;
    let total_dims = read_u64(bytes, 16);
    let body = &bytes[HEADER_BYTES..];
    if body.len() / ENTRY_BYTES != count || !body.len().is_multiple_of(ENTRY_BYTES) {
        return Err(Error::Corrupt(format!(
            "header announces {count} entries but body holds {} bytes",
            body.len()
        )));
    }
    if total_dims > u64::from(u32::MAX) + 1 {
        return Err(Error::Corrupt(format!(
            "total_dims {total_dims} exceeds 32-bit index space"
        )));
    }
    let entries = body
        .chunks_exact(ENTRY_BYTES)
        .map(|c| {
            (
                read_u32(c, 0),
                f64::from(f32::from_le_bytes(c[4..8].try_into().expect("4 bytes"))),
            )
        })
        .collect();
    let update = SparseUpdate::new(entries, total_dims as usize)?;
    Ok(Frame {
        sender,
        iteration,
        update,
    })
}
