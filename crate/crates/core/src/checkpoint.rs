//! Model checkpoint files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic         8 bytes  "ASUCKPT1"
//! input_dim     u32
//! c             u32
//! hidden_count  u32
//! hidden_dims   hidden_count × u32
//! seed          u64
//! min_age       u32
//! param_count   u64      must equal the count implied by the dims
//! payload       param_count × f32
//! ```

use std::fs;
use std::path::Path;

use crate::agemodel::{ModelSpec, ParameterVector};
use crate::error::{check_len, Error, Result};
use crate::label_dist::AgeClassSet;

pub const MAGIC: &[u8; 8] = b"ASUCKPT1";

/// Hidden-layer count accepted by the decoder.
pub const MAX_HIDDEN_LAYERS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub min_age: u32,
    pub params: ParameterVector,
}

impl Checkpoint {
    pub fn new(spec: ModelSpec, min_age: u32, params: ParameterVector) -> Result<Self> {
        spec.validate()?;
        check_len(spec.param_count(), params.len())?;
        AgeClassSet::with_count(min_age, spec.c)?;
        if u32::try_from(spec.input_dim).is_err()
            || u32::try_from(spec.c).is_err()
            || spec.hidden_dims.len() > MAX_HIDDEN_LAYERS
            || spec.hidden_dims.iter().any(|&h| u32::try_from(h).is_err())
        {
            return Err(Error::Domain(
                "model dimensions exceed the checkpoint format".into(),
            ));
        }
        Ok(Self {
            spec,
            min_age,
            params,
        })
    }

    pub fn classes(&self) -> AgeClassSet {
        AgeClassSet::with_count(self.min_age, self.spec.c).expect("validated on construction")
    }

    pub fn encode(&self) -> Vec<u8> {
        let spec = &self.spec;
        let mut out = Vec::with_capacity(48 + 4 * spec.hidden_dims.len() + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(spec.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(spec.c as u32).to_le_bytes());
        out.extend_from_slice(&(spec.hidden_dims.len() as u32).to_le_bytes());
        for &h in &spec.hidden_dims {
            out.extend_from_slice(&(h as u32).to_le_bytes());
        }
        out.extend_from_slice(&spec.seed.to_le_bytes());
        out.extend_from_slice(&self.min_age.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for &p in self.params.iter() {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Corrupt("bad checkpoint magic".into()));
        }
        let input_dim = r.u32()? as usize;
        let c = r.u32()? as usize;
        let hidden_count = r.u32()? as usize;
        if hidden_count > MAX_HIDDEN_LAYERS {
            return Err(Error::Corrupt(format!(
                "{hidden_count} hidden layers exceeds {MAX_HIDDEN_LAYERS}"
            )));
        }
        let hidden_dims = (0..hidden_count)
            .map(|_| r.u32().map(|h| h as usize))
            .collect::<Result<Vec<_>>>()?;
        let seed = r.u64()?;
        let min_age = r.u32()?;
        let param_count = r.u64()?;
        let spec = ModelSpec {
            input_dim,
            hidden_dims,
            c,
            seed,
        };
        spec.validate()
            .map_err(|e| Error::Corrupt(format!("invalid model dims: {e}")))?;
        if spec.param_count() as u64 != param_count {
            return Err(Error::Corrupt(format!(
                "header declares {param_count} parameters but dims imply {}",
                spec.param_count()
            )));
        }
        let remaining = bytes.len() - r.pos;
        if (remaining as u64) != param_count.saturating_mul(4) {
            return Err(Error::Corrupt(format!(
                "payload holds {remaining} bytes, expected {} for {param_count} parameters",
                param_count.saturating_mul(4)
            )));
        }
        let params = bytes[r.pos..]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect::<Vec<_>>();
        let params = ParameterVector::new(params).map_err(|e| Error::Corrupt(e.to_string()))?;
        Self::new(spec, min_age, params).map_err(|e| Error::Corrupt(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt("truncated checkpoint header".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
