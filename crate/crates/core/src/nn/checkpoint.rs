//! Flat binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "SSLCKPT1"
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   kind     u8       0 weight, 1 bias, 2 norm scale, 3 norm shift, 4 buffer
//!   rank     u32, dims (u64 × rank)
//!   payload  f64 × product(dims)
//! ```
//!
//! Trainable parameters are written first, buffers after them, each in
//! network order.

use std::io::{Read, Write};
use std::path::Path;

use super::params::{ParamKind, ParamSet, Weights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SSLCKPT1";

pub fn encode(weights: &Weights) -> Vec<u8> {
    let all: Vec<_> = weights.params.iter().chain(weights.buffers.iter()).collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(all.len() as u32).to_le_bytes());
    for p in all {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.kind.code());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format { offset: self.pos, message: format!("truncated while reading {what}") }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Weights> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, message: "bad checkpoint magic".into() });
    }
    let count = c.u32("tensor count")?;
    let mut weights = Weights::default();
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| Error::Format { offset: at, message: "tensor name is not UTF-8".into() })?
            .to_string();
        let at = c.pos;
        let kind = ParamKind::from_code(c.take(1, "kind")?[0])
            .ok_or_else(|| Error::Format { offset: at, message: "unknown tensor kind".into() })?;
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(c.u64("dimension")? as usize);
        }
        let at = c.pos;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::Format { offset: at, message: "tensor too large".into() })?;
        let payload = c.take(numel * 8, "payload")?;
        let data = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let value = Tensor::new(shape, data).map_err(|e| Error::Format { offset: at, message: e.to_string() })?;
        let set: &mut ParamSet = if kind == ParamKind::Buffer { &mut weights.buffers } else { &mut weights.params };
        set.push(name, kind, value);
    }
    if c.pos != bytes.len() {
        return Err(Error::Format { offset: c.pos, message: "trailing bytes after last tensor".into() });
    }
    Ok(weights)
}

pub fn save(weights: &Weights, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(weights))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Weights> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Load a checkpoint and require it to match `expected`'s layout.
pub fn load_matching(path: &Path, expected: &Weights) -> Result<Weights> {
    let w = load(path)?;
    if !w.params.same_layout(&expected.params) || !w.buffers.same_layout(&expected.buffers) {
        return Err(Error::config(format!("checkpoint {} does not match the configured tower", path.display())));
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Weights {
        let mut w = Weights::default();
        w.params.push("a.weight", ParamKind::Weight, Tensor::new([2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-300, -0.0]).unwrap());
        w.params.push("a.bias", ParamKind::Bias, Tensor::vector(&[f64::MIN_POSITIVE, 7.0, 8.0]));
        w.buffers.push("bn.running_var", ParamKind::Buffer, Tensor::vector(&[1.0]));
        w
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let w = sample();
        let back = decode(&encode(&w)).unwrap();
        assert_eq!(encode(&back), encode(&w));
        assert_eq!(back, w);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode(&sample());
        for cut in [0, 7, 12, bytes.len() - 1] {
            match decode(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));
    }
}
