//! raw-rgb container, all integers little-endian:
//!
//! ```text
//! offset 0   magic    8 bytes "RAWRGB01"
//! offset 8   count    u32
//! offset 12  height   u32
//! offset 16  width    u32
//! offset 20  flags    u8   (bit 0: labels present)
//! offset 21  classes  u16
//! offset 23  pixels   count × height × width × 3 bytes, HWC order
//!            labels   count × u16, only when flagged
//! ```

use super::{ImageDataset, Split};
use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 8] = b"RAWRGB01";
const HEADER: usize = 23;

pub fn write_raw_rgb(ds: &ImageDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + ds.raw_pixels().len() + ds.len() * 2);
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.height() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.width() as u32).to_le_bytes());
    out.push(u8::from(ds.labels().is_some()));
    out.extend_from_slice(&(ds.classes() as u16).to_le_bytes());
    out.extend_from_slice(ds.raw_pixels());
    if let Some(labels) = ds.labels() {
        for &l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

fn truncated(offset: usize, what: &str) -> Error {
    Error::Format { offset, message: format!("file ends inside {what}") }
}

pub fn read_raw_rgb(bytes: &[u8], split: Split) -> Result<ImageDataset> {
    if bytes.len() < 8 {
        return Err(truncated(bytes.len(), "magic"));
    }
    if &bytes[..8] != RAW_MAGIC {
        return Err(Error::Format { offset: 0, message: "bad raw-rgb magic".into() });
    }
    if bytes.len() < HEADER {
        return Err(truncated(bytes.len(), "header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (count, height, width) = (u32_at(8), u32_at(12), u32_at(16));
    let flags = bytes[20];
    let classes = u16::from_le_bytes([bytes[21], bytes[22]]) as usize;
    if flags & !1 != 0 {
        return Err(Error::Format { offset: 20, message: format!("unknown flag bits {flags:#04x}") });
    }
    if height == 0 || width == 0 {
        return Err(Error::Format { offset: 12, message: "zero image extent".into() });
    }
    let pixel_bytes = count
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| Error::Format { offset: 8, message: "image block size overflows".into() })?;
    let pix_end = HEADER + pixel_bytes;
    if bytes.len() < pix_end {
        return Err(truncated(bytes.len(), "pixel block"));
    }
    let has_labels = flags & 1 == 1;
    let end = if has_labels { pix_end + 2 * count } else { pix_end };
    if bytes.len() < end {
        return Err(truncated(bytes.len(), "label block"));
    }
    if bytes.len() > end {
        return Err(Error::Format { offset: end, message: "trailing bytes".into() });
    }
    let labels = has_labels.then(|| {
        bytes[pix_end..end].chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect::<Vec<_>>()
    });
    if let Some(l) = &labels {
        if let Some(pos) = l.iter().position(|&c| c as usize >= classes) {
            return Err(Error::Format { offset: pix_end + 2 * pos, message: format!("label {} ≥ classes {classes}", l[pos]) });
        }
    }
    ImageDataset::new(height, width, bytes[HEADER..pix_end].to_vec(), labels, classes, split)
}
