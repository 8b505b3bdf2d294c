//! Spike batch framing.
//!
//! A frame is a 16-byte little-endian header `step u32, src u16, dst u16,
//! count u32, payload_len u32` followed by the payload: the batch's local ids
//! as LEB128 varints, the first absolute and the rest as gaps to the previous
//! id. An empty batch has an empty payload.

use crate::error::{Error, Result};

pub const HEADER_BYTES: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeBatch {
    pub step: u64,
    pub src: usize,
    pub dst: usize,
    /// Strictly ascending source-local ids.
    pub ids: Vec<u32>,
}

fn put_varint(out: &mut Vec<u8>, mut x: u32) {
    while x >= 0x80 {
        out.push((x as u8) | 0x80);
        x >>= 7;
    }
    out.push(x as u8);
}

fn get_varint(buf: &[u8], pos: &mut usize) -> Option<u32> {
    let mut x: u64 = 0;
    for shift in (0..35).step_by(7) {
        let b = *buf.get(*pos)?;
        *pos += 1;
        x |= ((b & 0x7f) as u64) << shift;
        if b & 0x80 == 0 {
            return u32::try_from(x).ok();
        }
    }
    None
}

/// Encodes `ids` (strictly ascending) into a frame.
pub fn encode(step: u64, src: usize, dst: usize, ids: &[u32]) -> Vec<u8> {
    debug_assert!(ids.windows(2).all(|w| w[0] < w[1]));
    let mut out = Vec::with_capacity(HEADER_BYTES + ids.len() * 2);
    out.extend_from_slice(&(step as u32).to_le_bytes());
    out.extend_from_slice(&(src as u16).to_le_bytes());
    out.extend_from_slice(&(dst as u16).to_le_bytes());
    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    let mut prev = 0;
    for (i, &id) in ids.iter().enumerate() {
        put_varint(&mut out, if i == 0 { id } else { id - prev });
        prev = id;
    }
    let len = (out.len() - HEADER_BYTES) as u32;
    out[12..16].copy_from_slice(&len.to_le_bytes());
    out
}

/// Payload bytes of a frame (header excluded).
pub fn payload_len(frame: &[u8]) -> usize {
    frame.len().saturating_sub(HEADER_BYTES)
}

/// Decodes a frame; every id must be below `limit(src)`.
pub fn decode(frame: &[u8], limit: impl Fn(usize) -> Option<u32>) -> Result<SpikeBatch> {
    let bad = |m: String| Error::Corruption(m);
    if frame.len() < HEADER_BYTES {
        return Err(bad(format!("frame of {} bytes is shorter than its header", frame.len())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(frame[o..o + 4].try_into().unwrap());
    let step = u32_at(0) as u64;
    let src = u16::from_le_bytes([frame[4], frame[5]]) as usize;
    let dst = u16::from_le_bytes([frame[6], frame[7]]) as usize;
    let count = u32_at(8) as usize;
    let len = u32_at(12) as usize;
    if len != frame.len() - HEADER_BYTES {
        return Err(bad(format!("payload length {len} does not match frame size {}", frame.len())));
    }
    let limit = limit(src).ok_or_else(|| bad(format!("batch from unknown worker {src}")))?;
    let payload = &frame[HEADER_BYTES..];
    let mut ids = Vec::with_capacity(count);
    let mut pos = 0;
    let mut prev = 0u32;
    for i in 0..count {
        let d = get_varint(payload, &mut pos).ok_or_else(|| bad(format!("truncated varint in batch {src}->{dst}")))?;
        let id = if i == 0 {
            d
        } else {
            if d == 0 {
                return Err(bad(format!("duplicate id in batch {src}->{dst} at step {step}")));
            }
            prev.checked_add(d).ok_or_else(|| bad("id overflow".into()))?
        };
        if id >= limit {
            return Err(bad(format!(
                "id {id} out of range for worker {src} ({limit} neurons) at step {step}"
            )));
        }
        ids.push(id);
        prev = id;
    }
    if pos != payload.len() {
        return Err(bad(format!("{} trailing payload bytes", payload.len() - pos)));
    }
    Ok(SpikeBatch { step, src, dst, ids })
}
