//! Wire layout of group vectors.
//!
//! Values are written in index order, each occupying exactly `p` bits,
//! least-significant bit first. Bits fill bytes starting at bit 0 of byte 0;
//! the final partial byte is zero-padded in its high bits.

use super::{Group, GroupVector};
use crate::error::{Error, Result};

pub fn packed_len(count: usize, bits: u32) -> usize {
    (count * bits as usize).div_ceil(8)
}

pub fn pack_bits(values: &[u32], bits: u32) -> Vec<u8> {
    assert!((1..=32).contains(&bits));
    let mut out = Vec::with_capacity(packed_len(values.len(), bits));
    let mask = if bits == 32 { u32::MAX } else { (1u32 << bits) - 1 };
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for &v in values {
        acc |= ((v & mask) as u64) << filled;
        filled += bits;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    out
}

pub fn unpack_bits(bytes: &[u8], count: usize, bits: u32) -> Result<Vec<u32>> {
    if !(1..=32).contains(&bits) {
        return Err(Error::invalid(format!("bit-width {bits} outside [1, 32]")));
    }
    let expected = packed_len(count, bits);
    if bytes.len() != expected {
        return Err(Error::Framing(format!(
            "expected {expected} bytes for {count} values of {bits} bits, got {}",
            bytes.len()
        )));
    }
    let mask = if bits == 32 { u64::from(u32::MAX) } else { (1u64 << bits) - 1 };
    let mut out = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mut iter = bytes.iter();
    for _ in 0..count {
        while filled < bits {
            acc |= (*iter.next().expect("length checked") as u64) << filled;
            filled += 8;
        }
        out.push((acc & mask) as u32);
        acc >>= bits;
        filled -= bits;
    }
    if acc != 0 {
        return Err(Error::Framing("non-zero padding bits".into()));
    }
    Ok(out)
}

pub fn pack(v: &GroupVector) -> Vec<u8> {
    pack_bits(v.values(), v.bit_width())
}

/// Inverse of [`pack`] for `Z_{2^p}`.
pub fn unpack(bytes: &[u8], len: usize, p: u32) -> Result<GroupVector> {
    unpack_in(bytes, len, Group::pow2(p)?)
}

/// Inverse of [`pack`] for any group; rejects residues outside the group.
pub fn unpack_in(bytes: &[u8], len: usize, group: Group) -> Result<GroupVector> {
    let values = unpack_bits(bytes, len, group.bit_width())?;
    GroupVector::new(values, group).map_err(|e| Error::Framing(e.to_string()))
}
