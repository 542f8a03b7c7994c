//! Plaintext checks for the simulator. Nothing on the protocol path calls
//! into this module; it needs the unmasked client updates.

use crate::codec_scalar::{aggregate_window_low, FixedPoint, QParams};
use crate::error::{Error, Result};
use crate::finite_group::{Group, GroupVector};

fn check_updates(updates: &[GroupVector]) -> Result<usize> {
    let first = updates
        .first()
        .ok_or_else(|| Error::invalid("no updates"))?;
    if updates.iter().any(|u| u.len() != first.len()) {
        return Err(Error::dimension("updates differ in length"));
    }
    Ok(first.len())
}

/// Fraction of positions whose true integer sum falls outside the range the
/// width-`p` aggregate decodes to, i.e. positions where the modular sum wrapped.
/// With zero point 0 that is exactly `sum >= 2^p`.
pub fn detect_overflows(updates: &[GroupVector], qp: &QParams, p: u32) -> Result<f64> {
    let len = check_updates(updates)?;
    if updates.iter().any(|u| u.group() != Group::PowerOfTwo(qp.bit_width() as u8)) {
        return Err(Error::dimension("updates are not codes of this quantizer"));
    }
    if len == 0 {
        return Ok(0.0);
    }
    let n = updates.len();
    let lo = aggregate_window_low(qp, n, p) as i128;
    let hi = lo + (1i128 << p);
    let nz = n as i128 * qp.zero_point() as i128;
    let wrapped = (0..len)
        .filter(|&j| {
            let s = updates.iter().map(|u| u.values()[j] as i128).sum::<i128>() - nz;
            s < lo || s >= hi
        })
        .count();
    Ok(wrapped as f64 / len as f64)
}

/// Same check for weighted fixed-point updates: the signed sum must stay in
/// `[-2^(p-1), 2^(p-1))`.
pub fn detect_fixed_point_overflows(
    updates: &[GroupVector],
    weights: &[u64],
    fp: &FixedPoint,
) -> Result<f64> {
    let len = check_updates(updates)?;
    if weights.len() != updates.len() {
        return Err(Error::dimension("one weight per update"));
    }
    if len == 0 {
        return Ok(0.0);
    }
    let half = 1i128 << (fp.bit_width() - 1);
    let wrapped = (0..len)
        .filter(|&j| {
            let s: i128 = updates
                .iter()
                .zip(weights)
                .map(|(u, &w)| w as i128 * fp.centered(u.values()[j]) as i128)
                .sum();
            s < -half || s >= half
        })
        .count();
    Ok(wrapped as f64 / len as f64)
}
