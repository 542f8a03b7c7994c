//! Modular vector arithmetic, seeded mask streams and bit-exact packing.
//!
//! Every masked protocol message is a [`GroupVector`]: a fixed-length vector of
//! residues in a finite cyclic group. Secure aggregation payloads live in
//! `Z_{2^p}` with `1 <= p <= 32`; codeword assignments for secure indexing may
//! live in `Z_k` for a codebook of `k` entries.

mod pack;
mod prf;

pub use pack::{pack, pack_bits, packed_len, unpack, unpack_bits, unpack_in};
pub use prf::{
    chacha_block, expand_mask, expand_mask_in, KeyStream, MaskSeed, MaskSource, ZeroMask,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported power-of-two bit-width.
pub const MAX_BIT_WIDTH: u32 = 32;

/// A finite cyclic group of residues.
///
/// `PowerOfTwo(p)` is `Z_{2^p}`. `Cyclic(k)` is `Z_k` for an order that is not a
/// power of two; [`Group::cyclic`] normalizes power-of-two orders to
/// `PowerOfTwo` so each group has a single representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    PowerOfTwo(u8),
    Cyclic(u32),
}

impl Group {
    pub fn pow2(bits: u32) -> Result<Self> {
        if !(1..=MAX_BIT_WIDTH).contains(&bits) {
            return Err(Error::invalid(format!(
                "bit-width {bits} outside [1, {MAX_BIT_WIDTH}]"
            )));
        }
        Ok(Group::PowerOfTwo(bits as u8))
    }

    pub fn cyclic(order: u64) -> Result<Self> {
        if !(2..=1u64 << MAX_BIT_WIDTH).contains(&order) {
            return Err(Error::invalid(format!("group order {order} out of range")));
        }
        if order.is_power_of_two() {
            Group::pow2(order.trailing_zeros())
        } else {
            Ok(Group::Cyclic(order as u32))
        }
    }

    /// The group used to mask assignments into a codebook of `k` codewords.
    pub fn for_codewords(k: usize) -> Result<Self> {
        Group::cyclic(k as u64)
    }

    pub fn modulus(&self) -> u64 {
        match *self {
            Group::PowerOfTwo(p) => 1u64 << p,
            Group::Cyclic(k) => k as u64,
        }
    }

    /// Bits each element occupies on the wire: `ceil(log2 modulus)`.
    pub fn bit_width(&self) -> u32 {
        match *self {
            Group::PowerOfTwo(p) => p as u32,
            Group::Cyclic(k) => 32 - (k - 1).leading_zeros(),
        }
    }

    pub fn contains(&self, value: u32) -> bool {
        (value as u64) < self.modulus()
    }

    #[inline]
    pub(crate) fn reduce(&self, x: u64) -> u32 {
        match *self {
            Group::PowerOfTwo(p) => (x & ((1u64 << p) - 1)) as u32,
            Group::Cyclic(k) => (x % k as u64) as u32,
        }
    }

    #[inline]
    pub(crate) fn add(&self, a: u32, b: u32) -> u32 {
        self.reduce(a as u64 + b as u64)
    }

    #[inline]
    pub(crate) fn sub(&self, a: u32, b: u32) -> u32 {
        self.reduce(a as u64 + self.modulus() - b as u64)
    }

    #[inline]
    pub(crate) fn mul(&self, a: u32, w: u64) -> u32 {
        let w = w % self.modulus();
        self.reduce(((a as u128 * w as u128) % self.modulus() as u128) as u64)
    }
}

/// A fixed-length vector of residues in a [`Group`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupVector {
    values: Vec<u32>,
    group: Group,
}

impl GroupVector {
    pub fn new(values: Vec<u32>, group: Group) -> Result<Self> {
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !group.contains(**v)) {
            return Err(Error::invalid(format!(
                "element {i} = {v} not in group of modulus {}",
                group.modulus()
            )));
        }
        Ok(Self { values, group })
    }

    /// Vector in `Z_{2^p}`.
    pub fn with_bit_width(values: Vec<u32>, p: u32) -> Result<Self> {
        Self::new(values, Group::pow2(p)?)
    }

    pub fn zeros(len: usize, group: Group) -> Self {
        Self {
            values: vec![0; len],
            group,
        }
    }

    /// Caller guarantees every element is already reduced.
    pub(crate) fn from_reduced(values: Vec<u32>, group: Group) -> Self {
        debug_assert!(values.iter().all(|v| group.contains(*v)));
        Self { values, group }
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<u32> {
        self.values
    }

    pub fn group(&self) -> Group {
        self.group
    }

    pub fn bit_width(&self) -> u32 {
        self.group.bit_width()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_compatible(&self, other: &GroupVector) -> Result<()> {
        if self.group != other.group {
            return Err(Error::dimension(format!(
                "group mismatch: {:?} vs {:?}",
                self.group, other.group
            )));
        }
        if self.len() != other.len() {
            return Err(Error::dimension(format!(
                "length mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    pub fn add_mod(&self, other: &GroupVector) -> Result<GroupVector> {
        self.check_compatible(other)?;
        let g = self.group;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| g.add(a, b))
            .collect();
        Ok(GroupVector::from_reduced(values, g))
    }

    pub fn sub_mod(&self, other: &GroupVector) -> Result<GroupVector> {
        self.check_compatible(other)?;
        let g = self.group;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| g.sub(a, b))
            .collect();
        Ok(GroupVector::from_reduced(values, g))
    }

    pub fn add_assign_mod(&mut self, other: &GroupVector) -> Result<()> {
        self.check_compatible(other)?;
        let g = self.group;
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a = g.add(*a, b);
        }
        Ok(())
    }

    /// Multiply every element by an integer weight in the group.
    pub fn scale_mod(&self, weight: u64) -> GroupVector {
        let g = self.group;
        let values = self.values.iter().map(|&a| g.mul(a, weight)).collect();
        GroupVector::from_reduced(values, g)
    }

    /// Reinterpret the residues in a larger power-of-two group.
    pub fn embed(&self, target: Group) -> Result<GroupVector> {
        match (self.group, target) {
            (Group::PowerOfTwo(from), Group::PowerOfTwo(to)) if to >= from => {
                Ok(GroupVector::from_reduced(self.values.clone(), target))
            }
            _ => Err(Error::dimension(format!(
                "cannot embed {:?} into {:?}",
                self.group, target
            ))),
        }
    }
}

/// Elementwise `(a + b) mod 2^p`.
pub fn add_mod(a: &GroupVector, b: &GroupVector) -> Result<GroupVector> {
    a.add_mod(b)
}

/// Elementwise `(a - b) mod 2^p`.
pub fn sub_mod(a: &GroupVector, b: &GroupVector) -> Result<GroupVector> {
    a.sub_mod(b)
}

/// Modular sum of a non-empty list of vectors.
pub fn sum_mod<'a, I>(vectors: I) -> Result<GroupVector>
where
    I: IntoIterator<Item = &'a GroupVector>,
{
    let mut iter = vectors.into_iter();
    let mut acc = iter
        .next()
        .ok_or_else(|| Error::invalid("sum of zero vectors"))?
        .clone();
    for v in iter {
        acc.add_assign_mod(v)?;
    }
    Ok(acc)
}
