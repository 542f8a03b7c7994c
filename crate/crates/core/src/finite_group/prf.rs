//! Keyed counter-based pseudo-random function.
//!
//! The construction is the ChaCha20 block function with a 128-bit key
//! (the "expand 16-byte k" constants, key words repeated), a 64-bit block
//! counter in words 12..13 and a 64-bit stream label in words 14..15. Each
//! block yields sixteen little-endian 32-bit words; element position `e` of a
//! stream uses the 64-bit draw `w[2e] | w[2e + 1] << 32`.
//!
//! The constants, word layout and draw mapping are frozen: golden vectors in
//! the tests below pin them.

use super::{Group, GroupVector};

const TAU: [u32; 4] = [0x6170_7865, 0x3120_646e, 0x7962_2d36, 0x6b20_6574];

/// Stream label of secure-aggregation masks.
pub const MASK_STREAM: u64 = 0;

const DERIVE_FLAG: u64 = 1 << 63;

#[inline(always)]
fn quarter_round(s: &mut [u32; 16], a: usize, b: usize, c: usize, d: usize) {
    s[a] = s[a].wrapping_add(s[b]);
    s[d] = (s[d] ^ s[a]).rotate_left(16);
    s[c] = s[c].wrapping_add(s[d]);
    s[b] = (s[b] ^ s[c]).rotate_left(12);
    s[a] = s[a].wrapping_add(s[b]);
    s[d] = (s[d] ^ s[a]).rotate_left(8);
    s[c] = s[c].wrapping_add(s[d]);
    s[b] = (s[b] ^ s[c]).rotate_left(7);
}

/// The 20-round ChaCha block function over a full 16-word input state.
pub fn chacha_block(input: &[u32; 16]) -> [u32; 16] {
    let mut s = *input;
    for _ in 0..10 {
        quarter_round(&mut s, 0, 4, 8, 12);
        quarter_round(&mut s, 1, 5, 9, 13);
        quarter_round(&mut s, 2, 6, 10, 14);
        quarter_round(&mut s, 3, 7, 11, 15);
        quarter_round(&mut s, 0, 5, 10, 15);
        quarter_round(&mut s, 1, 6, 11, 12);
        quarter_round(&mut s, 2, 7, 8, 13);
        quarter_round(&mut s, 3, 4, 9, 14);
    }
    for (o, i) in s.iter_mut().zip(input) {
        *o = o.wrapping_add(*i);
    }
    s
}

/// 128-bit seed from which a mask (or any other round-shared randomness) is
/// expanded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MaskSeed([u8; 16]);

impl MaskSeed {
    pub const fn from_bytes(bytes: [u8; 16]) -> Self {
        Self(bytes)
    }

    pub fn from_u128(v: u128) -> Self {
        Self(v.to_le_bytes())
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    pub fn to_u128(&self) -> u128 {
        u128::from_le_bytes(self.0)
    }

    fn key_words(&self) -> [u32; 4] {
        let mut k = [0u32; 4];
        for (w, chunk) in k.iter_mut().zip(self.0.chunks_exact(4)) {
            *w = u32::from_le_bytes(chunk.try_into().unwrap());
        }
        k
    }

    pub fn stream(&self, label: u64) -> KeyStream {
        KeyStream {
            key: self.key_words(),
            label,
        }
    }

    /// Child seed for `(label, index)`. Derivation streams are disjoint from
    /// every stream opened with [`MaskSeed::stream`] for labels below `2^63`.
    pub fn derive(&self, label: u64, index: u64) -> MaskSeed {
        let block = self.stream(label | DERIVE_FLAG).block(index);
        let mut out = [0u8; 16];
        for (chunk, w) in out.chunks_exact_mut(4).zip(&block[..4]) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        MaskSeed(out)
    }

    /// First 64 bits of the seed, for seeding non-protocol generators.
    pub fn low_u64(&self) -> u64 {
        u64::from_le_bytes(self.0[..8].try_into().unwrap())
    }
}

impl serde::Serialize for MaskSeed {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{:032x}", self.to_u128()))
    }
}

impl<'de> serde::Deserialize<'de> for MaskSeed {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = <String as serde::Deserialize>::deserialize(d)?;
        u128::from_str_radix(&s, 16)
            .map(MaskSeed::from_u128)
            .map_err(serde::de::Error::custom)
    }
}

/// One keyed stream: `block(counter)` is random access, [`KeyStream::next_u64`]
/// reads sequentially from position zero.
#[derive(Clone, Debug)]
pub struct KeyStream {
    key: [u32; 4],
    label: u64,
}

impl KeyStream {
    pub fn block(&self, counter: u64) -> [u32; 16] {
        let k = &self.key;
        let state = [
            TAU[0],
            TAU[1],
            TAU[2],
            TAU[3],
            k[0],
            k[1],
            k[2],
            k[3],
            k[0],
            k[1],
            k[2],
            k[3],
            counter as u32,
            (counter >> 32) as u32,
            self.label as u32,
            (self.label >> 32) as u32,
        ];
        chacha_block(&state)
    }

    /// Sequential reader starting at element position `start`.
    pub fn reader(self, start: u64) -> StreamReader {
        StreamReader {
            stream: self,
            pos: start,
            cached: None,
        }
    }
}

/// Sequential sampler over a [`KeyStream`].
#[derive(Clone, Debug)]
pub struct StreamReader {
    stream: KeyStream,
    pos: u64,
    cached: Option<(u64, [u32; 16])>,
}

impl StreamReader {
    pub fn next_u64(&mut self) -> u64 {
        let counter = self.pos / 8;
        let slot = (self.pos % 8) as usize;
        let block = match self.cached {
            Some((c, b)) if c == counter => b,
            _ => {
                let b = self.stream.block(counter);
                self.cached = Some((counter, b));
                b
            }
        };
        self.pos += 1;
        block[2 * slot] as u64 | (block[2 * slot + 1] as u64) << 32
    }

    /// Uniform integer in `[0, bound)` by rejection on the 64-bit draw.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        // 2^64 mod bound
        let rem = (u64::MAX % bound + 1) % bound;
        loop {
            let x = self.next_u64();
            if x <= u64::MAX - rem {
                return x % bound;
            }
        }
    }

    /// Uniform float in `[0, 1)` from the top 53 bits of one draw.
    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Anything that can produce the mask for a span of stream positions.
pub trait MaskSource {
    fn mask(&self, offset: u64, len: usize, group: Group) -> GroupVector;
}

impl MaskSource for MaskSeed {
    fn mask(&self, offset: u64, len: usize, group: Group) -> GroupVector {
        expand_mask_in(self, offset, len, group)
    }
}

/// Mask source that expands to all zeros. Test and debugging stub only.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroMask;

impl MaskSource for ZeroMask {
    fn mask(&self, _offset: u64, len: usize, group: Group) -> GroupVector {
        GroupVector::zeros(len, group)
    }
}

/// Mask for stream positions `offset..offset + len` in `group`.
///
/// Power-of-two groups keep the low `p` bits of each draw (exactly uniform);
/// other orders reduce the 64-bit draw modulo the order.
pub fn expand_mask_in(seed: &MaskSeed, offset: u64, len: usize, group: Group) -> GroupVector {
    let mut reader = seed.stream(MASK_STREAM).reader(offset);
    let values = (0..len).map(|_| group.reduce(reader.next_u64())).collect();
    GroupVector::from_reduced(values, group)
}

/// Mask of `len` elements in `Z_{2^p}` starting at stream position zero.
pub fn expand_mask(seed: &MaskSeed, len: usize, p: u32) -> crate::Result<GroupVector> {
    Ok(expand_mask_in(seed, 0, len, Group::pow2(p)?))
}
