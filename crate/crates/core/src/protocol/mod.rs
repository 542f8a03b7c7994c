//! Round protocol between clients, the aggregation server and the TEE.
//!
//! Clients mask each encoded tensor with their per-round seed and send it as
//! one frame. The TEE holds every seed of the round and releases either the
//! sum of masks (secure aggregation) or per-block codeword histograms (secure
//! indexing). The server only ever sees masked frames and those two outputs.

pub mod oracle;
mod tee;

pub use tee::{tee_mask_sum, Tee};

use serde::{Deserialize, Serialize};

use crate::codec_pq::{matrix_from_block_values, Assignments, Codebook};
use crate::error::{Error, Result};
use crate::finite_group::{pack, packed_len, sum_mod, unpack_in, Group, GroupVector, MaskSeed, MaskSource};
use crate::tensor::Tensor;

pub const HEADER_LEN: usize = 16;

/// Seed-derivation label for per-client mask seeds.
const CLIENT_SEED_LABEL: u64 = 0x6d61_736b; // "mask"

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum SchemeTag {
    /// Uncompressed fixed-point tensor.
    Dense = 0,
    Sq = 1,
    Prune = 2,
    PqAssign = 3,
}

impl TryFrom<u8> for SchemeTag {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Ok(match v {
            0 => SchemeTag::Dense,
            1 => SchemeTag::Sq,
            2 => SchemeTag::Prune,
            3 => SchemeTag::PqAssign,
            _ => return Err(Error::Framing(format!("unknown scheme tag {v}"))),
        })
    }
}

/// Mask seed of one client for one round.
pub fn client_seed(round_master: &MaskSeed, round_id: u32, client_id: u32) -> MaskSeed {
    round_master.derive(CLIENT_SEED_LABEL, ((round_id as u64) << 32) | client_id as u64)
}

/// One masked tensor on the wire.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedPayload {
    pub round_id: u32,
    pub client_id: u32,
    pub scheme: SchemeTag,
    pub p: u8,
    pub body: Vec<u8>,
}

impl MaskedPayload {
    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.body.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&self.round_id.to_le_bytes());
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.push(self.scheme as u8);
        out.push(self.p);
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.body.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    /// Parses one frame from the front of `bytes`, returning it and the rest.
    pub fn read_frame(bytes: &[u8]) -> Result<(Self, &[u8])> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Framing(format!("{} bytes is shorter than a header", bytes.len())));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let scheme = SchemeTag::try_from(bytes[8])?;
        let p = bytes[9];
        if !(1..=32).contains(&p) {
            return Err(Error::Framing(format!("bit-width {p} outside [1, 32]")));
        }
        if bytes[10] != 0 || bytes[11] != 0 {
            return Err(Error::Framing("reserved header bytes are set".into()));
        }
        let body_len = word(12) as usize;
        let rest = &bytes[HEADER_LEN..];
        if rest.len() < body_len {
            return Err(Error::Framing(format!(
                "header announces {body_len} body bytes, {} present",
                rest.len()
            )));
        }
        let frame = Self {
            round_id: word(0),
            client_id: word(4),
            scheme,
            p,
            body: rest[..body_len].to_vec(),
        };
        Ok((frame, &rest[body_len..]))
    }

    /// Parses exactly one frame.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (frame, rest) = Self::read_frame(bytes)?;
        if !rest.is_empty() {
            return Err(Error::Framing(format!("{} trailing bytes", rest.len())));
        }
        Ok(frame)
    }

    /// Parses a concatenation of frames.
    pub fn read_all(mut bytes: &[u8]) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        while !bytes.is_empty() {
            let (frame, rest) = Self::read_frame(bytes)?;
            out.push(frame);
            bytes = rest;
        }
        Ok(out)
    }

    /// The masked residues, for a tensor of `len` elements in `group`.
    pub fn masked_values(&self, len: usize, group: Group) -> Result<GroupVector> {
        if self.p as u32 != group.bit_width() {
            return Err(Error::protocol(format!(
                "frame declares {} bits, {:?} needs {}",
                self.p,
                group,
                group.bit_width()
            )));
        }
        if self.body.len() != packed_len(len, self.p as u32) {
            return Err(Error::protocol(format!(
                "body of {} bytes for {len} elements at {} bits",
                self.body.len(),
                self.p
            )));
        }
        unpack_in(&self.body, len, group)
    }
}

/// Masks an encoded tensor that occupies stream positions `offset..offset + len`.
pub fn client_encrypt(
    q_update: &GroupVector,
    mask: &impl MaskSource,
    offset: u64,
    round_id: u32,
    client_id: u32,
    scheme: SchemeTag,
) -> MaskedPayload {
    let m = mask.mask(offset, q_update.len(), q_update.group());
    let masked = q_update.add_mod(&m).expect("mask matches update");
    MaskedPayload {
        round_id,
        client_id,
        scheme,
        p: q_update.group().bit_width() as u8,
        body: pack(&masked),
    }
}

/// Multiplies by an integer weight in the group, then masks.
pub fn weighted_client_encrypt(
    q_update: &GroupVector,
    weight: u64,
    mask: &impl MaskSource,
    offset: u64,
    round_id: u32,
    client_id: u32,
    scheme: SchemeTag,
) -> Result<MaskedPayload> {
    if weight == 0 {
        return Err(Error::invalid("client weight must be positive"));
    }
    Ok(client_encrypt(
        &q_update.scale_mod(weight),
        mask,
        offset,
        round_id,
        client_id,
        scheme,
    ))
}

fn check_homogeneous(payloads: &[MaskedPayload], expected_clients: usize) -> Result<()> {
    let first = payloads
        .first()
        .ok_or_else(|| Error::protocol("no payloads to aggregate"))?;
    if payloads.len() != expected_clients {
        return Err(Error::protocol(format!(
            "{} payloads for {expected_clients} clients",
            payloads.len()
        )));
    }
    let mut ids: Vec<u32> = payloads.iter().map(|f| f.client_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::protocol("duplicate client frame"));
    }
    for f in payloads {
        if f.round_id != first.round_id || f.scheme != first.scheme || f.p != first.p {
            return Err(Error::protocol(format!(
                "client {} sent round {} / {:?} / {} bits, expected round {} / {:?} / {} bits",
                f.client_id, f.round_id, f.scheme, f.p, first.round_id, first.scheme, first.p
            )));
        }
        if f.body.len() != first.body.len() {
            return Err(Error::protocol("payload bodies differ in length"));
        }
    }
    Ok(())
}

/// `sum_i h_i - sum_i m_i`: the exact modular sum of the encoded updates.
pub fn server_aggregate_secagg(
    payloads: &[MaskedPayload],
    mask_sum: &GroupVector,
    expected_clients: usize,
) -> Result<GroupVector> {
    check_homogeneous(payloads, expected_clients)?;
    let masked: Vec<GroupVector> = payloads
        .iter()
        .map(|f| f.masked_values(mask_sum.len(), mask_sum.group()))
        .collect::<Result<_>>()?;
    sum_mod(&masked)?.sub_mod(mask_sum)
}

/// Assignment indices as group elements, ready for masking.
pub fn assignments_to_group(a: &Assignments, group: Group) -> Result<GroupVector> {
    if group.modulus() < a.k() as u64 {
        return Err(Error::invalid(format!(
            "group {group:?} cannot hold {} codeword indices",
            a.k()
        )));
    }
    GroupVector::new(a.indices().to_vec(), group)
}

/// Per-block codeword counts, stored block-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssignmentHistogram {
    k: usize,
    grid: (usize, usize),
    counts: Vec<u32>,
}

impl AssignmentHistogram {
    pub fn zeros(k: usize, grid: (usize, usize)) -> Self {
        Self {
            k,
            grid,
            counts: vec![0; k * grid.0 * grid.1],
        }
    }

    pub fn from_assignments<'a>(all: impl IntoIterator<Item = &'a Assignments>) -> Result<Self> {
        let mut iter = all.into_iter().peekable();
        let first = iter.peek().ok_or_else(|| Error::invalid("no assignments"))?;
        let mut h = Self::zeros(first.k(), first.grid());
        for a in iter {
            h.record(a.indices())?;
        }
        Ok(h)
    }

    pub(crate) fn record(&mut self, indices: &[u32]) -> Result<()> {
        if indices.len() != self.blocks() {
            return Err(Error::dimension(format!(
                "{} indices for {} blocks",
                indices.len(),
                self.blocks()
            )));
        }
        for (b, &r) in indices.iter().enumerate() {
            self.counts[b * self.k + r as usize] += 1;
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn blocks(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// `H_{m,n}` for block index `n * (C_in / d) + m`.
    pub fn block(&self, b: usize) -> &[u32] {
        &self.counts[b * self.k..(b + 1) * self.k]
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }
}

/// `sum_r H_{m,n}[r] * C[r]` for every block, in matrix layout.
pub fn server_reconstruct_secind(h: &AssignmentHistogram, codebook: &Codebook) -> Result<Tensor> {
    if h.k() != codebook.k() {
        return Err(Error::dimension(format!(
            "histogram over {} codewords, codebook has {}",
            h.k(),
            codebook.k()
        )));
    }
    let d = codebook.dim();
    let mut data = vec![0.0; h.blocks() * d];
    for (b, out) in data.chunks_exact_mut(d).enumerate() {
        for (r, &count) in h.block(b).iter().enumerate() {
            if count == 0 {
                continue;
            }
            for (o, &c) in out.iter_mut().zip(codebook.codeword(r)) {
                *o += count as f64 * c as f64;
            }
        }
    }
    matrix_from_block_values(h.grid(), d, data)
}
