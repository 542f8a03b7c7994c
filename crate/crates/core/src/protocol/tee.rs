use super::{AssignmentHistogram, MaskedPayload, SchemeTag};
use crate::error::{Error, Result};
use crate::finite_group::{Group, GroupVector, MaskSeed, MaskSource};

/// Modular sum of the masks of all `seeds` over one tensor's stream span.
pub fn tee_mask_sum<S: MaskSource>(seeds: &[S], offset: u64, len: usize, group: Group) -> Result<GroupVector> {
    let (first, rest) = seeds
        .split_first()
        .ok_or_else(|| Error::protocol("mask sum over zero clients"))?;
    let mut acc = first.mask(offset, len, group);
    for s in rest {
        acc.add_assign_mod(&s.mask(offset, len, group))?;
    }
    Ok(acc)
}

/// The trusted role of one round. It knows every client seed and releases
/// only aggregates.
#[derive(Clone, Debug)]
pub struct Tee {
    round_id: u32,
    seeds: Vec<(u32, MaskSeed)>,
}

impl Tee {
    pub fn new(round_id: u32, mut seeds: Vec<(u32, MaskSeed)>) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::protocol("round without clients"));
        }
        seeds.sort_by_key(|s| s.0);
        if seeds.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::protocol("client registered twice"));
        }
        Ok(Self { round_id, seeds })
    }

    pub fn round_id(&self) -> u32 {
        self.round_id
    }

    pub fn client_count(&self) -> usize {
        self.seeds.len()
    }

    fn seed_of(&self, client_id: u32) -> Result<&MaskSeed> {
        self.seeds
            .binary_search_by_key(&client_id, |s| s.0)
            .map(|i| &self.seeds[i].1)
            .map_err(|_| Error::protocol(format!("unknown client {client_id}")))
    }

    pub fn mask_sum(&self, offset: u64, len: usize, group: Group) -> GroupVector {
        let seeds: Vec<MaskSeed> = self.seeds.iter().map(|s| s.1).collect();
        tee_mask_sum(&seeds, offset, len, group).expect("at least one client")
    }

    /// Unmasks each client's assignment frame and tallies codeword counts per block.
    pub fn histograms(
        &self,
        payloads: &[MaskedPayload],
        k: usize,
        group: Group,
        offset: u64,
        grid: (usize, usize),
    ) -> Result<AssignmentHistogram> {
        if payloads.len() != self.seeds.len() {
            return Err(Error::protocol(format!(
                "{} assignment frames for {} clients",
                payloads.len(),
                self.seeds.len()
            )));
        }
        let blocks = grid.0 * grid.1;
        let mut h = AssignmentHistogram::zeros(k, grid);
        let mut seen = Vec::with_capacity(payloads.len());
        for f in payloads {
            if f.round_id != self.round_id || f.scheme != SchemeTag::PqAssign {
                return Err(Error::protocol(format!(
                    "client {} sent a {:?} frame for round {}",
                    f.client_id, f.scheme, f.round_id
                )));
            }
            if seen.contains(&f.client_id) {
                return Err(Error::protocol(format!("client {} sent twice", f.client_id)));
            }
            seen.push(f.client_id);
            let seed = self.seed_of(f.client_id)?;
            let masked = f
                .masked_values(blocks, group)
                .map_err(|e| Error::protocol(format!("client {}: {e}", f.client_id)))?;
            let indices = masked.sub_mod(&seed.mask(offset, blocks, group))?;
            if let Some(bad) = indices.values().iter().find(|&&r| r as usize >= k) {
                return Err(Error::protocol(format!(
                    "client {} assigned codeword {bad} of {k}",
                    f.client_id
                )));
            }
            h.record(indices.values())?;
        }
        Ok(h)
    }
}
