use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::codec::{Aggregate, TensorCodec};
use super::model::{local_train, LocalConfig, Model};
use super::task::{ClientShard, Dataset};
use crate::codec_pq::Assignments;
use crate::error::{Error, Result};
use crate::finite_group::{sum_mod, GroupVector, MaskSeed};
use crate::protocol::oracle::{detect_fixed_point_overflows, detect_overflows};
use crate::protocol::{
    client_encrypt, server_aggregate_secagg, weighted_client_encrypt, AssignmentHistogram, MaskedPayload, Tee,
};
use crate::tensor::Tensor;

/// Everything the server broadcasts for one round.
#[derive(Clone, Debug)]
pub struct RoundPlan {
    pub round_id: u32,
    pub theta: Vec<Tensor>,
    pub codecs: Vec<TensorCodec>,
    /// Indices into the shard list.
    pub clients: Vec<u32>,
    pub mask_seeds: Vec<MaskSeed>,
    pub weighted: bool,
    pub local: LocalConfig,
    /// Base seed of the clients' mini-batch shuffles.
    pub local_seed: u64,
}

impl RoundPlan {
    fn check(&self, shards: &[ClientShard]) -> Result<()> {
        if self.clients.is_empty() || self.clients.len() != self.mask_seeds.len() {
            return Err(Error::Config("need one mask seed per selected client".into()));
        }
        if self.codecs.len() != self.theta.len() {
            return Err(Error::Config("need one codec per tensor".into()));
        }
        if let Some(c) = self.clients.iter().find(|&&c| c as usize >= shards.len()) {
            return Err(Error::Config(format!("client {c} has no shard")));
        }
        Ok(())
    }

    /// Keystream offset of each tensor: tensors occupy consecutive positions.
    pub fn offsets(&self) -> Vec<u64> {
        let mut at = 0u64;
        self.codecs
            .iter()
            .zip(&self.theta)
            .map(|(c, t)| {
                let o = at;
                at += c.wire_elements(&t.shape) as u64;
                o
            })
            .collect()
    }

    pub fn weighs(&self, tensor: usize) -> bool {
        self.weighted && self.codecs[tensor].supports_weighting()
    }

    pub fn uplink_bits_per_client(&self) -> u64 {
        self.codecs.iter().zip(&self.theta).map(|(c, t)| c.uplink_bits(&t.shape)).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub accuracy: f64,
    /// Payload bodies summed over all clients.
    pub uplink_bytes: u64,
    /// Including frame headers.
    pub wire_bytes: u64,
    /// Fraction of summed group elements whose true sum wrapped.
    pub overflow_fraction: f64,
    /// `|avg - plaintext avg| / |plaintext avg|` over the whole update.
    pub compression_error: f64,
}

#[derive(Clone, Debug)]
pub struct RoundOutput {
    pub theta: Vec<Tensor>,
    pub average_update: Vec<Tensor>,
    pub aggregates: Vec<Aggregate>,
    pub metrics: RoundMetrics,
}

/// Plaintext side of a client, kept by the simulator for oracle checks only.
struct ClientPlain {
    delta: Vec<Tensor>,
    codes: Vec<GroupVector>,
    weight: u64,
}

fn client_delta(model: &Model, plan: &RoundPlan, shard: &ClientShard) -> Vec<Tensor> {
    let seed = plan.local_seed ^ (shard.client_id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    local_train(model, &plan.theta, &shard.data, &plan.local, seed)
}

fn client_plain(model: &Model, plan: &RoundPlan, shard: &ClientShard) -> Result<ClientPlain> {
    let delta = client_delta(model, plan, shard);
    let codes = plan
        .codecs
        .iter()
        .zip(&delta)
        .map(|(c, t)| c.encode(t))
        .collect::<Result<_>>()?;
    Ok(ClientPlain {
        delta,
        codes,
        weight: shard.weight(),
    })
}

fn client_payloads(plan: &RoundPlan, j: usize, plain: &ClientPlain, offsets: &[u64]) -> Result<Vec<MaskedPayload>> {
    let seed = &plan.mask_seeds[j];
    let id = plan.clients[j];
    (0..plan.codecs.len())
        .map(|t| {
            let tag = plan.codecs[t].scheme_tag();
            let code = &plain.codes[t];
            if plan.weighs(t) {
                weighted_client_encrypt(code, plain.weight, seed, offsets[t], plan.round_id, id, tag)
            } else {
                Ok(client_encrypt(code, seed, offsets[t], plan.round_id, id, tag))
            }
        })
        .collect()
}

fn divisor(plan: &RoundPlan, t: usize, total_weight: u64) -> f64 {
    if plan.weighs(t) {
        total_weight as f64
    } else {
        plan.clients.len() as f64
    }
}

fn average(plan: &RoundPlan, aggregates: &[Aggregate], total_weight: u64) -> Result<Vec<Tensor>> {
    let n = plan.clients.len();
    (0..plan.codecs.len())
        .map(|t| plan.codecs[t].decode(&aggregates[t], &plan.theta[t].shape, n, divisor(plan, t, total_weight)))
        .collect()
}

/// One FedAvg round over the secure path.
pub fn run_round(
    model: &Model,
    plan: &RoundPlan,
    shards: &[ClientShard],
    server_lr: f64,
    test: &Dataset,
) -> Result<RoundOutput> {
    plan.check(shards)?;
    let offsets = plan.offsets();
    let clients: Vec<(ClientPlain, Vec<MaskedPayload>)> = plan
        .clients
        .par_iter()
        .enumerate()
        .map(|(j, &c)| {
            let plain = client_plain(model, plan, &shards[c as usize])?;
            let payloads = client_payloads(plan, j, &plain, &offsets)?;
            Ok((plain, payloads))
        })
        .collect::<Result<_>>()?;

    let tee = Tee::new(plan.round_id, plan.clients.iter().copied().zip(plan.mask_seeds.iter().copied()).collect())?;
    let n = plan.clients.len();
    let mut aggregates = Vec::with_capacity(plan.codecs.len());
    for (t, codec) in plan.codecs.iter().enumerate() {
        let frames: Vec<MaskedPayload> = clients.iter().map(|c| c.1[t].clone()).collect();
        let len = codec.wire_elements(&plan.theta[t].shape);
        let agg = match codec {
            TensorCodec::Product { codebook, d } => {
                let shape = &plan.theta[t].shape;
                let grid = (shape[0] / d, shape[1]);
                Aggregate::Histogram(tee.histograms(&frames, codebook.k(), codec.group(), offsets[t], grid)?)
            }
            _ => {
                let mask_sum = tee.mask_sum(offsets[t], len, codec.group());
                Aggregate::Sum(server_aggregate_secagg(&frames, &mask_sum, n)?)
            }
        };
        aggregates.push(agg);
    }

    let total_weight: u64 = clients.iter().map(|c| c.0.weight).sum();
    let average_update = average(plan, &aggregates, total_weight)?;
    let theta = plan
        .theta
        .iter()
        .zip(&average_update)
        .map(|(w, g)| {
            let data = w.data.iter().zip(&g.data).map(|(a, b)| a + server_lr * b).collect();
            Tensor::new(w.shape.clone(), data)
        })
        .collect::<Result<Vec<_>>>()?;

    let plain: Vec<&ClientPlain> = clients.iter().map(|c| &c.0).collect();
    let uplink_bytes = clients.iter().flat_map(|c| &c.1).map(|f| f.body.len() as u64).sum();
    let wire_bytes = clients.iter().flat_map(|c| &c.1).map(|f| f.wire_len() as u64).sum();
    let metrics = RoundMetrics {
        round: plan.round_id,
        accuracy: model.accuracy(&theta, test),
        uplink_bytes,
        wire_bytes,
        overflow_fraction: overflow_fraction(plan, &plain)?,
        compression_error: compression_error(plan, &plain, &average_update, total_weight),
    };
    Ok(RoundOutput {
        theta,
        average_update,
        aggregates,
        metrics,
    })
}

fn overflow_fraction(plan: &RoundPlan, plain: &[&ClientPlain]) -> Result<f64> {
    let weights: Vec<u64> = plain.iter().map(|c| c.weight).collect();
    let ones = vec![1u64; plain.len()];
    let mut wrapped = 0.0;
    let mut total = 0usize;
    for (t, codec) in plan.codecs.iter().enumerate() {
        let codes: Vec<GroupVector> = plain.iter().map(|c| c.codes[t].clone()).collect();
        let len = codes[0].len();
        let f = match codec {
            TensorCodec::Scalar { qp, p } => {
                let raw: Vec<GroupVector> = codes
                    .iter()
                    .map(|c| GroupVector::with_bit_width(c.values().to_vec(), qp.bit_width()))
                    .collect::<Result<_>>()?;
                detect_overflows(&raw, qp, *p)?
            }
            TensorCodec::Dense { fixed } | TensorCodec::Prune { fixed, .. } => {
                let w = if plan.weighs(t) { &weights } else { &ones };
                detect_fixed_point_overflows(&codes, w, fixed)?
            }
            TensorCodec::Product { .. } => continue,
        };
        wrapped += f * len as f64;
        total += len;
    }
    Ok(if total == 0 { 0.0 } else { wrapped / total as f64 })
}

fn compression_error(plan: &RoundPlan, plain: &[&ClientPlain], avg: &[Tensor], total_weight: u64) -> f64 {
    let mut err = 0.0;
    let mut norm = 0.0;
    for t in 0..plan.codecs.len() {
        let div = divisor(plan, t, total_weight);
        for j in 0..avg[t].len() {
            let exact: f64 = plain
                .iter()
                .map(|c| if plan.weighs(t) { c.weight as f64 } else { 1.0 } * c.delta[t].data[j])
                .sum::<f64>()
                / div;
            err += (avg[t].data[j] - exact).powi(2);
            norm += exact * exact;
        }
    }
    if norm == 0.0 {
        0.0
    } else {
        (err / norm).sqrt()
    }
}

/// The same round without masks: clients' codes summed (or tallied) in the clear.
pub fn plaintext_aggregates(model: &Model, plan: &RoundPlan, shards: &[ClientShard]) -> Result<Vec<Aggregate>> {
    plan.check(shards)?;
    let plain: Vec<ClientPlain> = plan
        .clients
        .iter()
        .map(|&c| client_plain(model, plan, &shards[c as usize]))
        .collect::<Result<_>>()?;
    (0..plan.codecs.len())
        .map(|t| match &plan.codecs[t] {
            TensorCodec::Product { codebook, d } => {
                let shape = &plan.theta[t].shape;
                let grid = (shape[0] / d, shape[1]);
                let all: Vec<Assignments> = plain
                    .iter()
                    .map(|c| Assignments::new(c.codes[t].values().to_vec(), grid, codebook.k()))
                    .collect::<Result<_>>()?;
                Ok(Aggregate::Histogram(AssignmentHistogram::from_assignments(&all)?))
            }
            _ => {
                let codes: Vec<GroupVector> = plain
                    .iter()
                    .map(|c| if plan.weighs(t) { c.codes[t].scale_mod(c.weight) } else { c.codes[t].clone() })
                    .collect();
                Ok(Aggregate::Sum(sum_mod(&codes)?))
            }
        })
        .collect()
}

/// Plaintext sum of the clients' reconstructed (decompressed) updates, weighted like the secure path.
pub fn plaintext_decompressed_sum(model: &Model, plan: &RoundPlan, shards: &[ClientShard]) -> Result<Vec<Tensor>> {
    plan.check(shards)?;
    let mut out: Vec<Tensor> = plan.theta.iter().map(|t| Tensor::zeros(t.shape.clone())).collect();
    for &c in &plan.clients {
        let p = client_plain(model, plan, &shards[c as usize])?;
        for t in 0..plan.codecs.len() {
            let w = if plan.weighs(t) { p.weight as f64 } else { 1.0 };
            let r = plan.codecs[t].reconstruct(&p.codes[t], &plan.theta[t].shape)?;
            for (o, v) in out[t].data.iter_mut().zip(&r.data) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}
