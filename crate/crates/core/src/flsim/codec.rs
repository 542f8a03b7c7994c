use serde::{Deserialize, Serialize};

use crate::codec_pq::{assign, index_bits, split_blocks, Assignments, Codebook};
use crate::codec_prune::{compact, expand, PruneSpec};
use crate::codec_scalar::{dequantize_aggregate, quantize, FixedPoint, QParams};
use crate::error::{Error, Result};
use crate::finite_group::{Group, GroupVector};
use crate::protocol::{assignments_to_group, server_reconstruct_secind, AssignmentHistogram, SchemeTag};
use crate::tensor::Tensor;

/// How one tensor of the update is encoded in a round. Shared by all clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorCodec {
    Dense { fixed: FixedPoint },
    Scalar { qp: QParams, p: u32 },
    Prune { spec: PruneSpec, fixed: FixedPoint },
    Product { codebook: Codebook, d: usize },
}

/// What the server obtains for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum Aggregate {
    Sum(GroupVector),
    Histogram(AssignmentHistogram),
}

impl TensorCodec {
    pub fn scheme_tag(&self) -> SchemeTag {
        match self {
            TensorCodec::Dense { .. } => SchemeTag::Dense,
            TensorCodec::Scalar { .. } => SchemeTag::Sq,
            TensorCodec::Prune { .. } => SchemeTag::Prune,
            TensorCodec::Product { .. } => SchemeTag::PqAssign,
        }
    }

    pub fn group(&self) -> Group {
        match self {
            TensorCodec::Dense { fixed } | TensorCodec::Prune { fixed, .. } => fixed.group(),
            TensorCodec::Scalar { p, .. } => Group::PowerOfTwo(*p as u8),
            TensorCodec::Product { codebook, .. } => Group::for_codewords(codebook.k()).expect("k >= 2"),
        }
    }

    /// Whether client weights can be applied in the group. Quantized codes
    /// and codeword indices are aggregated unweighted.
    pub fn supports_weighting(&self) -> bool {
        matches!(self, TensorCodec::Dense { .. } | TensorCodec::Prune { .. })
    }

    /// Number of group elements sent for a tensor of `shape`.
    pub fn wire_elements(&self, shape: &[usize]) -> usize {
        let n: usize = shape.iter().product();
        match self {
            TensorCodec::Dense { .. } | TensorCodec::Scalar { .. } => n,
            TensorCodec::Prune { spec, .. } => spec.kept_count(),
            TensorCodec::Product { d, .. } => n / d,
        }
    }

    pub fn uplink_bits(&self, shape: &[usize]) -> u64 {
        let bits = match self {
            TensorCodec::Product { codebook, .. } => index_bits(codebook.k()),
            _ => self.group().bit_width(),
        };
        self.wire_elements(shape) as u64 * bits as u64
    }

    pub fn encode(&self, tensor: &Tensor) -> Result<GroupVector> {
        Ok(match self {
            TensorCodec::Dense { fixed } => fixed.encode(&tensor.data),
            TensorCodec::Scalar { qp, p } => quantize(&tensor.data, qp).embed(Group::pow2(*p)?)?,
            TensorCodec::Prune { spec, fixed } => fixed.encode(&compact(&tensor.data, spec)?),
            TensorCodec::Product { codebook, d } => {
                let a = assign(&split_blocks(tensor, *d)?, codebook)?;
                assignments_to_group(&a, self.group())?
            }
        })
    }

    /// Decodes the aggregate into the average update. `divisor` is the total
    /// client weight for weighted tensors and the client count otherwise.
    pub fn decode(&self, agg: &Aggregate, shape: &[usize], n_clients: usize, divisor: f64) -> Result<Tensor> {
        let data = match (self, agg) {
            (TensorCodec::Dense { fixed }, Aggregate::Sum(s)) => fixed.decode_sum(s)?,
            (TensorCodec::Scalar { qp, .. }, Aggregate::Sum(s)) => dequantize_aggregate(s, qp, n_clients)?,
            (TensorCodec::Prune { spec, fixed }, Aggregate::Sum(s)) => expand(&fixed.decode_sum(s)?, spec)?,
            (TensorCodec::Product { codebook, .. }, Aggregate::Histogram(h)) => {
                server_reconstruct_secind(h, codebook)?.data
            }
            _ => return Err(Error::protocol("aggregate does not match the tensor codec")),
        };
        Tensor::new(shape.to_vec(), data.into_iter().map(|v| v / divisor).collect())
    }

    /// Plaintext reconstruction of one client's encoded tensor.
    pub fn reconstruct(&self, code: &GroupVector, shape: &[usize]) -> Result<Tensor> {
        let agg = match self {
            TensorCodec::Product { codebook, d } => {
                let grid = (shape[0] / d, shape[1]);
                let a = Assignments::new(code.values().to_vec(), grid, codebook.k())?;
                Aggregate::Histogram(AssignmentHistogram::from_assignments([&a])?)
            }
            _ => Aggregate::Sum(code.clone()),
        };
        self.decode(&agg, shape, 1, 1.0)
    }
}
