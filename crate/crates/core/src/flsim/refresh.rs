use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::codec::TensorCodec;
use crate::codec_pq::{adapt_block_size, split_blocks, train_codebook, Codebook, KMeansOptions};
use crate::codec_prune::PruneSpec;
use crate::codec_scalar::{calibrate_minmax, FixedPoint, QParams, QuantScheme};
use crate::error::{Error, Result};
use crate::finite_group::MaskSeed;
use crate::tensor::Tensor;

/// Uncompressed tensors are clipped at this multiple of the calibration range.
pub const CLIP_FACTOR: f64 = 8.0;

/// Bit-width of uncompressed tensors.
pub const DENSE_BITS: u32 = 32;

const KMEANS_SEED_LABEL: u64 = 0x6b6d_6e73; // "kmns"

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchemeConfig {
    /// Every tensor sent as 32-bit fixed point.
    Baseline,
    Sq {
        b: u32,
        p: u32,
        #[serde(default)]
        quant: QuantScheme,
    },
    Prune {
        sparsity: f64,
        #[serde(default = "dense_bits")]
        p: u32,
    },
    Pq { k: usize, d: usize },
}

fn dense_bits() -> u32 {
    DENSE_BITS
}

impl SchemeConfig {
    pub fn name(&self) -> &'static str {
        match self {
            SchemeConfig::Baseline => "baseline",
            SchemeConfig::Sq { .. } => "sq",
            SchemeConfig::Prune { .. } => "prune",
            SchemeConfig::Pq { .. } => "pq",
        }
    }

    pub fn params(&self) -> String {
        match self {
            SchemeConfig::Baseline => format!("p={DENSE_BITS}"),
            SchemeConfig::Sq { b, p, quant } => {
                let q = match quant {
                    QuantScheme::Symmetric => "",
                    QuantScheme::Affine => " affine",
                };
                format!("b={b} p={p}{q}")
            }
            SchemeConfig::Prune { sparsity, p } => format!("sparsity={sparsity} p={p}"),
            SchemeConfig::Pq { k, d } => format!("k={k} d={d}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match *self {
            SchemeConfig::Baseline => Ok(()),
            SchemeConfig::Sq { b, p, .. } if !(1..=32).contains(&b) || !(b..=32).contains(&p) => {
                bad(format!("sq needs 1 <= b <= p <= 32, got b={b} p={p}"))
            }
            SchemeConfig::Prune { sparsity, p } if !(0.0..1.0).contains(&sparsity) || !(2..=32).contains(&p) => {
                bad(format!("prune needs sparsity in [0, 1) and 2 <= p <= 32, got {sparsity}, {p}"))
            }
            SchemeConfig::Pq { k, d } if k < 2 || d < 1 || k > 1 << 16 => bad(format!("pq needs k >= 2 and d >= 1, got k={k} d={d}")),
            _ => Ok(()),
        }
    }
}

/// Rounds between codec refreshes. `Once` calibrates at round 0 only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefreshPeriod {
    Every(u32),
    Once,
}

impl RefreshPeriod {
    pub fn is_due(&self, round: u32) -> bool {
        match *self {
            RefreshPeriod::Every(r) => round.is_multiple_of(r),
            RefreshPeriod::Once => round == 0,
        }
    }
}

impl fmt::Display for RefreshPeriod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RefreshPeriod::Every(r) => write!(f, "{r}"),
            RefreshPeriod::Once => f.write_str("once"),
        }
    }
}

impl Serialize for RefreshPeriod {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            RefreshPeriod::Every(r) => s.serialize_u32(r),
            RefreshPeriod::Once => s.serialize_str("once"),
        }
    }
}

impl<'de> Deserialize<'de> for RefreshPeriod {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Rounds(u32),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Rounds(0) => Err(serde::de::Error::custom("refresh period must be at least 1")),
            Raw::Rounds(r) => Ok(RefreshPeriod::Every(r)),
            Raw::Word(w) if w == "once" => Ok(RefreshPeriod::Once),
            Raw::Word(w) => Err(serde::de::Error::custom(format!("unknown refresh period {w:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshSource {
    /// The previous round's average update.
    AggregateUpdate,
    /// An update the server emulates on its proxy data.
    #[default]
    PublicProxy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefreshPolicy {
    pub period: RefreshPeriod,
    pub source: RefreshSource,
}

impl Default for RefreshPolicy {
    fn default() -> Self {
        Self {
            period: RefreshPeriod::Every(1),
            source: RefreshSource::PublicProxy,
        }
    }
}

/// Per-tensor codec parameters that persist between refreshes.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorState {
    Dense { clip: f64 },
    Scalar { qp: QParams, p: u32 },
    Prune { spec: PruneSpec, clip: f64, p: u32 },
    Product { codebook: Codebook, d: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecState {
    pub tensors: Vec<TensorState>,
    /// Whether the last refresh trained degenerate codebooks.
    pub degenerate: bool,
}

impl CodecState {
    /// The round's codecs; `headroom` bounds the total integer weight of the sum.
    pub fn codecs(&self, headroom: u64) -> Result<Vec<TensorCodec>> {
        self.tensors
            .iter()
            .map(|s| {
                Ok(match s {
                    TensorState::Dense { clip } => TensorCodec::Dense {
                        fixed: FixedPoint::new(*clip, DENSE_BITS, headroom)?,
                    },
                    TensorState::Scalar { qp, p } => TensorCodec::Scalar { qp: *qp, p: *p },
                    TensorState::Prune { spec, clip, p } => TensorCodec::Prune {
                        spec: spec.clone(),
                        fixed: FixedPoint::new(*clip, *p, headroom)?,
                    },
                    TensorState::Product { codebook, d } => TensorCodec::Product {
                        codebook: codebook.clone(),
                        d: *d,
                    },
                })
            })
            .collect()
    }

    /// Bytes of all codebooks the server broadcasts.
    pub fn codebook_bytes(&self) -> u64 {
        self.tensors
            .iter()
            .map(|s| match s {
                TensorState::Product { codebook, .. } => (codebook.k() * codebook.dim() * 4) as u64,
                _ => 0,
            })
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefreshOptions {
    /// Also push bias-like (non-matrix) tensors through the scheme's codec.
    pub compress_vectors: bool,
    pub kmeans: KMeansOptions,
}

fn max_abs(t: &Tensor) -> f64 {
    t.data.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Recomputes codec parameters from `source`, a public update. An empty or
/// all-zero source keeps `previous` when there is one.
pub fn refresh_codecs(
    scheme: &SchemeConfig,
    source: &[Tensor],
    previous: Option<&CodecState>,
    seed: &MaskSeed,
    options: &RefreshOptions,
) -> Result<CodecState> {
    if let Some(prev) = previous {
        if source.is_empty() || source.iter().all(|t| max_abs(t) == 0.0) {
            return Ok(prev.clone());
        }
    }
    if source.is_empty() {
        return Err(Error::Config("no calibration source".into()));
    }
    let mut degenerate = false;
    let tensors = source
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let clip = match max_abs(t) {
                m if m > 0.0 => CLIP_FACTOR * m,
                _ => match previous.map(|p| &p.tensors[i]) {
                    Some(TensorState::Dense { clip } | TensorState::Prune { clip, .. }) => *clip,
                    _ => 1.0,
                },
            };
            let compress = t.is_matrix() || options.compress_vectors;
            Ok(match *scheme {
                SchemeConfig::Sq { b, p, quant } if compress => TensorState::Scalar {
                    qp: calibrate_minmax(&t.data, b, quant)?,
                    p,
                },
                SchemeConfig::Prune { sparsity, p } if compress => TensorState::Prune {
                    spec: PruneSpec::for_tensor(seed, i, sparsity, t.shape.clone())?,
                    clip,
                    p,
                },
                SchemeConfig::Pq { k, d } if t.is_matrix() => {
                    let (c_in, _) = t.dims()?;
                    let d = adapt_block_size(c_in, d);
                    let blocks = split_blocks(t, d)?;
                    let report = train_codebook(&blocks, k, options.kmeans, &seed.derive(KMEANS_SEED_LABEL, i as u64))?;
                    degenerate |= report.degenerate;
                    TensorState::Product {
                        codebook: report.codebook,
                        d,
                    }
                }
                _ => TensorState::Dense { clip },
            })
        })
        .collect::<Result<_>>()?;
    Ok(CodecState { tensors, degenerate })
}
