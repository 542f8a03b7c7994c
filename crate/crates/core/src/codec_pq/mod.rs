//! Product quantization of update matrices.
//!
//! A `C_in x C_out` matrix is cut into `d x 1` column blocks, each replaced by
//! the index of its nearest codeword in a shared `k x d` codebook. Block order
//! is column-major: block `n * (C_in / d) + m` holds rows `m*d .. (m+1)*d` of
//! column `n`, which is also the `(m, n)` entry of the assignment matrix.

mod kmeans;

pub use kmeans::{train_codebook, KMeansOptions, KMeansReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PQConfig {
    pub k: usize,
    pub d: usize,
}

impl PQConfig {
    pub fn new(k: usize, d: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid(format!("need at least 2 codewords, got {k}")));
        }
        if d < 1 {
            return Err(Error::invalid("block size must be positive"));
        }
        Ok(Self { k, d })
    }

    /// Block size used for a layer with `c_in` input channels.
    pub fn block_size_for(&self, c_in: usize) -> usize {
        adapt_block_size(c_in, self.d)
    }
}

/// Bits per assignment on the wire: `ceil(log2 k)`.
pub fn index_bits(k: usize) -> u32 {
    assert!(k >= 1);
    usize::BITS - (k - 1).leading_zeros()
}

/// Largest block size `<= requested_d` dividing `layer_input_dim`.
pub fn adapt_block_size(layer_input_dim: usize, requested_d: usize) -> usize {
    (1..=requested_d.clamp(1, layer_input_dim.max(1)))
        .rev()
        .find(|d| layer_input_dim.is_multiple_of(*d))
        .unwrap_or(1)
}

/// Column blocks of one matrix, stored contiguously in block order.
#[derive(Clone, Debug, PartialEq)]
pub struct Blocks {
    d: usize,
    block_rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Blocks {
    pub fn from_vectors(vectors: &[Vec<f64>]) -> Result<Self> {
        let d = vectors.first().map(Vec::len).unwrap_or(0);
        if d == 0 || vectors.iter().any(|v| v.len() != d) {
            return Err(Error::dimension("blocks must be non-empty and of equal size"));
        }
        Ok(Self {
            d,
            block_rows: vectors.len(),
            cols: 1,
            data: vectors.concat(),
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.block_rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(C_in / d, C_out)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.block_rows, self.cols)
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }
}

pub fn split_blocks(matrix: &Tensor, d: usize) -> Result<Blocks> {
    let (rows, cols) = matrix.dims()?;
    if d == 0 || rows % d != 0 {
        return Err(Error::Shape(format!("block size {d} does not divide {rows} rows")));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for c in 0..cols {
        for r in 0..rows {
            data.push(matrix.at(r, c));
        }
    }
    Ok(Blocks {
        d,
        block_rows: rows / d,
        cols,
        data,
    })
}

pub fn merge_blocks(blocks: &Blocks) -> Tensor {
    let rows = blocks.block_rows * blocks.d;
    let cols = blocks.cols;
    let mut data = vec![0.0; rows * cols];
    for c in 0..cols {
        for r in 0..rows {
            data[r * cols + c] = blocks.data[c * rows + r];
        }
    }
    Tensor::matrix(rows, cols, data).expect("consistent layout")
}

/// `k` codewords of dimension `d`, stored as 32-bit floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    k: usize,
    d: usize,
    codewords: Vec<f32>,
}

impl Codebook {
    pub fn new(k: usize, d: usize, codewords: Vec<f32>) -> Result<Self> {
        if k == 0 || d == 0 || codewords.len() != k * d {
            return Err(Error::dimension(format!(
                "codebook {k} x {d} needs {} values, got {}",
                k * d,
                codewords.len()
            )));
        }
        if codewords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite codeword"));
        }
        Ok(Self { k, d, codewords })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn codeword(&self, r: usize) -> &[f32] {
        &self.codewords[r * self.d..(r + 1) * self.d]
    }

    pub fn wire_len(&self) -> usize {
        8 + 4 * self.codewords.len()
    }

    /// `k` and `d` as u32, then `k * d` f32 values row-major, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        for c in &self.codewords {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Framing("codebook header truncated".into()));
        }
        let k = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != 4 * k * d {
            return Err(Error::Framing(format!(
                "codebook {k} x {d} needs {} body bytes, got {}",
                4 * k * d,
                body.len()
            )));
        }
        let codewords = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(k, d, codewords).map_err(|e| Error::Framing(e.to_string()))
    }
}

/// Codeword indices in block order, shape `(C_in / d, C_out)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignments {
    indices: Vec<u32>,
    grid: (usize, usize),
    k: usize,
}

impl Assignments {
    pub fn new(indices: Vec<u32>, grid: (usize, usize), k: usize) -> Result<Self> {
        if indices.len() != grid.0 * grid.1 {
            return Err(Error::dimension(format!(
                "{} indices for a {} x {} grid",
                indices.len(),
                grid.0,
                grid.1
            )));
        }
        if let Some(bad) = indices.iter().find(|&&i| i as usize >= k) {
            return Err(Error::invalid(format!("index {bad} out of range for k = {k}")));
        }
        Ok(Self { indices, grid, k })
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Entry `(m, n)` of the assignment matrix.
    pub fn get(&self, m: usize, n: usize) -> u32 {
        self.indices[n * self.grid.0 + m]
    }
}

#[inline]
pub(crate) fn sq_dist(block: &[f64], codeword: &[f32]) -> f64 {
    block
        .iter()
        .zip(codeword)
        .map(|(x, c)| {
            let t = x - *c as f64;
            t * t
        })
        .sum()
}

/// Index and squared distance of the nearest codeword; ties go to the lowest index.
pub fn nearest(block: &[f64], codebook: &Codebook) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for r in 0..codebook.k {
        let dist = sq_dist(block, codebook.codeword(r));
        if dist < best.1 {
            best = (r as u32, dist);
        }
    }
    best
}

pub fn assign(blocks: &Blocks, codebook: &Codebook) -> Result<Assignments> {
    if blocks.dim() != codebook.dim() {
        return Err(Error::dimension(format!(
            "blocks of size {}, codewords of size {}",
            blocks.dim(),
            codebook.dim()
        )));
    }
    let indices = blocks.iter().map(|b| nearest(b, codebook).0).collect();
    Assignments::new(indices, blocks.grid(), codebook.k())
}

/// `W_hat = C[A]` in matrix layout.
pub fn decompress(codebook: &Codebook, a: &Assignments) -> Result<Tensor> {
    if a.k() > codebook.k() {
        return Err(Error::invalid(format!(
            "assignments for k = {} but codebook has {}",
            a.k(),
            codebook.k()
        )));
    }
    let d = codebook.dim();
    let mut data = Vec::with_capacity(a.len() * d);
    for &i in a.indices() {
        let i = i as usize;
        if i >= codebook.k() {
            return Err(Error::invalid(format!("index {i} out of range")));
        }
        data.extend(codebook.codeword(i).iter().map(|&c| c as f64));
    }
    Ok(merge_blocks(&Blocks {
        d,
        block_rows: a.grid.0,
        cols: a.grid.1,
        data,
    }))
}

/// Reassemble a matrix from one `d`-vector per block.
pub fn matrix_from_block_values(grid: (usize, usize), d: usize, data: Vec<f64>) -> Result<Tensor> {
    if data.len() != grid.0 * grid.1 * d {
        return Err(Error::dimension("block values do not match the grid"));
    }
    Ok(merge_blocks(&Blocks {
        d,
        block_rows: grid.0,
        cols: grid.1,
        data,
    }))
}

/// Uplink bits for the matrix-shaped layers in `shapes`; other tensors are skipped.
pub fn pq_uplink_bits(shapes: &[Vec<usize>], config: &PQConfig) -> u64 {
    shapes
        .iter()
        .filter_map(|s| match s[..] {
            [c_in, c_out] => {
                let d = config.block_size_for(c_in);
                Some((c_in / d * c_out) as u64 * index_bits(config.k) as u64)
            }
            _ => None,
        })
        .sum()
}

/// Downlink bytes of all per-layer codebooks (32-bit float codewords).
pub fn codebook_downlink_bytes(shapes: &[Vec<usize>], config: &PQConfig) -> u64 {
    shapes
        .iter()
        .filter_map(|s| match s[..] {
            [c_in, _] => Some((config.k * config.block_size_for(c_in) * 4) as u64),
            _ => None,
        })
        .sum()
}
