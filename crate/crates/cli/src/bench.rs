use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use secagg_compress::codec_pq::KMeansOptions;
use secagg_compress::finite_group::MaskSeed;
use secagg_compress::flsim::{refresh_codecs, Aggregate, RefreshOptions, SchemeConfig, TensorCodec};
use secagg_compress::protocol::{client_encrypt, server_aggregate_secagg, Tee};
use secagg_compress::{Result, Tensor};

use crate::run::write_csv;
use crate::Failure;

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BenchConfig {
    seed: u64,
    /// Synthetic weight matrix. 320 x 200 makes every default row a whole
    /// number of bytes.
    shape: [usize; 2],
    repeats: u32,
    codecs: Vec<SchemeConfig>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let sq = |b, p| SchemeConfig::Sq { b, p, quant: Default::default() };
        Self {
            seed: 0,
            shape: [320, 200],
            repeats: 5,
            codecs: vec![
                SchemeConfig::Baseline,
                sq(8, 8),
                sq(8, 15),
                sq(4, 8),
                SchemeConfig::Prune { sparsity: 0.5, p: 32 },
                SchemeConfig::Prune { sparsity: 0.9, p: 32 },
                SchemeConfig::Pq { k: 16, d: 2 },
                SchemeConfig::Pq { k: 32, d: 8 },
                SchemeConfig::Pq { k: 256, d: 8 },
            ],
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub codec: String,
    pub params: String,
    pub weights: usize,
    pub payload_bytes: usize,
    pub bits_per_weight: f64,
    pub encode_mweights_per_s: f64,
    pub decode_mweights_per_s: f64,
}

/// One client's payload through the full secure path, `repeats` times.
fn bench_one(scheme: &SchemeConfig, tensor: &Tensor, seed: &MaskSeed, repeats: u32) -> Result<BenchRow> {
    let options = RefreshOptions {
        compress_vectors: true,
        kmeans: KMeansOptions::default(),
    };
    let state = refresh_codecs(scheme, std::slice::from_ref(tensor), None, &seed.derive(1, 0), &options)?;
    let codec = state.codecs(1)?.remove(0);
    let client = seed.derive(2, 0);
    let tee = Tee::new(0, vec![(0, client)])?;
    let len = codec.wire_elements(&tensor.shape);

    let t0 = Instant::now();
    let mut payload = None;
    for _ in 0..repeats {
        let code = codec.encode(tensor)?;
        payload = Some(client_encrypt(&code, &client, 0, 0, 0, codec.scheme_tag()));
    }
    let encode = t0.elapsed().as_secs_f64() / repeats as f64;
    let payload = payload.expect("repeats >= 1");

    let t0 = Instant::now();
    for _ in 0..repeats {
        let agg = match &codec {
            TensorCodec::Product { codebook, d } => {
                let grid = (tensor.shape[0] / d, tensor.shape[1]);
                Aggregate::Histogram(tee.histograms(std::slice::from_ref(&payload), codebook.k(), codec.group(), 0, grid)?)
            }
            _ => {
                let masks = tee.mask_sum(0, len, codec.group());
                Aggregate::Sum(server_aggregate_secagg(std::slice::from_ref(&payload), &masks, 1)?)
            }
        };
        codec.decode(&agg, &tensor.shape, 1, 1.0)?;
    }
    let decode = t0.elapsed().as_secs_f64() / repeats as f64;

    let weights = tensor.len();
    Ok(BenchRow {
        codec: scheme.name().into(),
        params: scheme.params(),
        weights,
        payload_bytes: payload.body.len(),
        bits_per_weight: payload.body.len() as f64 * 8.0 / weights as f64,
        encode_mweights_per_s: weights as f64 / encode / 1e6,
        decode_mweights_per_s: weights as f64 / decode / 1e6,
    })
}

pub fn bench_rows(config: Option<&str>, seed: Option<u64>) -> std::result::Result<Vec<BenchRow>, Failure> {
    let mut cfg: BenchConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(|e| Failure::config(e.to_string()))?,
        None => BenchConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if cfg.repeats == 0 || cfg.shape.contains(&0) {
        return Err(Failure::config("repeats and shape must be positive"));
    }
    for c in &cfg.codecs {
        c.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.shape[0] * cfg.shape[1];
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let tensor = Tensor::matrix(cfg.shape[0], cfg.shape[1], data)?;
    let seed = MaskSeed::from_u128(cfg.seed as u128);
    cfg.codecs
        .iter()
        .map(|c| bench_one(c, &tensor, &seed, cfg.repeats).map_err(Failure::from))
        .collect()
}

pub fn cmd_bench(config: Option<&Path>, out: Option<&Path>, seed: Option<u64>) -> std::result::Result<(), Failure> {
    let text = match config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let rows = bench_rows(text.as_deref(), seed)?;
    println!(
        "{:<10} {:<20} {:>8} {:>10} {:>8} {:>12} {:>12}",
        "codec", "params", "weights", "bytes", "bits/w", "enc Mw/s", "dec Mw/s"
    );
    for r in &rows {
        println!(
            "{:<10} {:<20} {:>8} {:>10} {:>8.3} {:>12.1} {:>12.1}",
            r.codec, r.params, r.weights, r.payload_bytes, r.bits_per_weight, r.encode_mweights_per_s, r.decode_mweights_per_s
        );
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Failure::failed(e.to_string()))?;
        write_csv(&dir.join("bench.csv"), &rows)?;
    }
    Ok(())
}
