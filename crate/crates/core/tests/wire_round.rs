//! One aggregation round where every frame crosses the wire as bytes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use secagg_compress::codec_pq::{assign, decompress, split_blocks, train_codebook, KMeansOptions};
use secagg_compress::codec_scalar::{calibrate_minmax, dequantize, dequantize_aggregate, min_safe_bitwidth, quantize, QuantScheme};
use secagg_compress::finite_group::{Group, MaskSeed};
use secagg_compress::protocol::{
    assignments_to_group, client_encrypt, client_seed, server_aggregate_secagg, server_reconstruct_secind,
    MaskedPayload, SchemeTag, Tee,
};
use secagg_compress::Tensor;

fn updates(n: usize, rows: usize, cols: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-0.1..0.1)).collect()).unwrap())
        .collect()
}

fn clients(master: &MaskSeed, round: u32, n: u32) -> Vec<(u32, MaskSeed)> {
    (0..n).map(|c| (c * 7 + 1, client_seed(master, round, c * 7 + 1))).collect()
}

#[test]
fn sq_round_over_serialized_frames() {
    let n = 12;
    let grads = updates(n, 16, 8, 1);
    let qp = calibrate_minmax(&grads[0].data, 6, QuantScheme::Affine).unwrap();
    let p = min_safe_bitwidth(6, n).unwrap();
    let seeds = clients(&MaskSeed::from_u128(99), 4, n as u32);

    let mut wire = Vec::new();
    for (g, (id, seed)) in grads.iter().zip(&seeds) {
        let q = quantize(&g.data, &qp).embed(Group::pow2(p).unwrap()).unwrap();
        wire.extend(client_encrypt(&q, seed, 0, 4, *id, SchemeTag::Sq).to_bytes());
    }

    let frames = MaskedPayload::read_all(&wire).unwrap();
    let tee = Tee::new(4, seeds).unwrap();
    let masks = tee.mask_sum(0, 128, Group::pow2(p).unwrap());
    let sum = server_aggregate_secagg(&frames, &masks, n).unwrap();
    let got = dequantize_aggregate(&sum, &qp, n).unwrap();

    let mut want = vec![0.0; 128];
    for g in &grads {
        for (w, v) in want.iter_mut().zip(dequantize(&quantize(&g.data, &qp), &qp).unwrap()) {
            *w += v;
        }
    }
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-9);
    }
}

#[test]
fn pq_round_over_serialized_frames() {
    let n = 6;
    let grads = updates(n, 16, 8, 2);
    let d = 4;
    let report = train_codebook(&split_blocks(&grads[0], d).unwrap(), 8, KMeansOptions::default(), &MaskSeed::from_u128(3)).unwrap();
    let cb = report.codebook;
    let group = Group::for_codewords(8).unwrap();
    let seeds = clients(&MaskSeed::from_u128(5), 0, n as u32);

    let mut wire = Vec::new();
    let mut want = vec![0.0; 128];
    for (g, (id, seed)) in grads.iter().zip(&seeds) {
        let a = assign(&split_blocks(g, d).unwrap(), &cb).unwrap();
        for (w, v) in want.iter_mut().zip(&decompress(&cb, &a).unwrap().data) {
            *w += v;
        }
        wire.extend(client_encrypt(&assignments_to_group(&a, group).unwrap(), seed, 0, 0, *id, SchemeTag::PqAssign).to_bytes());
    }
    // a truncated stream is a framing error, not a silent short read
    assert!(MaskedPayload::read_all(&wire[..wire.len() - 1]).is_err());

    let frames = MaskedPayload::read_all(&wire).unwrap();
    let h = Tee::new(0, seeds).unwrap().histograms(&frames, 8, group, 0, (4, 8)).unwrap();
    let got = server_reconstruct_secind(&h, &cb).unwrap();
    assert_eq!(got.shape, vec![16, 8]);
    for (a, b) in got.data.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
    }
}
