//! Invariant suite behind `secagg check`. Every check draws from its own
//! ChaCha8 stream, so a failure is reproduced by rerunning with the same seed.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use secagg_compress::codec_pq::{decompress, Assignments, Codebook};
use secagg_compress::codec_prune::{compact, derive_keep_indices, expand, PruneSpec};
use secagg_compress::codec_scalar::{
    calibrate_minmax, dequantize, dequantize_aggregate, min_safe_bitwidth, quantize, QParams, QuantScheme,
};
use secagg_compress::finite_group::{pack, packed_len, sum_mod, unpack, Group, GroupVector, MaskSeed};
use secagg_compress::protocol::oracle::detect_overflows;
use secagg_compress::protocol::{
    assignments_to_group, client_encrypt, server_aggregate_secagg, server_reconstruct_secind, tee_mask_sum,
    MaskedPayload, SchemeTag, Tee,
};

use crate::Failure;

pub const DEFAULT_SEED: u64 = 20_240_601;

type Check = fn(&mut ChaCha8Rng, bool) -> Result<usize, String>;

const CHECKS: [(&str, Check); 8] = [
    ("pack roundtrip", pack_roundtrip),
    ("frame golden", frame_golden),
    ("mask cancellation", mask_cancellation),
    ("secagg exactness", secagg_exactness),
    ("sq linearity", sq_linearity),
    ("overflow margin", overflow_margin),
    ("prune linearity", prune_linearity),
    ("secind equivalence", secind_equivalence),
];

fn random_vector(rng: &mut ChaCha8Rng, len: usize, group: Group) -> GroupVector {
    let m = group.modulus();
    GroupVector::new((0..len).map(|_| rng.random_range(0..m) as u32).collect(), group).unwrap()
}

fn seed(rng: &mut ChaCha8Rng) -> MaskSeed {
    MaskSeed::from_u128(rng.random())
}

fn pack_roundtrip(rng: &mut ChaCha8Rng, _: bool) -> Result<usize, String> {
    let mut trials = 0;
    for p in 1..=32 {
        for _ in 0..20 {
            let len = rng.random_range(0..300);
            let v = random_vector(rng, len, Group::pow2(p).unwrap());
            let bytes = pack(&v);
            if bytes.len() != packed_len(len, p) {
                return Err(format!("p={p} len={len}: {} bytes", bytes.len()));
            }
            if unpack(&bytes, len, p).map_err(|e| e.to_string())? != v {
                return Err(format!("p={p} len={len}: roundtrip differs"));
            }
            trials += 1;
        }
    }
    Ok(trials)
}

fn frame_golden(_: &mut ChaCha8Rng, _: bool) -> Result<usize, String> {
    let seed = MaskSeed::from_u128(0x0123_4567_89ab_cdef_0011_2233_4455_6677);
    let q = GroupVector::with_bit_width(vec![1, 2, 3, 4], 8).unwrap();
    let frame = client_encrypt(&q, &seed, 0, 7, 3, SchemeTag::Sq).to_bytes();
    let hex: String = frame.iter().map(|b| format!("{b:02x}")).collect();
    if hex != "070000000300000001080000040000006b6bb5d0" {
        return Err(format!("frame bytes changed: {hex}"));
    }
    if MaskedPayload::from_bytes(&frame).map_err(|e| e.to_string())?.to_bytes() != frame {
        return Err("frame does not reparse to itself".into());
    }
    Ok(1)
}

fn mask_cancellation(rng: &mut ChaCha8Rng, _: bool) -> Result<usize, String> {
    for trial in 0..200 {
        let p = rng.random_range(1..=32);
        let group = Group::pow2(p).unwrap();
        let n = rng.random_range(1..=20);
        let len = rng.random_range(1..200);
        let offset = rng.random_range(0..1_000_000);
        let seeds: Vec<MaskSeed> = (0..n).map(|_| seed(rng)).collect();
        let masks: Vec<GroupVector> = seeds.iter().map(|s| seed_mask(s, offset, len, group)).collect();
        let total = tee_mask_sum(&seeds, offset, len, group).map_err(|e| e.to_string())?;
        if total != sum_mod(&masks).unwrap() {
            return Err(format!("trial {trial}: TEE mask sum differs from the sum of client masks"));
        }
    }
    Ok(200)
}

fn seed_mask(s: &MaskSeed, offset: u64, len: usize, group: Group) -> GroupVector {
    secagg_compress::finite_group::expand_mask_in(s, offset, len, group)
}

fn secagg_exactness(rng: &mut ChaCha8Rng, fault: bool) -> Result<usize, String> {
    let trials = 200;
    for trial in 0..trials {
        let p = [1, 4, 8, 16, 32][trial % 5];
        let n = [1, 2, 10, 100][(trial / 5) % 4];
        let group = Group::pow2(p).unwrap();
        let len = rng.random_range(1..64);
        let updates: Vec<GroupVector> = (0..n).map(|_| random_vector(rng, len, group)).collect();
        let seeds: Vec<MaskSeed> = (0..n).map(|_| seed(rng)).collect();
        let mut payloads: Vec<MaskedPayload> = updates
            .iter()
            .zip(&seeds)
            .enumerate()
            .map(|(i, (q, s))| client_encrypt(q, s, 0, 0, i as u32, SchemeTag::Sq))
            .collect();
        if fault && trial == 0 {
            payloads[0].body[0] ^= 1;
        }
        let masks = tee_mask_sum(&seeds, 0, len, group).map_err(|e| e.to_string())?;
        let got = server_aggregate_secagg(&payloads, &masks, n).map_err(|e| e.to_string())?;
        if got != sum_mod(&updates).unwrap() {
            return Err(format!("trial {trial} (p={p}, N={n}): aggregate differs from the modular sum"));
        }
    }
    Ok(trials)
}

fn sq_linearity(rng: &mut ChaCha8Rng, _: bool) -> Result<usize, String> {
    let mut trials = 0;
    for b in [1, 4, 8] {
        for n in [2, 10, 100] {
            for scheme in [QuantScheme::Symmetric, QuantScheme::Affine] {
                let len = 500;
                let lo = rng.random_range(-2.0..0.0);
                let hi = rng.random_range(0.1..2.0);
                let tensors: Vec<Vec<f64>> = (0..n).map(|_| (0..len).map(|_| rng.random_range(lo..hi)).collect()).collect();
                let qp = calibrate_minmax(&tensors.concat(), b, scheme).map_err(|e| e.to_string())?;
                let p = min_safe_bitwidth(b, n).map_err(|e| e.to_string())?;
                let codes: Vec<GroupVector> = tensors.iter().map(|t| quantize(t, &qp)).collect();
                let wide: Vec<GroupVector> = codes.iter().map(|c| c.embed(Group::pow2(p).unwrap()).unwrap()).collect();
                let agg = dequantize_aggregate(&sum_mod(&wide).unwrap(), &qp, n).map_err(|e| e.to_string())?;
                let mut want = vec![0.0; len];
                for c in &codes {
                    for (w, v) in want.iter_mut().zip(dequantize(c, &qp).unwrap()) {
                        *w += v;
                    }
                }
                let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(qp.scale());
                if let Some(j) = (0..len).find(|&j| (agg[j] - want[j]).abs() > 1e-6 * scale) {
                    return Err(format!("b={b} N={n} {scheme:?}: element {j} is {} not {}", agg[j], want[j]));
                }
                trials += 1;
            }
        }
    }
    Ok(trials)
}

fn overflow_margin(_: &mut ChaCha8Rng, _: bool) -> Result<usize, String> {
    let mut trials = 0;
    for b in 1..=4 {
        let qp = QParams::new(1.0, 0, b).unwrap();
        let top = (1u32 << b) - 1;
        for n in 1..=64 {
            let p = min_safe_bitwidth(b, n).map_err(|e| e.to_string())?;
            let all_max = vec![GroupVector::with_bit_width(vec![top; 4], b).unwrap(); n];
            let f = detect_overflows(&all_max, &qp, p).map_err(|e| e.to_string())?;
            if f != 0.0 {
                return Err(format!("b={b} N={n} p={p}: {f} of elements overflowed"));
            }
            trials += 1;
        }
    }
    Ok(trials)
}

fn prune_linearity(rng: &mut ChaCha8Rng, _: bool) -> Result<usize, String> {
    for trial in 0..50 {
        let shape = vec![rng.random_range(1..40), rng.random_range(1..40)];
        let sparsity = rng.random_range(0.0..0.99);
        let spec = PruneSpec::new(seed(rng), sparsity, shape.clone()).map_err(|e| e.to_string())?;
        let len = spec.len();
        let n = rng.random_range(1..8);
        let updates: Vec<Vec<f64>> = (0..n).map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut summed = vec![0.0; spec.kept_count()];
        for u in &updates {
            for (s, v) in summed.iter_mut().zip(compact(u, &spec).unwrap()) {
                *s += v;
            }
        }
        let got = expand(&summed, &spec).unwrap();
        let keep = derive_keep_indices(&spec);
        for j in 0..len {
            let want = if keep.binary_search(&j).is_ok() { updates.iter().map(|u| u[j]).sum() } else { 0.0 };
            if (got[j] - want).abs() > 1e-12 {
                return Err(format!("trial {trial}: position {j} is {} not {want}", got[j]));
            }
        }
    }
    Ok(50)
}

fn secind_equivalence(rng: &mut ChaCha8Rng, _: bool) -> Result<usize, String> {
    let mut trials = 0;
    for k in [8, 16, 32, 64] {
        for _ in 0..5 {
            let n = rng.random_range(1..=32);
            let d = rng.random_range(1..=8);
            let grid = (rng.random_range(1..40), rng.random_range(1..40));
            let words: Vec<f32> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let codebook = Codebook::new(k, d, words).unwrap();
            let group = Group::for_codewords(k).unwrap();
            let blocks = grid.0 * grid.1;
            let assignments: Vec<Assignments> = (0..n)
                .map(|_| Assignments::new((0..blocks).map(|_| rng.random_range(0..k as u32)).collect(), grid, k).unwrap())
                .collect();
            let seeds: Vec<(u32, MaskSeed)> = (0..n as u32).map(|c| (c, seed(rng))).collect();
            let payloads: Vec<MaskedPayload> = assignments
                .iter()
                .zip(&seeds)
                .map(|(a, (c, s))| client_encrypt(&assignments_to_group(a, group).unwrap(), s, 0, 1, *c, SchemeTag::PqAssign))
                .collect();
            let tee = Tee::new(1, seeds).map_err(|e| e.to_string())?;
            let h = tee.histograms(&payloads, k, group, 0, grid).map_err(|e| e.to_string())?;
            if (0..blocks).any(|b| h.block(b).iter().sum::<u32>() != n as u32) {
                return Err(format!("k={k} N={n}: a block histogram does not sum to N"));
            }
            let got = server_reconstruct_secind(&h, &codebook).map_err(|e| e.to_string())?;
            let mut want = vec![0.0; got.len()];
            for a in &assignments {
                for (w, v) in want.iter_mut().zip(&decompress(&codebook, a).unwrap().data) {
                    *w += v;
                }
            }
            for (j, (g, w)) in got.data.iter().zip(&want).enumerate() {
                if (g - w).abs() > 1e-5 * w.abs().max(1.0) {
                    return Err(format!("k={k} N={n}: element {j} is {g} not {w}"));
                }
            }
            trials += 1;
        }
    }
    Ok(trials)
}

pub fn cmd_check(seed: u64, inject_fault: bool) -> Result<(), Failure> {
    let start = Instant::now();
    let mut failed = Vec::new();
    for (i, (name, check)) in CHECKS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        match check(&mut rng, inject_fault) {
            Ok(trials) => println!("PASS  {name} ({trials} trials)"),
            Err(msg) => {
                println!("FAIL  {name}: {msg} (reproduce with --seed {seed})");
                failed.push(*name);
            }
        }
    }
    println!("{} checks in {:.2}s", CHECKS.len(), start.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::failed(format!("violated: {}", failed.join(", "))))
    }
}
