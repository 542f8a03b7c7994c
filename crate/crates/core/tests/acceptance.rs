//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each; exits nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use secagg_compress::codec_pq::{pq_uplink_bits, Assignments, Codebook, PQConfig};
use secagg_compress::codec_prune::{pruned_uplink_bits, PruneSpec};
use secagg_compress::codec_scalar::{
    calibrate_minmax, dequantize_aggregate, min_safe_bitwidth, quantize, QParams, QuantScheme,
};
use secagg_compress::finite_group::{expand_mask_in, pack, unpack, Group, GroupVector, MaskSeed};
use secagg_compress::flsim::{run_experiment, ExperimentConfig, ResultRow};
use secagg_compress::protocol::oracle::detect_overflows;
use secagg_compress::protocol::{
    assignments_to_group, client_encrypt, server_aggregate_secagg, server_reconstruct_secind, MaskedPayload, SchemeTag,
    Tee,
};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e(err: secagg_compress::Error) -> String {
    err.to_string()
}

fn random_codes(rng: &mut ChaCha8Rng, len: usize, p: u32) -> GroupVector {
    let m = 1u64 << p;
    GroupVector::with_bit_width((0..len).map(|_| rng.random_range(0..m) as u32).collect(), p).unwrap()
}

/// Masks every update, has the TEE release the mask sum, and aggregates.
fn secure_sum(updates: &[GroupVector], rng: &mut ChaCha8Rng, round: u32) -> Result<GroupVector, String> {
    let seeds: Vec<(u32, MaskSeed)> = (0..updates.len() as u32).map(|c| (c, MaskSeed::from_u128(rng.random()))).collect();
    let payloads: Vec<MaskedPayload> = updates
        .iter()
        .zip(&seeds)
        .map(|(q, (c, s))| client_encrypt(q, s, 0, round, *c, SchemeTag::Sq))
        .collect();
    let tee = Tee::new(round, seeds).map_err(e)?;
    let masks = tee.mask_sum(0, updates[0].len(), updates[0].group());
    server_aggregate_secagg(&payloads, &masks, updates.len()).map_err(e)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ps = [1u32, 4, 8, 16, 32];
    let ns = [1usize, 2, 10, 100];
    let trials = 1000;
    for t in 0..trials {
        let p = ps[t % ps.len()];
        let n = ns[(t / ps.len()) % ns.len()];
        let len = rng.random_range(1..=64);
        let updates: Vec<GroupVector> = (0..n).map(|_| random_codes(&mut rng, len, p)).collect();
        let got = secure_sum(&updates, &mut rng, t as u32)?;
        // direct integer sum, reduced once
        let want: Vec<u32> = (0..len)
            .map(|j| (updates.iter().map(|u| u.values()[j] as u128).sum::<u128>() % (1u128 << p)) as u32)
            .collect();
        ensure(got.values() == want.as_slice(), || format!("trial {t}: p={p} N={n} mismatch"))?;
    }
    Ok(format!("{trials} trials, zero tolerance"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let len = 10_000;
    let mut worst = 0.0f64;
    for b in [1u32, 4, 8] {
        for n in [2usize, 10, 100] {
            for scheme in [QuantScheme::Symmetric, QuantScheme::Affine] {
                let shift = rng.random_range(-0.5..0.5);
                let tensors: Vec<Vec<f64>> =
                    (0..n).map(|_| (0..len).map(|_| shift + rng.random_range(-1.0..1.0)).collect()).collect();
                let qp = calibrate_minmax(&tensors[0], b, scheme).map_err(e)?;
                let p = min_safe_bitwidth(b, n).map_err(e)?;
                let codes: Vec<GroupVector> = tensors.iter().map(|t| quantize(t, &qp)).collect();
                let wide: Vec<GroupVector> = codes.iter().map(|c| c.embed(Group::pow2(p).unwrap()).unwrap()).collect();
                let agg = dequantize_aggregate(&secure_sum(&wide, &mut rng, 0)?, &qp, n).map_err(e)?;
                let z = qp.zero_point() as f64;
                for j in 0..len {
                    let want: f64 = codes.iter().map(|c| qp.scale() * (c.values()[j] as f64 - z)).sum();
                    let rel = (agg[j] - want).abs() / want.abs().max(qp.scale());
                    worst = worst.max(rel);
                    ensure(rel <= 1e-6, || format!("b={b} N={n} {scheme:?} element {j}: {} vs {want}", agg[j]))?;
                }
            }
        }
    }
    Ok(format!("max relative error {worst:.2e}"))
}

fn criterion_3a() -> Outcome {
    let mut cases = 0;
    for b in 1..=4u32 {
        let top = (1u32 << b) - 1;
        for n in 1..=64usize {
            let p = b + (n as f64).log2().ceil() as u32;
            ensure(min_safe_bitwidth(b, n) == Ok(p), || format!("min_safe_bitwidth({b}, {n}) != {p}"))?;
            for zp in [0, top / 2, top] {
                let qp = QParams::new(0.5, zp, b).map_err(e)?;
                // every code value, plus the adversarial all-max vector
                let all: Vec<u32> = (0..=top).chain([top; 4]).collect();
                let updates = vec![GroupVector::with_bit_width(all.clone(), b).unwrap(); n];
                ensure(detect_overflows(&updates, &qp, p).map_err(e)? == 0.0, || format!("b={b} N={n} zp={zp} overflowed"))?;
                let wide: Vec<GroupVector> = updates.iter().map(|u| u.embed(Group::pow2(p).unwrap()).unwrap()).collect();
                let sum = wide[0].scale_mod(n as u64);
                let got = dequantize_aggregate(&sum, &qp, n).map_err(e)?;
                for (g, &c) in got.iter().zip(&all) {
                    let want = 0.5 * n as f64 * (c as f64 - zp as f64);
                    ensure(*g == want, || format!("b={b} N={n} zp={zp}: decoded {g}, true {want}"))?;
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} (b, N, zero point) cases, zero overflows"))
}

fn experiment(json: &str) -> Result<Vec<ResultRow>, String> {
    let cfg = ExperimentConfig::from_json(json).map_err(e)?;
    Ok(run_experiment(&cfg).map_err(e)?.rows)
}

fn criterion_3b() -> Outcome {
    let rows = experiment(
        r#"{"name": "overflow", "seed": 3, "n_seeds": 3, "rounds": 30, "clients_per_round": 100,
            "schemes": [{"scheme": "sq", "b": 4, "p": [4, 5, 6, 7, 8]}]}"#,
    )?;
    let pct: Vec<f64> = rows[1..].iter().map(|r| r.overflow_pct).collect();
    let shown: Vec<String> = pct.iter().map(|v| format!("{v:.2}%")).collect();
    ensure(pct.windows(2).all(|w| w[1] <= w[0]), || format!("not monotone: {}", shown.join(" ")))?;
    ensure(pct[0] > pct[4], || format!("flat: {}", shown.join(" ")))?;
    Ok(format!("margin 0..4 bits: {}", shown.join(" -> ")))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut trials = 0;
    let mut worst = 0.0f64;
    for k in [8usize, 16, 32, 64] {
        for _ in 0..10 {
            let n = rng.random_range(1..=32);
            let d = rng.random_range(1..=8);
            let grid = (rng.random_range(1..=100), rng.random_range(1..=100));
            let blocks = grid.0 * grid.1;
            let words: Vec<f32> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cb = Codebook::new(k, d, words.clone()).map_err(e)?;
            let group = Group::for_codewords(k).map_err(e)?;
            let all: Vec<Vec<u32>> = (0..n).map(|_| (0..blocks).map(|_| rng.random_range(0..k as u32)).collect()).collect();
            let seeds: Vec<(u32, MaskSeed)> = (0..n as u32).map(|c| (c, MaskSeed::from_u128(rng.random()))).collect();
            let payloads: Vec<MaskedPayload> = all
                .iter()
                .zip(&seeds)
                .map(|(idx, (c, s))| {
                    let a = Assignments::new(idx.clone(), grid, k).unwrap();
                    client_encrypt(&assignments_to_group(&a, group).unwrap(), s, 0, 9, *c, SchemeTag::PqAssign)
                })
                .collect();
            let tee = Tee::new(9, seeds).map_err(e)?;
            let h = tee.histograms(&payloads, k, group, 0, grid).map_err(e)?;
            for b in 0..blocks {
                ensure(h.block(b).iter().sum::<u32>() == n as u32, || format!("k={k}: block {b} does not sum to {n}"))?;
            }
            let got = server_reconstruct_secind(&h, &cb).map_err(e)?;
            // block (m, n) is column n, rows m*d..(m+1)*d
            let (rows, cols) = (grid.0 * d, grid.1);
            for m in 0..grid.0 {
                for col in 0..cols {
                    for t in 0..d {
                        let want: f64 = all.iter().map(|idx| words[idx[col * grid.0 + m] as usize * d + t] as f64).sum();
                        let g = got.data[(m * d + t) * cols + col];
                        let rel = (g - want).abs() / want.abs().max(1.0);
                        worst = worst.max(rel);
                        ensure(rel <= 1e-5, || format!("k={k} N={n}: row {} col {col}: {g} vs {want}", m * d + t))?;
                    }
                }
            }
            ensure(got.shape == vec![rows, cols], || "reconstructed shape".into())?;
            trials += 1;
        }
    }
    Ok(format!("{trials} trials, max relative error {worst:.2e}"))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seed = MaskSeed::from_u128(5);
    let body_bits = |q: &GroupVector| client_encrypt(q, &seed, 0, 0, 0, SchemeTag::Sq).body.len() as f64 * 8.0;

    // PQ d = 8, k = 32 on a 64 x 64 layer: 512 blocks of 5-bit indices
    let cfg = PQConfig::new(32, 8).map_err(e)?;
    let a = Assignments::new((0..512).map(|_| rng.random_range(0..32)).collect(), (8, 64), 32).map_err(e)?;
    let q = assignments_to_group(&a, Group::for_codewords(32).map_err(e)?).map_err(e)?;
    let reported = pq_uplink_bits(&[vec![64, 64]], &cfg) as f64 / 4096.0;
    let measured = body_bits(&q) / 4096.0;
    ensure(reported == 0.625 && measured == 0.625, || format!("pq: reported {reported}, measured {measured}"))?;

    for p in 1..=32 {
        let q = random_codes(&mut rng, 800, p);
        ensure(body_bits(&q) / 800.0 == p as f64, || format!("sq p={p}: {} bits/weight", body_bits(&q) / 800.0))?;
    }
    for sparsity in [0.0, 0.5, 0.75, 0.9] {
        for p in [8, 16, 32] {
            let spec = PruneSpec::new(seed, sparsity, vec![40, 25]).map_err(e)?;
            let want = (1.0 - sparsity) * p as f64;
            let reported = pruned_uplink_bits(&spec, p) as f64 / 1000.0;
            let measured = body_bits(&random_codes(&mut rng, spec.kept_count(), p)) / 1000.0;
            ensure(reported == measured && (reported - want).abs() < 1e-12, || {
                format!("prune {sparsity} p={p}: reported {reported}, measured {measured}, want {want}")
            })?;
        }
    }
    Ok("pq 0.625, sq p, prune (1-sparsity)p bits/weight; reported == serialized".into())
}

const UTILITY: &str = r#"{
    "name": "utility", "seed": 6, "n_seeds": 3, "rounds": 100, "clients_per_round": 10,
    "schemes": [
        {"scheme": "sq", "b": 8, "p": 15},
        {"scheme": "prune", "sparsity": 0.5},
        {"scheme": "pq", "k": 16, "d": 2},
        {"scheme": "pq", "k": [4, 8, 16, 32], "d": [8, 16, 32, 64]}
    ]
}"#;

fn criterion_6() -> Outcome {
    let rows = experiment(UTILITY)?;
    let base = &rows[0];
    ensure(base.scheme == "baseline" && base.compression_factor == 1.0, || "baseline row missing".into())?;
    let find = |s: &str, p: &str| rows.iter().find(|r| r.scheme == s && r.params == p).unwrap();
    let gap = |r: &ResultRow| base.accuracy_mean - r.accuracy_mean;
    let mut notes = vec![format!("baseline {:.2}%", base.accuracy_mean)];
    for (s, p, tol) in [("sq", "b=8 p=15", 1.0), ("prune", "sparsity=0.5 p=32", 1.0), ("pq", "k=16 d=2", 2.0)] {
        let r = find(s, p);
        notes.push(format!("{s} {p}: {:+.2}", -gap(r)));
        ensure(gap(r) <= tol, || format!("{s} {p} is {:.2} points below baseline", gap(r)))?;
    }
    let aggressive = rows
        .iter()
        .filter(|r| r.scheme == "pq")
        .max_by(|a, b| a.compression_factor.total_cmp(&b.compression_factor))
        .unwrap();
    notes.push(format!("pq {} at {:.1}x: {:+.2}", aggressive.params, aggressive.compression_factor, -gap(aggressive)));
    ensure(aggressive.compression_factor >= 20.0 && gap(aggressive) <= 3.0, || notes.join(", "))?;
    Ok(notes.join(", "))
}

fn criterion_7() -> Outcome {
    let rows = experiment(
        r#"{"name": "refresh", "seed": 7, "n_seeds": 3, "rounds": 100, "clients_per_round": 10,
            "schemes": [{"scheme": "pq", "k": 4, "d": 64, "refresh_period": [1, 5, 25]}]}"#,
    )?;
    let acc: Vec<(f64, f64)> = rows[1..].iter().map(|r| (r.accuracy_mean, r.accuracy_std)).collect();
    let shown: Vec<String> = acc.iter().map(|(m, s)| format!("{m:.2}±{s:.2}")).collect();
    let ok = acc.windows(2).all(|w| w[1].0 <= w[0].0 + w[0].1.max(w[1].1));
    ensure(ok, || format!("R = 1, 5, 25: {}", shown.join(", ")))?;
    Ok(format!("pq k=4 d=64, R = 1, 5, 25: {}", shown.join(" -> ")))
}

const PACK_GOLDEN: [&str; 32] = [
    "55",
    "4e0e",
    "637d04",
    "5476980a",
    "dd7d18e400",
    "d681a7dac203",
    "0f605c3425d400",
    "c8792adb8c3dee",
    "01648fa558ccce09",
    "3aaecf59d3febc0a06",
    "732261750d7f13746512",
    "acd2c50ef6fb701932d20c",
    "e5d2921d19fc9f9ab5e64203",
    "1ee3330768c540e2c9e440d403",
    "57538466ae510db8a1639ef5b500",
    "9003417df2f6a37054ea0564b6dd",
    "c933f55aad9ce006dda8d187d27b03",
    "0264cf764b76654574c64add1183e203",
    "3b94636f58e7a19c02f4af17587a84b901",
    "74c453e2b3d6b77218a338ab914e929a9e00",
    "adf4c3cb6d3fa04be03015b71d44aaf2b43304",
    "e624c4a5e78e8431e747aaaa0be25661c6f00f01",
    "1f550468e75d20d25c465835be23a6accd14bd4401",
    "58850409ff3bba78736bf2aa1c6ce2cde5197e5f51",
    "91b504845e78cca3ce21155955c529cec042e3ed6354",
    "cae504ec7df1c8923d47b7d4aa8ecce2fc18690cff1b15",
    "031605a07de47159021d2d065775cc2f0e3c3b8da7c04715",
    "3c4605d0fecbe39e3974fc34bbaa002de3186baa7162205205",
    "757605c0049ec75fa7d171c4f1559dd3358ed5ad35ee26945405",
    "aea605c017488f07a149c7074fb06a728de3f8c8c1c6450d285503",
    "e7d605004ca81e4f92321d4f7f8855bbda3b8ee7bad9b834c44ad500",
    "20070600d1803d9e82fa743c3374acdae4ede37895671b1746e152b5",
];
const MASK_GOLDEN: [[u32; 3]; 32] = [
    [1, 0, 0],
    [3, 2, 2],
    [3, 2, 6],
    [3, 10, 14],
    [3, 10, 14],
    [35, 10, 46],
    [99, 10, 110],
    [99, 10, 238],
    [99, 266, 238],
    [611, 266, 238],
    [1635, 1290, 1262],
    [3683, 1290, 1262],
    [7779, 5386, 1262],
    [7779, 5386, 1262],
    [24163, 5386, 17646],
    [56931, 38154, 50414],
    [122467, 103690, 115950],
    [253539, 103690, 115950],
    [515683, 365834, 378094],
    [515683, 365834, 378094],
    [515683, 1414410, 378094],
    [2612835, 1414410, 378094],
    [6807139, 5608714, 4572398],
    [6807139, 13997322, 12961006],
    [23584355, 30774538, 29738222],
    [57138787, 64328970, 29738222],
    [57138787, 131437834, 29738222],
    [191356515, 265655562, 163955950],
    [459791971, 265655562, 432391406],
    [996662883, 802526474, 969262318],
    [996662883, 802526474, 2043004142],
    [3144146531, 802526474, 4190487790],
];

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn wire_bytes() -> Vec<u8> {
    let mut out = Vec::new();
    for p in 1..=32u32 {
        let vals: Vec<u32> = (0..7u64).map(|i| ((i * 2_654_435_761 + 12_345 * p as u64) % (1 << p)) as u32).collect();
        out.extend(pack(&GroupVector::with_bit_width(vals, p).unwrap()));
    }
    out
}

fn criterion_8() -> Outcome {
    let golden_seed = MaskSeed::from_u128(0x0123_4567_89ab_cdef_0011_2233_4455_6677);
    for p in 1..=32u32 {
        let i = p as usize - 1;
        let vals: Vec<u32> = (0..7u64).map(|i| ((i * 2_654_435_761 + 12_345 * p as u64) % (1 << p)) as u32).collect();
        let v = GroupVector::with_bit_width(vals, p).unwrap();
        let bytes = pack(&v);
        ensure(hex(&bytes) == PACK_GOLDEN[i], || format!("pack p={p}: {}", hex(&bytes)))?;
        ensure(unpack(&bytes, 7, p).map_err(e)? == v, || format!("unpack p={p}"))?;
        let m = expand_mask_in(&golden_seed, 5, 3, Group::pow2(p).unwrap());
        ensure(m.values() == MASK_GOLDEN[i], || format!("expand_mask p={p}: {:?}", m.values()))?;
    }
    let frames: [(u128, u64, u32, u32, SchemeTag, GroupVector, &str); 4] = [
        (
            0x0123_4567_89ab_cdef_0011_2233_4455_6677,
            0,
            7,
            3,
            SchemeTag::Sq,
            GroupVector::with_bit_width(vec![1, 2, 3, 4], 8).unwrap(),
            "070000000300000001080000040000006b6bb5d0",
        ),
        (
            0x0123_4567_89ab_cdef_0011_2233_4455_6677,
            4,
            1,
            9,
            SchemeTag::Prune,
            GroupVector::with_bit_width(vec![65535, 1, 2], 16).unwrap(),
            "01000000090000000210000006000000474a64de0c95",
        ),
        (
            42,
            0,
            2,
            0,
            SchemeTag::PqAssign,
            GroupVector::new(vec![0, 4, 2, 3, 1, 3], Group::cyclic(5).unwrap()).unwrap(),
            "02000000000000000303000003000000d9b401",
        ),
        (
            7,
            10,
            0xdead_beef,
            0x0102_0304,
            SchemeTag::Dense,
            GroupVector::with_bit_width(vec![u32::MAX], 32).unwrap(),
            "efbeadde0403020100200000040000001b168ee2",
        ),
    ];
    for (seed, offset, round, client, tag, q, want) in &frames {
        let frame = client_encrypt(q, &MaskSeed::from_u128(*seed), *offset, *round, *client, *tag).to_bytes();
        ensure(hex(&frame) == *want, || format!("{tag:?} frame: {}", hex(&frame)))?;
        ensure(MaskedPayload::from_bytes(&frame).map_err(e)?.to_bytes() == frame, || format!("{tag:?} reparse"))?;
    }
    ensure(wire_bytes() == wire_bytes(), || "pack output differs between runs".into())?;
    Ok("32 pack, 32 mask and 4 frame goldens byte-identical".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1  secagg exactness", criterion_1),
        ("2  sq linearity", criterion_2),
        ("3a overflow margin bound", criterion_3a),
        ("3b overflow trend", criterion_3b),
        ("4  secind equivalence", criterion_4),
        ("5  bits-per-weight accounting", criterion_5),
        ("6  desk-scale utility", criterion_6),
        ("7  refresh-rate ablation", criterion_7),
        ("8  wire-format stability", criterion_8),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let t0 = Instant::now();
        let outcome = run();
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
