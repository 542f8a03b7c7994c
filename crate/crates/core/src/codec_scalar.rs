//! Per-tensor uniform scalar quantization and its aggregate dequantizer.
//!
//! All clients of a round share one [`QParams`] per tensor, so the
//! dequantizer is linear in the integer codes: the modular sum of `N`
//! quantized updates decodes to the sum of the individual dequantizations as
//! long as the secure-aggregation bit-width leaves `ceil(log2 N)` bits of
//! headroom ([`min_safe_bitwidth`]).
//!
//! [`FixedPoint`] is the two's-complement encoding used for tensors that are
//! sent without lossy compression (and for kept values of pruned tensors):
//! a plain fixed-point conversion into `Z_{2^p}` sized so that a weighted sum
//! of clipped values never leaves the signed range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finite_group::{Group, GroupVector};

/// Scale used when a calibration tensor has zero range.
pub const MIN_SCALE: f64 = 1e-12;

/// Serialized size of one [`QParams`].
pub const QPARAMS_WIRE_BYTES: usize = 13;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantScheme {
    #[default]
    /// Signed range `[-2^(b-1), 2^(b-1) - 1]` shifted by `z = 2^(b-1)`.
    Symmetric,
    /// `[min, max]` mapped onto `[0, 2^b - 1]`.
    Affine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QParams {
    scale: f64,
    zero_point: u32,
    bit_width: u8,
}

impl QParams {
    pub fn new(scale: f64, zero_point: u32, bit_width: u32) -> Result<Self> {
        if !(1..=32).contains(&bit_width) {
            return Err(Error::invalid(format!("bit-width {bit_width} outside [1, 32]")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("scale {scale} must be positive")));
        }
        if zero_point as u64 > max_code(bit_width) {
            return Err(Error::invalid(format!(
                "zero-point {zero_point} outside [0, 2^{bit_width} - 1]"
            )));
        }
        Ok(Self {
            scale,
            zero_point,
            bit_width: bit_width as u8,
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn zero_point(&self) -> u32 {
        self.zero_point
    }

    pub fn bit_width(&self) -> u32 {
        self.bit_width as u32
    }

    /// 64-bit float scale, 32-bit zero-point, 8-bit bit-width, little-endian.
    pub fn to_bytes(&self) -> [u8; QPARAMS_WIRE_BYTES] {
        let mut out = [0u8; QPARAMS_WIRE_BYTES];
        out[..8].copy_from_slice(&self.scale.to_le_bytes());
        out[8..12].copy_from_slice(&(self.zero_point as i32).to_le_bytes());
        out[12] = self.bit_width;
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != QPARAMS_WIRE_BYTES {
            return Err(Error::Framing(format!(
                "qparams are {QPARAMS_WIRE_BYTES} bytes, got {}",
                bytes.len()
            )));
        }
        let scale = f64::from_le_bytes(bytes[..8].try_into().unwrap());
        let zero_point = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if zero_point < 0 {
            return Err(Error::Framing(format!("negative zero-point {zero_point}")));
        }
        Self::new(scale, zero_point as u32, bytes[12] as u32)
            .map_err(|e| Error::Framing(e.to_string()))
    }
}

fn max_code(bits: u32) -> u64 {
    (1u64 << bits) - 1
}

/// MinMax observer over one tensor.
pub fn calibrate_minmax(tensor: &[f64], b: u32, scheme: QuantScheme) -> Result<QParams> {
    if tensor.is_empty() {
        return Err(Error::Calibration("empty calibration tensor".into()));
    }
    if !(1..=32).contains(&b) {
        return Err(Error::invalid(format!("bit-width {b} outside [1, 32]")));
    }
    let (min, max) = tensor
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &w| {
            (lo.min(w), hi.max(w))
        });
    if !min.is_finite() || !max.is_finite() {
        return Err(Error::Calibration("non-finite calibration values".into()));
    }
    match scheme {
        QuantScheme::Affine => {
            let scale = ((max - min) / max_code(b) as f64).max(MIN_SCALE);
            let z = (-min / scale).round().clamp(0.0, max_code(b) as f64) as u32;
            QParams::new(scale, z, b)
        }
        QuantScheme::Symmetric => {
            let half = 1u64 << (b - 1);
            // b = 1 leaves no positive levels; fall back to a unit denominator.
            let levels = (half - 1).max(1) as f64;
            let scale = (min.abs().max(max.abs()) / levels).max(MIN_SCALE);
            QParams::new(scale, half as u32, b)
        }
    }
}

/// `w -> clamp(round(w / s) + z, [0, 2^b - 1])`, rounding half away from zero.
pub fn quantize(tensor: &[f64], qp: &QParams) -> GroupVector {
    let top = max_code(qp.bit_width()) as f64;
    let z = qp.zero_point as f64;
    let values = tensor
        .iter()
        .map(|&w| {
            let code = (w / qp.scale).round() + z;
            // NaN maps to the zero-point
            if code.is_nan() {
                qp.zero_point
            } else {
                code.clamp(0.0, top) as u32
            }
        })
        .collect();
    GroupVector::new(values, Group::PowerOfTwo(qp.bit_width))
        .expect("codes are clamped into the group")
}

/// `w_q -> s * (w_q - z)`.
pub fn dequantize(q: &GroupVector, qp: &QParams) -> Result<Vec<f64>> {
    if q.group() != Group::PowerOfTwo(qp.bit_width) {
        return Err(Error::dimension(format!(
            "codes in {:?}, qparams expect {} bits",
            q.group(),
            qp.bit_width
        )));
    }
    let z = qp.zero_point as f64;
    Ok(q.values().iter().map(|&c| qp.scale * (c as f64 - z)).collect())
}

/// Lower end of the integer window the aggregate dequantizer decodes into.
///
/// The modular aggregate `x` stands for the integer `x - N*z` reduced into
/// `[lo, lo + 2^p)`. With enough headroom (`N * (2^b - 1) < 2^p`) the window
/// starts at `-N*z`, which makes the decoder exactly `s * (x - N*z)` and
/// covers every reachable integer sum. Without headroom the window is the
/// one closest to zero that still starts no lower than `-N*z`.
pub fn aggregate_window_low(qp: &QParams, n_clients: usize, p: u32) -> i64 {
    let n = n_clients as i128;
    let nz = n * qp.zero_point as i128;
    let modulus = 1i128 << p;
    let lo = if n * max_code(qp.bit_width()) as i128 >= modulus {
        nz.min(modulus / 2)
    } else {
        nz
    };
    -(lo as i64)
}

/// Decodes the modular sum of `n_clients` quantized updates.
pub fn dequantize_aggregate(q_sum: &GroupVector, qp: &QParams, n_clients: usize) -> Result<Vec<f64>> {
    let Group::PowerOfTwo(p) = q_sum.group() else {
        return Err(Error::dimension("aggregate must be in a power-of-two group"));
    };
    let p = p as u32;
    if p < qp.bit_width() {
        return Err(Error::dimension(format!(
            "aggregate bit-width {p} below quantization bit-width {}",
            qp.bit_width
        )));
    }
    if n_clients == 0 {
        return Err(Error::invalid("aggregate of zero clients"));
    }
    let lo = aggregate_window_low(qp, n_clients, p) as i128;
    let nz = n_clients as i128 * qp.zero_point as i128;
    let modulus = 1i128 << p;
    Ok(q_sum
        .values()
        .iter()
        .map(|&x| {
            let y = (x as i128 - nz - lo).rem_euclid(modulus) + lo;
            qp.scale * y as f64
        })
        .collect())
}

/// `b + ceil(log2 N)`: smallest bit-width whose modular sum of `N` codes never wraps.
pub fn min_safe_bitwidth(b: u32, n_clients: usize) -> Result<u32> {
    if n_clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    let margin = (n_clients as u64).next_power_of_two().trailing_zeros();
    let p = b + margin;
    if p > 32 {
        return Err(Error::Capacity(format!(
            "b = {b} with {n_clients} clients needs {p} > 32 bits"
        )));
    }
    Ok(p)
}

/// Two's-complement fixed-point encoding into `Z_{2^p}`.
///
/// Values are clipped to `[-clip, clip]` and mapped to integers in
/// `[-qmax, qmax]` with `qmax = floor((2^(p-1) - 1) / headroom)`, so any sum of
/// codes with total integer weight at most `headroom` stays in the signed range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    scale: f64,
    qmax: u32,
    bit_width: u8,
}

impl FixedPoint {
    pub fn new(clip: f64, p: u32, headroom: u64) -> Result<Self> {
        Group::pow2(p)?;
        if p < 2 {
            return Err(Error::invalid("fixed-point needs at least 2 bits"));
        }
        let qmax = ((1u64 << (p - 1)) - 1) / headroom.max(1);
        if qmax == 0 {
            return Err(Error::Capacity(format!(
                "headroom {headroom} does not fit in {p} bits"
            )));
        }
        let clip = if clip.is_finite() { clip.abs() } else { 0.0 };
        let scale = (clip / qmax as f64).max(MIN_SCALE);
        Ok(Self {
            scale,
            qmax: qmax as u32,
            bit_width: p as u8,
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn clip(&self) -> f64 {
        self.scale * self.qmax as f64
    }

    pub fn bit_width(&self) -> u32 {
        self.bit_width as u32
    }

    pub fn group(&self) -> Group {
        Group::PowerOfTwo(self.bit_width)
    }

    /// Signed integer code of one value.
    pub fn code(&self, w: f64) -> i64 {
        let q = (w / self.scale).round();
        if q.is_nan() {
            0
        } else {
            q.clamp(-(self.qmax as f64), self.qmax as f64) as i64
        }
    }

    pub fn encode(&self, tensor: &[f64]) -> GroupVector {
        let g = self.group();
        let values = tensor
            .iter()
            .map(|&w| g.reduce(self.code(w) as u64))
            .collect();
        GroupVector::new(values, g).expect("reduced")
    }

    /// Signed representative of a residue, in `[-2^(p-1), 2^(p-1))`.
    pub fn centered(&self, x: u32) -> i64 {
        let half = 1i64 << (self.bit_width - 1);
        let x = x as i64;
        if x >= half {
            x - 2 * half
        } else {
            x
        }
    }

    /// Decodes a (possibly weighted) modular sum of codes.
    pub fn decode_sum(&self, sum: &GroupVector) -> Result<Vec<f64>> {
        if sum.group() != self.group() {
            return Err(Error::dimension(format!(
                "aggregate in {:?}, fixed-point expects {:?}",
                sum.group(),
                self.group()
            )));
        }
        Ok(sum
            .values()
            .iter()
            .map(|&x| self.scale * self.centered(x) as f64)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finite_group::sum_mod;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-spread..spread)).collect()
    }

    #[test]
    fn symmetric_calibration() {
        let qp = calibrate_minmax(&[-1.0, 1.0], 8, QuantScheme::Symmetric).unwrap();
        assert_eq!(qp.scale(), 1.0 / 127.0);
        assert_eq!(qp.zero_point(), 128);
        let x = [-1.0, -0.3, 0.0, 0.41, 1.0];
        let back = dequantize(&quantize(&x, &qp), &qp).unwrap();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() <= qp.scale() / 2.0 + 1e-15);
        }
    }

    #[test]
    fn degenerate_range_floors_the_scale() {
        let qp = calibrate_minmax(&[0.0, 0.0, 0.0], 8, QuantScheme::Symmetric).unwrap();
        assert_eq!(qp.scale(), MIN_SCALE);
        assert_eq!(qp.zero_point(), 128);
        assert_eq!(quantize(&[0.0, 0.0, 0.0], &qp).values(), &[128, 128, 128]);
        let qp = calibrate_minmax(&[3.0, 3.0], 4, QuantScheme::Affine).unwrap();
        assert_eq!(qp.scale(), MIN_SCALE);
    }

    #[test]
    fn affine_integer_grid() {
        let qp = calibrate_minmax(&[0.0, 255.0], 8, QuantScheme::Affine).unwrap();
        assert_eq!(qp.scale(), 1.0);
        assert_eq!(qp.zero_point(), 0);
    }

    #[test]
    fn empty_tensor_is_a_calibration_error() {
        assert!(matches!(
            calibrate_minmax(&[], 8, QuantScheme::Affine),
            Err(Error::Calibration(_))
        ));
    }

    #[test]
    fn quantize_examples() {
        let qp = QParams::new(1.0, 128, 8).unwrap();
        assert_eq!(quantize(&[0.0], &qp).values(), &[128]);
        let qp = QParams::new(1.0 / 127.0, 128, 8).unwrap();
        assert_eq!(quantize(&[1000.0], &qp).values(), &[255]);
        assert_eq!(quantize(&[-1000.0], &qp).values(), &[0]);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        // Oracle: half-away-from-zero on exact halves.
        fn oracle(x: f64) -> f64 {
            x.signum() * (x.abs() + 0.5).floor()
        }
        let qp = QParams::new(1.0, 0, 8).unwrap();
        assert_eq!(quantize(&[0.5], &qp).values(), &[1]);
        let qp = QParams::new(1.0, 128, 8).unwrap();
        for x in [-2.5f64, -1.5, -0.5, 0.5, 1.5, 2.5, 3.49, -3.51] {
            let expected = (oracle(x) + 128.0) as u32;
            assert_eq!(quantize(&[x], &qp).values(), &[expected], "x = {x}");
        }
    }

    #[test]
    fn dequantize_examples() {
        let qp = QParams::new(0.5, 7, 4).unwrap();
        let q = GroupVector::with_bit_width(vec![7, 8], 4).unwrap();
        assert_eq!(dequantize(&q, &qp).unwrap(), vec![0.0, 0.5]);
        let wrong = GroupVector::with_bit_width(vec![7], 5).unwrap();
        assert!(dequantize(&wrong, &qp).is_err());
    }

    #[test]
    fn aggregate_of_one_client_is_dequantize() {
        let qp = QParams::new(0.25, 3, 3).unwrap();
        let q = GroupVector::with_bit_width(vec![0, 3, 7], 3).unwrap();
        assert_eq!(
            dequantize_aggregate(&q, &qp, 1).unwrap(),
            dequantize(&q, &qp).unwrap()
        );
    }

    #[test]
    fn aggregate_of_zero_updates_is_zero() {
        let qp = QParams::new(0.1, 128, 8).unwrap();
        let p = min_safe_bitwidth(8, 3).unwrap();
        let g = Group::pow2(p).unwrap();
        let codes: Vec<_> = (0..3)
            .map(|_| quantize(&[0.0, 0.0], &qp).embed(g).unwrap())
            .collect();
        let sum = sum_mod(&codes).unwrap();
        assert_eq!(sum.values(), &[384, 384]);
        assert_eq!(dequantize_aggregate(&sum, &qp, 3).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn aggregate_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10;
        let scheme_qp = [
            calibrate_minmax(&random_tensor(&mut rng, 100, 1.0), 8, QuantScheme::Symmetric).unwrap(),
            calibrate_minmax(&random_tensor(&mut rng, 100, 1.0), 8, QuantScheme::Affine).unwrap(),
        ];
        for qp in scheme_qp {
            let g = Group::pow2(16).unwrap();
            let tensors: Vec<_> = (0..n).map(|_| random_tensor(&mut rng, 500, 1.2)).collect();
            let codes: Vec<_> = tensors.iter().map(|t| quantize(t, &qp)).collect();
            let sum = sum_mod(codes.iter().map(|c| c.embed(g).unwrap()).collect::<Vec<_>>().iter()).unwrap();
            let agg = dequantize_aggregate(&sum, &qp, n).unwrap();
            let mut direct = vec![0.0; 500];
            for c in &codes {
                for (d, v) in direct.iter_mut().zip(dequantize(c, &qp).unwrap()) {
                    *d += v;
                }
            }
            for (a, d) in agg.iter().zip(&direct) {
                assert!((a - d).abs() <= 1e-6 * n as f64 * qp.scale());
            }
        }
    }

    #[test]
    fn min_safe_bitwidth_examples() {
        assert_eq!(min_safe_bitwidth(8, 100).unwrap(), 15);
        assert_eq!(min_safe_bitwidth(4, 1).unwrap(), 4);
        assert_eq!(min_safe_bitwidth(4, 2).unwrap(), 5);
        assert_eq!(min_safe_bitwidth(4, 64).unwrap(), 10);
        assert_eq!(min_safe_bitwidth(4, 65).unwrap(), 11);
        assert!(matches!(min_safe_bitwidth(30, 16), Err(Error::Capacity(_))));
    }

    #[test]
    fn margin_bound_exhaustive() {
        for b in 1..=4u32 {
            for n in 1..=64usize {
                let p = min_safe_bitwidth(b, n).unwrap();
                let worst = n as u64 * ((1u64 << b) - 1);
                assert!(worst < 1u64 << p, "b={b} n={n}");
            }
        }
    }

    #[test]
    fn qparams_wire_roundtrip() {
        let qp = QParams::new(0.003, 128, 8).unwrap();
        let bytes = qp.to_bytes();
        assert_eq!(bytes.len(), 13);
        assert_eq!(QParams::from_bytes(&bytes).unwrap(), qp);
        assert!(QParams::from_bytes(&bytes[..12]).is_err());
    }

    #[test]
    fn fixed_point_weighted_sum() {
        let fp = FixedPoint::new(2.0, 32, 60).unwrap();
        let a = [1.5, -0.25, 0.0, -2.0];
        let b = [-1.0, 0.75, 1e-9, 2.0];
        let sum = fp.encode(&a).scale_mod(40).add_mod(&fp.encode(&b).scale_mod(20)).unwrap();
        let decoded = fp.decode_sum(&sum).unwrap();
        for i in 0..4 {
            let expected = 40.0 * a[i] + 20.0 * b[i];
            assert!((decoded[i] - expected).abs() <= 60.0 * fp.scale());
        }
        assert!(matches!(FixedPoint::new(1.0, 4, 100), Err(Error::Capacity(_))));
    }

    proptest! {
        #[test]
        fn quantize_dequantize_idempotent(
            b in 1u32..=16,
            scale in 1e-4f64..10.0,
            zfrac in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            let top = (1u64 << b) - 1;
            let z = (zfrac * top as f64) as u32;
            let qp = QParams::new(scale, z, b).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let codes: Vec<u32> = (0..32).map(|_| rng.random_range(0..=top as u32)).collect();
            let q = GroupVector::with_bit_width(codes, b).unwrap();
            let back = quantize(&dequantize(&q, &qp).unwrap(), &qp);
            prop_assert_eq!(back, q);
        }

        #[test]
        fn quantization_error_bounded_by_half_scale(
            b in 2u32..=12,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_tensor(&mut rng, 64, 3.0);
            for scheme in [QuantScheme::Symmetric, QuantScheme::Affine] {
                let qp = calibrate_minmax(&t, b, scheme).unwrap();
                let back = dequantize(&quantize(&t, &qp), &qp).unwrap();
                for (x, y) in t.iter().zip(&back) {
                    prop_assert!((x - y).abs() <= qp.scale() / 2.0 * (1.0 + 1e-9));
                }
            }
        }
    }
}
