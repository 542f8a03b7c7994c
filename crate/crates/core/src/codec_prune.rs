//! Round-shared random pruning.
//!
//! Every client of a round derives the same keep-set from the broadcast mask
//! seed, so only the kept values travel (no coordinates) and the expansion
//! back to full shape is one fixed linear scatter applied to the aggregate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finite_group::MaskSeed;

/// Keystream label for keep-set sampling.
pub const PRUNE_STREAM: u64 = 1;

/// Seed-derivation label for per-tensor masks.
const PRUNE_TENSOR_LABEL: u64 = 0x7072_756e; // "prun"

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    mask_seed: MaskSeed,
    sparsity: f64,
    shape: Vec<usize>,
}

impl PruneSpec {
    pub fn new(mask_seed: MaskSeed, sparsity: f64, shape: Vec<usize>) -> Result<Self> {
        if !(0.0..1.0).contains(&sparsity) {
            return Err(Error::invalid(format!("sparsity {sparsity} outside [0, 1)")));
        }
        let spec = Self {
            mask_seed,
            sparsity,
            shape,
        };
        if spec.kept_count() == 0 {
            return Err(Error::invalid(format!(
                "sparsity {sparsity} keeps no element of a {}-element tensor",
                spec.len()
            )));
        }
        Ok(spec)
    }

    /// Mask for tensor `tensor_index` of a round whose broadcast seed is `round_seed`.
    pub fn for_tensor(
        round_seed: &MaskSeed,
        tensor_index: usize,
        sparsity: f64,
        shape: Vec<usize>,
    ) -> Result<Self> {
        Self::new(
            round_seed.derive(PRUNE_TENSOR_LABEL, tensor_index as u64),
            sparsity,
            shape,
        )
    }

    pub fn mask_seed(&self) -> &MaskSeed {
        &self.mask_seed
    }

    pub fn sparsity(&self) -> f64 {
        self.sparsity
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pruned_count(&self) -> usize {
        (self.sparsity * self.len() as f64).floor() as usize
    }

    pub fn kept_count(&self) -> usize {
        self.len() - self.pruned_count()
    }
}

/// Sorted keep-set: a seeded partial Fisher-Yates shuffle over `[0, n)`.
pub fn derive_keep_indices(spec: &PruneSpec) -> Vec<usize> {
    let n = spec.len();
    let kept = spec.kept_count();
    if kept == n {
        return (0..n).collect();
    }
    let mut stream = spec.mask_seed.stream(PRUNE_STREAM).reader(0);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in 0..kept {
        let j = i + stream.below((n - i) as u64) as usize;
        perm.swap(i, j);
    }
    perm.truncate(kept);
    perm.sort_unstable();
    perm
}

pub fn compact(tensor: &[f64], spec: &PruneSpec) -> Result<Vec<f64>> {
    if tensor.len() != spec.len() {
        return Err(Error::Shape(format!(
            "tensor has {} elements, mask expects {}",
            tensor.len(),
            spec.len()
        )));
    }
    Ok(derive_keep_indices(spec).into_iter().map(|i| tensor[i]).collect())
}

/// Scatter into zeros at the kept positions.
pub fn expand(compacted: &[f64], spec: &PruneSpec) -> Result<Vec<f64>> {
    if compacted.len() != spec.kept_count() {
        return Err(Error::Shape(format!(
            "{} kept values, mask keeps {}",
            compacted.len(),
            spec.kept_count()
        )));
    }
    let mut out = vec![0.0; spec.len()];
    for (i, v) in derive_keep_indices(spec).into_iter().zip(compacted) {
        out[i] = *v;
    }
    Ok(out)
}

/// Uplink cost of one pruned tensor at secure-aggregation bit-width `p`.
pub fn pruned_uplink_bits(spec: &PruneSpec, p: u32) -> u64 {
    spec.kept_count() as u64 * p as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(seed: u128, sparsity: f64, n: usize) -> PruneSpec {
        PruneSpec::new(MaskSeed::from_u128(seed), sparsity, vec![n]).unwrap()
    }

    #[test]
    fn zero_sparsity_keeps_everything() {
        let s = spec(1, 0.0, 7);
        assert_eq!(derive_keep_indices(&s), (0..7).collect::<Vec<_>>());
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        assert_eq!(compact(&x, &s).unwrap(), x);
    }

    #[test]
    fn half_sparsity_is_deterministic() {
        let s = spec(9, 0.5, 10);
        let a = derive_keep_indices(&s);
        assert_eq!(a.len(), 5);
        assert_eq!(a, derive_keep_indices(&s));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn golden_keep_set() {
        let s = spec(0x1234, 0.5, 10);
        assert_eq!(derive_keep_indices(&s), vec![0, 2, 4, 5, 7]);
        let s = PruneSpec::for_tensor(&MaskSeed::from_u128(0x1234), 3, 0.75, vec![4, 4]).unwrap();
        assert_eq!(derive_keep_indices(&s), vec![1, 4, 5, 7]);
    }

    #[test]
    fn different_seeds_give_different_masks() {
        let masks: std::collections::HashSet<_> = (0..20u128)
            .map(|s| derive_keep_indices(&spec(s, 0.5, 64)))
            .collect();
        assert_eq!(masks.len(), 20);
    }

    #[test]
    fn keep_frequency_is_uniform() {
        let n = 10;
        let mut counts = vec![0usize; n];
        for s in 0..10_000u128 {
            for i in derive_keep_indices(&spec(s, 0.5, n)) {
                counts[i] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.5).abs() <= 0.02, "frequency {f}");
        }
    }

    #[test]
    fn compact_and_expand_examples() {
        // keep-set {0, 2} of four elements
        let mut seed = 0u128;
        let s = loop {
            let s = spec(seed, 0.5, 4);
            if derive_keep_indices(&s) == vec![0, 2] {
                break s;
            }
            seed += 1;
        };
        assert_eq!(compact(&[1.0, 2.0, 3.0, 4.0], &s).unwrap(), vec![1.0, 3.0]);
        assert_eq!(expand(&[1.0, 3.0], &s).unwrap(), vec![1.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_errors() {
        let s = spec(2, 0.5, 4);
        assert!(matches!(compact(&[1.0; 5], &s), Err(Error::Shape(_))));
        assert!(matches!(expand(&[1.0; 3], &s), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_specs() {
        assert!(PruneSpec::new(MaskSeed::from_u128(0), 1.0, vec![4]).is_err());
        assert!(PruneSpec::new(MaskSeed::from_u128(0), -0.1, vec![4]).is_err());
        assert!(PruneSpec::new(MaskSeed::from_u128(0), 0.9, vec![1]).is_ok());
        assert!(PruneSpec::new(MaskSeed::from_u128(0), 0.5, vec![0]).is_err());
    }

    #[test]
    fn uplink_bits() {
        assert_eq!(pruned_uplink_bits(&spec(0, 0.5, 1000), 32), 16_000);
        assert_eq!(pruned_uplink_bits(&spec(0, 0.99, 1000), 32), 320);
        assert_eq!(pruned_uplink_bits(&spec(0, 0.9, 1000), 32), 3_200);
    }

    #[test]
    fn sum_of_expansions_is_expansion_of_sum() {
        let s = spec(77, 0.7, 50);
        let clients: Vec<Vec<f64>> = (0..5)
            .map(|c| (0..50).map(|i| ((i * 7 + c * 13) % 17) as f64 - 8.0).collect())
            .collect();
        let mut lhs = vec![0.0; 50];
        let mut compact_sum = vec![0.0; s.kept_count()];
        for g in &clients {
            let c = compact(g, &s).unwrap();
            for (a, b) in lhs.iter_mut().zip(expand(&c, &s).unwrap()) {
                *a += b;
            }
            for (a, b) in compact_sum.iter_mut().zip(&c) {
                *a += b;
            }
        }
        assert_eq!(lhs, expand(&compact_sum, &s).unwrap());
    }

    proptest! {
        #[test]
        fn expand_compact_roundtrip(
            seed in any::<u128>(),
            sparsity in 0.0f64..0.95,
            x in proptest::collection::vec(-10.0f64..10.0, 1..80),
        ) {
            let s = spec(seed, sparsity, x.len());
            let keep = derive_keep_indices(&s);
            let back = expand(&compact(&x, &s).unwrap(), &s).unwrap();
            for i in 0..x.len() {
                let expected = if keep.binary_search(&i).is_ok() { x[i] } else { 0.0 };
                prop_assert_eq!(back[i], expected);
            }
        }

        #[test]
        fn expand_is_linear(
            seed in any::<u128>(),
            ab in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40),
        ) {
            let n = ab.len() * 2;
            let s = spec(seed, 0.5, n);
            let k = s.kept_count();
            let a: Vec<f64> = (0..k).map(|i| ab[i % ab.len()].0).collect();
            let b: Vec<f64> = (0..k).map(|i| ab[i % ab.len()].1).collect();
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let lhs = expand(&sum, &s).unwrap();
            let ea = expand(&a, &s).unwrap();
            let eb = expand(&b, &s).unwrap();
            for i in 0..n {
                prop_assert_eq!(lhs[i], ea[i] + eb[i]);
            }
        }
    }
}
