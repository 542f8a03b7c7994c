use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{nearest, sq_dist, Blocks, Codebook};
use crate::error::{Error, Result};
use crate::finite_group::MaskSeed;

/// Keystream label for k-means++ seeding.
const KMEANS_STREAM: u64 = 2;

/// Below this many blocks the assignment step stays on one thread.
const PAR_THRESHOLD: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            rel_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KMeansReport {
    pub codebook: Codebook,
    /// Total distortion after seeding and after every Lloyd iteration.
    pub distortion: Vec<f64>,
    pub iterations: usize,
    /// Fewer distinct blocks than codewords, so some centroids are duplicates.
    pub degenerate: bool,
}

impl KMeansReport {
    pub fn final_distortion(&self) -> f64 {
        *self.distortion.last().expect("at least the seeding pass")
    }
}

fn assign_all(blocks: &Blocks, codebook: &Codebook) -> Vec<(u32, f64)> {
    if blocks.len() >= PAR_THRESHOLD {
        (0..blocks.len())
            .into_par_iter()
            .map(|i| nearest(blocks.block(i), codebook))
            .collect()
    } else {
        blocks.iter().map(|b| nearest(b, codebook)).collect()
    }
}

fn to_f32(v: &[f64]) -> impl Iterator<Item = f32> + '_ {
    v.iter().map(|&x| x as f32)
}

fn count_distinct(blocks: &Blocks, cap: usize) -> usize {
    let mut seen = HashSet::new();
    for b in blocks.iter() {
        seen.insert(b.iter().map(|x| (*x as f32).to_bits()).collect::<Vec<_>>());
        if seen.len() >= cap {
            break;
        }
    }
    seen.len()
}

fn seed_plus_plus(blocks: &Blocks, k: usize, seed: &MaskSeed) -> Vec<f32> {
    let d = blocks.dim();
    let n = blocks.len();
    let mut stream = seed.stream(KMEANS_STREAM).reader(0);
    let mut centroids = Vec::with_capacity(k * d);
    centroids.extend(to_f32(blocks.block(stream.below(n as u64) as usize)));
    let mut d2: Vec<f64> = blocks.iter().map(|b| sq_dist(b, &centroids[..d])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = stream.unit_f64() * total;
            let mut acc = 0.0;
            d2.iter()
                .position(|&w| {
                    acc += w;
                    acc > target
                })
                .unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // every block already sits on a centroid
            0
        };
        let start = centroids.len();
        centroids.extend(to_f32(blocks.block(pick)));
        let c = &centroids[start..];
        for (slot, b) in d2.iter_mut().zip(blocks.iter()) {
            *slot = slot.min(sq_dist(b, c));
        }
    }
    centroids
}

/// Lloyd's algorithm from a k-means++ start. Centroids are kept at f32
/// precision throughout, so the trained codebook is exactly what ships.
pub fn train_codebook(
    blocks: &Blocks,
    k: usize,
    options: KMeansOptions,
    seed: &MaskSeed,
) -> Result<KMeansReport> {
    if blocks.is_empty() {
        return Err(Error::invalid("k-means needs at least one block"));
    }
    if k == 0 {
        return Err(Error::invalid("k-means needs at least one codeword"));
    }
    let d = blocks.dim();
    let degenerate = count_distinct(blocks, k) < k;
    let mut codebook = Codebook::new(k, d, seed_plus_plus(blocks, k, seed))?;
    let mut labels = assign_all(blocks, &codebook);
    let mut history = vec![labels.iter().map(|l| l.1).sum::<f64>()];
    let mut iterations = 0;

    while iterations < options.max_iters {
        let prev = *history.last().unwrap();
        if prev == 0.0 {
            break;
        }
        let next = update(blocks, &codebook, &labels);
        let next_labels = assign_all(blocks, &next);
        let total: f64 = next_labels.iter().map(|l| l.1).sum();
        iterations += 1;
        codebook = next;
        labels = next_labels;
        history.push(total);
        if prev - total < options.rel_tol * prev {
            break;
        }
    }

    Ok(KMeansReport {
        codebook,
        distortion: history,
        iterations,
        degenerate,
    })
}

/// One centroid step. A rounded mean replaces its centroid only when it does
/// not raise that cluster's distortion, which keeps the run monotone.
fn update(blocks: &Blocks, codebook: &Codebook, labels: &[(u32, f64)]) -> Codebook {
    let (k, d) = (codebook.k(), codebook.dim());
    let mut sums = vec![0.0f64; k * d];
    let mut counts = vec![0usize; k];
    for (b, &(j, _)) in blocks.iter().zip(labels) {
        let j = j as usize;
        counts[j] += 1;
        for (s, x) in sums[j * d..(j + 1) * d].iter_mut().zip(b) {
            *s += x;
        }
    }

    let mut out: Vec<f32> = (0..k).flat_map(|j| codebook.codeword(j).to_vec()).collect();
    let mut old_cost = vec![0.0f64; k];
    let mut new_cost = vec![0.0f64; k];
    let means: Vec<f32> = sums
        .chunks_exact(d)
        .zip(&counts)
        .flat_map(|(s, &c)| s.iter().map(move |x| (x / c.max(1) as f64) as f32))
        .collect();
    for (b, &(j, dist)) in blocks.iter().zip(labels) {
        let j = j as usize;
        old_cost[j] += dist;
        new_cost[j] += sq_dist(b, &means[j * d..(j + 1) * d]);
    }
    for j in 0..k {
        if counts[j] > 0 && new_cost[j] <= old_cost[j] {
            out[j * d..(j + 1) * d].copy_from_slice(&means[j * d..(j + 1) * d]);
        }
    }

    // Re-seed each empty cluster with the worst-fit member of the largest one.
    let mut taken = vec![false; blocks.len()];
    let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
    for j in empty {
        let Some(big) = (0..k).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))) else {
            break;
        };
        if counts[big] < 2 {
            break;
        }
        let centre = &out[big * d..(big + 1) * d];
        let far = labels
            .iter()
            .enumerate()
            .filter(|(i, l)| l.0 as usize == big && !taken[*i])
            .map(|(i, _)| (i, sq_dist(blocks.block(i), centre)))
            .fold(None, |best: Option<(usize, f64)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            });
        let Some((i, dist)) = far else { break };
        if dist == 0.0 {
            // the largest cluster has collapsed onto its centroid
            break;
        }
        taken[i] = true;
        let fresh: Vec<f32> = to_f32(blocks.block(i)).collect();
        out[j * d..(j + 1) * d].copy_from_slice(&fresh);
        counts[big] -= 1;
        counts[j] = 1;
    }

    Codebook::new(k, d, out).expect("finite centroids")
}
