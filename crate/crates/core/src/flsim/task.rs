use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::ModelKind;
use crate::error::{Error, Result};

/// Synthetic Gaussian-mixture classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub n_clients: usize,
    pub n_features: usize,
    pub n_classes: usize,
    /// Mean number of training samples per client.
    pub samples_per_client: usize,
    /// Dirichlet concentration of the per-class client split; `None` splits IID.
    pub label_skew: Option<f64>,
    /// Standard deviation of the class means; the within-class noise is unit.
    pub class_sep: f64,
    /// Size of the server-side proxy split relative to the training data.
    pub proxy_fraction: f64,
    pub test_samples: usize,
    pub model: ModelKind,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            n_clients: 100,
            n_features: 64,
            n_classes: 10,
            samples_per_client: 50,
            label_skew: Some(0.5),
            class_sep: 0.5,
            proxy_fraction: 0.05,
            test_samples: 2000,
            model: ModelKind::Logistic,
        }
    }
}

/// Row-major features with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n_features: usize,
    pub n_classes: usize,
    pub x: Vec<f64>,
    pub y: Vec<u32>,
}

impl Dataset {
    pub fn empty(n_features: usize, n_classes: usize) -> Self {
        Self {
            n_features,
            n_classes,
            x: Vec::new(),
            y: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.n_features, self.n_classes);
        for &i in indices {
            out.x.extend_from_slice(self.row(i));
            out.y.push(self.y[i]);
        }
        out
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &y in &self.y {
            h[y as usize] += 1;
        }
        h
    }
}

#[derive(Clone, Debug)]
pub struct ClientShard {
    pub client_id: u32,
    /// Positions of this shard's samples in the training set.
    pub indices: Vec<usize>,
    pub data: Dataset,
}

impl ClientShard {
    /// Aggregation weight: the number of local samples.
    pub fn weight(&self) -> u64 {
        self.data.len() as u64
    }
}

#[derive(Clone, Debug)]
pub struct ToyTask {
    pub train: Dataset,
    pub shards: Vec<ClientShard>,
    pub proxy: Dataset,
    pub test: Dataset,
}

fn sample(means: &[Vec<f64>], n: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let classes = means.len();
    let f = means[0].len();
    let mut out = Dataset::empty(f, classes);
    for _ in 0..n {
        let c = rng.random_range(0..classes);
        out.x.extend(means[c].iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
        out.y.push(c as u32);
    }
    out
}

fn dirichlet(alpha: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("label_skew: {e}")))?;
    let mut w: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 && total.is_finite() {
        w.iter_mut().for_each(|x| *x /= total);
    } else {
        // every draw underflowed: all mass on one client
        w.iter_mut().for_each(|x| *x = 0.0);
        w[rng.random_range(0..n)] = 1.0;
    }
    Ok(w)
}

/// Splits `0..labels.len()` over `n_clients`, class by class, with Dirichlet
/// client proportions. Every client receives at least one sample.
fn partition(labels: &[u32], n_classes: usize, n_clients: usize, skew: Option<f64>, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let mut parts = vec![Vec::new(); n_clients];
    match skew {
        None => {
            let mut idx: Vec<usize> = (0..labels.len()).collect();
            idx.shuffle(rng);
            for (j, i) in idx.into_iter().enumerate() {
                parts[j % n_clients].push(i);
            }
        }
        Some(alpha) => {
            for c in 0..n_classes as u32 {
                let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
                idx.shuffle(rng);
                let w = dirichlet(alpha, n_clients, rng)?;
                let mut acc = 0.0;
                let mut start = 0;
                for (client, wc) in w.iter().enumerate() {
                    acc += wc;
                    let end = if client + 1 == n_clients {
                        idx.len()
                    } else {
                        ((acc * idx.len() as f64).round() as usize).clamp(start, idx.len())
                    };
                    parts[client].extend_from_slice(&idx[start..end]);
                    start = end;
                }
            }
            for client in 0..n_clients {
                if parts[client].is_empty() {
                    let donor = (0..n_clients).max_by_key(|&j| (parts[j].len(), std::cmp::Reverse(j))).unwrap();
                    let moved = parts[donor].pop().expect("more samples than clients");
                    parts[client].push(moved);
                }
            }
        }
    }
    parts.iter_mut().for_each(|p| p.sort_unstable());
    Ok(parts)
}

pub fn make_toy_task(config: &TaskConfig, seed: u64) -> Result<ToyTask> {
    let c = config;
    if c.n_clients == 0 || c.n_features == 0 || c.n_classes < 2 {
        return Err(Error::Config("need clients, features and at least two classes".into()));
    }
    if matches!(c.label_skew, Some(a) if !(a > 0.0 && a.is_finite())) {
        return Err(Error::Config("label_skew must be positive".into()));
    }
    if !(0.0..1.0).contains(&c.proxy_fraction) {
        return Err(Error::Config("proxy_fraction must be in [0, 1)".into()));
    }
    let n_train = c.n_clients * c.samples_per_client;
    if n_train < c.n_clients {
        return Err(Error::Config(format!(
            "{} samples cannot cover {} clients",
            n_train, c.n_clients
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..c.n_classes)
        .map(|_| (0..c.n_features).map(|_| c.class_sep * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let train = sample(&means, n_train, &mut rng);
    let n_proxy = ((c.proxy_fraction * n_train as f64).round() as usize).max(1);
    let proxy = sample(&means, n_proxy, &mut rng);
    let test = sample(&means, c.test_samples, &mut rng);
    let parts = partition(&train.y, c.n_classes, c.n_clients, c.label_skew, &mut rng)?;
    let shards = parts
        .into_iter()
        .enumerate()
        .map(|(i, indices)| ClientShard {
            client_id: i as u32,
            data: train.subset(&indices),
            indices,
        })
        .collect();
    Ok(ToyTask {
        train,
        shards,
        proxy,
        test,
    })
}
