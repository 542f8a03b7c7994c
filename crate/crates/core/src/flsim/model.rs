use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::task::Dataset;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Multinomial logistic regression: `[W (F x C), b (C)]`.
    #[default]
    Logistic,
    /// One ReLU hidden layer: `[W1 (F x H), b1 (H), W2 (H x C), b2 (C)]`.
    Mlp { hidden: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 10,
            lr: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub n_features: usize,
    pub n_classes: usize,
}

impl Model {
    pub fn new(kind: ModelKind, n_features: usize, n_classes: usize) -> Self {
        Self {
            kind,
            n_features,
            n_classes,
        }
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let (f, c) = (self.n_features, self.n_classes);
        match self.kind {
            ModelKind::Logistic => vec![vec![f, c], vec![c]],
            ModelKind::Mlp { hidden: h } => vec![vec![f, h], vec![h], vec![h, c], vec![c]],
        }
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    pub fn init(&self, seed: u64) -> Vec<Tensor> {
        match self.kind {
            ModelKind::Logistic => self.shapes().into_iter().map(Tensor::zeros).collect(),
            ModelKind::Mlp { .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                self.shapes()
                    .into_iter()
                    .map(|s| match s[..] {
                        [fan_in, _] => {
                            let a = (6.0 / fan_in as f64).sqrt();
                            let n = s.iter().product();
                            Tensor::new(s, (0..n).map(|_| rng.random_range(-a..a)).collect()).unwrap()
                        }
                        _ => Tensor::zeros(s),
                    })
                    .collect()
            }
        }
    }

    fn logits_into(&self, theta: &[Tensor], x: &[f64], hidden: &mut Vec<f64>, out: &mut Vec<f64>) {
        match theta {
            [w, b] => affine(x, w, b, out),
            [w1, b1, w2, b2] => {
                affine(x, w1, b1, hidden);
                hidden.iter_mut().for_each(|h| *h = h.max(0.0));
                affine(hidden, w2, b2, out);
            }
            _ => panic!("unexpected parameter layout"),
        }
    }

    pub fn logits(&self, theta: &[Tensor], x: &[f64]) -> Vec<f64> {
        let (mut h, mut out) = (Vec::new(), Vec::new());
        self.logits_into(theta, x, &mut h, &mut out);
        out
    }

    /// Mean cross-entropy and its gradient over the given samples.
    pub fn loss_and_grad(&self, theta: &[Tensor], data: &Dataset, batch: &[usize]) -> (f64, Vec<Tensor>) {
        let mut grad: Vec<Tensor> = theta.iter().map(|t| Tensor::zeros(t.shape.clone())).collect();
        let (mut h, mut z) = (Vec::new(), Vec::new());
        let inv = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for &i in batch {
            let x = data.row(i);
            self.logits_into(theta, x, &mut h, &mut z);
            let y = data.y[i] as usize;
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += (lse - z[y]) * inv;
            // dL/dz = softmax - onehot
            let dz: Vec<f64> = z
                .iter()
                .enumerate()
                .map(|(c, &v)| ((v - lse).exp() - (c == y) as u8 as f64) * inv)
                .collect();
            let n = theta.len();
            let input: &[f64] = if n == 2 { x } else { &h };
            outer_add(&mut grad[n - 2], input, &dz);
            add(&mut grad[n - 1], &dz);
            if n == 4 {
                let w2 = &theta[2];
                let c = dz.len();
                let dh: Vec<f64> = (0..h.len())
                    .map(|j| {
                        if h[j] > 0.0 {
                            w2.data[j * c..(j + 1) * c].iter().zip(&dz).map(|(w, d)| w * d).sum()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                outer_add(&mut grad[0], x, &dh);
                add(&mut grad[1], &dh);
            }
        }
        (loss, grad)
    }

    pub fn loss(&self, theta: &[Tensor], data: &Dataset) -> f64 {
        let all: Vec<usize> = (0..data.len()).collect();
        self.loss_and_grad(theta, data, &all).0
    }

    pub fn accuracy(&self, theta: &[Tensor], data: &Dataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let correct = (0..data.len())
            .filter(|&i| {
                let z = self.logits(theta, data.row(i));
                let pred = z
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                    .0;
                pred == data.y[i] as usize
            })
            .count();
        correct as f64 / data.len() as f64
    }
}

/// `out = x W + b` for row-major `W`.
fn affine(x: &[f64], w: &Tensor, b: &Tensor, out: &mut Vec<f64>) {
    let cols = b.len();
    out.clear();
    out.extend_from_slice(&b.data);
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            for (o, &wij) in out.iter_mut().zip(&w.data[i * cols..(i + 1) * cols]) {
                *o += xi * wij;
            }
        }
    }
}

fn outer_add(g: &mut Tensor, u: &[f64], v: &[f64]) {
    let cols = v.len();
    for (i, &ui) in u.iter().enumerate() {
        if ui != 0.0 {
            for (gij, &vj) in g.data[i * cols..(i + 1) * cols].iter_mut().zip(v) {
                *gij += ui * vj;
            }
        }
    }
}

fn add(g: &mut Tensor, v: &[f64]) {
    for (a, b) in g.data.iter_mut().zip(v) {
        *a += b;
    }
}

/// Mini-batch SGD from `theta` on `data`; returns `theta_local - theta`.
pub fn local_train(model: &Model, theta: &[Tensor], data: &Dataset, cfg: &LocalConfig, seed: u64) -> Vec<Tensor> {
    let mut local = theta.to_vec();
    if data.is_empty() || cfg.lr == 0.0 {
        return theta.iter().map(|t| Tensor::zeros(t.shape.clone())).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let (_, grad) = model.loss_and_grad(&local, data, batch);
            for (t, g) in local.iter_mut().zip(&grad) {
                for (w, d) in t.data.iter_mut().zip(&g.data) {
                    *w -= cfg.lr * d;
                }
            }
        }
    }
    local
        .into_iter()
        .zip(theta)
        .map(|(mut l, t)| {
            l.data.iter_mut().zip(&t.data).for_each(|(a, b)| *a -= b);
            l
        })
        .collect()
}
