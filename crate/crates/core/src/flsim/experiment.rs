use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::model::{local_train, LocalConfig, Model};
use super::refresh::{refresh_codecs, CodecState, RefreshOptions, RefreshPolicy, RefreshSource, SchemeConfig};
use super::round::{run_round, RoundMetrics, RoundPlan};
use super::task::{make_toy_task, TaskConfig, ToyTask};
use crate::codec_pq::KMeansOptions;
use crate::error::{Error, Result};
use crate::finite_group::MaskSeed;
use crate::protocol::client_seed;
use crate::tensor::Tensor;

const RUN_LABEL: u64 = 0x72_756e; // "run"
const TASK_LABEL: u64 = 1;
const INIT_LABEL: u64 = 2;
const SELECT_LABEL: u64 = 3;
const MASK_LABEL: u64 = 4;
const LOCAL_LABEL: u64 = 5;
const PROXY_LABEL: u64 = 6;
const REFRESH_LABEL: u64 = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub n_seeds: usize,
    pub rounds: u32,
    pub clients_per_round: usize,
    pub server_lr: f64,
    /// Weight uncompressed and pruned tensors by client sample count.
    pub weighted: bool,
    pub compress_vectors: bool,
    pub task: TaskConfig,
    pub local: LocalConfig,
    pub refresh: RefreshPolicy,
    pub kmeans: KMeansOptions,
    /// Scheme entries. Any field may hold a list, which expands into one run
    /// per combination. `refresh_period` and `refresh_source` override the
    /// experiment-wide refresh policy.
    pub schemes: Vec<Map<String, Value>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            n_seeds: 3,
            rounds: 100,
            clients_per_round: 10,
            server_lr: 1.0,
            weighted: true,
            compress_vectors: false,
            task: TaskConfig::default(),
            local: LocalConfig::default(),
            refresh: RefreshPolicy::default(),
            kmeans: KMeansOptions::default(),
            schemes: Vec::new(),
        }
    }
}

/// One scheme with its refresh policy, after sweep expansion.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SchemeRun {
    pub scheme: SchemeConfig,
    pub refresh: RefreshPolicy,
    /// Whether the entry set its own refresh policy.
    pub custom_refresh: bool,
}

impl SchemeRun {
    pub fn params(&self) -> String {
        let mut s = self.scheme.params();
        if self.custom_refresh {
            s.push_str(&format!(" R={}", self.refresh.period));
        }
        s
    }
}

fn cartesian(entry: &Map<String, Value>) -> Vec<Map<String, Value>> {
    let mut out = vec![Map::new()];
    for (key, value) in entry {
        let options: Vec<Value> = match value {
            Value::Array(items) => items.clone(),
            v => vec![v.clone()],
        };
        out = out
            .into_iter()
            .flat_map(|partial| {
                options.iter().map(move |o| {
                    let mut m = partial.clone();
                    m.insert(key.clone(), o.clone());
                    m
                })
            })
            .collect();
    }
    out
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.n_seeds == 0 || self.rounds == 0 {
            return bad("n_seeds and rounds must be positive");
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.task.n_clients {
            return bad("clients_per_round must be in [1, n_clients]");
        }
        if !self.server_lr.is_finite() || !self.local.lr.is_finite() || self.local.batch_size == 0 {
            return bad("learning rates must be finite and batch_size positive");
        }
        self.expand()?;
        Ok(())
    }

    /// Scheme runs in config order; the baseline is not included.
    pub fn expand(&self) -> Result<Vec<SchemeRun>> {
        let mut runs = Vec::new();
        for entry in &self.schemes {
            for mut combo in cartesian(entry) {
                let period = combo.remove("refresh_period");
                let source = combo.remove("refresh_source");
                let custom_refresh = period.is_some() || source.is_some();
                let mut refresh = self.refresh;
                if let Some(p) = period {
                    refresh.period = serde_json::from_value(p).map_err(|e| Error::Config(format!("refresh_period: {e}")))?;
                }
                if let Some(s) = source {
                    refresh.source = serde_json::from_value(s).map_err(|e| Error::Config(format!("refresh_source: {e}")))?;
                }
                let scheme: SchemeConfig = serde_json::from_value(Value::Object(combo))
                    .map_err(|e| Error::Config(format!("scheme entry: {e}")))?;
                scheme.validate()?;
                runs.push(SchemeRun {
                    scheme,
                    refresh,
                    custom_refresh,
                });
            }
        }
        Ok(runs)
    }

    fn baseline(&self) -> SchemeRun {
        SchemeRun {
            scheme: SchemeConfig::Baseline,
            refresh: self.refresh,
            custom_refresh: false,
        }
    }

    pub fn run_seed(&self, index: usize) -> MaskSeed {
        MaskSeed::from_u128(self.seed as u128).derive(RUN_LABEL, index as u64)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub scheme: String,
    pub params: String,
    pub seed_index: usize,
    pub final_accuracy: f64,
    /// Mean payload bytes one client sends per round.
    pub uplink_bytes_per_client: f64,
    pub mean_overflow_fraction: f64,
    pub codebook_bytes: u64,
    pub degenerate_codebooks: bool,
    pub rounds: Vec<RoundMetrics>,
}

fn proxy_update(model: &Model, theta: &[Tensor], task: &ToyTask, local: &LocalConfig, seed: &MaskSeed) -> Vec<Tensor> {
    let size = (task.train.len() / task.shards.len()).clamp(1, task.proxy.len().max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.low_u64());
    let picked = rand::seq::index::sample(&mut rng, task.proxy.len(), size).into_vec();
    local_train(model, theta, &task.proxy.subset(&picked), local, seed.low_u64() ^ 1)
}

fn select_clients(n: usize, m: usize, seed: &MaskSeed) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.low_u64());
    let mut picked: Vec<u32> = rand::seq::index::sample(&mut rng, n, m).into_iter().map(|i| i as u32).collect();
    picked.sort_unstable();
    picked
}

/// Trains one scheme on one task instance.
pub fn simulate(cfg: &ExperimentConfig, run: &SchemeRun, task: &ToyTask, seed_index: usize) -> Result<RunResult> {
    let seed = cfg.run_seed(seed_index);
    let model = Model::new(cfg.task.model, cfg.task.n_features, cfg.task.n_classes);
    let mut theta = model.init(seed.derive(INIT_LABEL, 0).low_u64());
    let options = RefreshOptions {
        compress_vectors: cfg.compress_vectors,
        kmeans: cfg.kmeans,
    };
    let mut state: Option<CodecState> = None;
    let mut last_average: Option<Vec<Tensor>> = None;
    let mut rounds = Vec::with_capacity(cfg.rounds as usize);
    let mut codebook_bytes = 0;
    let mut degenerate = false;

    for r in 0..cfg.rounds {
        if state.is_none() || run.refresh.period.is_due(r) {
            let source = match (run.refresh.source, &last_average) {
                (RefreshSource::AggregateUpdate, Some(avg)) => avg.clone(),
                // round 0 has no aggregate yet
                _ => proxy_update(&model, &theta, task, &cfg.local, &seed.derive(PROXY_LABEL, r as u64)),
            };
            let fresh = refresh_codecs(&run.scheme, &source, state.as_ref(), &seed.derive(REFRESH_LABEL, r as u64), &options)?;
            codebook_bytes = codebook_bytes.max(fresh.codebook_bytes());
            degenerate |= fresh.degenerate;
            state = Some(fresh);
        }
        let clients = select_clients(task.shards.len(), cfg.clients_per_round, &seed.derive(SELECT_LABEL, r as u64));
        let headroom = if cfg.weighted {
            clients.iter().map(|&c| task.shards[c as usize].weight()).sum()
        } else {
            clients.len() as u64
        };
        let master = seed.derive(MASK_LABEL, r as u64);
        let plan = RoundPlan {
            round_id: r,
            theta: theta.clone(),
            codecs: state.as_ref().unwrap().codecs(headroom)?,
            mask_seeds: clients.iter().map(|&c| client_seed(&master, r, c)).collect(),
            clients,
            weighted: cfg.weighted,
            local: cfg.local,
            local_seed: seed.derive(LOCAL_LABEL, r as u64).low_u64(),
        };
        let out = run_round(&model, &plan, &task.shards, cfg.server_lr, &task.test)?;
        theta = out.theta;
        last_average = Some(out.average_update);
        rounds.push(out.metrics);
    }

    let n = rounds.len() as f64;
    Ok(RunResult {
        scheme: run.scheme.name().into(),
        params: run.params(),
        seed_index,
        final_accuracy: rounds.last().map(|m| m.accuracy).unwrap_or(0.0),
        uplink_bytes_per_client: rounds.iter().map(|m| m.uplink_bytes as f64).sum::<f64>() / n / cfg.clients_per_round as f64,
        mean_overflow_fraction: rounds.iter().map(|m| m.overflow_fraction).sum::<f64>() / n,
        codebook_bytes,
        degenerate_codebooks: degenerate,
        rounds,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scheme: String,
    pub params: String,
    pub uplink_kb: f64,
    pub compression_factor: f64,
    pub overflow_pct: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownlinkRow {
    pub scheme: String,
    pub params: String,
    pub codebook_bytes: u64,
    pub model_bytes: u64,
    pub downlink_pct: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub rows: Vec<ResultRow>,
    pub downlink: Vec<DownlinkRow>,
    pub runs: Vec<RunResult>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs the uncompressed baseline and every expanded scheme for each seed.
/// Accuracies are reported in percent.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut schemes = vec![cfg.baseline()];
    schemes.extend(cfg.expand()?);
    let tasks: Vec<ToyTask> = (0..cfg.n_seeds)
        .into_par_iter()
        .map(|s| make_toy_task(&cfg.task, cfg.run_seed(s).derive(TASK_LABEL, 0).low_u64()))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..schemes.len()).flat_map(|i| (0..cfg.n_seeds).map(move |s| (i, s))).collect();
    let runs: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(i, s)| simulate(cfg, &schemes[i], &tasks[s], s))
        .collect::<Result<_>>()?;

    let model_bytes = Model::new(cfg.task.model, cfg.task.n_features, cfg.task.n_classes).param_count() as u64 * 4;
    let mut rows = Vec::new();
    let mut downlink = Vec::new();
    let mut baseline_bytes = 0.0;
    for (i, chunk) in runs.chunks(cfg.n_seeds).enumerate() {
        let acc: Vec<f64> = chunk.iter().map(|r| 100.0 * r.final_accuracy).collect();
        let (accuracy_mean, accuracy_std) = mean_std(&acc);
        let bytes = chunk.iter().map(|r| r.uplink_bytes_per_client).sum::<f64>() / chunk.len() as f64;
        if i == 0 {
            baseline_bytes = bytes;
        }
        rows.push(ResultRow {
            scheme: chunk[0].scheme.clone(),
            params: chunk[0].params.clone(),
            uplink_kb: bytes / 1000.0,
            compression_factor: baseline_bytes / bytes,
            overflow_pct: 100.0 * chunk.iter().map(|r| r.mean_overflow_fraction).sum::<f64>() / chunk.len() as f64,
            accuracy_mean,
            accuracy_std,
        });
        if matches!(schemes[i].scheme, SchemeConfig::Pq { .. }) {
            let codebook_bytes = chunk[0].codebook_bytes;
            downlink.push(DownlinkRow {
                scheme: chunk[0].scheme.clone(),
                params: chunk[0].params.clone(),
                codebook_bytes,
                model_bytes,
                downlink_pct: 100.0 * codebook_bytes as f64 / model_bytes as f64,
            });
        }
    }
    Ok(ExperimentReport { rows, downlink, runs })
}

