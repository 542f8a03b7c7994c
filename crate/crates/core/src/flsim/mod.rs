//! Desk-scale FedAvg simulator running the secure round protocol end to end.

mod codec;
mod experiment;
mod model;
mod refresh;
mod round;
mod task;

pub use codec::{Aggregate, TensorCodec};
pub use experiment::{
    run_experiment, simulate, DownlinkRow, ExperimentConfig, ExperimentReport, ResultRow, RunResult, SchemeRun,
};
pub use model::{local_train, LocalConfig, Model, ModelKind};
pub use refresh::{
    refresh_codecs, CodecState, RefreshOptions, RefreshPeriod, RefreshPolicy, RefreshSource, SchemeConfig,
    TensorState, CLIP_FACTOR, DENSE_BITS,
};
pub use round::{plaintext_aggregates, plaintext_decompressed_sum, run_round, RoundMetrics, RoundOutput, RoundPlan};
pub use task::{make_toy_task, ClientShard, Dataset, TaskConfig, ToyTask};
