//! Stage-2 policy training, evaluation, and the artifact pipeline.

mod config;
mod eval;
mod pipeline;
mod stage2;

pub use config::{MemorySource, RunConfig};
pub use eval::{
    context_batch, evaluate, run_episodes, summarize, Actor, EpisodeHistory, EvalConfig, EvalResult, PolicyActor,
    RetrievalStats,
};
pub use pipeline::{
    decode_autoencoder, encode_autoencoder, read_metrics, write_atomic, snapshot_steps, FinetuneInfo, MetricsRow, Pipeline,
    RunOutcome, RunSummary, Stage, Stage1Info, TrainInfo, METRICS_HEADER, RECONSTRUCTION_BUDGET,
};
pub use stage2::{dataset_loss, train_policy, LossPoint, PolicyTrainConfig, PolicyTrainReport};
