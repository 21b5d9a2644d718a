//! Corpus ingestion, experiment configuration, seeded runs, SNR sweeps and
//! their CSV and SVG outputs.

mod config;
mod corpus;
mod experiment;
mod report;

use thiserror::Error;

pub use config::{validate_grid, EvalConfig, EvalSplit, ExperimentConfig, ModelDims};
pub use corpus::{build_dataset, ingest_corpus, synthesize, CorpusConfig, CorpusSource, Dataset, MIN_SYNTHETIC_VOCAB};
pub use experiment::{
    compare_rx_counts, evaluate, run_experiment, scaling_row, sweep_loaded, sweep_snr, trainer_for, ExperimentOutcome,
    ScalingRow, CHECKPOINT_FILE, REPORT_FILE, RESOLVED_CONFIG_FILE, TRAINING_LOG_FILE,
};
pub use report::{
    spearman, svg_plot, training_log_rows, write_plots, write_rows, EvaluationReport, LogRow, ReportRow, RunMetadata,
    REPORT_METRICS,
};

use crate::channel::ChannelError;
use crate::codec::CodecError;
use crate::reward::RewardError;
use crate::trainer::TrainError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("corpus is empty after filtering: {excluded} of {total} lines fell outside the length bounds")]
    EmptyCorpus { total: usize, excluded: usize },
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Train(TrainError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}
