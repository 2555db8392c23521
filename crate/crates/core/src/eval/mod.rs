//! Dialog datasets, metrics and experiment replay.

pub mod dataset;
pub mod experiment;
pub mod metrics;
pub mod report;

use thiserror::Error;

pub use dataset::{load_redial, read_redial, write_redial, Dialog, GoldLabel, LoadedDialogs};
pub use experiment::{run_experiment, ExperimentConfig};
pub use metrics::{bleu, distinct_n, recall_at_k, tokenize, BleuStats, RecallAccumulator};
pub use report::{MetricsReport, REFERENCE_ROWS};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{source_name}: {skipped} of {total} lines malformed")]
    Malformed { source_name: String, skipped: usize, total: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Engine(#[from] crate::engine::EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
