//! Experiment orchestration: synthetic datasets, the training loop,
//! evaluation metrics, persistence, and configuration.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod train;

use std::path::PathBuf;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, ModelShape};
pub use config::{Mode, TrainConfig};
pub use dataset::{
    kernel_mmd, make_dataset, mean_cosine_similarity, mode_coverage, Dataset, DatasetKind,
    DatasetSpec,
};
pub use metrics::{read_metrics, MetricsRow, MetricsWriter, CSV_HEADER};
pub use train::{train, StepLosses, Trainer, TrainOutcome};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("expected a {expected} dataset, got {found}")]
    WrongDatasetKind { expected: &'static str, found: String },
    #[error("non-finite loss at step {step}; {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Quantizer(#[from] crate::quantizer::QuantizerError),
    #[error(transparent)]
    Cbi(#[from] crate::cbi::CbiError),
    #[error(transparent)]
    Sinkhorn(#[from] crate::sinkhorn::SinkhornError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// CLI exit code: 1 for configuration/environment problems, 2 for
    /// numeric aborts.
    pub fn exit_code(&self) -> i32 {
        use crate::cbi::CbiError;
        use crate::sinkhorn::SinkhornError;
        match self {
            HarnessError::NonFinite { .. } => 2,
            HarnessError::Cbi(CbiError::NonFinite { .. }) => 2,
            HarnessError::Sinkhorn(
                SinkhornError::EtaTooSmall { .. } | SinkhornError::PivotLimit,
            ) => 2,
            HarnessError::Cbi(CbiError::Sinkhorn(
                SinkhornError::EtaTooSmall { .. } | SinkhornError::PivotLimit,
            )) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
