//! Synthetic continual benchmark.

pub mod dataset;
pub mod run;
pub mod scene;
pub mod stream;

use thiserror::Error;

pub use dataset::{evaluate_stream, load_stream, save_stream, EvalReport, TaskScore};
pub use run::{emit, evaluate_task, run_continual, write_heatmap, HeatmapSidecar, ImageRecord, MetricsReport, RunOutput, TaskEval, TaskSummary};
pub use stream::{gen_stream, split_stream, AnomalyKind, AnomalySpec, FamilySpec, Sample, Stream, StreamConfig, TaskData, TaskSpec, TrainingGate};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training data of task {task} refused: {reason}")]
    Rehearsal { task: usize, reason: String },
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error(transparent)]
    Scl(#[from] crate::scl::SclError),
    #[error(transparent)]
    Memory(#[from] crate::memory::MemoryError),
    #[error(transparent)]
    Inference(#[from] crate::inference::InferenceError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Segment(#[from] crate::segmenter::SegmentError),
    #[error(transparent)]
    Pgm(#[from] crate::pgm::PgmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
