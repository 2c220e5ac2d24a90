//! Training, evaluation, benchmarking and persistence.

mod bench;
mod checkpoint;
mod config;
mod eval;
mod metrics;
mod train;

pub use bench::{bench, median, time_detection, BenchReport};
pub use checkpoint::{Checkpoint, CheckpointManifest, Provenance, TensorEntry, FORMAT_VERSION, MANIFEST, WEIGHTS};
pub use config::{default_eval_snr_db, default_snr_range_db, OptimConfig, Schedule, TrainConfig};
pub use eval::{
    evaluate, evaluate_checkpoint, evaluate_oracle, wilson, Detector, DetectorInfo, DetectorSession, EvalReport,
    EvalSpec, GenieDetector, KStats, ModelDetector, OracleDetector, RandomGuesser, Z95,
};
pub use metrics::{read_csv, write_csv, write_rows, MetricsRow, CSV_HEADER};
pub use train::{clip_grad_norm, loss_and_grad, train, train_from, training_batch, Adam, StepRecord, TrainOutcome};
