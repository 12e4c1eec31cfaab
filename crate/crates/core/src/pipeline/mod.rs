//! Experiment orchestration: configs, checkpoints, phases and sweeps.

pub mod checkpoint;
pub mod config;
mod experiment;
pub mod phases;
mod search;
mod sweep;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use config::{ExperimentConfig, GroupingMethod, SelectionMethod, SweepAxis, SweepConfig};
pub use experiment::{Compressed, Experiment, MetricsReport, PretrainOutcome};
pub use phases::{run_all, run_calibrate, run_compress, run_eval, run_finetune, run_pretrain, run_search_threshold, RunDir};
pub use search::{search_threshold, Probe, ThresholdSearch, MAX_PROBES, THRESHOLD_MAX, THRESHOLD_MIN};
pub use sweep::{collect_report, mean_stdev, run_seeds, run_sweep, summarize};
