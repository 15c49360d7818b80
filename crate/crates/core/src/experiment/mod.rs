//! Run orchestration: pre-training, probing, sweeps and aggregation.

pub mod aggregate;
pub mod config;
pub mod output;
pub mod pretrain;
pub mod runner;

pub use aggregate::{aggregate, render_table, ResultRow};
pub use config::{DatasetKind, ExperimentConfig, Method};
pub use output::{load_run, run_to_dir, LoadedRun, Manifest};
pub use pretrain::{pretrain, HebbianConfig, PretrainReport, Pretrained};
pub use runner::{load_data, run_sweep, CellResult, PreparedData, RecordRow, SweepOutput};
