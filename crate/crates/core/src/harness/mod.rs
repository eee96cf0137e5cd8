//! Experiment orchestration: configs, datasets, runners and artifacts.

mod checkpoint;
mod config;
mod dataset;
mod metrics;
mod runs;
mod tasks;
pub mod toy;

pub use checkpoint::{ensure_layout, load_checkpoint, save_checkpoint, CheckpointManifest, LAYOUT_VERSION};
pub use config::{
    BayesCheckConfig, EvalConfig, ExperimentConfig, ExperimentKind, FinetuneConfig, ModelFamily, ModelSpec, TrainConfig,
};
pub use dataset::{
    load_dataset, random_patch, read_gray, synthetic_image, write_gray, Dataset, DatasetSpec, SyntheticSpec,
};
pub use metrics::{read_metrics, MetricsRow, MetricsWriter, METRICS_COLUMNS};
pub use runs::{
    run, run_bayes_check, run_eval, run_finetune, run_toy, run_train, BayesCheckReport, EvalScore, FinetuneReport,
    RunManifest, RunSummary, TaskScore, ToyReport, TrainReport,
};
pub use tasks::{cartesian_mask, default_training_tasks, motion_kernel, random_mask, TaskSpec};
pub use toy::{kernel_image_block, toy_experiment, toy_tasks, BlockComparison, ToyConfig, ToyOutcome};
