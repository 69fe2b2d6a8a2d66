//! End-to-end protocols: base-to-novel, cross-dataset, segmentation and ablation sweeps.

mod config;
mod output;
mod protocols;

pub use config::{
    AblateConfig, CrossDatasetConfig, ExperimentConfig, Protocol, SegmentConfig, TrainingConfig,
};
pub use output::{prompt_hash, OutputDir};
pub use protocols::{
    evaluate_accuracy, run_ablate, run_base_to_novel, run_cross_dataset, run_eval, run_segment,
    run_segment_on, score_map, train_prompts, AblationAxis, AblationReport, AblationRow,
    BaseToNovelReport, CrossDatasetReport, CrossDatasetRow, EpochLog, Model, SegmentReport,
    SegmentRow, StrategyScores, TrainOutcome,
};
