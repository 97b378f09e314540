//! Labeled datasets, training with early stopping, and leave-one-video-out
//! evaluation.

pub mod dataset;
pub mod train;
pub mod xval;

pub use dataset::{build_dataset, sidecar_path, DatasetBuilder, DatasetCounts, LabeledDataset, Record, VideoEntry};
pub use train::{
    baseline_majority, evaluate, predict, train_model, Adam, EarlyStopping, EpochStats, TrainConfig, TrainingCurve,
    Verdict,
};
pub use xval::{
    aggregate, cross_validate, fold_seed, format_table, lovo_folds, mean_ci95, run_fold, split_train_val,
    CrossValidation, Fold, FoldFailure, FoldReport, RunReport,
};
