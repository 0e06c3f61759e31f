//! Synthetic data, the training loop, and the teacher/student comparison.

pub mod comparison;
pub mod synth;
pub mod trainer;

pub use comparison::{
    run_comparison_suite, run_comparison_with_teacher, score, ComparisonConfig, ComparisonRow,
    ComparisonTable, RowKind, RunMetrics,
};
pub use synth::{
    generate_dataset, generate_dataset_with, Dataset, Sample, ShapeFamily, SyntheticTaskSpec,
};
pub use trainer::{
    train, train_with_callback, validation_dice, Budget, EpochRecord, TrainLog, TrainOutcome,
    TrainRunConfig,
};
