//! Optimizer, training loop with validation-based selection, and ranking metrics.

mod adadelta;
mod metrics;
mod trainer;

pub use adadelta::Adadelta;
pub use metrics::{
    accuracy, accuracy_at_k, group_weighted_accuracy, top_k, EvalReport, GroupAccuracy, K_VALUES,
};
pub use trainer::{
    best_epoch, evaluate, mean_loss, predict_all, train, train_with, EpochRecord, TrainConfig, TrainOutcome,
};
