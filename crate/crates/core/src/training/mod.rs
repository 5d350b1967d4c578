//! Losses, optimizers, the one-cycle schedule, early stopping and the
//! three named training presets.

mod loss;
mod optim;
mod preset;
mod schedule;
mod trainer;

pub use loss::{
    balanced_mse, class_weights, mse, silverman_bandwidth, weighted_cross_entropy,
    BalancedMseConfig, LossGrad,
};
pub use optim::{optimizer_step, OptimizerKind, OptimizerState};
pub use preset::{ablate, Ablation, Balancing, LossKind, OptimizerChoice, PresetName, TrainPreset};
pub use schedule::{one_cycle_lr, OneCycle};
pub use trainer::{
    bag_score, train_model, write_train_log, EpochLog, Objective, TrainLog, TrainOptions,
    TrainOutcome,
};
