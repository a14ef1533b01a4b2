//! The full key-pose conditioned generator: configuration, network,
//! weighted objective, training and generation.

mod check;
mod config;
mod generate;
mod loss;
mod net;
mod sweep;
mod train;

pub use check::gradcheck_model;
pub use config::{DanceModelConfig, LossParams, LrStage, Preset, TrainSchedule};
pub use generate::{generate, generate_strict};
pub use loss::{omega, weight_curve, weight_series, weighted_loss, weighted_loss_var};
pub use net::{assemble_cross_input, CrossInputParts, DanceModel, DanceNet};
pub use sweep::{count_increases, evaluate_on, lambda_sweep, spearman, SweepRow, SweepSettings};
pub use train::{
    dataset_loss, probe_consistency, sample_loss, train, train_new, KeySampling, LogEntry,
    TrainLog, TrainOptions, TrainSample,
};
