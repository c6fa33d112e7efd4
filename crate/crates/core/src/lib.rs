//! Body schema learning for tendon-driven musculoskeletal plants.
//!
//! A masked autoencoder relates joint angles, muscle tensions and muscle
//! lengths. When muscles are added the trained network is grown by weight
//! transplantation and retrained from a few new samples plus pseudo-data
//! distilled from the old network.

// the `!(x > 0.0)` checks also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod growth;
pub mod harness;
pub mod mae;
pub mod netcore;
pub mod retrain;
pub mod sim;

pub use error::{Error, Result};
pub use growth::{channel_map, grow_network, grow_network_with, grow_normalizer, GrowOptions};
pub use mae::{
    solve_control, train_mae, Architecture, BodySchemaNet, ChannelStats, ControlSolution, ControlSolveConfig, Mask,
    Normalizer, SensorSample, TrainConfig,
};
pub use netcore::{Activation, DenseNet, Gradients, Layer, OptimizerKind, OptimizerState};
pub use retrain::{
    retrain, retrain_loss, sample_pseudo_old, w_loss_value, LossBreakdown, LossRecord, LossReduction, Method,
    PseudoBatch, RMask, RetrainConfig, SamplerRanges,
};
pub use sim::{MuscleCommand, MuscleSpec, PlantConfig, PlantState, SettleOutcome, Side, Simulator};
