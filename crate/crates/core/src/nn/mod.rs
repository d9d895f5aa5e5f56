//! Residual networks: configuration, parameter registry, batch normalization
//! with per-step banks, forward passes and checkpoints.

pub mod batchnorm;
pub mod checkpoint;
pub mod config;
pub mod model;
pub mod params;

pub use batchnorm::{BatchNormLayer, BnBank, BnUpdate};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use config::{ArchitectureConfig, Family, ParamCount, ShortcutKind, StageSpec};
pub use model::{
    build_model, BlockApp, Collected, ConvLayer, ForwardOptions, ForwardPass, Head, Mode, Model, ParamBinder,
    ResidualBlock, Stage, Transition,
};
pub use params::{Param, ParamId, ParamKind, ParamStore};
