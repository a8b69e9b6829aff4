//! critmap quantifies how critical each learnable layer of a convolutional
//! classifier is to its decision function. One layer at a time is
//! re-randomized from its own initialization distribution and the cosine
//! distance between softmax outputs before and after the reset, averaged
//! over an evaluation subset and across seeds, becomes that layer's
//! criticality. The crate also ships the desk-scale machinery to produce
//! models worth comparing: SGD training, a projected-gradient attack,
//! adversarial training, light augmentations, binary model/dataset
//! formats, and CSV/JSON/SVG reporting.
//!
//! Modules:
//! - [`tensor`], [`rng`], [`ops`]: dense tensors, deterministic
//!   pseudo-randomness, forward kernels.
//! - [`model`], [`grad`]: layer graphs, forward pass, reverse-mode
//!   gradients.
//! - [`init`]: initialization families, stored per layer and reused
//!   verbatim for criticality randomization.
//! - [`criticality`], [`stats`]: the measurement itself plus summary
//!   statistics and rank correlation.
//! - [`train`]: SGD, PGD attack, adversarial training, augmentations.
//! - [`data`], [`io`]: datasets, synthesis, file formats, subsampling.
//! - [`report`], [`cli`]: CSV/JSON/SVG reports and the command-line
//!   front end.
//!
//! The `examples/` directory holds one runnable walkthrough per major
//! capability; the `critmap` binary exposes the same flows as subcommands.

pub mod cli;
pub mod criticality;
pub mod data;
pub mod error;
pub mod grad;
pub mod init;
pub mod io;
pub mod model;
pub mod ops;
pub mod report;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;

pub use criticality::{
    cosine_distance, delta_to_baseline, layer_criticality, mean_model_criticality, profile_model,
    randomize_layer, CriticalityProfile, CriticalityStats, Metric, RunConfig,
};
pub use data::{synth_dataset, Dataset, SynthConfig};
pub use error::{Error, Result};
pub use grad::{backward, cross_entropy_loss, training_loss, BnMode};
pub use init::{fan, sample_init, FanMode, InitFamily, InitSpec};
pub use model::{build_model, ArchConfig, BlockKind, LayerKind, LayerSpec, ModelGraph};
pub use rng::Rng;
pub use stats::spearman;
pub use tensor::{Dtype, Tensor};
pub use train::{
    augment, evaluate, pgd_attack, train, train_adversarial, AttackConfig, Norm, TrainConfig,
    TrainMode,
};
