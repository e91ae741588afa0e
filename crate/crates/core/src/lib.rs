//! Data-free adversarial perturbations at desk scale.
//!
//! A source-domain model `t` is pretrained on procedural images, a target
//! model `f` is fine-tuned from its backbone on a disjoint set of classes,
//! and perturbations are crafted from `t` alone by pushing its logits away
//! from their clean values. The [`eval`] module then measures how often those
//! perturbations flip the predictions of `f`.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors and a reverse-mode tape
//! - [`data`]: procedural source/target domains and the dataset archive format
//! - [`model`]: `net-a` (MLP) and `net-b` (CNN) with a fixed backbone/head split,
//!   plus checkpoints
//! - [`train`]: SGD with momentum, pretraining and fine-tuning
//! - [`attacks`]: the data-free attack plus FGSM, MI-FGSM and a random-sign control
//! - [`eval`]: fooling rates, transfer matrices, mapping histograms, logits dumps
//! - [`config`] and [`pipeline`]: the stage-oriented experiment runner behind the
//!   `dfp-lab` binary

pub mod attacks;
pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod tensor;
pub mod train;

pub use attacks::{AdversarialResult, AttackConfig, FinalStepMode};
pub use data::{DomainSpec, LabeledDataset, Split};
pub use model::{Architecture, Model, ModelParams, ModelSpec};
pub use tensor::{Tape, Tensor, TensorError, Var};
pub use train::{TrainConfig, TrainHistory};
