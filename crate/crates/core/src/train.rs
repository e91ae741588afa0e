//! Mini-batch SGD with momentum, used both to pretrain the source model and
//! to fine-tune the target model from its backbone.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batches, DataError, LabeledDataset};
use crate::eval;
use crate::model::{
    init_params, load_checkpoint, save_checkpoint, Architecture, Model, ModelError, ModelParams, ModelSpec,
};
use crate::seed;
use crate::tensor::{Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("model has {model} classes but dataset has {data}")]
    ClassMismatch { model: usize, data: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss in epoch {0}")]
    Diverged(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-epoch mean training loss and test accuracy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epoch_loss: Vec<f64>,
    pub test_accuracy: Vec<f64>,
}

impl TrainHistory {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.test_accuracy.last().copied()
    }
}

/// `v' = momentum·v + g`, `p' = p − lr·v'`.
pub fn sgd_momentum_step(
    params: &ModelParams,
    grads: &ModelParams,
    velocity: &ModelParams,
    learning_rate: f64,
    momentum: f64,
) -> Result<(ModelParams, ModelParams)> {
    let mut new_params = Vec::with_capacity(params.len());
    let mut new_velocity = Vec::with_capacity(params.len());
    for (name, p) in params.iter() {
        let (g, v) = match (grads.get(name), velocity.get(name)) {
            (Some(g), Some(v)) => (g, v),
            _ => {
                return Err(TrainError::Model(ModelError::ParamMismatch(format!(
                    "no gradient or velocity for {name}"
                ))))
            }
        };
        let v2 = v.scale(momentum)?.add(g)?;
        new_params.push(p.sub(&v2.scale(learning_rate)?)?);
        new_velocity.push(v2);
    }
    Ok((params.with_values(new_params)?, params.with_values(new_velocity)?))
}

/// Runs exactly `config.epochs` epochs over `train_ds`, reporting test
/// accuracy on `test_ds` after each.
pub fn train(
    model: &Model,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    for ds in [train_ds, test_ds] {
        if ds.num_classes() != model.num_classes() {
            return Err(TrainError::ClassMismatch {
                model: model.num_classes(),
                data: ds.num_classes(),
            });
        }
    }
    let mut params = model.params.clone();
    let mut velocity = params.zeros_like();
    let mut history = TrainHistory::default();
    for epoch in 0..config.epochs {
        let epoch_seed = seed::hash64(config.seed, "epoch", epoch as u64);
        let mut total = 0.0;
        for batch in batches(train_ds, config.batch_size, epoch_seed)? {
            let tape = Tape::new();
            let bound = params.bind(&tape, true);
            let x = tape.constant(batch.inputs);
            let logits = crate::model::forward_on_tape(&model.spec, &bound, x)?;
            let loss = logits.softmax_cross_entropy(&batch.labels)?;
            total += loss.value().item().expect("scalar loss") * batch.labels.len() as f64;
            let grads = params.with_values(tape.backward(loss, &bound)?)?;
            (params, velocity) =
                sgd_momentum_step(&params, &grads, &velocity, config.learning_rate, config.momentum)?;
        }
        let mean_loss = total / train_ds.len() as f64;
        if !mean_loss.is_finite() {
            return Err(TrainError::Diverged(epoch));
        }
        let current = Model {
            spec: model.spec.clone(),
            params: params.clone(),
        };
        history.epoch_loss.push(mean_loss);
        history.test_accuracy.push(1.0 - eval::error_rate(&current, test_ds)?);
    }
    Ok((
        Model {
            spec: model.spec.clone(),
            params,
        },
        history,
    ))
}

/// Randomly initialised `architecture` trained on a domain.
pub fn train_from_scratch(
    architecture: Architecture,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    config: &TrainConfig,
    init_seed: u64,
) -> Result<(Model, TrainHistory)> {
    let spec = ModelSpec::new(architecture, train_ds.spec.input_shape(), train_ds.num_classes())?;
    let model = Model::new(spec.clone(), init_params(&spec, init_seed))?;
    train(&model, train_ds, test_ds, config)
}

/// Trains the source model `t` and writes its checkpoint.
pub fn pretrain_source(
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    architecture: Architecture,
    config: &TrainConfig,
    init_seed: u64,
    checkpoint: &Path,
) -> Result<(Model, TrainHistory)> {
    let (model, history) = train_from_scratch(architecture, train_ds, test_ds, config, init_seed)?;
    save_checkpoint(&model.spec, &model.params, checkpoint)?;
    Ok((model, history))
}

/// Fine-tunes the target model `f` from `t`'s checkpoint: the head is
/// replaced for the target classes and every layer is trained.
pub fn finetune_target(
    source_checkpoint: &Path,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    config: &TrainConfig,
    head_seed: u64,
    checkpoint: &Path,
) -> Result<(Model, TrainHistory)> {
    let (spec, params) = load_checkpoint(source_checkpoint)?;
    let source = Model::new(spec, params)?;
    let (model, history) = finetune_from(&source, train_ds, test_ds, config, head_seed)?;
    save_checkpoint(&model.spec, &model.params, checkpoint)?;
    Ok((model, history))
}

/// In-memory form of [`finetune_target`].
pub fn finetune_from(
    source: &Model,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    config: &TrainConfig,
    head_seed: u64,
) -> Result<(Model, TrainHistory)> {
    if source.spec.input_shape != train_ds.spec.input_shape() {
        return Err(TrainError::Model(ModelError::InputShape {
            expected: source.spec.input_shape.to_vec(),
            got: train_ds.spec.input_shape().to_vec(),
        }));
    }
    let start = source.replace_head(train_ds.num_classes(), head_seed)?;
    train(&start, train_ds, test_ds, config)
}
