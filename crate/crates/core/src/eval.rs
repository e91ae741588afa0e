//! Fooling rates, transfer matrices, mapping histograms and logits dumps.
//!
//! Fooling is always measured against the model's own clean prediction, so an
//! unperturbed input never counts as fooled.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{self, AttackConfig, AttackError, AttackKind};
use crate::data::LabeledDataset;
use crate::model::{Model, ModelError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate: {0}")]
    Empty(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("model has {model} classes but dataset has {data}")]
    ClassMismatch { model: usize, data: usize },
    #[error("transfer matrix needs one target per crafting model ({0} vs {1})")]
    NotSquare(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Fraction of examples where the prediction differs from the label.
pub fn error_rate(model: &Model, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(EvalError::Empty("dataset".into()));
    }
    if ds.num_classes() != model.num_classes() {
        return Err(EvalError::ClassMismatch {
            model: model.num_classes(),
            data: ds.num_classes(),
        });
    }
    let preds = model.predict_many(&ds.inputs)?;
    Ok(mismatch_fraction(&preds, &ds.labels))
}

fn mismatch_fraction(a: &[usize], b: &[usize]) -> f64 {
    let wrong = a.iter().zip(b).filter(|(x, y)| x != y).count();
    wrong as f64 / a.len() as f64
}

/// Fraction of pairs whose predicted labels differ.
pub fn fooling_rate_from_predictions(clean: &[usize], adversarial: &[usize]) -> Result<f64> {
    if clean.len() != adversarial.len() {
        return Err(EvalError::LengthMismatch(clean.len(), adversarial.len()));
    }
    if clean.is_empty() {
        return Err(EvalError::Empty("no prediction pairs".into()));
    }
    Ok(mismatch_fraction(clean, adversarial))
}

/// Fraction of inputs whose predicted label changes under perturbation.
pub fn fooling_rate(model: &Model, clean: &[Tensor], adversarial: &[Tensor]) -> Result<f64> {
    if clean.len() != adversarial.len() {
        return Err(EvalError::LengthMismatch(clean.len(), adversarial.len()));
    }
    fooling_rate_from_predictions(&model.predict_many(clean)?, &model.predict_many(adversarial)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoolingReport {
    pub model_id: String,
    pub attack_id: String,
    /// Model the perturbations were crafted with; `None` for the random control.
    pub crafted_with: Option<String>,
    pub baseline_error_rate: f64,
    pub fooling_rate: f64,
    pub num_samples: usize,
}

/// Rows are crafting models, columns are attacked models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub row_ids: Vec<String>,
    pub column_ids: Vec<String>,
    pub cells: Vec<Vec<f64>>,
    pub num_samples: usize,
}

impl TransferMatrix {
    pub fn size(&self) -> usize {
        self.cells.len()
    }

    pub fn mean_diagonal(&self) -> f64 {
        let n = self.size();
        (0..n).map(|i| self.cells[i][i]).sum::<f64>() / n as f64
    }

    /// Mean of the off-diagonal cells, `None` for a 1×1 matrix.
    pub fn mean_off_diagonal(&self) -> Option<f64> {
        let n = self.size();
        if n < 2 {
            return None;
        }
        let total: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.cells[i][j])
            .sum();
        Some(total / (n * (n - 1)) as f64)
    }
}

/// Fills a transfer matrix from perturbations already crafted per row.
pub fn transfer_matrix_from_adversarial(
    row_ids: &[String],
    targets: &[(String, Model)],
    clean: &[Tensor],
    adversarial_per_row: &[Vec<Tensor>],
) -> Result<TransferMatrix> {
    if row_ids.len() != targets.len() || adversarial_per_row.len() != targets.len() {
        return Err(EvalError::NotSquare(row_ids.len(), targets.len()));
    }
    let clean_preds: Vec<Vec<usize>> = targets
        .iter()
        .map(|(_, f)| f.predict_many(clean))
        .collect::<std::result::Result<_, _>>()?;
    let mut cells = Vec::with_capacity(row_ids.len());
    for adv in adversarial_per_row {
        let mut row = Vec::with_capacity(targets.len());
        for ((_, f), clean_pred) in targets.iter().zip(&clean_preds) {
            row.push(fooling_rate_from_predictions(clean_pred, &f.predict_many(adv)?)?);
        }
        cells.push(row);
    }
    Ok(TransferMatrix {
        row_ids: row_ids.to_vec(),
        column_ids: targets.iter().map(|(id, _)| id.clone()).collect(),
        cells,
        num_samples: clean.len(),
    })
}

/// Crafts data-free perturbations with every pretrained model and scores them
/// against every fine-tuned target. Entry `(a, b)` uses `pretrained[a]` to
/// attack `targets[b]`; `targets[a]` is expected to derive from `pretrained[a]`.
pub fn transfer_matrix(
    pretrained: &[(String, Model)],
    targets: &[(String, Model)],
    test: &LabeledDataset,
    config: &AttackConfig,
) -> Result<TransferMatrix> {
    if pretrained.len() != targets.len() {
        return Err(EvalError::NotSquare(pretrained.len(), targets.len()));
    }
    if test.is_empty() {
        return Err(EvalError::Empty("test set".into()));
    }
    let mut adversarial = Vec::with_capacity(pretrained.len());
    for (_, t) in pretrained {
        let crafted = attacks::craft_many(AttackKind::Dfp, t, &test.inputs, &test.labels, config)?;
        adversarial.push(crafted.into_iter().map(|r| r.adversarial).collect::<Vec<_>>());
    }
    let row_ids: Vec<String> = pretrained.iter().map(|(id, _)| id.clone()).collect();
    transfer_matrix_from_adversarial(&row_ids, targets, &test.inputs, &adversarial)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMapping {
    pub category: usize,
    pub num_samples: usize,
    /// Share of the category's images assigned to each source class.
    pub distribution: Vec<f64>,
    pub max_frequency: f64,
    pub most_frequent_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingHistogram {
    pub source_classes: usize,
    pub categories: Vec<CategoryMapping>,
}

/// For each target category, how the pretrained model's predictions spread
/// over its own (unrelated) classes.
pub fn mapping_histogram(pretrained: &Model, test: &LabeledDataset) -> Result<MappingHistogram> {
    let k = pretrained.num_classes();
    let preds = pretrained.predict_many(&test.inputs)?;
    let mut counts = vec![vec![0usize; k]; test.num_classes()];
    for (&label, &pred) in test.labels.iter().zip(&preds) {
        counts[label][pred] += 1;
    }
    let categories = counts
        .into_iter()
        .enumerate()
        .map(|(category, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                return Err(EvalError::Empty(format!("category {category} has no test images")));
            }
            let distribution: Vec<f64> = row.iter().map(|&c| c as f64 / n as f64).collect();
            let most_frequent_class = crate::tensor::argmax(&distribution);
            Ok(CategoryMapping {
                category,
                num_samples: n,
                max_frequency: distribution[most_frequent_class],
                most_frequent_class,
                distribution,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MappingHistogram {
        source_classes: k,
        categories,
    })
}

/// Clean and adversarial logits of the pretrained model side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsDump {
    pub clean: Vec<f64>,
    pub adversarial: Vec<f64>,
    pub l2_distance: f64,
    pub cosine_similarity: f64,
}

/// Cosine similarity, taking two zero vectors as identical and a zero vector
/// against a non-zero one as orthogonal.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na * nb)).clamp(-1.0, 1.0),
    }
}

pub fn logits_dump(pretrained: &Model, x: &Tensor, adversarial: &Tensor) -> Result<LogitsDump> {
    let clean = pretrained.logits(x)?.into_data();
    let adv = pretrained.logits(adversarial)?.into_data();
    Ok(dump_from_logits(clean, adv))
}

fn dump_from_logits(clean: Vec<f64>, adversarial: Vec<f64>) -> LogitsDump {
    let l2_distance = clean
        .iter()
        .zip(&adversarial)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let cosine_similarity = cosine_similarity(&clean, &adversarial);
    LogitsDump {
        clean,
        adversarial,
        l2_distance,
        cosine_similarity,
    }
}

/// Mean logits divergence over a set of clean/adversarial pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSummary {
    pub mean_cosine_similarity: f64,
    pub mean_l2_distance: f64,
    pub num_samples: usize,
}

pub fn logits_divergence(pretrained: &Model, clean: &[Tensor], adversarial: &[Tensor]) -> Result<DivergenceSummary> {
    if clean.len() != adversarial.len() {
        return Err(EvalError::LengthMismatch(clean.len(), adversarial.len()));
    }
    if clean.is_empty() {
        return Err(EvalError::Empty("no pairs".into()));
    }
    let a = pretrained.logits_many(clean)?;
    let b = pretrained.logits_many(adversarial)?;
    let dumps: Vec<LogitsDump> = a
        .into_iter()
        .zip(b)
        .map(|(x, y)| dump_from_logits(x.into_data(), y.into_data()))
        .collect();
    let n = dumps.len() as f64;
    Ok(DivergenceSummary {
        mean_cosine_similarity: dumps.iter().map(|d| d.cosine_similarity).sum::<f64>() / n,
        mean_l2_distance: dumps.iter().map(|d| d.l2_distance).sum::<f64>() / n,
        num_samples: dumps.len(),
    })
}
