//! Synthetic source and target image domains.
//!
//! Every class is one procedural pattern concept (stripes, disks, crosses, ...)
//! rendered at a random placement with Gaussian pixel noise and clipped to
//! `[-1, 1]`. A domain consumes `num_classes` consecutive concepts starting at
//! `first_concept`, so a source domain using concepts `0..10` and a target
//! domain using `10..14` share the renderer and noise model but no classes.

mod archive;
mod patterns;

pub(crate) use archive::hex_digest;
pub use archive::{read_archive, write_archive, ARCHIVE_FORMAT_VERSION};
pub use patterns::CONCEPTS;

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),
    #[error("domain needs concepts {first}..{end} but only {available} exist")]
    TooManyClasses {
        first: usize,
        end: usize,
        available: usize,
    },
    #[error("pixel value {0} outside [0, 255]")]
    PixelOutOfRange(f64),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch size {batch_size} invalid for dataset of {len} examples")]
    BatchSize { batch_size: usize, len: usize },
    #[error("archive {path}: {reason}")]
    Archive { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: String,
    pub num_classes: usize,
    pub image_side: usize,
    pub channels: usize,
    /// Training examples per class.
    pub samples_per_class: usize,
    pub test_per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Index into [`CONCEPTS`] of this domain's class 0.
    pub first_concept: usize,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(DataError::InvalidSpec(msg.to_string()));
        if self.domain_id.is_empty() {
            return bad("domain_id must not be empty");
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if self.image_side == 0 || self.channels == 0 {
            return bad("image_side and channels must be positive");
        }
        if self.samples_per_class == 0 || self.test_per_class == 0 {
            return bad("samples_per_class and test_per_class must be positive");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be a non-negative finite number");
        }
        let end = self.first_concept + self.num_classes;
        if end > CONCEPTS.len() {
            return Err(DataError::TooManyClasses {
                first: self.first_concept,
                end,
                available: CONCEPTS.len(),
            });
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.channels, self.image_side, self.image_side]
    }

    /// Concept names backing each class.
    pub fn concepts(&self) -> &'static [&'static str] {
        let end = (self.first_concept + self.num_classes).min(CONCEPTS.len());
        &CONCEPTS[self.first_concept.min(end)..end]
    }

    /// True when the two domains share no pattern concept.
    pub fn is_disjoint_from(&self, other: &DomainSpec) -> bool {
        let a = self.first_concept..self.first_concept + self.num_classes;
        let b = other.first_concept..other.first_concept + other.num_classes;
        a.end <= b.start || b.end <= a.start
    }

    /// Seed used for the example at `index` of `split`.
    pub fn example_seed(&self, split: Split, index: usize) -> u64 {
        seed::hash64(self.seed, split.as_str(), index as u64)
    }

    /// Renders one example of `class` from a placement/noise seed.
    pub fn render(&self, class: usize, example_seed: u64) -> Result<Tensor> {
        self.validate()?;
        if class >= self.num_classes {
            return Err(DataError::InvalidSpec(format!(
                "class {class} out of range for {} classes",
                self.num_classes
            )));
        }
        let mut rng = seed::rng(example_seed);
        let pattern = patterns::render(self.first_concept + class, self.image_side, &mut rng);
        // Centred around zero: a shared offset across all pixels slows SGD.
        let offset: f64 = rng.random_range(-0.15..0.15);
        let contrast: f64 = rng.random_range(0.8..1.6);
        let noise = Normal::new(0.0, self.noise_std)
            .map_err(|e| DataError::InvalidSpec(e.to_string()))?;
        let mut data = Vec::with_capacity(self.channels * pattern.len());
        for _ in 0..self.channels {
            for &p in &pattern {
                let clean = offset + contrast * (p - 0.5);
                let n = if self.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push((clean + n).clamp(-1.0, 1.0));
            }
        }
        Ok(Tensor::new(self.input_shape().to_vec(), data)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Images in `[-1, 1]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub spec: DomainSpec,
    pub split: Split,
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(spec: DomainSpec, split: Split, inputs: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(DataError::InvalidSpec(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let shape = spec.input_shape();
        for x in &inputs {
            if x.shape() != shape {
                return Err(DataError::InvalidSpec(format!(
                    "input shape {:?} does not match domain shape {shape:?}",
                    x.shape()
                )));
            }
            if x.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(DataError::InvalidSpec("pixel outside [-1, 1]".into()));
            }
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= spec.num_classes) {
            return Err(DataError::InvalidSpec(format!("label {l} out of range")));
        }
        Ok(LabeledDataset {
            spec,
            split,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Same labels and spec, different inputs (e.g. adversarial versions).
    pub fn with_inputs(&self, inputs: Vec<Tensor>) -> Result<Self> {
        LabeledDataset::new(self.spec.clone(), self.split, inputs, self.labels.clone())
    }
}

/// Generates the `(train, test)` pair for a domain.
pub fn generate_domain(spec: &DomainSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let make = |split: Split, per_class: usize| -> Result<LabeledDataset> {
        let n = per_class * spec.num_classes;
        let mut inputs = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % spec.num_classes;
            inputs.push(spec.render(class, spec.example_seed(split, i))?);
            labels.push(class);
        }
        LabeledDataset::new(spec.clone(), split, inputs, labels)
    };
    Ok((
        make(Split::Train, spec.samples_per_class)?,
        make(Split::Test, spec.test_per_class)?,
    ))
}

/// Maps `[0, 255]` pixel values onto `[-1, 1]` via `v / 127.5 - 1`.
pub fn scale_pixels(raw: &Tensor) -> Result<Tensor> {
    if let Some(&v) = raw.data().iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(DataError::PixelOutOfRange(v));
    }
    let data = raw.data().iter().map(|v| v / 127.5 - 1.0).collect();
    Ok(Tensor::new(raw.shape().to_vec(), data)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[batch, channels, side, side]`
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// Positions of the batch members in the source dataset.
    pub indices: Vec<usize>,
}

/// Shuffles the dataset with a key derived from its seed and `epoch_seed`,
/// then cuts it into batches; the last batch may be short.
pub fn batches(ds: &LabeledDataset, batch_size: usize, epoch_seed: u64) -> Result<Vec<Batch>> {
    if ds.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    if batch_size == 0 || batch_size > ds.len() {
        return Err(DataError::BatchSize {
            batch_size,
            len: ds.len(),
        });
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let key = seed::hash64(ds.spec.seed, &format!("batches-{}", ds.split), epoch_seed);
    order.shuffle(&mut seed::rng(key));
    order
        .chunks(batch_size)
        .map(|idx| {
            let items: Vec<Tensor> = idx.iter().map(|&i| ds.inputs[i].clone()).collect();
            Ok(Batch {
                inputs: Tensor::stack(&items)?,
                labels: idx.iter().map(|&i| ds.labels[i]).collect(),
                indices: idx.to_vec(),
            })
        })
        .collect()
}
