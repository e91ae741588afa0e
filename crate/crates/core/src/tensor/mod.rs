//! Dense row-major `f64` tensors and the reverse-mode tape built on them.
//!
//! Shapes never broadcast: every binary operation requires identical shapes.
//! A [`Tensor`] is always finite; any operation whose result would contain a
//! NaN or infinity returns [`TensorError::NonFinite`] instead.

mod ops;
mod tape;

pub use ops::{conv2d, matmul};
pub use tape::{Tape, Var};

use thiserror::Error;

/// Smallest denominator magnitude accepted by guarded division.
pub const DEFAULT_RATIO_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("backward: output must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("backward: variable {0} is not a leaf of this tape")]
    NotOnTape(usize),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` and is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::InvalidShape {
                shape,
                reason: "dimensions must be positive".into(),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                reason: format!("expected {expected} values, got {}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(Vec::new(), vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        assert!(shape.iter().all(|&d| d > 0), "dimensions must be positive");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Internal constructor for results that are finite by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    /// Internal constructor for freshly computed values that may have overflowed.
    pub(crate) fn checked(op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        self.is_scalar().then(|| self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor::checked(op, self.shape.clone(), data)
    }

    fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Self> {
        Tensor::checked(op, self.shape.clone(), self.data.iter().map(|&a| f(a)).collect())
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    /// Elementwise division with the default denominator guard.
    pub fn div(&self, other: &Tensor) -> Result<Self> {
        self.div_guarded(other, DEFAULT_RATIO_GUARD)
    }

    /// Elementwise `a / guard(b)` where `guard(b) = sign(b) * max(|b|, guard)`
    /// and a zero denominator is treated as positive.
    pub fn div_guarded(&self, other: &Tensor, guard: f64) -> Result<Self> {
        check_guard("div", guard)?;
        self.zip_with(other, "div", |a, b| a / guard_denominator(b, guard))
    }

    pub fn scale(&self, factor: f64) -> Result<Self> {
        self.map("scale", |a| a * factor)
    }

    pub fn abs(&self) -> Result<Self> {
        self.map("abs", f64::abs)
    }

    /// Elementwise sign with `sign(0) = 0`.
    pub fn sign(&self) -> Result<Self> {
        self.map("sign", sign)
    }

    pub fn relu(&self) -> Result<Self> {
        self.map("relu", |a| a.max(0.0))
    }

    pub fn clip(&self, lo: f64, hi: f64) -> Result<Self> {
        check_clip(lo, hi)?;
        self.map("clip", |a| a.clamp(lo, hi))
    }

    /// Sum over all elements (`axis = None`) or along one axis.
    pub fn sum(&self, axis: Option<usize>) -> Result<Self> {
        match axis {
            None => Tensor::checked("sum", Vec::new(), vec![self.data.iter().sum()]),
            Some(axis) => self.reduce_axis(axis, "sum", |vals| vals.iter().sum()),
        }
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Self> {
        match axis {
            None => {
                let n = self.data.len() as f64;
                Tensor::checked("mean", Vec::new(), vec![self.data.iter().sum::<f64>() / n])
            }
            Some(axis) => self.reduce_axis(axis, "mean", |vals| {
                vals.iter().sum::<f64>() / vals.len() as f64
            }),
        }
    }

    pub fn l2_norm_squared(&self) -> Result<f64> {
        let v: f64 = self.data.iter().map(|a| a * a).sum();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite { op: "l2_norm_squared" })
        }
    }

    /// Index of the largest element in row-major order; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    /// Row-wise argmax of a rank-2 tensor.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "argmax_rows",
                reason: format!("expected rank 2, got shape {:?}", self.shape),
            });
        }
        Ok(self.data.chunks(self.shape[1]).map(argmax).collect())
    }

    fn reduce_axis(&self, axis: usize, op: &'static str, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        if axis >= self.rank() {
            return Err(TensorError::InvalidArgument {
                op,
                reason: format!("axis {axis} out of range for shape {:?}", self.shape),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        let mut lane = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (k, slot) in lane.iter_mut().enumerate() {
                    *slot = self.data[(o * len + k) * inner + i];
                }
                out.push(f(&lane));
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Tensor::checked(op, shape, out)
    }

    /// Numerically stable softmax of a rank-1 tensor.
    pub fn softmax(&self) -> Result<Self> {
        Tensor::checked("softmax", self.shape.clone(), softmax(&self.data))
    }

    /// `-log softmax(self)[label]` for a rank-1 logits tensor.
    pub fn softmax_cross_entropy(&self, label: usize) -> Result<f64> {
        if self.rank() > 1 {
            return Err(TensorError::InvalidArgument {
                op: "softmax_cross_entropy",
                reason: format!("expected a logits vector, got shape {:?}", self.shape),
            });
        }
        if label >= self.data.len() {
            return Err(TensorError::InvalidArgument {
                op: "softmax_cross_entropy",
                reason: format!("label {label} out of range for {} logits", self.data.len()),
            });
        }
        Ok(cross_entropy(&self.data, label))
    }

    /// L-infinity distance between two tensors of equal shape.
    pub fn linf_distance(&self, other: &Tensor) -> Result<f64> {
        let d = self.sub(other)?;
        Ok(d.data.iter().fold(0.0, |m, v| m.max(v.abs())))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items.first().ok_or(TensorError::InvalidArgument {
            op: "stack",
            reason: "no tensors to stack".into(),
        })?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    left: first.shape.clone(),
                    right: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }

    /// Splits along the leading axis.
    pub fn unstack(&self) -> Vec<Tensor> {
        if self.rank() == 0 {
            return vec![self.clone()];
        }
        let inner = self.shape[1..].to_vec();
        let step = self.data.len() / self.shape[0];
        self.data
            .chunks(step)
            .map(|c| Tensor::from_parts(inner.clone(), c.to_vec()))
            .collect()
    }
}

pub(crate) fn sign(a: f64) -> f64 {
    if a > 0.0 {
        1.0
    } else if a < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn guard_denominator(b: f64, guard: f64) -> f64 {
    if b.abs() >= guard {
        b
    } else if b < 0.0 {
        -guard
    } else {
        guard
    }
}

pub(crate) fn check_guard(op: &'static str, guard: f64) -> Result<()> {
    if guard > 0.0 && guard.is_finite() {
        Ok(())
    } else {
        Err(TensorError::InvalidArgument {
            op,
            reason: format!("guard must be positive and finite, got {guard}"),
        })
    }
}

pub(crate) fn check_clip(lo: f64, hi: f64) -> Result<()> {
    if lo < hi && lo.is_finite() && hi.is_finite() {
        Ok(())
    } else {
        Err(TensorError::InvalidArgument {
            op: "clip",
            reason: format!("requires finite lo < hi, got [{lo}, {hi}]"),
        })
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    log_total - (logits[label] - max)
}
