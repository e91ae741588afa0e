//! L∞-bounded attacks on `[-1, 1]` images.
//!
//! The data-free attack ([`dfp_attack`]) only ever sees the pretrained source
//! model and one clean input. It maximises
//!
//! ```text
//! D(x′) = ‖ |t_l(x)| ⊙ t_l(x) ⊘ t_l(x′) ‖²₂
//! ```
//!
//! by sign ascent on `x′`, with `t_l(x)` frozen at its clean value and the
//! division guarded away from zero. The result steps the full budget from `x`
//! along the sign of the accumulated displacement.
//!
//! FGSM, MI-FGSM and a random-sign control share the same budget contract:
//! every output satisfies `‖x* − x‖∞ ≤ ε` and lies in `[-1, 1]`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelError};
use crate::seed;
use crate::tensor::{Tape, Tensor, TensorError, Var, DEFAULT_RATIO_GUARD};

/// `ε = 10` on the `[0, 255]` pixel scale, expressed in `[-1, 1]` units.
pub const DEFAULT_EPSILON: f64 = 20.0 / 255.0;
pub const DEFAULT_ITERATIONS: usize = 10;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("input pixel {0} outside [-1, 1]")]
    InputOutOfRange(f64),
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("logits length mismatch: {clean} vs {current}")]
    LengthMismatch { clean: usize, current: usize },
    #[error("non-finite value during {0}; check the ratio guard")]
    NonFinite(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(TensorError),
}

impl From<TensorError> for AttackError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { op } => AttackError::NonFinite(op),
            other => AttackError::Tensor(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, AttackError>;

/// Direction of the final full-budget step of [`dfp_attack`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum FinalStepMode {
    /// `x* = clip(x + ε·sign(x′_n − x))`, continuing the ascent.
    #[default]
    #[serde(rename = "forward")]
    Forward,
    /// `x* = clip(x + ε·sign(x − x′_n))`, mirroring the ascent about `x`.
    #[serde(rename = "paper-literal", alias = "paper_literal")]
    Literal,
}

impl FinalStepMode {
    pub fn id(self) -> &'static str {
        match self {
            FinalStepMode::Forward => "forward",
            FinalStepMode::Literal => "paper-literal",
        }
    }
}

impl FromStr for FinalStepMode {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(FinalStepMode::Forward),
            "paper-literal" | "paper_literal" => Ok(FinalStepMode::Literal),
            other => Err(AttackError::InvalidConfig(format!("unknown final step mode {other:?}"))),
        }
    }
}

impl fmt::Display for FinalStepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L∞ budget in `[-1, 1]` pixel units.
    pub epsilon: f64,
    pub iterations: usize,
    pub ratio_guard: f64,
    pub final_step: FinalStepMode,
    /// MI-FGSM decay factor μ.
    pub momentum: f64,
    /// Seed for the random-sign control.
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: DEFAULT_EPSILON,
            iterations: DEFAULT_ITERATIONS,
            ratio_guard: DEFAULT_RATIO_GUARD,
            final_step: FinalStepMode::Forward,
            momentum: 1.0,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            ..AttackConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_epsilon(self.epsilon)?;
        if self.iterations == 0 {
            return Err(AttackError::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(self.ratio_guard > 0.0 && self.ratio_guard.is_finite()) {
            return Err(AttackError::InvalidConfig("ratio_guard must be positive".into()));
        }
        if !(self.momentum >= 0.0 && self.momentum.is_finite()) {
            return Err(AttackError::InvalidConfig("momentum must be non-negative".into()));
        }
        Ok(())
    }

    /// Per-iteration step `ε′ = ε / n`.
    pub fn step_size(&self) -> f64 {
        self.epsilon / self.iterations as f64
    }
}

/// Which attack to run; the ids double as config keys and CLI values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Dfp,
    Fgsm,
    Mifgsm,
    Random,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [AttackKind::Dfp, AttackKind::Fgsm, AttackKind::Mifgsm, AttackKind::Random];

    pub fn id(self) -> &'static str {
        match self {
            AttackKind::Dfp => "dfp",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Mifgsm => "mifgsm",
            AttackKind::Random => "random",
        }
    }
}

impl FromStr for AttackKind {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| AttackError::InvalidConfig(format!("unknown attack id {s:?}")))
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialResult {
    pub adversarial: Tensor,
    /// Objective value at each iterate, starting from the clean input.
    pub objective_trace: Vec<f64>,
    pub linf_distance: f64,
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if (0.0..=2.0).contains(&epsilon) {
        Ok(())
    } else {
        Err(AttackError::InvalidConfig(format!("epsilon {epsilon} outside [0, 2]")))
    }
}

fn check_input(x: &Tensor) -> Result<()> {
    match x.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        Some(&v) => Err(AttackError::InputOutOfRange(v)),
        None => Ok(()),
    }
}

/// `x + step·direction`, clipped to the valid pixel range.
fn signed_step(x: &Tensor, direction: &Tensor, step: f64) -> Result<Tensor> {
    Ok(x.add(&direction.scale(step)?)?.clip(-1.0, 1.0)?)
}

fn finish(x: &Tensor, adversarial: Tensor, objective_trace: Vec<f64>) -> Result<AdversarialResult> {
    let linf_distance = adversarial.linf_distance(x)?;
    Ok(AdversarialResult {
        adversarial,
        objective_trace,
        linf_distance,
    })
}

/// The divergence objective for one pair of logits vectors.
pub fn dfp_objective(clean_logits: &Tensor, current_logits: &Tensor, ratio_guard: f64) -> Result<f64> {
    if clean_logits.shape() != current_logits.shape() {
        return Err(AttackError::LengthMismatch {
            clean: clean_logits.len(),
            current: current_logits.len(),
        });
    }
    let weighted = clean_logits
        .abs()?
        .mul(&clean_logits.div_guarded(current_logits, ratio_guard)?)?;
    Ok(weighted.l2_norm_squared()?)
}

/// The divergence objective recorded on a tape. `clean_logits` should be a
/// constant so no gradient flows into the reference.
pub fn dfp_objective_on_tape<'t>(
    clean_logits: Var<'t>,
    current_logits: Var<'t>,
    ratio_guard: f64,
) -> Result<Var<'t>> {
    let (a, b) = (clean_logits.shape(), current_logits.shape());
    if a != b {
        return Err(AttackError::LengthMismatch {
            clean: a.iter().product(),
            current: b.iter().product(),
        });
    }
    let ratio = clean_logits.div_guarded(&current_logits, ratio_guard)?;
    Ok(clean_logits.abs()?.mul(&ratio)?.l2_norm_squared()?)
}

/// Objective value and its gradient with respect to the input `x′`.
fn dfp_value_and_grad(source: &Model, clean_logits: &Tensor, current: &Tensor, guard: f64) -> Result<(f64, Tensor)> {
    let tape = Tape::new();
    let xv = tape.leaf(current.clone());
    let logits = source.logits_on_tape(&tape, xv)?;
    let reference = tape.constant(clean_logits.clone());
    let objective = dfp_objective_on_tape(reference, logits, guard)?;
    let value = objective.value().item().expect("scalar objective");
    let grad = tape.backward(objective, &[xv])?.remove(0);
    Ok((value, grad))
}

/// Crafts a data-free adversarial example from the pretrained `source` model.
///
/// The signature admits no target model, labels or dataset.
pub fn dfp_attack(source: &Model, x: &Tensor, config: &AttackConfig) -> Result<AdversarialResult> {
    config.validate()?;
    check_input(x)?;
    let guard = config.ratio_guard;
    let step = config.step_size();
    let clean_logits = source.logits(x)?;

    let mut current = x.clone();
    let mut trace = Vec::with_capacity(config.iterations + 1);
    for _ in 0..config.iterations {
        let (value, grad) = dfp_value_and_grad(source, &clean_logits, &current, guard)?;
        trace.push(value);
        current = signed_step(&current, &grad.sign()?, step)?;
    }
    trace.push(dfp_objective(&clean_logits, &source.logits(&current)?, guard)?);

    let direction = match config.final_step {
        FinalStepMode::Forward => current.sub(x)?.sign()?,
        FinalStepMode::Literal => x.sub(&current)?.sign()?,
    };
    let adversarial = signed_step(x, &direction, config.epsilon)?;
    finish(x, adversarial, trace)
}

fn cross_entropy_and_grad(model: &Model, x: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = model.logits_on_tape(&tape, xv)?.softmax_cross_entropy(&[label])?;
    let value = loss.value().item().expect("scalar loss");
    let grad = tape.backward(loss, &[xv])?.remove(0);
    Ok((value, grad))
}

fn cross_entropy(model: &Model, x: &Tensor, label: usize) -> Result<f64> {
    Ok(model.logits(x)?.softmax_cross_entropy(label)?)
}

/// One signed gradient step on the cross-entropy of `model`, which may be the
/// attacked model itself or a surrogate.
pub fn fgsm_attack(model: &Model, x: &Tensor, y_true: usize, epsilon: f64) -> Result<AdversarialResult> {
    check_epsilon(epsilon)?;
    check_input(x)?;
    let (loss, grad) = cross_entropy_and_grad(model, x, y_true)?;
    let adversarial = signed_step(x, &grad.sign()?, epsilon)?;
    let after = cross_entropy(model, &adversarial, y_true)?;
    finish(x, adversarial, vec![loss, after])
}

/// Momentum iterative FGSM: `g ← μ·g + ∇/‖∇‖₁`, `x′ ← clip(x′ + (ε/n)·sign(g))`.
///
/// The L1 norm is floored at [`DEFAULT_RATIO_GUARD`].
pub fn mifgsm_attack(
    model: &Model,
    x: &Tensor,
    y_true: usize,
    epsilon: f64,
    iterations: usize,
    momentum: f64,
) -> Result<AdversarialResult> {
    check_epsilon(epsilon)?;
    check_input(x)?;
    if iterations == 0 {
        return Err(AttackError::InvalidConfig("iterations must be at least 1".into()));
    }
    if !(momentum >= 0.0 && momentum.is_finite()) {
        return Err(AttackError::InvalidConfig("momentum must be non-negative".into()));
    }
    let step = epsilon / iterations as f64;
    let mut current = x.clone();
    let mut velocity = Tensor::zeros(x.shape());
    let mut trace = Vec::with_capacity(iterations + 1);
    for _ in 0..iterations {
        let (loss, grad) = cross_entropy_and_grad(model, &current, y_true)?;
        trace.push(loss);
        let l1: f64 = grad.data().iter().map(|g| g.abs()).sum();
        let normalized = grad.scale(1.0 / l1.max(DEFAULT_RATIO_GUARD))?;
        velocity = velocity.scale(momentum)?.add(&normalized)?;
        current = signed_step(&current, &velocity.sign()?, step)?;
    }
    trace.push(cross_entropy(model, &current, y_true)?);
    finish(x, current, trace)
}

/// Uniform `±ε` noise per pixel, deterministic in `seed`.
pub fn random_sign_attack(x: &Tensor, epsilon: f64, seed: u64) -> Result<AdversarialResult> {
    check_epsilon(epsilon)?;
    check_input(x)?;
    let mut rng = seed::rng(seed);
    let signs: Vec<f64> = (0..x.len())
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let direction = Tensor::new(x.shape().to_vec(), signs)?;
    let adversarial = signed_step(x, &direction, epsilon)?;
    finish(x, adversarial, Vec::new())
}

/// Seed of the random-sign control for the example at `index`.
pub fn random_seed_for(config_seed: u64, index: usize) -> u64 {
    seed::hash64(config_seed, "random-sign", index as u64)
}

/// Runs one attack over many inputs, in order.
///
/// `dfp` crafts with `crafting` as the pretrained source model; `fgsm` and
/// `mifgsm` use it as the gradient model with the given labels.
pub fn craft_many(
    kind: AttackKind,
    crafting: &Model,
    inputs: &[Tensor],
    labels: &[usize],
    config: &AttackConfig,
) -> Result<Vec<AdversarialResult>> {
    if inputs.len() != labels.len() {
        return Err(AttackError::InvalidConfig(format!(
            "{} inputs but {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    inputs
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (x, &y))| match kind {
            AttackKind::Dfp => dfp_attack(crafting, x, config),
            AttackKind::Fgsm => fgsm_attack(crafting, x, y, config.epsilon),
            AttackKind::Mifgsm => mifgsm_attack(crafting, x, y, config.epsilon, config.iterations, config.momentum),
            AttackKind::Random => random_sign_attack(x, config.epsilon, random_seed_for(config.seed, i)),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(d: &[f64]) -> Tensor {
        Tensor::from_vec(d.to_vec()).unwrap()
    }

    #[test]
    fn objective_examples() {
        let t = v(&[1.0, -2.0]);
        assert_eq!(dfp_objective(&t, &t, 1e-8).unwrap(), 5.0);
        assert_eq!(dfp_objective(&t, &v(&[0.5, -1.0]), 1e-8).unwrap(), 20.0);
        assert!(matches!(
            dfp_objective(&t, &v(&[1.0]), 1e-8),
            Err(AttackError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn objective_with_zero_current_logit_is_finite() {
        let t = v(&[1.0, -2.0]);
        let value = dfp_objective(&t, &v(&[0.0, -2.0]), 1e-8).unwrap();
        assert!(value.is_finite());
        assert_eq!(value, 1e16 + 4.0);
    }

    #[test]
    fn config_validation() {
        AttackConfig::default().validate().unwrap();
        assert!((AttackConfig::default().epsilon - 0.078431372549).abs() < 1e-11);
        for bad in [
            AttackConfig::with_epsilon(-0.1),
            AttackConfig::with_epsilon(2.5),
            AttackConfig { iterations: 0, ..Default::default() },
            AttackConfig { ratio_guard: 0.0, ..Default::default() },
            AttackConfig { momentum: -1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn parsing_ids() {
        assert_eq!("mifgsm".parse::<AttackKind>().unwrap(), AttackKind::Mifgsm);
        assert!("pgd".parse::<AttackKind>().is_err());
        assert_eq!("paper-literal".parse::<FinalStepMode>().unwrap(), FinalStepMode::Literal);
    }

    #[test]
    fn random_sign_moves_every_interior_pixel_by_epsilon() {
        let x = Tensor::new(vec![1, 4, 4], (0..16).map(|i| i as f64 / 20.0 - 0.4).collect()).unwrap();
        let r = random_sign_attack(&x, 0.125, 3).unwrap();
        for (a, b) in r.adversarial.data().iter().zip(x.data()) {
            assert!(((a - b).abs() - 0.125).abs() < 1e-15);
        }
        assert_eq!(r, random_sign_attack(&x, 0.125, 3).unwrap());
        assert_ne!(r.adversarial, random_sign_attack(&x, 0.125, 4).unwrap().adversarial);
        assert_eq!(random_sign_attack(&x, 0.0, 3).unwrap().adversarial, x);
    }

    #[test]
    fn out_of_range_input_rejected() {
        let x = v(&[1.5]);
        assert!(matches!(random_sign_attack(&x, 0.1, 0), Err(AttackError::InputOutOfRange(_))));
    }
}
