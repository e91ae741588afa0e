// Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use dfp_lab::data::{DomainSpec, LabeledDataset, Split};
use dfp_lab::model::{Architecture, Model, ModelParams, ModelSpec};
use dfp_lab::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Relative errors are measured against max(|autodiff|, |numeric|, this).
pub const RELATIVE_FLOOR: f64 = 1e-6;
/// Smallest |t′| at which the divergence gradient is checked numerically.
pub const POLE_MARGIN: f64 = 0.03;

pub fn rng(seed: u64) -> ChaCha8Rng {
    dfp_lab::seed::rng(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform values with magnitude at least `margin`, for ops with a kink at 0.
pub fn uniform_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], hi: f64, margin: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(margin..hi);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn with_data(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn finite_difference(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut plus = x.data().to_vec();
            let mut minus = x.data().to_vec();
            plus[i] += FD_STEP;
            minus[i] -= FD_STEP;
            (f(&with_data(x, plus)) - f(&with_data(x, minus))) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Default-shaped images with random pixels in [-1, 1].
pub fn random_image(rng: &mut ChaCha8Rng) -> Tensor {
    uniform(rng, &[1, 16, 16], -1.0, 1.0)
}

/// Randomly initialised model on 16×16×1 inputs.
pub fn random_model(arch: Architecture, classes: usize, seed: u64) -> Model {
    Model::init(ModelSpec::new(arch, [1, 16, 16], classes).unwrap(), seed).unwrap()
}

/// Single dense layer with the given `[inputs, outputs]` weight and bias.
pub fn linear_model(input_shape: [usize; 3], weight: Vec<Vec<f64>>, bias: Vec<f64>) -> Model {
    let inputs = weight.len();
    let outputs = bias.len();
    let spec = ModelSpec::new(Architecture::Linear, input_shape, outputs).unwrap();
    let mut params = ModelParams::new();
    params.insert(
        "head.weight",
        Tensor::new(vec![inputs, outputs], weight.into_iter().flatten().collect()).unwrap(),
    );
    params.insert("head.bias", Tensor::new(vec![outputs], bias).unwrap());
    Model::new(spec, params).unwrap()
}

pub fn small_domain(classes: usize, per_class: usize, noise_std: f64, seed: u64) -> DomainSpec {
    DomainSpec {
        domain_id: format!("small-{classes}"),
        num_classes: classes,
        image_side: 8,
        channels: 1,
        samples_per_class: per_class,
        test_per_class: per_class,
        noise_std,
        seed,
        first_concept: 0,
    }
}

pub fn dataset(spec: &DomainSpec, inputs: Vec<Tensor>, labels: Vec<usize>) -> LabeledDataset {
    LabeledDataset::new(spec.clone(), Split::Test, inputs, labels).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckedLoss {
    Divergence,
    CrossEntropy,
}

#[derive(Debug, Clone)]
pub struct GradientCheck {
    pub architecture: Architecture,
    pub loss: CheckedLoss,
    pub max_relative_error: f64,
    /// Coordinates with a kink on both sides of the stencil.
    pub skipped_coordinates: usize,
}

/// Signs of every hidden pre-activation, recomputed layer by layer.
pub fn activation_pattern(model: &Model, x: &Tensor) -> Vec<bool> {
    use dfp_lab::model::LayerKind;
    use dfp_lab::tensor::{conv2d, matmul};

    let layers = model.spec.layers();
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let mut h = x.reshape(&shape).unwrap();
    let mut pattern = Vec::new();
    for layer in &layers[..layers.len() - 1] {
        let w = model.params.get(&layer.weight_name()).unwrap();
        let b = model.params.get(&layer.bias_name()).unwrap();
        let (pre, per_channel) = match layer.kind {
            LayerKind::Conv { stride, .. } => {
                let y = conv2d(&h, w, stride).unwrap();
                let area = y.shape()[2] * y.shape()[3];
                (y, area)
            }
            LayerKind::Dense { inputs, .. } => (matmul(&h.reshape(&[1, inputs]).unwrap(), w).unwrap(), 1),
        };
        let data: Vec<f64> = pre
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[(i / per_channel) % b.len()])
            .collect();
        pattern.extend(data.iter().map(|&v| v > 0.0));
        h = with_data(&pre, data).relu().unwrap();
    }
    pattern
}

/// Finite differences that respect ReLU kinks: where the central stencil
/// changes the activation pattern, a second-order one-sided stencil on the
/// unchanged side is used instead. Coordinates with a kink within 2h on both
/// sides come back as `None`.
pub fn piecewise_finite_difference(
    x: &Tensor,
    f: impl Fn(&Tensor) -> f64,
    pattern: impl Fn(&Tensor) -> Vec<bool>,
) -> Vec<Option<f64>> {
    let centre = pattern(x);
    let at = |i: usize, steps: f64| {
        let mut d = x.data().to_vec();
        d[i] += steps * FD_STEP;
        with_data(x, d)
    };
    let same = |i: usize, steps: &[f64]| steps.iter().all(|&s| pattern(&at(i, s)) == centre);
    (0..x.len())
        .map(|i| {
            if same(i, &[1.0, -1.0]) {
                Some((f(&at(i, 1.0)) - f(&at(i, -1.0))) / (2.0 * FD_STEP))
            } else if same(i, &[1.0, 2.0]) {
                Some((-3.0 * f(x) + 4.0 * f(&at(i, 1.0)) - f(&at(i, 2.0))) / (2.0 * FD_STEP))
            } else if same(i, &[-1.0, -2.0]) {
                Some((3.0 * f(x) - 4.0 * f(&at(i, -1.0)) + f(&at(i, -2.0))) / (2.0 * FD_STEP))
            } else {
                None
            }
        })
        .collect()
}

/// One seeded input-gradient check through a randomly initialised default
/// model: the seed picks the architecture and the loss.
pub fn gradient_check(seed: u64) -> GradientCheck {
    use dfp_lab::attacks::{dfp_objective, dfp_objective_on_tape};
    use dfp_lab::tensor::Tape;

    let architecture = if seed.is_multiple_of(2) { Architecture::NetA } else { Architecture::NetB };
    let loss = if (seed / 2).is_multiple_of(2) { CheckedLoss::Divergence } else { CheckedLoss::CrossEntropy };
    let mut r = rng(seed);
    let model = random_model(architecture, 10, 7000 + seed);
    let label = r.random_range(0..10);
    // The divergence is checked at a point x′ near x, as during the ascent,
    // with every logit at x′ kept away from the pole of the ratio.
    let (x, at) = (0..10_000)
        .map(|_| {
            let x = random_image(&mut r);
            let at = x.add(&uniform(&mut r, x.shape(), -0.05, 0.05)).unwrap();
            (x, at)
        })
        .find(|(_, at)| {
            loss == CheckedLoss::CrossEntropy
                || model.logits(at).unwrap().data().iter().all(|v| v.abs() >= POLE_MARGIN)
        })
        .expect("no check point away from the pole");
    let clean = model.logits(&x).unwrap();
    let value = |p: &Tensor| match loss {
        CheckedLoss::Divergence => dfp_objective(&clean, &model.logits(p).unwrap(), 1e-8).unwrap(),
        CheckedLoss::CrossEntropy => model.logits(p).unwrap().softmax_cross_entropy(label).unwrap(),
    };
    let tape = Tape::new();
    let xv = tape.leaf(at.clone());
    let logits = model.logits_on_tape(&tape, xv).unwrap();
    let out = match loss {
        CheckedLoss::Divergence => dfp_objective_on_tape(tape.constant(clean.clone()), logits, 1e-8).unwrap(),
        CheckedLoss::CrossEntropy => logits.softmax_cross_entropy(&[label]).unwrap(),
    };
    let analytic = tape.backward(out, &[xv]).unwrap().remove(0);
    let numeric = piecewise_finite_difference(&at, value, |p| activation_pattern(&model, p));
    let mut max_error = 0.0f64;
    let mut skipped = 0;
    for (a, n) in analytic.data().iter().zip(&numeric) {
        match n {
            Some(n) => max_error = max_error.max(relative_error(*a, *n)),
            None => skipped += 1,
        }
    }
    GradientCheck {
        architecture,
        loss,
        max_relative_error: max_error,
        skipped_coordinates: skipped,
    }
}

/// Crafts one example with `kind` and checks the L∞ budget and pixel range.
/// Returns a description of the violation, if any.
pub fn budget_violation(
    kind: dfp_lab::attacks::AttackKind,
    architecture: Architecture,
    epsilon: f64,
    iterations: usize,
    seed: u64,
) -> Option<String> {
    use dfp_lab::attacks::{craft_many, AttackConfig};

    let mut r = rng(seed);
    let spec = ModelSpec::new(architecture, [1, 8, 8], 3).unwrap();
    let model = Model::init(spec, seed).unwrap();
    // Saturated pixels exercise the clipping.
    let data = (0..64)
        .map(|_| match r.random_range(0..6) {
            0 => -1.0,
            1 => 1.0,
            _ => r.random_range(-1.0..=1.0),
        })
        .collect();
    let x = Tensor::new(vec![1, 8, 8], data).unwrap();
    let config = AttackConfig {
        epsilon,
        iterations,
        seed,
        ..AttackConfig::default()
    };
    let label = r.random_range(0..3);
    let out = craft_many(kind, &model, std::slice::from_ref(&x), &[label], &config).unwrap().remove(0);
    let distance = out.adversarial.linf_distance(&x).unwrap();
    if distance > epsilon + 1e-9 {
        return Some(format!("{kind}: L∞ {distance} exceeds ε {epsilon}"));
    }
    if let Some(v) = out.adversarial.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Some(format!("{kind}: pixel {v} outside [-1, 1]"));
    }
    None
}

/// Runs every stage of the default experiment with `seed` into `out_dir`.
pub fn default_run(seed: u64, out_dir: &std::path::Path) -> dfp_lab::pipeline::Evaluation {
    let config = dfp_lab::config::ExperimentConfig {
        seed,
        out_dir: out_dir.to_path_buf(),
        ..Default::default()
    };
    dfp_lab::pipeline::full_run(&config).unwrap();
    dfp_lab::pipeline::load_evaluation(out_dir).unwrap()
}

/// Outcome of one experiment-level property, with the numbers behind it.
#[derive(Debug, Clone)]
pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn from_parts(parts: Vec<(bool, String)>) -> Check {
        Check {
            pass: !parts.is_empty() && parts.iter().all(|(ok, _)| *ok),
            detail: parts.into_iter().map(|(_, d)| d).collect::<Vec<_>>().join("; "),
        }
    }
}

/// Fraction of DFP traces whose final objective beats the initial one.
pub fn check_ascent(ev: &dfp_lab::pipeline::Evaluation, min_fraction: f64) -> Check {
    Check::from_parts(
        ev.ascent
            .iter()
            .map(|a| (a.fraction_increased >= min_fraction, format!("{} {:.4}", a.pretrained, a.fraction_increased)))
            .collect(),
    )
}

/// DFP fooling rate above the random-sign control on every fine-tuned model.
pub fn check_dfp_beats_random(ev: &dfp_lab::pipeline::Evaluation) -> Check {
    Check::from_parts(
        ev.table1
            .iter()
            .map(|row| {
                let dfp = row.fooling_rates["dfp"];
                let random = row.fooling_rates["random"];
                (dfp > random, format!("{} dfp {dfp:.4} vs random {random:.4}", row.model))
            })
            .collect(),
    )
}

pub fn check_transfer_structure(ev: &dfp_lab::pipeline::Evaluation) -> Check {
    let m = ev.transfer_matrix.as_ref().expect("dfp ran");
    let (diag, off) = (m.mean_diagonal(), m.mean_off_diagonal().expect("two architectures"));
    Check {
        pass: diag > off,
        detail: format!("diagonal {diag:.4} vs off-diagonal {off:.4}"),
    }
}

/// Every target category's most frequent source class beats chance.
pub fn check_mapping(ev: &dfp_lab::pipeline::Evaluation) -> Check {
    Check::from_parts(
        ev.mapping
            .iter()
            .map(|e| {
                let chance = 1.0 / e.histogram.source_classes as f64;
                let min = e.histogram.categories.iter().map(|c| c.max_frequency).fold(f64::INFINITY, f64::min);
                (min > chance, format!("{} min max-frequency {min:.4} vs chance {chance:.4}", e.pretrained))
            })
            .collect(),
    )
}

fn divergence(ev: &dfp_lab::pipeline::Evaluation, pretrained: &str) -> (dfp_lab::eval::DivergenceSummary, dfp_lab::eval::DivergenceSummary) {
    use dfp_lab::attacks::AttackKind;
    (
        ev.logits_entry(pretrained, AttackKind::Dfp).expect("dfp logits").summary.clone(),
        ev.logits_entry(pretrained, AttackKind::Random).expect("random logits").summary.clone(),
    )
}

/// Mean cosine similarity of clean and perturbed logits, DFP below random.
pub fn check_cosine(ev: &dfp_lab::pipeline::Evaluation) -> Check {
    Check::from_parts(
        ev.mapping
            .iter()
            .map(|e| {
                let (dfp, random) = divergence(ev, &e.pretrained);
                (
                    dfp.mean_cosine_similarity < random.mean_cosine_similarity,
                    format!(
                        "{} cosine dfp {:.4} vs random {:.4}",
                        e.pretrained, dfp.mean_cosine_similarity, random.mean_cosine_similarity
                    ),
                )
            })
            .collect(),
    )
}

/// Mean logits L2 shift under DFP at least `factor` times the random one.
pub fn check_l2_factor(ev: &dfp_lab::pipeline::Evaluation, factor: f64) -> Check {
    Check::from_parts(
        ev.mapping
            .iter()
            .map(|e| {
                let (dfp, random) = divergence(ev, &e.pretrained);
                let ratio = dfp.mean_l2_distance / random.mean_l2_distance;
                (ratio >= factor, format!("{} L2 ratio {ratio:.2}", e.pretrained))
            })
            .collect(),
    )
}

/// Fine-tuned accuracy at least the from-scratch accuracy.
pub fn check_transfer_premise(ev: &dfp_lab::pipeline::Evaluation) -> Check {
    Check::from_parts(
        ev.training
            .iter()
            .map(|t| {
                (
                    t.finetuned_accuracy >= t.scratch_accuracy,
                    format!("{} fine-tuned {:.4} vs scratch {:.4}", t.architecture, t.finetuned_accuracy, t.scratch_accuracy),
                )
            })
            .collect(),
    )
}
