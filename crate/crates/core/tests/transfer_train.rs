mod common;

use common::{dataset, linear_model, small_domain};
use dfp_lab::data::generate_domain;
use dfp_lab::model::{Architecture, Model, ModelParams, ModelSpec};
use dfp_lab::tensor::Tensor;
use dfp_lab::train::{finetune_from, sgd_momentum_step, train, train_from_scratch, TrainConfig, TrainError};

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.05,
        momentum: 0.9,
        epochs,
        batch_size: 8,
        seed: 4,
    }
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let (train_ds, test_ds) = generate_domain(&small_domain(3, 6, 0.2, 1)).unwrap();
    let model = Model::init(ModelSpec::new(Architecture::NetB, [1, 8, 8], 3).unwrap(), 5).unwrap();
    let (out, history) = train(&model, &train_ds, &test_ds, &config(0)).unwrap();
    assert_eq!(out, model);
    assert!(history.epoch_loss.is_empty());
    assert!(history.test_accuracy.is_empty());
}

#[test]
fn training_is_deterministic_and_records_every_epoch() {
    let (train_ds, test_ds) = generate_domain(&small_domain(3, 10, 0.2, 2)).unwrap();
    let a = train_from_scratch(Architecture::NetA, &train_ds, &test_ds, &config(4), 6).unwrap();
    let b = train_from_scratch(Architecture::NetA, &train_ds, &test_ds, &config(4), 6).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.1.epoch_loss.len(), 4);
    assert_eq!(a.1.test_accuracy.len(), 4);
    assert!(a.1.epoch_loss[3] < a.1.epoch_loss[0]);
}

#[test]
fn finetuning_starts_from_the_copied_backbone() {
    let (src_train, src_test) = generate_domain(&small_domain(4, 6, 0.2, 3)).unwrap();
    let mut target_spec = small_domain(2, 6, 0.2, 4);
    target_spec.first_concept = 4;
    let (tgt_train, tgt_test) = generate_domain(&target_spec).unwrap();
    for arch in [Architecture::NetA, Architecture::NetB] {
        let (source, _) = train_from_scratch(arch, &src_train, &src_test, &config(1), 7).unwrap();
        let (start, _) = finetune_from(&source, &tgt_train, &tgt_test, &config(0), 8).unwrap();
        assert_eq!(start.num_classes(), 2);
        assert_eq!(start.backbone(), source.backbone());
        assert_eq!(start, source.replace_head(2, 8).unwrap());
        let (tuned, _) = finetune_from(&source, &tgt_train, &tgt_test, &config(1), 8).unwrap();
        // Every layer trains, the backbone included.
        assert_ne!(tuned.backbone(), source.backbone());
    }
}

#[test]
fn class_count_mismatch_is_rejected() {
    let (train_ds, test_ds) = generate_domain(&small_domain(3, 4, 0.2, 1)).unwrap();
    let model = Model::init(ModelSpec::new(Architecture::NetA, [1, 8, 8], 5).unwrap(), 0).unwrap();
    assert!(matches!(
        train(&model, &train_ds, &test_ds, &config(1)),
        Err(TrainError::ClassMismatch { model: 5, data: 3 })
    ));
    let bad = TrainConfig {
        momentum: 1.0,
        ..config(1)
    };
    assert!(matches!(
        train(&model, &train_ds, &test_ds, &bad),
        Err(TrainError::InvalidConfig(_))
    ));
}

#[test]
fn momentum_step_matches_hand_computation() {
    let mut p = ModelParams::new();
    p.insert("w", Tensor::from_vec(vec![1.0, -2.0]).unwrap());
    let mut g = ModelParams::new();
    g.insert("w", Tensor::from_vec(vec![0.5, 0.25]).unwrap());
    let mut v = ModelParams::new();
    v.insert("w", Tensor::from_vec(vec![2.0, -1.0]).unwrap());
    let (p2, v2) = sgd_momentum_step(&p, &g, &v, 0.1, 0.5).unwrap();
    // v' = 0.5·v + g, p' = p − 0.1·v'
    assert_eq!(v2.get("w").unwrap().data(), &[1.5, -0.25]);
    assert_eq!(p2.get("w").unwrap().data(), &[1.0 - 0.15, -2.0 + 0.025]);
}

/// Softmax cross-entropy gradient of a dense layer, written out by hand.
fn hand_gradient(w: &[[f64; 2]; 2], b: &[f64; 2], xs: &[[f64; 2]], ys: &[usize]) -> ([[f64; 2]; 2], [f64; 2]) {
    let mut gw = [[0.0; 2]; 2];
    let mut gb = [0.0; 2];
    for (x, &y) in xs.iter().zip(ys) {
        let z: Vec<f64> = (0..2).map(|j| x[0] * w[0][j] + x[1] * w[1][j] + b[j]).collect();
        let m = z[0].max(z[1]);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s = e[0] + e[1];
        for j in 0..2 {
            let d = e[j] / s - if j == y { 1.0 } else { 0.0 };
            gb[j] += d / xs.len() as f64;
            for i in 0..2 {
                gw[i][j] += x[i] * d / xs.len() as f64;
            }
        }
    }
    (gw, gb)
}

#[test]
fn one_full_batch_epoch_is_one_gradient_step() {
    let w = [[0.3, -0.2], [0.1, 0.4]];
    let b = [0.05, -0.05];
    let model = linear_model([2, 1, 1], w.iter().map(|r| r.to_vec()).collect(), b.to_vec());
    let xs = [[0.5, -1.0], [-0.25, 0.75], [1.0, 0.2]];
    let ys = [0, 1, 1];
    let mut spec = small_domain(2, 3, 0.0, 0);
    // Two inputs as the two channels of a 1×1 image.
    spec.image_side = 1;
    spec.channels = 2;
    let inputs: Vec<Tensor> = xs.iter().map(|x| Tensor::new(vec![2, 1, 1], x.to_vec()).unwrap()).collect();
    let ds = dataset(&spec, inputs, ys.to_vec());
    let lr = 0.2;
    let cfg = TrainConfig {
        learning_rate: lr,
        momentum: 0.0,
        epochs: 1,
        batch_size: 3,
        seed: 0,
    };
    let (out, _) = train(&model, &ds, &ds, &cfg).unwrap();
    let (gw, gb) = hand_gradient(&w, &b, &xs, &ys);
    let got_w = out.params.get("head.weight").unwrap().data();
    let got_b = out.params.get("head.bias").unwrap().data();
    for i in 0..2 {
        for j in 0..2 {
            assert!((got_w[i * 2 + j] - (w[i][j] - lr * gw[i][j])).abs() <= 1e-12);
        }
        assert!((got_b[i] - (b[i] - lr * gb[i])).abs() <= 1e-12);
    }
}
