mod common;

use common::{rng, uniform};
use dfp_lab::tensor::{conv2d, matmul, Tensor, TensorError};
use proptest::prelude::*;
use twofloat::TwoFloat;

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn direct_conv(x: &Tensor, w: &Tensor, stride: usize) -> (Vec<usize>, Vec<f64>) {
    let [n, c, h, wd] = x.shape() else { panic!() };
    let [o, c2, kh, kw] = w.shape() else { panic!() };
    assert_eq!(c, c2);
    let oh = (h - kh) / stride + 1;
    let ow = (wd - kw) / stride + 1;
    let xi = |b: usize, ch: usize, y: usize, xx: usize| x.data()[((b * c + ch) * h + y) * wd + xx];
    let wi = |oc: usize, ch: usize, y: usize, xx: usize| w.data()[((oc * c + ch) * kh + y) * kw + xx];
    let mut out = Vec::new();
    for b in 0..*n {
        for oc in 0..*o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..*c {
                        for ky in 0..*kh {
                            for kx in 0..*kw {
                                acc += xi(b, ch, y * stride + ky, xx * stride + kx) * wi(oc, ch, ky, kx);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (vec![*n, *o, oh, ow], out)
}

#[test]
fn matmul_matches_triple_loop_exactly() {
    let mut r = rng(1);
    let a = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let b = uniform(&mut r, &[4, 2], -2.0, 2.0);
    let c = matmul(&a, &b).unwrap();
    assert_eq!(c.shape(), &[3, 2]);
    assert_eq!(c.data(), triple_loop(&a, &b).as_slice());
}

#[test]
fn conv_matches_direct_summation() {
    let mut r = rng(2);
    let x = uniform(&mut r, &[1, 2, 5, 5], -1.0, 1.0);
    let w = uniform(&mut r, &[3, 2, 2, 2], -1.0, 1.0);
    let y = conv2d(&x, &w, 1).unwrap();
    let (shape, expected) = direct_conv(&x, &w, 1);
    assert_eq!(y.shape(), shape.as_slice());
    for (a, b) in y.data().iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

/// log-sum-exp minus the label logit, in double-double arithmetic.
fn cross_entropy_oracle(logits: &[f64], label: usize) -> f64 {
    let sum = logits
        .iter()
        .map(|&z| TwoFloat::from(z).exp())
        .fold(TwoFloat::from(0.0), |a, b| a + b);
    let loss = sum.ln() - TwoFloat::from(logits[label]);
    loss.hi() + loss.lo()
}

#[test]
fn cross_entropy_matches_extended_precision() {
    let mut r = rng(3);
    for case in 0..20 {
        let z = uniform(&mut r, &[5], -6.0, 6.0);
        let label = case % 5;
        let got = z.softmax_cross_entropy(label).unwrap();
        let want = cross_entropy_oracle(z.data(), label);
        assert!((got - want).abs() <= 1e-10, "case {case}: {got} vs {want}");
    }
}

#[test]
fn cross_entropy_stays_finite_for_large_logits() {
    let z = Tensor::from_vec(vec![1000.0, 0.0, -1000.0]).unwrap();
    assert_eq!(z.softmax_cross_entropy(0).unwrap(), 0.0);
    assert!((z.softmax_cross_entropy(1).unwrap() - 1000.0).abs() < 1e-9);
}

#[test]
fn operations_are_bit_deterministic() {
    let mut r = rng(4);
    let x = uniform(&mut r, &[2, 3, 7, 7], -1.0, 1.0);
    let w = uniform(&mut r, &[4, 3, 3, 3], -1.0, 1.0);
    assert_eq!(conv2d(&x, &w, 2).unwrap(), conv2d(&x, &w, 2).unwrap());
    let a = uniform(&mut r, &[6, 5], -1.0, 1.0);
    let b = uniform(&mut r, &[5, 4], -1.0, 1.0);
    assert_eq!(matmul(&a, &b).unwrap(), matmul(&a, &b).unwrap());
}

#[test]
fn guarded_division_never_uses_small_denominators() {
    let num = Tensor::from_vec(vec![1.0, 1.0, 1.0, -1.0]).unwrap();
    let den = Tensor::from_vec(vec![0.0, 1e-12, -1e-12, 0.5]).unwrap();
    let q = num.div_guarded(&den, 1e-8).unwrap();
    assert_eq!(q.data(), &[1e8, 1e8, -1e8, -2.0]);
}

#[test]
fn errors_are_typed() {
    let a = Tensor::zeros(&[2, 3]);
    assert!(matches!(matmul(&a, &a), Err(TensorError::ShapeMismatch { .. })));
    assert!(matches!(a.clip(1.0, -1.0), Err(TensorError::InvalidArgument { .. })));
    assert!(matches!(
        Tensor::new(vec![2], vec![1.0, f64::NAN]),
        Err(TensorError::NonFinite { .. })
    ));
    let big = Tensor::from_vec(vec![1e308]).unwrap();
    assert!(matches!(big.add(&big), Err(TensorError::NonFinite { .. })));
}

proptest! {
    #[test]
    fn matmul_is_the_triple_loop(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform(&mut r, &[m, k], -3.0, 3.0);
        let b = uniform(&mut r, &[k, n], -3.0, 3.0);
        let c = matmul(&a, &b).unwrap();
        let want = triple_loop(&a, &b);
        prop_assert_eq!(c.data(), want.as_slice());
    }

    #[test]
    fn conv_is_direct_summation(
        c in 1usize..3, o in 1usize..4, k in 1usize..4, extra in 0usize..5, stride in 1usize..3, seed in any::<u64>()
    ) {
        let mut r = rng(seed);
        let side = k + extra;
        let x = uniform(&mut r, &[2, c, side, side], -1.0, 1.0);
        let w = uniform(&mut r, &[o, c, k, k], -1.0, 1.0);
        let y = conv2d(&x, &w, stride).unwrap();
        let (shape, expected) = direct_conv(&x, &w, stride);
        prop_assert_eq!(y.shape(), shape.as_slice());
        for (a, b) in y.data().iter().zip(&expected) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one(seed in any::<u64>(), n in 1usize..12, scale in 0.1f64..50.0) {
        let mut r = rng(seed);
        let z = uniform(&mut r, &[n], -scale, scale);
        let p = z.softmax().unwrap();
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn clip_bounds_and_sign_values(seed in any::<u64>(), n in 1usize..20) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[n], -3.0, 3.0);
        prop_assert!(x.clip(-1.0, 1.0).unwrap().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert!(x.sign().unwrap().data().iter().all(|v| [-1.0, 0.0, 1.0].contains(v)));
        let back = Tensor::stack(&x.reshape(&[n, 1]).unwrap().unstack()).unwrap();
        prop_assert_eq!(back.reshape(&[n]).unwrap(), x);
    }
}
