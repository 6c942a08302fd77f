//! SE Norm statistics and the ranges of the scale and shift blocks.

mod common;

use common::{normal, rng, uniform};
use rand::Rng;
use seunet::senorm::{normalize, se_block, se_norm, SeActivation, SeBlockParams, SeNormParams};
use seunet::Tensor;

fn channel_moments(y: &Tensor<f64>) -> Vec<(f64, f64)> {
    let s = y.shape();
    let (n, c, vox) = (s[0], s[1], s[2] * s[3] * s[4]);
    let d = y.data();
    let mut out = Vec::new();
    for i in 0..n * c {
        let ch = &d[i * vox..(i + 1) * vox];
        let m = ch.iter().sum::<f64>() / vox as f64;
        let v = ch.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vox as f64;
        out.push((m, v.sqrt()));
    }
    out
}

fn random_block(r: &mut rand_chacha::ChaCha8Rng, c: usize, act: SeActivation, scale: f64) -> SeBlockParams<f64> {
    let h = c / 2;
    SeBlockParams {
        w1: uniform(r, &[h, c], -scale, scale),
        b1: uniform(r, &[h], -scale, scale),
        w2: uniform(r, &[c, h], -scale, scale),
        b2: uniform(r, &[c], -scale, scale),
        activation: act,
    }
}

#[test]
fn normalized_channels_have_zero_mean_unit_std() {
    let mut r = rng(5);
    for _ in 0..20 {
        let shift = r.random_range(-50.0..50.0);
        let scale = r.random_range(0.5..20.0);
        let x = normal(&mut r, &[2, 4, 6, 5, 7]).scale(scale).add_scalar(shift);
        for (m, s) in channel_moments(&normalize(&x, 1e-5).unwrap()) {
            assert!(m.abs() < 1e-5, "mean {m}");
            assert!((s - 1.0).abs() < 1e-3, "std {s}");
        }
    }
}

#[test]
fn gamma_and_beta_stay_in_range() {
    let mut r = rng(6);
    for trial in 0..50 {
        let weight = if trial % 5 == 0 { 50.0 } else { 2.0 };
        let x = normal(&mut r, &[2, 8, 3, 4, 5]).scale(r.random_range(0.1..100.0));
        let g = se_block(&x, &random_block(&mut r, 8, SeActivation::Sigmoid, weight)).unwrap();
        let b = se_block(&x, &random_block(&mut r, 8, SeActivation::Tanh, weight)).unwrap();
        assert_eq!(g.shape(), &[2, 8]);
        assert!(g.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(b.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }
    // Moderate inputs keep the ranges open.
    let x = normal(&mut r, &[1, 4, 4, 4, 4]);
    let g = se_block(&x, &random_block(&mut r, 4, SeActivation::Sigmoid, 1.0)).unwrap();
    let b = se_block(&x, &random_block(&mut r, 4, SeActivation::Tanh, 1.0)).unwrap();
    assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(b.data().iter().all(|&v| v > -1.0 && v < 1.0));
}

#[test]
fn zero_weight_blocks_are_exactly_half_and_zero() {
    let mut r = rng(7);
    let x = normal(&mut r, &[2, 6, 3, 3, 3]).scale(30.0);
    let p = SeNormParams::<f64>::zeros(6, 2).unwrap();
    assert!(se_block(&x, &p.gamma).unwrap().data().iter().all(|&v| v == 0.5));
    assert!(se_block(&x, &p.beta).unwrap().data().iter().all(|&v| v == 0.0));
    let y = se_norm(&x, &p).unwrap();
    let n = normalize(&x, p.eps).unwrap();
    for (a, b) in y.data().iter().zip(n.data()) {
        assert_eq!(*a, 0.5 * b);
    }
}

#[test]
fn se_norm_applies_per_channel_affine() {
    let mut r = rng(8);
    let x = normal(&mut r, &[1, 4, 3, 4, 2]);
    let p = SeNormParams {
        gamma: random_block(&mut r, 4, SeActivation::Sigmoid, 1.0),
        beta: random_block(&mut r, 4, SeActivation::Tanh, 1.0),
        eps: 1e-5,
    };
    let g = se_block(&x, &p.gamma).unwrap();
    let b = se_block(&x, &p.beta).unwrap();
    let y = se_norm(&x, &p).unwrap();
    for (c, (m, s)) in channel_moments(&y).into_iter().enumerate() {
        assert!((m - b.data()[c]).abs() < 1e-9);
        assert!((s - g.data()[c]).abs() < 1e-4);
    }
}
