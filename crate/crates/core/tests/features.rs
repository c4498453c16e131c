mod common;

use istseg::features::{extract_features, fcc_loss, fcc_loss_with_grad, FeatureConfig, FeatureExtractor};
use istseg::metrics::NlccConfig;
use istseg::pipeline::synth_phantom;
use istseg::{Dims, ScalarField};
use rand::Rng;

/// fcc between a seeded phantom and its squared copy, pinned as a golden.
const SQUARED_REMAP_GOLDEN: f64 = -0.9347709825184454;

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn default_bank_has_nine_channels_and_is_deterministic() {
    let img = common::smooth_field(Dims::new_2d(24, 20), 1);
    let f = extract_features(&img);
    assert_eq!(f.num_channels(), 9);
    assert_eq!(f.dims(), img.dims());
    assert_eq!(f, extract_features(&img));
}

#[test]
fn shift_and_scale_invariance() {
    let img = common::smooth_field(Dims::new(16, 14, 6), 2);
    let base = extract_features(&img);
    let shifted = extract_features(&img.map(|v| v + 3.7));
    assert!(max_diff(base.channels(), shifted.channels()) < 1e-5);
    for a in [0.2, 2.5, 40.0] {
        let scaled = extract_features(&img.map(|v| a * v));
        assert!(max_diff(base.channels(), scaled.channels()) < 1e-5, "scale {a}");
    }
}

#[test]
fn constant_image_gives_zero_features() {
    let f = extract_features(&ScalarField::<f64>::filled(Dims::new(10, 9, 4), 0.8));
    let worst = f.channels().iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())); assert!(worst < 1e-9, "{worst}");
}

#[test]
fn tape_backward_matches_differences() {
    let dims = Dims::new_2d(12, 11);
    let img = common::smooth_field(dims, 3).map(|v| v + 0.1 * v * v);
    let ex = FeatureExtractor::new(FeatureConfig {
        sigmas: vec![1.0, 2.0],
        zscore_window: 4,
    });
    let mut r = common::rng(4);
    let weights: Vec<Vec<f64>> = (0..ex.num_channels())
        .map(|_| (0..dims.len()).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    let objective = |data: &[f64]| -> f64 {
        let f = ex.extract(&ScalarField::new(dims, data.to_vec()).unwrap());
        f.channels().iter().zip(&weights).map(|(c, w)| c.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()).sum()
    };
    let (_, tape) = ex.extract_with_tape(&img);
    let analytic = tape.backward(&weights);
    let mut data = img.data().to_vec();
    let numeric: Vec<f64> = (0..data.len()).map(|i| common::central_diff(&mut data, i, 1e-6, objective)).collect();
    let err = common::max_rel_err(&analytic, &numeric);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn fcc_of_identical_stacks_is_minus_one() {
    let mut r = common::rng(5);
    let (img, _) = synth_phantom::<f64, _>(&mut r, &common::small_phantom_config(32)).unwrap();
    let f = extract_features(&img);
    let v = fcc_loss(&f, &f, &NlccConfig::default()).unwrap();
    assert!((v + 1.0).abs() < 1e-6, "{v}");
}

#[test]
fn fcc_sees_through_intensity_remapping() {
    let mut r = common::rng(6);
    let (img, _) = synth_phantom::<f64, _>(&mut r, &common::small_phantom_config(48)).unwrap();
    let positive = img.map(|v| v.max(0.0) + 0.05);
    let squared = positive.map(|v| v * v);
    let v = fcc_loss(&extract_features(&positive), &extract_features(&squared), &NlccConfig::default()).unwrap();
    println!("squared-remap fcc = {v:?}");
    assert!(v < -0.8);
    assert!((v - SQUARED_REMAP_GOLDEN).abs() < 1e-9, "golden drift: {v:?}");
}

#[test]
fn fcc_of_independent_noise_is_weak() {
    let dims = Dims::new_2d(48, 48);
    let v = fcc_loss(
        &extract_features(&common::noise(dims, 7)),
        &extract_features(&common::noise(dims, 8)),
        &NlccConfig::default(),
    )
    .unwrap();
    assert!(v > -0.2, "{v}");
}

#[test]
fn fcc_channel_gradients_match_differences() {
    let dims = Dims::new_2d(10, 9);
    let ex = FeatureExtractor::new(FeatureConfig {
        sigmas: vec![1.0],
        zscore_window: 4,
    });
    let fa = ex.extract(&common::smooth_field(dims, 9));
    let fu = ex.extract(&common::noise(dims, 10));
    let cfg = NlccConfig::default().with_window(3);
    let (_, grads) = fcc_loss_with_grad(&fa, &fu, &cfg).unwrap();
    let mut flat: Vec<f64> = fa.channels().iter().flatten().copied().collect();
    let c = fa.num_channels();
    let numeric: Vec<f64> = (0..flat.len())
        .map(|i| {
            common::central_diff(&mut flat, i, 1e-6, |v| {
                let chans = v.chunks_exact(dims.len()).map(|s| s.to_vec()).collect();
                let stack = istseg::features::FeatureStack::new(dims, chans).unwrap();
                fcc_loss(&stack, &fu, &cfg).unwrap()
            })
        })
        .collect();
    assert_eq!(grads.len(), c);
    let analytic: Vec<f64> = grads.into_iter().flatten().collect();
    assert!(common::max_rel_err(&analytic, &numeric) < 1e-4);
}
