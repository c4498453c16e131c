mod common;

use istseg::spectral::{from_spectrum, ist, sample_beta, to_spectrum};
use istseg::{Dims, ScalarField};
use proptest::prelude::*;

fn dims_strategy() -> impl Strategy<Value = Dims> {
    (1usize..9, 1usize..9, 1usize..5).prop_map(|(w, h, d)| Dims::new(w, h, d))
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn round_trip(dims in dims_strategy(), seed in 0u64..10_000) {
        let x = common::noise(dims, seed);
        let back = from_spectrum(&to_spectrum(&x)).unwrap();
        let err = x.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-6 * max_abs(x.data()).max(1e-300));
    }

    #[test]
    fn linearity(dims in dims_strategy(), seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = common::noise(dims, seed);
        let y = common::noise(dims, seed + 1);
        let combo = ScalarField::from_fn(dims, |i, j, k| a * x.get(i, j, k) + b * y.get(i, j, k));
        let (sx, sy, sc) = (to_spectrum(&x), to_spectrum(&y), to_spectrum(&combo));
        let scale = sc.amplitudes().iter().fold(1e-12f64, |m, v| m.max(*v));
        for i in 0..dims.len() {
            let re = a * sx.re()[i] + b * sy.re()[i];
            let im = a * sx.im()[i] + b * sy.im()[i];
            prop_assert!((re - sc.re()[i]).abs() < 1e-6 * scale);
            prop_assert!((im - sc.im()[i]).abs() < 1e-6 * scale);
        }
    }

    #[test]
    fn parseval(dims in dims_strategy(), seed in 0u64..10_000) {
        let x = common::noise(dims, seed);
        let space: f64 = x.data().iter().map(|v| v * v).sum();
        let freq: f64 = to_spectrum(&x).amplitudes().iter().map(|a| a * a).sum::<f64>() / dims.len() as f64;
        prop_assert!((space - freq).abs() <= 1e-6 * space.max(1e-300));
    }

    #[test]
    fn ist_beta_zero_is_identity(dims in dims_strategy(), seed in 0u64..10_000) {
        let a = common::noise(dims, seed);
        let t = common::noise(dims, seed + 5);
        let out = ist(&a, &t, 0.0).unwrap();
        let err = a.data().iter().zip(out.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-6 * max_abs(a.data()));
    }

    #[test]
    fn ist_of_identical_images_is_identity(dims in dims_strategy(), seed in 0u64..10_000, beta in 0.0f64..=1.0) {
        let a = common::noise(dims, seed);
        let out = ist(&a, &a, beta).unwrap();
        let err = a.data().iter().zip(out.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-6 * max_abs(a.data()));
    }

    #[test]
    fn ist_mixes_amplitude_and_keeps_phase(dims in dims_strategy(), seed in 0u64..10_000, beta in 0.0f64..=1.0) {
        let a = common::noise(dims, seed);
        let t = common::smooth_field(dims, seed + 3);
        let (sa, st) = (to_spectrum(&a), to_spectrum(&t));
        let so = to_spectrum(&ist(&a, &t, beta).unwrap());
        let peak = sa.amplitudes().iter().chain(st.amplitudes().iter()).fold(0.0f64, |m, v| m.max(*v));
        for i in 0..dims.len() {
            let want = (1.0 - beta) * sa.amplitude(i) + beta * st.amplitude(i);
            prop_assert!((so.amplitude(i) - want).abs() <= 1e-6 * peak);
            if sa.amplitude(i) > 1e-9 && so.amplitude(i) > 1e-9 * peak.max(1.0) {
                let d = (so.phase(i) - sa.phase(i)).rem_euclid(std::f64::consts::TAU);
                let d = d.min(std::f64::consts::TAU - d);
                prop_assert!(d < 1e-4, "phase drift {d} at bin {i}");
            }
        }
    }
}

#[test]
fn beta_draws() {
    let mut r = common::rng(3);
    let draws: Vec<f64> = (0..10_000).map(|_| sample_beta(&mut r)).collect();
    assert!(draws.iter().all(|b| (0.0..=1.0).contains(b)));
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!((0.48..=0.52).contains(&mean), "mean {mean}");
    let mut again = common::rng(3);
    let replay: Vec<f64> = (0..10_000).map(|_| sample_beta(&mut again)).collect();
    assert_eq!(draws, replay);
}

#[test]
fn beta_one_takes_target_amplitude() {
    let dims = Dims::new(8, 6, 4);
    let a = common::smooth_field(dims, 1);
    let t = common::noise(dims, 2);
    let so = to_spectrum(&ist(&a, &t, 1.0).unwrap());
    let st = to_spectrum(&t);
    for i in 0..dims.len() {
        let want = st.amplitude(i);
        assert!((so.amplitude(i) - want).abs() <= 1e-6 * want.max(1e-6), "bin {i}");
    }
}

#[test]
fn constant_spectrum_recovers_constant() {
    let dims = Dims::new(5, 3, 2);
    let c = ScalarField::<f64>::filled(dims, 2.5);
    let back = from_spectrum(&to_spectrum(&c)).unwrap();
    assert!(back.data().iter().all(|v| (v - 2.5).abs() < 1e-12));
}
