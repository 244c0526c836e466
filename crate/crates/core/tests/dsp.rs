use mused::signal::*;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

fn wave(v: Vec<f64>) -> Waveform {
    Waveform::from_samples(v).unwrap()
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn si_sdr_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let s = randn(&mut rng, 16);
        let e = randn(&mut rng, 16);
        let got = si_sdr(&wave(e.clone()), &wave(s.clone())).unwrap();
        assert!((got - si_sdr_oracle(&e, &s)).abs() < 1e-9);
    }
}

#[test]
fn si_sdr_examples() {
    let v = si_sdr(&wave(vec![1.0, 1.0]), &wave(vec![1.0, 0.0])).unwrap();
    assert!(v.abs() < 1e-12);
    let s = vec![0.3, -0.2, 0.9];
    let e: Vec<f64> = s.iter().map(|x| 3.7 * x).collect();
    assert_eq!(si_sdr(&wave(e), &wave(s.clone())).unwrap(), f64::INFINITY);
    assert!(si_sdr(&wave(s), &Waveform::zeros(3).unwrap()).is_err());
}

#[test]
fn convolve_rir_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..150 {
        let x = randn(&mut rng, 64);
        let h = randn(&mut rng, 8);
        let got = convolve_rir(&wave(x.clone()), &wave(h.clone())).unwrap();
        for (a, b) in got.samples().iter().zip(conv_oracle(&x, &h)) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn convolve_rir_kernels() {
    let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut delta = vec![0.0; 20];
    delta[0] = 1.0;
    assert_eq!(convolve_rir(&wave(x.clone()), &wave(delta)).unwrap().samples(), &x[..]);

    let mut shifted = vec![0.0; 20];
    shifted[10] = 1.0;
    let y = convolve_rir(&wave(x.clone()), &wave(shifted)).unwrap();
    assert!(y.samples()[..10].iter().all(|&v| v == 0.0));
    // the truncated delayed copy has a smaller peak, which normalization restores
    let g =
        x.iter().map(|v| v.abs()).fold(0.0, f64::max) / x[..40].iter().map(|v| v.abs()).fold(0.0, f64::max);
    for i in 10..50 {
        assert!((y.samples()[i] - g * x[i - 10]).abs() < 1e-12);
    }
    assert!(convolve_rir(&wave(x.clone()), &wave(vec![0.0; 60])).is_err());
}

#[test]
fn mix_examples() {
    let t = wave(vec![1.0, 0.0]);
    let n = wave(vec![0.0, 2.0]);
    assert!((snr_gain(&t, &n, 0.0).unwrap() - 0.5).abs() < 1e-15);
    assert!(mix_at_snr(&t, &wave(vec![1.0, 0.0, 0.0]), 0.0).is_err());
    assert!(mix_at_snr(&t, &wave(vec![0.0, 0.0]), 0.0).is_err());
}

fn measured_snr(target: &Waveform, mixed: &Waveform) -> f64 {
    let added = mixed.sub(target).unwrap();
    10.0 * (target.energy() / added.energy()).log10()
}

#[test]
fn mix_at_60_db() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = wave(randn(&mut rng, 500));
    let n = wave(randn(&mut rng, 500));
    let m = mix_at_snr(&t, &n, 60.0).unwrap();
    assert!((measured_snr(&t, &m) - 60.0).abs() < 1e-4);
}

#[test]
fn chunk_layout_examples() {
    assert_eq!(chunk_layout(160, 160).unwrap(), (160, 1));
    assert_eq!(chunk_layout(3200, 160).unwrap(), (3200, 39));
    assert_eq!(chunk_layout(170, 160).unwrap(), (240, 2));
    assert!(chunk_layout(0, 160).is_err());
    assert!(chunk_layout(10, 7).is_err());
}

fn feature(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> FeatureMap2D<f64> {
    FeatureMap2D::new(Array2::from_shape_fn((frames, dim), |_| rng.random_range(-1.0..1.0))).unwrap()
}

#[test]
fn overlap_add_matches_scatter_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = feature(&mut rng, 100, 4);
    let mut ch = segment_chunks(&x, 16).unwrap();
    ch.values.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    let got = overlap_add(&ch).unwrap();
    let mut want = vec![vec![0.0; 4]; 100];
    for q in 0..ch.num_chunks() {
        for k in 0..16 {
            let f = q * 8 + k;
            if f < 100 {
                for d in 0..4 {
                    want[f][d] += ch.values[[d, k, q]];
                }
            }
        }
    }
    for f in 0..100 {
        for d in 0..4 {
            assert!((got.values[[f, d]] - want[f][d]).abs() <= 1e-9);
        }
    }
}

#[test]
fn single_chunk_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = feature(&mut rng, 12, 3);
    let ch = segment_chunks(&x, 12).unwrap();
    assert_eq!(ch.num_chunks(), 1);
    assert_eq!(overlap_add(&ch).unwrap(), x);
}

#[test]
fn interior_frames_doubled() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let k = 2 * rng.random_range(1..=20);
        let frames = rng.random_range(k..=6 * k);
        let x = feature(&mut rng, frames, 3);
        let y = overlap_add(&segment_chunks(&x, k).unwrap()).unwrap();
        let cov = coverage(frames, k);
        for f in 0..frames {
            if f >= k / 2 && f + k / 2 < frames {
                assert_eq!(cov[f], 2);
            }
            for d in 0..3 {
                assert!((y.values[[f, d]] - cov[f] as f64 * x.values[[f, d]]).abs() <= 1e-9);
            }
        }
        assert!(cov[..k / 2].iter().all(|&c| c == 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn si_sdr_scale_invariant(seed in any::<u64>(), len in 4usize..64, log_a in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = randn(&mut rng, len);
        let e = randn(&mut rng, len);
        let a = 10f64.powf(log_a);
        let base = si_sdr(&wave(e.clone()), &wave(s.clone())).unwrap();
        let scaled = si_sdr(&wave(e.iter().map(|v| v * a).collect()), &wave(s.clone())).unwrap();
        let both = si_sdr(
            &wave(e.iter().map(|v| v * a).collect()),
            &wave(s.iter().map(|v| v * a).collect()),
        ).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-6);
        prop_assert!((base - both).abs() <= 1e-6);
    }

    #[test]
    fn mix_hits_requested_snr(seed in any::<u64>(), len in 2usize..256, snr in -30.0f64..60.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = wave(randn(&mut rng, len));
        let n = wave(randn(&mut rng, len));
        prop_assume!(t.energy() > 1e-12 && n.energy() > 1e-12);
        let g = snr_gain(&t, &n, snr).unwrap();
        // measure on the two addends before summation
        let got = 10.0 * (t.energy() / n.scaled(g).energy()).log10();
        prop_assert!((got - snr).abs() <= 1e-4);
        let m = mix_at_snr(&t, &n, snr).unwrap();
        prop_assert_eq!(m.len(), len);
    }
}
