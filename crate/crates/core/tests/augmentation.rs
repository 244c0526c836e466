use std::collections::BTreeSet;

use mused::augment::*;
use mused::media::FaceTrack;
use mused::signal::Waveform;
use mused::synth::AudioBank;
use ndarray::Array3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn speech(len: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::from_samples((0..len).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap()
}

fn track(n: usize) -> FaceTrack {
    FaceTrack::new(Array3::from_elem((n, 112, 112), 0.5)).unwrap()
}

fn bank_of(w: Waveform) -> AudioBank {
    AudioBank { ids: vec!["x".into()], waves: vec![w] }
}

fn only(s: NoiseSource) -> BTreeSet<NoiseSource> {
    [s].into_iter().collect()
}

#[test]
fn plus_identity_cases() {
    let a = speech(16_000, 1);
    let cfg = AugmentConfig { noise_sources: BTreeSet::new(), ..AugmentConfig::default() };
    let bank = PlusBank { in_domain: bank_of(speech(16_000, 2)), ..PlusBank::default() };
    assert_eq!(plus_augment_audio(&a, &bank, &cfg, 0).unwrap(), a);

    let mut delta = vec![0.0; 100];
    delta[0] = 1.0;
    let rir = PlusBank { rir: bank_of(Waveform::from_samples(delta).unwrap()), ..PlusBank::default() };
    let cfg = AugmentConfig { noise_sources: only(NoiseSource::Reverberation), ..AugmentConfig::default() };
    assert_eq!(plus_augment_audio(&a, &rir, &cfg, 0).unwrap(), a);

    // nothing in any bank falls back to identity
    let cfg = AugmentConfig::default();
    assert_eq!(plus_augment_audio(&a, &PlusBank::default(), &cfg, 0).unwrap(), a);
}

#[test]
fn plus_in_domain_at_60_db() {
    let a = speech(16_000, 1);
    let cfg = AugmentConfig {
        noise_sources: only(NoiseSource::InDomain),
        plus_snr_range_db: (60.0, 60.0),
        ..AugmentConfig::default()
    };
    let bank = PlusBank { in_domain: bank_of(speech(8_000, 2)), ..PlusBank::default() };
    let out = plus_augment_audio(&a, &bank, &cfg, 4).unwrap();
    assert_eq!(out.len(), a.len());
    let diff = out.sub(&a).unwrap();
    assert!(10.0 * (a.energy() / diff.energy()).log10() > 40.0);
}

#[test]
fn plus_draws_only_available_sources() {
    let a = speech(16_000, 1);
    let cfg = AugmentConfig::default();
    let bank = PlusBank { ambient: bank_of(speech(4_000, 3)), ..PlusBank::default() };
    for seed in 0..20 {
        let out = plus_augment_audio(&a, &bank, &cfg, seed).unwrap();
        assert_ne!(out, a);
        assert_eq!(out.len(), a.len());
    }
}

#[test]
fn minus_audio_examples() {
    let a = speech(64_000, 1);
    let off = AugmentConfig { audio_mask_frac: 0.0, ..AugmentConfig::default() };
    assert_eq!(minus_augment_audio(&a, &off, 3), a);

    let forced = AugmentConfig { segment_dur_range_s: (0.5, 0.5), ..AugmentConfig::default() };
    let (out, mask) = minus_augment_audio_detailed(&a, &forced, 3);
    assert_eq!(mask.num_segments, 8);
    assert_eq!(mask.masked.len(), 2);
    let zeros = out.samples().iter().filter(|&&v| v == 0.0).count();
    assert_eq!(zeros, 16_000);
    assert_eq!(minus_augment_audio(&a, &forced, 3), out);
}

#[test]
fn minus_visual_examples() {
    let f = track(100);
    let off =
        AugmentConfig { visual_mask_frac: 0.0, cutout_side_range_px: (0, 0), ..AugmentConfig::default() };
    assert_eq!(minus_augment_visual(&f, &off, 1), f);

    let full = AugmentConfig { cutout_side_range_px: (112, 112), ..AugmentConfig::default() };
    let out = minus_augment_visual(&f, &full, 1);
    assert!(out.frames().iter().all(|&v| v == 0.0));

    let forced = AugmentConfig {
        segment_dur_range_s: (0.4, 0.4),
        cutout_side_range_px: (0, 0),
        ..AugmentConfig::default()
    };
    let (out, mask) = minus_augment_visual_detailed(&f, &forced, 9);
    assert_eq!(mask.frames.seg_len, 10);
    assert_eq!(mask.frames.masked.len(), 1);
    let blank = (0..100).filter(|&i| out.frame(i).iter().all(|&v| v == 0.0)).count();
    assert_eq!(blank, 10);
}

#[test]
fn augmenter_counts_calls() {
    let aug = Augmenter::new(AugmentConfig::default(), PlusBank::default());
    assert_eq!(aug.calls(), 0);
    let a = speech(16_000, 1);
    let f = track(25);
    let x = aug.apply(&a, &f, 11).unwrap();
    let y = aug.apply(&a, &f, 11).unwrap();
    assert_eq!(x, y);
    assert_eq!(aug.calls(), 2);
}

#[test]
fn config_validation() {
    assert!(AugmentConfig::default().validate().is_ok());
    let bad = [
        AugmentConfig { audio_mask_frac: 1.5, ..AugmentConfig::default() },
        AugmentConfig { segment_dur_range_s: (0.8, 0.2), ..AugmentConfig::default() },
        AugmentConfig { cutout_side_range_px: (45, 200), ..AugmentConfig::default() },
        AugmentConfig { plus_snr_range_db: (5.0, -5.0), ..AugmentConfig::default() },
    ];
    for c in bad {
        assert!(c.validate().is_err());
    }
    assert_eq!(NoiseSource::parse("ambient").unwrap(), NoiseSource::Ambient);
    assert!(NoiseSource::parse("babble").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cutout_box_is_shared_by_all_frames(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(5..40);
        let f = FaceTrack::new(Array3::from_elem((n, 112, 112), 0.7)).unwrap();
        let cfg = AugmentConfig { visual_mask_frac: 0.0, ..AugmentConfig::default() };
        let (out, m) = minus_augment_visual_detailed(&f, &cfg, seed);
        prop_assert!((45..=112).contains(&m.side));
        for i in 0..n {
            let fr = out.frame(i);
            let zeros: Vec<(usize, usize)> = fr.indexed_iter().filter(|(_, &v)| v == 0.0).map(|(p, _)| p).collect();
            prop_assert_eq!(zeros.len(), m.side * m.side);
            prop_assert_eq!(zeros[0], (m.top, m.left));
        }
    }
}
