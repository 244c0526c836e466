use mused::media::FaceTrack;
use mused::model::{is_trunk_param, Model, ModelConfig, Stage};
use mused::nn::Tape;
use mused::signal::Waveform;
use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn item(frames: usize, seed: u64) -> (Waveform, FaceTrack) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let audio =
        Waveform::from_samples((0..frames * 640).map(|_| rng.random_range(-0.3..0.3)).collect()).unwrap();
    let faces = FaceTrack::new(Array3::from_shape_fn((frames, 112, 112), |_| rng.random::<f32>())).unwrap();
    (audio, faces)
}

fn rand_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn tiny_shapes_and_ranges() {
    let asd = Model::<f32>::new(ModelConfig::tiny(), Stage::Finetune, 1).unwrap();
    let tse = Model::<f32>::new(ModelConfig::tiny(), Stage::Pretrain, 1).unwrap();
    for n in [1, 7, 60] {
        let (a, f) = item(n, n as u64);
        let s = asd.forward_asd(&a, &f).unwrap();
        assert_eq!(s.len(), n);
        assert!(s.0.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(tse.forward_pretrain(&a, &f).unwrap().len(), 640 * n);
    }
    // pretraining models have no speaker backend and vice versa
    let (a, f) = item(4, 0);
    assert!(tse.forward_asd(&a, &f).is_err());
    assert!(asd.forward_pretrain(&a, &f).is_err());
}

#[test]
fn audio_length_must_match_frames() {
    let m = Model::<f32>::new(ModelConfig::tiny(), Stage::Finetune, 1).unwrap();
    let (a, _) = item(10, 0);
    let (_, f) = item(12, 0);
    assert!(m.forward_asd(&a, &f).is_err());
}

#[test]
fn evaluation_is_bitwise_repeatable_and_batch_consistent() {
    let m = Model::<f32>::new(ModelConfig::tiny(), Stage::Finetune, 3).unwrap();
    let (a, f) = item(24, 5);
    let x = m.forward_asd(&a, &f).unwrap();
    let y = m.forward_asd(&a, &f).unwrap();
    assert_eq!(x, y);
    let batch = m.forward_asd_batch(&[(a, f)]).unwrap();
    for (p, q) in batch[0].0.iter().zip(&x.0) {
        assert!((p - q).abs() <= 1e-6);
    }
}

#[test]
fn speech_backend_contracts() {
    let cfg = ModelConfig { d: 16, ..ModelConfig::tiny() };
    let m = Model::<f64>::new(cfg, Stage::Pretrain, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut t = Tape::new(m.store(), false);
    let x = t.input(rand_input(&mut rng, &[3200, 16]));
    let zero = t.input(ArrayD::zeros(IxDyn(&[3200, 16])));
    let out = m.speech_backend(&mut t, zero, x, 64_000).unwrap();
    assert_eq!(t.shape(out), &[64_000]);
    assert!(t.value(out).iter().all(|&v| v == 0.0));
}

#[test]
fn speaker_backend_decimates_by_32() {
    let m = Model::<f64>::new(ModelConfig::tiny(), Stage::Finetune, 2).unwrap();
    let d = m.config().d;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut t = Tape::new(m.store(), false);
    let xs: Vec<_> = (0..3).map(|_| t.input(rand_input(&mut rng, &[3200, d]))).collect();
    let p = m.speaker_backend(&mut t, xs[0], xs[1], xs[2], 100).unwrap();
    assert_eq!(t.shape(p), &[100]);
}

// Gradient of the last frame's score with respect to the first frame's input.
fn first_to_last_influence(m: &Model<f64>) -> f64 {
    let d = m.config().d;
    let n = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut t = Tape::new(m.store(), false);
    let xs: Vec<_> = (0..3).map(|_| t.input(rand_input(&mut rng, &[32 * n, d]))).collect();
    let p = m.speaker_backend(&mut t, xs[0], xs[1], xs[2], n).unwrap();
    let mut seed = ArrayD::zeros(IxDyn(&[n]));
    seed[[n - 1]] = 1.0;
    let out = t.backward_seeded(p, seed, &[xs[0]]);
    let g = out.kept[0].as_ref().expect("input reached");
    (0..d).map(|j| g[[0, j]].abs()).sum()
}

#[test]
fn self_attention_gives_global_context() {
    let m = Model::<f64>::new(ModelConfig::tiny(), Stage::Finetune, 4).unwrap();
    assert!(first_to_last_influence(&m) > 0.0);
    assert_eq!(first_to_last_influence(&m.without_attention()), 0.0);
}

#[test]
fn every_parameter_receives_gradient() {
    for stage in [Stage::Pretrain, Stage::Finetune] {
        let m = Model::<f64>::new(ModelConfig::tiny(), stage, 6).unwrap();
        let (a, f) = item(40, 1);
        let mut t = Tape::new(m.store(), true);
        let loss = match stage {
            Stage::Pretrain => {
                let est = m.pretrain_graph(&mut t, a.samples(), &f).unwrap();
                let reference: Vec<f64> = a.samples().iter().map(|v| v.sin()).collect();
                t.neg_si_sdr(est, &reference)
            }
            Stage::Finetune => {
                let p = m.asd_graph(&mut t, a.samples(), &f).unwrap();
                let labels: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
                t.bce(p, &labels, None)
            }
        };
        let g = t.backward(loss);
        for (id, p) in m.store().iter().filter(|(_, p)| p.trainable) {
            let grad = g.get(id).unwrap_or_else(|| panic!("{stage}: no gradient for {}", p.name));
            assert!(grad.iter().any(|v| *v != 0.0), "{stage}: zero gradient for {}", p.name);
        }
    }
}

#[test]
fn trunk_transfer_copies_only_the_trunk() {
    let src = Model::<f32>::new(ModelConfig::tiny(), Stage::Pretrain, 10).unwrap();
    let mut dst = Model::<f32>::new(ModelConfig::tiny(), Stage::Finetune, 11).unwrap();
    dst.load_trunk(src.store()).unwrap();
    let once = dst.store().clone();
    for (_, p) in dst.store().iter() {
        match src.store().by_name(&p.name) {
            Some(q) if is_trunk_param(&p.name) => assert_eq!(p.value, q.value, "{}", p.name),
            Some(_) => panic!("head parameter {} shared between stages", p.name),
            None => assert!(p.name.starts_with("speaker.")),
        }
    }
    dst.load_trunk(src.store()).unwrap();
    assert_eq!(dst.store(), &once);

    let wider = Model::<f32>::new(ModelConfig { d: 16, ..ModelConfig::tiny() }, Stage::Pretrain, 0).unwrap();
    let err = dst.load_trunk(wider.store()).unwrap_err().to_string();
    assert!(err.contains("audio.encoder.weight"), "{err}");
}

#[test]
fn config_validation() {
    assert!(ModelConfig::desk().validate().is_ok());
    assert!(ModelConfig { k: 7, ..ModelConfig::tiny() }.validate().is_err());
    assert!(ModelConfig { attn_dim: 7, ..ModelConfig::tiny() }.validate().is_err());
    assert!(ModelConfig { audio_stride: 30, ..ModelConfig::tiny() }.validate().is_err());
}

#[test]
fn full_scale_parameter_report() {
    let m = Model::<f32>::new(ModelConfig::full(), Stage::Finetune, 0).unwrap();
    let n = m.num_params() as f64 / 1e6;
    let dev = (n - 16.1) / 16.1 * 100.0;
    eprintln!("full-scale parameters: {n:.2} M ({dev:+.1}% from the 16.1 M target)");
    if dev.abs() > 25.0 {
        eprintln!("warning: outside the +-25% band");
    }
}
