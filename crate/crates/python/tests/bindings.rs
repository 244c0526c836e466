use mused_py::*;

#[test]
fn helpers_match_the_core_library() {
    let s = vec![1.0, -0.5, 0.25, 0.0];
    let e = vec![0.9, -0.4, 0.3, 0.1];
    assert_eq!(
        si_sdr(e.clone(), s.clone()).unwrap(),
        mused::signal::si_sdr(
            &mused::signal::Waveform::from_samples(e).unwrap(),
            &mused::signal::Waveform::from_samples(s).unwrap()
        )
        .unwrap()
    );
    assert!(si_sdr(vec![1.0], vec![0.0]).is_err());
    let m = mix_at_snr(vec![1.0, -1.0], vec![0.5, 0.5], 0.0).unwrap();
    assert_eq!(m.len(), 2);
    assert_eq!(average_precision(vec![0.9, 0.1], vec![true, false]).unwrap(), 1.0);
    assert_eq!(roc_metrics(vec![0.9, 0.1], vec![true, false]).unwrap(), (1.0, 0.0));
    let tracks = vec![(vec![0.9, 0.2], vec![true, false]), (vec![0.7], vec![true])];
    assert_eq!(mean_average_precision(tracks).unwrap(), 1.0);
}

#[test]
fn toy_paths_and_checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = make_toy_dataset(dir.path().to_path_buf(), 1, 2).unwrap();
    assert!(p["manifest"].is_file());
    assert!(PyCheckpoint::load(dir.path().join("none.ckpt")).is_err());
}
