use std::fs;

use mused::augment::PlusBank;
use mused::media::LabelSequence;
use mused::model::{ModelConfig, Stage};
use mused::synth::{generate_mixture, AudioBank, Corpus, CorpusManifest, InterferenceMode, MixOptions};
use mused::toy::make_toy_dataset;
use mused::train::*;
use mused::Error;

fn toy(n: usize) -> (tempfile::TempDir, Corpus, AudioBank) {
    let dir = tempfile::tempdir().unwrap();
    let p = make_toy_dataset(dir.path(), n, 1).unwrap();
    let corpus = Corpus::load(&CorpusManifest::load(&p.manifest).unwrap()).unwrap();
    let noise = AudioBank::load(&CorpusManifest::load(&p.noise_manifest).unwrap()).unwrap();
    (dir, corpus, noise)
}

fn tiny_run() -> RunConfig {
    RunConfig {
        model: ModelConfig::tiny(),
        batch_size: 2,
        epochs: 2,
        seed: 5,
        pretrain_mode: InterferenceMode::S,
        ..RunConfig::default()
    }
}

fn short_items(corpus: &Corpus, frames: usize) -> Vec<AsdItem> {
    asd_items(corpus)
        .unwrap()
        .into_iter()
        .map(|it| {
            AsdItem::new(
                it.id.clone(),
                it.audio.slice(0, frames * 640).unwrap(),
                it.faces.slice(0, frames).unwrap(),
                LabelSequence(it.labels.0[..frames].to_vec()),
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn run_config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = tiny_run();
    run.optimizer.lr = Some(3e-4);
    let path = dir.path().join("run.cfg");
    run.save(&path).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), run);
    fs::write(&path, "train.epochs = 3\nbogus.key = 1\n").unwrap();
    match RunConfig::load(&path) {
        Err(Error::Config { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn checkpoint_archive_contract() {
    let (_d, corpus, _) = toy(2);
    let mut tr = Trainer::new(&tiny_run(), Stage::Pretrain).unwrap();
    let opts = MixOptions { duration_s: 0.4, ..MixOptions::default() };
    let batch = vec![generate_mixture(&corpus, None, InterferenceMode::S, &opts, 1).unwrap()];
    tr.pretrain_step(&batch).unwrap();
    let ckpt = tr.checkpoint();

    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    ckpt.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded.params, ckpt.params);
    assert_eq!(loaded.run, ckpt.run);
    assert_eq!(loaded.optimizer, ckpt.optimizer);
    loaded.save(&b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    assert!(loaded.model_matching(&ModelConfig::tiny()).is_ok());
    let err = loaded.model_matching(&ModelConfig::desk()).unwrap_err();
    assert!(matches!(err, Error::ParamMismatch { .. }));

    // flip one byte inside a parameter payload
    let mut bytes = fs::read(&a).unwrap();
    let name = b"params/audio.encoder.weight.f32";
    let at = bytes.windows(name.len()).position(|w| w == name).unwrap();
    bytes[at + 512 + 3] ^= 0x40;
    match Checkpoint::from_bytes(&bytes) {
        Err(Error::Checkpoint { member, .. }) => assert_eq!(member, "params/audio.encoder.weight.f32"),
        other => panic!("{other:?}"),
    }
    assert!(Checkpoint::from_bytes(&bytes[..1000]).is_err());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (_d, corpus, _) = toy(2);
    let opts = MixOptions { duration_s: 0.4, ..MixOptions::default() };
    let b1 = vec![generate_mixture(&corpus, None, InterferenceMode::S, &opts, 1).unwrap()];
    let b2 = vec![generate_mixture(&corpus, None, InterferenceMode::S, &opts, 2).unwrap()];

    let mut straight = Trainer::new(&tiny_run(), Stage::Pretrain).unwrap();
    straight.pretrain_step(&b1).unwrap();
    let bytes = straight.checkpoint().to_bytes().unwrap();
    straight.pretrain_step(&b2).unwrap();

    let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    resumed.pretrain_step(&b2).unwrap();
    for ((_, p), (_, q)) in straight.model.store().iter().zip(resumed.model.store().iter()) {
        for (a, b) in p.value.iter().zip(q.value.iter()) {
            assert!((a - b).abs() <= 1e-7, "{}", p.name);
        }
    }
}

#[test]
fn non_finite_loss_aborts() {
    let (_d, corpus, _) = toy(2);
    let opts = MixOptions { duration_s: 0.4, ..MixOptions::default() };
    let batch = vec![generate_mixture(&corpus, None, InterferenceMode::S, &opts, 1).unwrap()];
    let mut tr = Trainer::new(&tiny_run(), Stage::Pretrain).unwrap();
    let id = tr.model.store().id("audio.encoder.weight").unwrap();
    tr.model.store_mut().value_mut(id).fill(f32::NAN);
    let before = tr.model.store().clone();
    let r = tr.pretrain_step(&batch);
    assert!(matches!(r, Err(Error::Diverged { .. })), "{r:?}");
    assert_eq!(tr.adam.step, 0);
    let same = before
        .iter()
        .zip(tr.model.store().iter())
        .all(|((_, a), (_, b))| a.value.iter().zip(b.value.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(same);
}

#[test]
fn pretrain_is_deterministic_and_logs() {
    let (_d, corpus, _) = toy(4);
    let out = tempfile::tempdir().unwrap();
    let run = RunConfig { val_fraction: 0.25, ..tiny_run() };
    let a = pretrain(
        &run,
        &corpus,
        None,
        TrainOptions { out_dir: Some(out.path().to_path_buf()), ..Default::default() },
    )
    .unwrap();
    let b = pretrain(&run, &corpus, None, TrainOptions::default()).unwrap();
    let losses =
        |o: &TrainOutcome| o.history.iter().map(|h| (h.train_loss, h.val_metric)).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(a.last.to_bytes().unwrap(), b.last.to_bytes().unwrap());
    assert_eq!(a.history.len(), 2);
    assert!(a.history.iter().all(|h| h.train_loss.is_finite() && h.val_metric.is_finite()));

    assert!(out.path().join("best.ckpt").is_file());
    assert!(out.path().join("last.ckpt").is_file());
    let log = fs::read_to_string(out.path().join("pretrain_log.jsonl")).unwrap();
    let events: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events.iter().filter(|e| e["event"] == "epoch").count(), 2);
    for e in &events {
        for key in ["epoch", "step", "loss", "metric"] {
            assert!(e.get(key).is_some(), "{e}");
        }
    }
}

#[test]
fn noise_mode_accepts_single_speaker_corpus() {
    let (_d, corpus, noise) = toy(4);
    let one = Corpus {
        clips: corpus.clips.iter().filter(|c| c.speaker_id == corpus.clips[0].speaker_id).cloned().collect(),
    };
    let run = RunConfig { epochs: 1, pretrain_mode: InterferenceMode::N, val_fraction: 0.0, ..tiny_run() };
    assert!(pretrain(&run, &one, Some(&noise), TrainOptions::default()).is_ok());
    let s = RunConfig { pretrain_mode: InterferenceMode::S, ..run };
    assert!(pretrain(&s, &one, Some(&noise), TrainOptions::default()).is_err());
}

#[test]
fn observer_sees_start_and_can_stop() {
    let (_d, corpus, _) = toy(2);
    let run = RunConfig { epochs: 5, val_fraction: 0.0, ..tiny_run() };
    let mut seen = Vec::new();
    let out = pretrain(
        &run,
        &corpus,
        None,
        TrainOptions {
            observer: Some(Box::new(|ev| match ev {
                Event::Start(_) => {
                    seen.push(usize::MAX);
                    Control::Continue
                }
                Event::Epoch(s, _) => {
                    seen.push(s.epoch);
                    if s.epoch == 1 {
                        Control::Stop
                    } else {
                        Control::Continue
                    }
                }
            })),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(out.history.len(), 2);
    assert_eq!(seen, vec![usize::MAX, 0, 1]);
}

#[test]
fn finetune_augmentation_switch_and_evaluation() {
    let (_d, corpus, noise) = toy(2);
    let items = short_items(&corpus, 40);
    let bank = PlusBank { in_domain: in_domain_bank(&items), ambient: noise, ..PlusBank::default() };
    let off = RunConfig { epochs: 1, augment_enabled: false, ..tiny_run() };
    let a = finetune(&off, &items, None, None, bank.clone(), TrainOptions::default()).unwrap();
    assert_eq!(a.augment_calls, 0);
    let on = RunConfig { augment_enabled: true, ..off.clone() };
    let b = finetune(&on, &items, None, None, bank, TrainOptions::default()).unwrap();
    assert_eq!(b.augment_calls, items.len());

    let r1 = evaluate(&b.best, &items).unwrap();
    let r2 = evaluate(&b.best, &items).unwrap();
    assert_eq!(r1, r2);
    let mut rev = items.clone();
    rev.reverse();
    assert_eq!(evaluate(&b.best, &rev).unwrap(), r1);

    let pre = Trainer::new(&tiny_run(), Stage::Pretrain).unwrap().checkpoint();
    assert!(evaluate(&pre, &items).is_err());
}

#[test]
fn finetune_starts_from_transferred_trunk() {
    let pre = Trainer::new(&tiny_run(), Stage::Pretrain).unwrap().checkpoint();
    let tr = finetune_trainer(&tiny_run(), Some(&pre)).unwrap();
    for (_, p) in tr.model.store().iter() {
        if mused::model::is_trunk_param(&p.name) {
            assert_eq!(&p.value, &pre.params.by_name(&p.name).unwrap().value);
        }
    }
    let other = RunConfig { model: ModelConfig { rnn_hidden: 6, ..ModelConfig::tiny() }, ..tiny_run() };
    let err = finetune_trainer(&other, Some(&pre)).unwrap_err().to_string();
    assert!(err.contains("encoder.block0"), "{err}");
}

#[test]
fn items_checked_at_ingestion() {
    let (_d, corpus, _) = toy(1);
    let c = &corpus.clips[0];
    let err = AsdItem::new("bad-item", c.audio.clone(), c.faces.clone(), LabelSequence(vec![true; 3]))
        .unwrap_err()
        .to_string();
    assert!(err.contains("bad-item"));
    let short = c.audio.slice(0, 64_000 - 2000).unwrap();
    assert!(AsdItem::new("short", short, c.faces.clone(), c.labels.clone().unwrap()).is_err());
}
