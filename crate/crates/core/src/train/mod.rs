//! Pre-training on generated extraction mixtures, fine-tuning for active
//! speaker detection, evaluation, and checkpoint plumbing.

mod checkpoint;
mod config;

pub use checkpoint::Checkpoint;
pub use config::{OptimizerConfig, RunConfig};

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use crate::augment::{Augmenter, PlusBank};
use crate::error::{Error, Result};
use crate::media::{FaceTrack, LabelSequence, ScoreSequence};
use crate::metrics::MetricReport;
use crate::model::{Model, Stage};
use crate::nn::{Adam, BnStat, Grads, Tape};
use crate::signal::{si_sdr_slices, Waveform, SAMPLES_PER_FRAME};
use crate::synth::{check_mode_support, generate_mixture, AudioBank, Corpus, MixOptions, MixtureSample};

/// SplitMix64 finalizer over a combination of stream identifiers.
pub fn derive_seed(base: u64, stream: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ a.wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ b.wrapping_mul(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_TRAIN: u64 = 1;
const STREAM_VAL: u64 = 2;
const STREAM_AUG: u64 = 3;
const STREAM_ORDER: u64 = 4;

/// A labeled face track with its audio, checked at ingestion.
#[derive(Debug, Clone)]
pub struct AsdItem {
    pub id: String,
    pub audio: Waveform,
    pub faces: FaceTrack,
    pub labels: LabelSequence,
}

impl AsdItem {
    /// Rejects label/frame mismatches and audio that is off by more than one
    /// frame; otherwise trims or zero-pads the audio to `frames * 640`.
    pub fn new(
        id: impl Into<String>,
        audio: Waveform,
        faces: FaceTrack,
        labels: LabelSequence,
    ) -> Result<Self> {
        let id = id.into();
        let n = faces.num_frames();
        if labels.len() != n {
            return Err(Error::Corpus(format!("item {id}: {} labels for {n} face frames", labels.len())));
        }
        let want = n * SAMPLES_PER_FRAME;
        if audio.len().abs_diff(want) > SAMPLES_PER_FRAME {
            return Err(Error::Corpus(format!(
                "item {id}: {} audio samples for {n} frames (expected {want})",
                audio.len()
            )));
        }
        let rate = audio.sample_rate();
        let mut s = audio.into_samples();
        s.resize(want, 0.0);
        Ok(Self { id, audio: Waveform::new(s, rate)?, faces, labels })
    }

    pub fn num_frames(&self) -> usize {
        self.faces.num_frames()
    }
}

/// Every clip of `corpus` as an ASD item; clips without labels are errors.
pub fn asd_items(corpus: &Corpus) -> Result<Vec<AsdItem>> {
    corpus
        .clips
        .iter()
        .map(|c| {
            let labels =
                c.labels.clone().ok_or_else(|| Error::Corpus(format!("clip {} has no labels", c.clip_id)))?;
            AsdItem::new(c.clip_id.clone(), c.audio.clone(), c.faces.clone(), labels)
        })
        .collect()
}

/// Audio of the items as an in-domain corruption bank.
pub fn in_domain_bank(items: &[AsdItem]) -> AudioBank {
    AudioBank {
        ids: items.iter().map(|i| i.id.clone()).collect(),
        waves: items.iter().map(|i| i.audio.clone()).collect(),
    }
}

/// Copies the shared trunk of a checkpoint into `model`; the model's own
/// head is kept.
pub fn transfer_weights(ckpt: &Checkpoint, model: &mut Model<f32>) -> Result<()> {
    model.load_trunk(&ckpt.params)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Mean SI-SDR of the estimates (pretraining only).
    pub si_sdr: f64,
    /// Mean SI-SDR improvement over the mixtures (pretraining only).
    pub si_sdri: f64,
    pub grad_norm: f64,
}

/// Model plus optimizer state, advanced one batch at a time.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    pub run: RunConfig,
    pub epoch: usize,
    pub best_metric: f64,
}

impl Trainer {
    pub fn new(run: &RunConfig, stage: Stage) -> Result<Self> {
        run.validate()?;
        let model = Model::new(run.model.clone(), stage, run.seed)?;
        let adam = Adam::new(run.adam(stage), model.store());
        Ok(Self { model, adam, run: run.clone(), epoch: 0, best_metric: f64::NEG_INFINITY })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = ckpt.model()?;
        let adam =
            ckpt.optimizer.clone().unwrap_or_else(|| Adam::new(ckpt.run.adam(ckpt.stage), model.store()));
        Ok(Self { model, adam, run: ckpt.run.clone(), epoch: ckpt.epoch, best_metric: ckpt.best_metric })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            stage: self.model.stage(),
            run: self.run.clone(),
            params: self.model.store().clone(),
            optimizer: Some(self.adam.clone()),
            epoch: self.epoch,
            best_metric: self.best_metric,
        }
    }

    fn apply(&mut self, mut grads: Grads<f32>, stats: Vec<BnStat<f32>>, loss: f64) -> Result<f64> {
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch,
                detail: format!("loss {loss}, gradients finite: {}", grads.all_finite()),
            });
        }
        let norm = grads.clip_global_norm(self.run.grad_clip);
        self.adam.update(self.model.store_mut(), &grads);
        self.model.store_mut().apply_bn_stats(&stats, self.run.bn_momentum);
        Ok(norm)
    }

    /// One optimizer step on negative SI-SDR, averaged over the batch.
    pub fn pretrain_step(&mut self, batch: &[MixtureSample]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut grads = Grads::zeros_like(self.model.store());
        let mut stats = Vec::new();
        let (mut loss, mut sdr, mut sdri) = (0.0, 0.0, 0.0);
        for s in batch {
            let clean = s.clean_target.samples();
            let mut t = Tape::new(self.model.store(), true);
            let est = self.model.pretrain_graph(&mut t, s.mixture.samples(), &s.faces)?;
            let est_vals: Vec<f64> = t.value(est).iter().map(|&v| v as f64).collect();
            if est_vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { epoch: self.epoch, detail: "non-finite estimate".into() });
            }
            let l = t.neg_si_sdr(est, clean);
            loss += t.value(l).iter().next().copied().unwrap_or(f32::NAN) as f64;
            let e = si_sdr_slices(&est_vals, clean)?;
            sdr += e;
            sdri += e - s.baseline_si_sdr()?;
            stats.extend(t.take_bn_stats());
            grads.accumulate(&t.backward(l));
        }
        let b = batch.len() as f64;
        grads.scale(1.0 / b);
        let norm = self.apply(grads, stats, loss / b)?;
        Ok(StepStats { loss: loss / b, si_sdr: sdr / b, si_sdri: sdri / b, grad_norm: norm })
    }

    /// One optimizer step on frame-level cross-entropy. Each item's mean
    /// loss is weighted by its frame share, so the batch loss is the mean
    /// over all real frames.
    pub fn finetune_step(&mut self, batch: &[(Waveform, FaceTrack, &LabelSequence)]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let total: usize = batch.iter().map(|(_, _, l)| l.len()).sum();
        let mut grads = Grads::zeros_like(self.model.store());
        let mut stats = Vec::new();
        let mut loss = 0.0;
        for (audio, faces, labels) in batch {
            let mut t = Tape::new(self.model.store(), true);
            let p = self.model.asd_graph(&mut t, audio.samples(), faces)?;
            let l = t.bce(p, &labels.0, None);
            let w = labels.len() as f64 / total as f64;
            loss += w * t.value(l).iter().next().copied().unwrap_or(f32::NAN) as f64;
            stats.extend(t.take_bn_stats());
            let mut g = t.backward(l);
            g.scale(w);
            grads.accumulate(&g);
        }
        let norm = self.apply(grads, stats, loss)?;
        Ok(StepStats { loss, si_sdr: f64::NAN, si_sdri: f64::NAN, grad_norm: norm })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub stage: Stage,
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    /// Pretraining: mean training SI-SDRi in dB. Fine-tuning: NaN.
    pub train_si_sdri: f64,
    /// Validation SI-SDRi (pretraining) or validation mAP in [0, 1].
    pub val_metric: f64,
    pub elapsed_s: f64,
}

pub enum Event<'a> {
    /// Before the first optimizer step.
    Start(&'a Model<f32>),
    /// After an epoch, including validation.
    Epoch(&'a EpochStats, &'a Model<f32>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

pub type Observer<'a> = Box<dyn FnMut(Event<'_>) -> Control + 'a>;

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Receives `best.ckpt`, `last.ckpt` and the JSONL log.
    pub out_dir: Option<PathBuf>,
    pub observer: Option<Observer<'a>>,
    /// Continue from this checkpoint's parameters, optimizer and epoch.
    pub resume: Option<Checkpoint>,
    /// Data-preparation threads; 0 or 1 prepares on the calling thread.
    pub num_workers: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochStats>,
    /// Number of plus-and-minus applications (fine-tuning only).
    pub augment_calls: usize,
}

struct Logger {
    file: Option<fs::File>,
    path: PathBuf,
}

impl Logger {
    fn open(dir: Option<&Path>, name: &str) -> Result<Self> {
        match dir {
            Some(d) => {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                let path = d.join(name);
                let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                Ok(Self { file: Some(file), path })
            }
            None => Ok(Self { file: None, path: PathBuf::new() }),
        }
    }

    fn event(&mut self, v: serde_json::Value) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            writeln!(f, "{v}").map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

fn worker_pool(n: usize) -> Result<Option<rayon::ThreadPool>> {
    if n <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map(Some)
        .map_err(|e| Error::invalid(format!("cannot start {n} data workers: {e}")))
}

/// Maps `f` over `0..n` in order, on the pool when there is one.
fn prepare<T: Send>(
    pool: Option<&rayon::ThreadPool>,
    n: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    match pool {
        Some(p) => p.install(|| (0..n).into_par_iter().map(&f).collect()),
        None => (0..n).map(f).collect(),
    }
}

fn save_pair(dir: Option<&Path>, name: &str, ckpt: &Checkpoint) -> Result<()> {
    if let Some(d) = dir {
        ckpt.save(&d.join(name))?;
    }
    Ok(())
}

/// Mean evaluation-mode SI-SDRi over fixed mixtures.
pub fn mean_si_sdri(model: &Model<f32>, samples: &[MixtureSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for s in samples {
        let est = model.forward_pretrain(&s.mixture, &s.faces)?;
        total += si_sdr_slices(est.samples(), s.clean_target.samples())? - s.baseline_si_sdr()?;
    }
    Ok(total / samples.len() as f64)
}

/// Extraction pretraining on fresh mixtures each epoch. The best
/// checkpoint is chosen by validation SI-SDRi on held-out mixture seeds.
pub fn pretrain(
    run: &RunConfig,
    corpus: &Corpus,
    noise: Option<&AudioBank>,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    run.validate()?;
    check_mode_support(corpus, noise, run.pretrain_mode)?;
    let mut trainer = match opts.resume.take() {
        Some(c) if c.stage == Stage::Pretrain => Trainer::from_checkpoint(&c)?,
        Some(_) => return Err(Error::invalid("cannot resume pretraining from a finetune checkpoint")),
        None => Trainer::new(run, Stage::Pretrain)?,
    };
    let mix = MixOptions { snr_range: run.snr_range_db, duration_s: run.clip_duration_s };
    let per_epoch = if run.samples_per_epoch > 0 { run.samples_per_epoch } else { corpus.len() };
    let n_val = if run.val_fraction > 0.0 {
        ((per_epoch as f64 * run.val_fraction).ceil() as usize).max(1)
    } else {
        0
    };
    let pool = worker_pool(opts.num_workers)?;
    let mode = run.pretrain_mode;
    let val: Vec<MixtureSample> = prepare(pool.as_ref(), n_val, |j| {
        generate_mixture(corpus, noise, mode, &mix, derive_seed(run.seed, STREAM_VAL, 0, j as u64))
    })?;
    let dir = opts.out_dir.clone();
    let mut log = Logger::open(dir.as_deref(), "pretrain_log.jsonl")?;
    let mut history = Vec::new();
    let mut best = trainer.checkpoint();
    if let Some(obs) = opts.observer.as_mut() {
        if obs(Event::Start(&trainer.model)) == Control::Stop {
            let last = trainer.checkpoint();
            return Ok(TrainOutcome { best, last, history, augment_calls: 0 });
        }
    }
    let mut step = trainer.adam.step;
    while trainer.epoch < run.epochs {
        let epoch = trainer.epoch;
        let t0 = Instant::now();
        let (mut loss, mut sdri, mut steps) = (0.0, 0.0, 0usize);
        for b0 in (0..per_epoch).step_by(run.batch_size) {
            let b1 = (b0 + run.batch_size).min(per_epoch);
            let batch = prepare(pool.as_ref(), b1 - b0, |i| {
                let seed = derive_seed(run.seed, STREAM_TRAIN, epoch as u64, (b0 + i) as u64);
                generate_mixture(corpus, noise, mode, &mix, seed)
            })?;
            let st = trainer.pretrain_step(&batch)?;
            step += 1;
            steps += 1;
            loss += st.loss;
            sdri += st.si_sdri;
            log.event(
                json!({"event": "step", "epoch": epoch, "step": step, "loss": st.loss, "metric": st.si_sdri}),
            )?;
        }
        trainer.epoch += 1;
        let val_metric = mean_si_sdri(&trainer.model, &val)?;
        let stats = EpochStats {
            stage: Stage::Pretrain,
            epoch,
            steps,
            train_loss: loss / steps as f64,
            train_si_sdri: sdri / steps as f64,
            val_metric,
            elapsed_s: t0.elapsed().as_secs_f64(),
        };
        info!(
            "pretrain epoch {epoch}: loss {:.3} train SI-SDRi {:.2} dB, val SI-SDRi {:.2} dB",
            stats.train_loss, stats.train_si_sdri, stats.val_metric
        );
        log.event(json!({
            "event": "epoch", "epoch": epoch, "step": step, "loss": stats.train_loss,
            "metric": val_metric, "train_si_sdri": stats.train_si_sdri, "elapsed_s": stats.elapsed_s,
        }))?;
        let score = if val_metric.is_nan() { stats.train_si_sdri } else { val_metric };
        if score > trainer.best_metric || history.is_empty() && trainer.best_metric.is_infinite() {
            trainer.best_metric = score;
            best = trainer.checkpoint();
            save_pair(dir.as_deref(), "best.ckpt", &best)?;
        }
        save_pair(dir.as_deref(), "last.ckpt", &trainer.checkpoint())?;
        history.push(stats);
        if let Some(obs) = opts.observer.as_mut() {
            if obs(Event::Epoch(history.last().expect("pushed"), &trainer.model)) == Control::Stop {
                break;
            }
        }
    }
    Ok(TrainOutcome { best, last: trainer.checkpoint(), history, augment_calls: 0 })
}

/// Builds the fine-tuning trainer, copying the trunk from `init` when given.
pub fn finetune_trainer(run: &RunConfig, init: Option<&Checkpoint>) -> Result<Trainer> {
    let mut trainer = Trainer::new(run, Stage::Finetune)?;
    if let Some(ckpt) = init {
        transfer_weights(ckpt, &mut trainer.model)?;
    }
    Ok(trainer)
}

/// Batches of item indices with similar lengths, in shuffled batch order.
fn length_buckets(items: &[AsdItem], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.sort_by_key(|&i| (items[i].num_frames(), i));
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    batches
}

/// One fine-tuning batch: augmented (or cloned) audio and faces, and a
/// borrow of each item's labels. Augmentation seeds derive from
/// `(seed, epoch, item index)`.
pub fn assemble_batch<'a>(
    items: &'a [AsdItem],
    idx: &[usize],
    augmenter: Option<&Augmenter>,
    seed: u64,
    epoch: usize,
) -> Result<Vec<(Waveform, FaceTrack, &'a LabelSequence)>> {
    assemble_in(None, items, idx, augmenter, seed, epoch)
}

fn assemble_in<'a>(
    pool: Option<&rayon::ThreadPool>,
    items: &'a [AsdItem],
    idx: &[usize],
    augmenter: Option<&Augmenter>,
    seed: u64,
    epoch: usize,
) -> Result<Vec<(Waveform, FaceTrack, &'a LabelSequence)>> {
    let prepared = prepare(pool, idx.len(), |k| {
        let i = idx[k];
        let item = items.get(i).ok_or_else(|| Error::invalid(format!("item index {i} out of range")))?;
        match augmenter {
            Some(a) => {
                a.apply(&item.audio, &item.faces, derive_seed(seed, STREAM_AUG, epoch as u64, i as u64))
            }
            None => Ok((item.audio.clone(), item.faces.clone())),
        }
    })?;
    Ok(prepared.into_iter().zip(idx).map(|((a, f), &i)| (a, f, &items[i].labels)).collect())
}

/// ASD fine-tuning with plus-and-minus augmentation. The best checkpoint is
/// chosen by mAP on `val` (or on the training items when `val` is `None`).
pub fn finetune(
    run: &RunConfig,
    items: &[AsdItem],
    val: Option<&[AsdItem]>,
    init: Option<&Checkpoint>,
    bank: PlusBank,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    run.validate()?;
    if items.is_empty() {
        return Err(Error::Corpus("no training items".into()));
    }
    let mut trainer = match opts.resume.take() {
        Some(c) if c.stage == Stage::Finetune => Trainer::from_checkpoint(&c)?,
        Some(_) => return Err(Error::invalid("cannot resume fine-tuning from a pretrain checkpoint")),
        None => finetune_trainer(run, init)?,
    };
    let augmenter = Augmenter::new(run.augment.clone(), bank);
    let pool = worker_pool(opts.num_workers)?;
    let val = val.unwrap_or(items);
    let dir = opts.out_dir.clone();
    let mut log = Logger::open(dir.as_deref(), "finetune_log.jsonl")?;
    let mut history = Vec::new();
    let mut best = trainer.checkpoint();
    if let Some(obs) = opts.observer.as_mut() {
        if obs(Event::Start(&trainer.model)) == Control::Stop {
            let last = trainer.checkpoint();
            return Ok(TrainOutcome { best, last, history, augment_calls: 0 });
        }
    }
    let mut step = trainer.adam.step;
    while trainer.epoch < run.epochs {
        let epoch = trainer.epoch;
        let t0 = Instant::now();
        let (mut loss, mut steps) = (0.0, 0usize);
        let order_seed = derive_seed(run.seed, STREAM_ORDER, epoch as u64, 0);
        for batch_idx in length_buckets(items, run.batch_size, order_seed) {
            let aug = run.augment_enabled.then_some(&augmenter);
            let batch = assemble_in(pool.as_ref(), items, &batch_idx, aug, run.seed, epoch)?;
            let st = trainer.finetune_step(&batch)?;
            step += 1;
            steps += 1;
            loss += st.loss;
            log.event(
                json!({"event": "step", "epoch": epoch, "step": step, "loss": st.loss, "metric": null}),
            )?;
        }
        trainer.epoch += 1;
        let report = evaluate_model(&trainer.model, val)?;
        let val_metric = report.map_pct / 100.0;
        let stats = EpochStats {
            stage: Stage::Finetune,
            epoch,
            steps,
            train_loss: loss / steps as f64,
            train_si_sdri: f64::NAN,
            val_metric,
            elapsed_s: t0.elapsed().as_secs_f64(),
        };
        info!("finetune epoch {epoch}: loss {:.4} val mAP {:.4}", stats.train_loss, val_metric);
        log.event(json!({
            "event": "epoch", "epoch": epoch, "step": step, "loss": stats.train_loss,
            "metric": val_metric, "elapsed_s": stats.elapsed_s,
        }))?;
        if val_metric > trainer.best_metric || history.is_empty() && trainer.best_metric.is_infinite() {
            trainer.best_metric = val_metric;
            best = trainer.checkpoint();
            save_pair(dir.as_deref(), "best.ckpt", &best)?;
        }
        save_pair(dir.as_deref(), "last.ckpt", &trainer.checkpoint())?;
        history.push(stats);
        if let Some(obs) = opts.observer.as_mut() {
            if obs(Event::Epoch(history.last().expect("pushed"), &trainer.model)) == Control::Stop {
                break;
            }
        }
    }
    Ok(TrainOutcome { best, last: trainer.checkpoint(), history, augment_calls: augmenter.calls() })
}

/// Scores of every item, evaluation mode, no augmentation.
pub fn predict_all(model: &Model<f32>, items: &[AsdItem]) -> Result<Vec<ScoreSequence>> {
    items.iter().map(|it| model.forward_asd(&it.audio, &it.faces)).collect()
}

pub fn evaluate_model(model: &Model<f32>, items: &[AsdItem]) -> Result<MetricReport> {
    if model.stage() != Stage::Finetune {
        return Err(Error::invalid("evaluation needs a model with a speaker backend"));
    }
    let scores = predict_all(model, items)?;
    let tracks: Vec<(ScoreSequence, LabelSequence)> =
        scores.into_iter().zip(items).map(|(s, it)| (s, it.labels.clone())).collect();
    MetricReport::compute(&tracks, 0.5)
}

/// Pooled metrics of a fine-tuned checkpoint over `items`.
pub fn evaluate(ckpt: &Checkpoint, items: &[AsdItem]) -> Result<MetricReport> {
    if ckpt.stage != Stage::Finetune {
        return Err(Error::invalid("checkpoint is from pretraining and has no speaker backend"));
    }
    evaluate_model(&ckpt.model()?, items)
}
