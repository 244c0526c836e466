//! Label-preserving corruption for ASD fine-tuning. "Plus" adds one acoustic
//! corruption (speech from another clip, ambient noise, or reverberation).
//! "Minus" deletes short audio segments, a square region of every face
//! frame, and a few whole runs of frames.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use log::warn;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::media::{FaceTrack, FACE_SIZE};
use crate::signal::{convolve_rir, mix_at_snr, Waveform, VIDEO_FPS};
use crate::synth::AudioBank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NoiseSource {
    /// Speech from another clip of the training set.
    InDomain,
    Reverberation,
    Ambient,
}

impl NoiseSource {
    pub fn name(self) -> &'static str {
        match self {
            Self::InDomain => "in_domain",
            Self::Reverberation => "reverberation",
            Self::Ambient => "ambient",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "in_domain" => Ok(Self::InDomain),
            "reverberation" => Ok(Self::Reverberation),
            "ambient" => Ok(Self::Ambient),
            other => Err(Error::invalid(format!("unknown noise source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub audio_mask_frac: f64,
    pub visual_mask_frac: f64,
    pub segment_dur_range_s: (f64, f64),
    pub cutout_side_range_px: (usize, usize),
    pub plus_snr_range_db: (f64, f64),
    pub noise_sources: BTreeSet<NoiseSource>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            audio_mask_frac: 0.25,
            visual_mask_frac: 0.10,
            segment_dur_range_s: (0.2, 0.8),
            cutout_side_range_px: (45, 112),
            plus_snr_range_db: (-5.0, 20.0),
            noise_sources: [NoiseSource::InDomain, NoiseSource::Reverberation, NoiseSource::Ambient]
                .into_iter()
                .collect(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let frac_ok = |f: f64| (0.0..=1.0).contains(&f);
        if !frac_ok(self.audio_mask_frac) || !frac_ok(self.visual_mask_frac) {
            return Err(Error::invalid("mask fractions must lie in [0, 1]"));
        }
        let (dl, dh) = self.segment_dur_range_s;
        if !(dl > 0.0 && dl <= dh) {
            return Err(Error::invalid(format!(
                "segment duration range [{dl}, {dh}] must be positive and ordered"
            )));
        }
        let (cl, ch) = self.cutout_side_range_px;
        if cl > ch || ch > FACE_SIZE {
            return Err(Error::invalid(format!(
                "cutout side range [{cl}, {ch}] must be ordered and at most {FACE_SIZE}"
            )));
        }
        let (sl, sh) = self.plus_snr_range_db;
        if !(sl <= sh) {
            return Err(Error::invalid(format!("plus SNR range [{sl}, {sh}] is not ordered")));
        }
        Ok(())
    }
}

/// Corruption sources for the plus step.
#[derive(Debug, Clone, Default)]
pub struct PlusBank {
    pub in_domain: AudioBank,
    pub ambient: AudioBank,
    pub rir: AudioBank,
}

impl PlusBank {
    fn bank(&self, s: NoiseSource) -> &AudioBank {
        match s {
            NoiseSource::InDomain => &self.in_domain,
            NoiseSource::Ambient => &self.ambient,
            NoiseSource::Reverberation => &self.rir,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Applies one corruption drawn uniformly from the configured sources that
/// have material. Returns the input unchanged when none do.
pub fn plus_augment_audio(
    audio: &Waveform,
    bank: &PlusBank,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let available: Vec<NoiseSource> = cfg
        .noise_sources
        .iter()
        .copied()
        .filter(|&s| match s {
            NoiseSource::Reverberation => bank.rir.waves.iter().any(|r| r.len() < audio.len()),
            _ => !bank.bank(s).is_empty(),
        })
        .collect();
    if available.is_empty() {
        if !cfg.noise_sources.is_empty() {
            warn!("plus augmentation skipped: no bank has material for the configured sources");
        }
        return Ok(audio.clone());
    }
    let source = available[rng.random_range(0..available.len())];
    match source {
        NoiseSource::Reverberation => {
            let usable: Vec<&Waveform> = bank.rir.waves.iter().filter(|r| r.len() < audio.len()).collect();
            let rir = usable[rng.random_range(0..usable.len())];
            convolve_rir(audio, rir)
        }
        other => {
            let (_, noise) = bank.bank(other).excerpt(&mut rng, audio.len()).expect("bank is non-empty");
            let snr = uniform(&mut rng, cfg.plus_snr_range_db);
            if audio.energy() <= 0.0 || noise.energy() <= 0.0 {
                return Ok(audio.clone());
            }
            mix_at_snr(audio, &noise, snr)
        }
    }
}

/// Segment layout of a minus step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMask {
    /// Units (samples or frames) per segment.
    pub seg_len: usize,
    pub num_segments: usize,
    /// Indices of zeroed segments, ascending.
    pub masked: Vec<usize>,
}

impl SegmentMask {
    fn draw(rng: &mut ChaCha8Rng, total: usize, units_per_s: f64, frac: f64, range: (f64, f64)) -> Self {
        let d = uniform(rng, range);
        let seg_len = ((d * units_per_s).round() as usize).max(1);
        let num_segments = total.div_ceil(seg_len);
        let count = ((frac * num_segments as f64).round().max(0.0) as usize).min(num_segments);
        let mut masked = sample(rng, num_segments, count).into_vec();
        masked.sort_unstable();
        Self { seg_len, num_segments, masked }
    }

    /// Unit ranges `[start, end)` of the masked segments, clipped to `total`.
    pub fn ranges(&self, total: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.masked.iter().map(move |&i| (i * self.seg_len, ((i + 1) * self.seg_len).min(total)))
    }
}

pub fn minus_augment_audio_detailed(
    audio: &Waveform,
    cfg: &AugmentConfig,
    seed: u64,
) -> (Waveform, SegmentMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = audio.len();
    let mask = SegmentMask::draw(
        &mut rng,
        len,
        audio.sample_rate() as f64,
        cfg.audio_mask_frac,
        cfg.segment_dur_range_s,
    );
    let mut s = audio.samples().to_vec();
    for (a, b) in mask.ranges(len) {
        s[a..b].iter_mut().for_each(|v| *v = 0.0);
    }
    let out = Waveform::new(s, audio.sample_rate()).expect("zeroing keeps samples finite");
    (out, mask)
}

/// Zeroes a share of randomly placed segments of random duration.
pub fn minus_augment_audio(audio: &Waveform, cfg: &AugmentConfig, seed: u64) -> Waveform {
    minus_augment_audio_detailed(audio, cfg, seed).0
}

/// Cutout square and frame mask of a visual minus step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisualMask {
    pub side: usize,
    pub top: usize,
    pub left: usize,
    pub frames: SegmentMask,
}

pub fn minus_augment_visual_detailed(
    faces: &FaceTrack,
    cfg: &AugmentConfig,
    seed: u64,
) -> (FaceTrack, VisualMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = cfg.cutout_side_range_px;
    let side = rng.random_range(lo..=hi).min(FACE_SIZE);
    let top = rng.random_range(0..=FACE_SIZE - side);
    let left = rng.random_range(0..=FACE_SIZE - side);
    let n = faces.num_frames();
    let frames =
        SegmentMask::draw(&mut rng, n, VIDEO_FPS as f64, cfg.visual_mask_frac, cfg.segment_dur_range_s);
    let mut out = faces.clone();
    let arr = out.frames_mut();
    if side > 0 {
        arr.slice_mut(ndarray::s![.., top..top + side, left..left + side]).fill(0.0);
    }
    for (a, b) in frames.ranges(n) {
        arr.slice_mut(ndarray::s![a..b, .., ..]).fill(0.0);
    }
    (out, VisualMask { side, top, left, frames })
}

/// One square cutout shared by all frames, then whole runs of frames zeroed.
pub fn minus_augment_visual(faces: &FaceTrack, cfg: &AugmentConfig, seed: u64) -> FaceTrack {
    minus_augment_visual_detailed(faces, cfg, seed).0
}

/// The full plus-and-minus step with a call counter, so callers can prove
/// when augmentation was or was not exercised.
#[derive(Debug, Default)]
pub struct Augmenter {
    pub cfg: AugmentConfig,
    pub bank: PlusBank,
    calls: AtomicUsize,
}

impl Augmenter {
    pub fn new(cfg: AugmentConfig, bank: PlusBank) -> Self {
        Self { cfg, bank, calls: AtomicUsize::new(0) }
    }

    /// Plus then minus on the audio, minus on the faces. Sub-seeds are
    /// derived from `seed` so the three draws are independent.
    pub fn apply(&self, audio: &Waveform, faces: &FaceTrack, seed: u64) -> Result<(Waveform, FaceTrack)> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s1, s2, s3): (u64, u64, u64) = (rng.random(), rng.random(), rng.random());
        let a = plus_augment_audio(audio, &self.bank, &self.cfg, s1)?;
        let a = minus_augment_audio(&a, &self.cfg, s2);
        let f = minus_augment_visual(faces, &self.cfg, s3);
        Ok((a, f))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}
