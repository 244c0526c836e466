//! Self-supervised target-speaker-extraction samples: a cropped target clip
//! with its face frames, plus interfering speech and/or noise mixed in at
//! sampled SNRs.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{self, FaceTrack, LabelSequence};
use crate::signal::{si_sdr, snr_gain, Waveform, SAMPLES_PER_FRAME, VIDEO_FPS};

/// Per-clip labels live next to the audio under this name.
pub const LABELS_FILE: &str = "labels.txt";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub speaker_id: String,
    /// Relative to the manifest root unless absolute.
    pub audio_path: String,
    /// Frame directory or packed frame file; empty for audio-only banks.
    pub frames_path: String,
    pub num_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusManifest {
    /// Directory that relative entry paths resolve against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.clip_id.as_str()) {
                return Err(Error::Corpus(format!("duplicate clip_id `{}`", e.clip_id)));
            }
        }
        Ok(Self { root: root.into(), entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn num_speakers(&self) -> usize {
        self.entries.iter().map(|e| e.speaker_id.as_str()).collect::<HashSet<_>>().len()
    }

    /// Writes one JSON record per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a JSONL manifest; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line)
                .map_err(|err| Error::Corpus(format!("{}:{}: {err}", path.display(), i + 1)))?;
            entries.push(e);
        }
        if entries.is_empty() {
            return Err(Error::Corpus(format!("{}: manifest is empty", path.display())));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(root, entries)
    }
}

/// Outcome of a directory scan.
#[derive(Debug, Clone)]
pub struct ScanReport {
    pub manifest: CorpusManifest,
    /// Clips excluded for inconsistent durations or unreadable media.
    pub skipped: Vec<(String, String)>,
}

fn rel_string(path: &Path, root: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

fn sorted_children(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> =
        fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    v.sort();
    Ok(v)
}

fn find_clip_media(dir: &Path) -> Result<Option<(PathBuf, PathBuf)>> {
    let mut wav = None;
    let mut frames = None;
    for p in sorted_children(dir)? {
        if p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")) {
            if wav.is_none() {
                wav = Some(p);
            }
        } else if p.is_dir() && p.file_name().is_some_and(|n| n == "frames") {
            frames = Some(p);
        } else if p.is_file() && p.file_name().is_some_and(|n| n == media::PACKED_FRAMES_FILE) {
            frames = Some(p);
        }
    }
    Ok(wav.zip(frames))
}

/// Scans `root` for clip directories holding one WAV plus a `frames/`
/// directory (or a packed frame file). The speaker id is the clip
/// directory's parent name. Clips whose audio length disagrees with the
/// frame count by more than one frame are skipped with a warning.
pub fn build_manifest(root: &Path) -> Result<ScanReport> {
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    let mut clip_dirs = Vec::new();
    while let Some(dir) = stack.pop() {
        if let Some(m) = find_clip_media(&dir)? {
            clip_dirs.push((dir, m));
            continue;
        }
        for p in sorted_children(&dir)?.into_iter().rev() {
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
    clip_dirs.sort_by(|a, b| a.0.cmp(&b.0));
    for (dir, (wav, frames)) in clip_dirs {
        let clip_id = rel_string(&dir, root);
        let speaker_id = dir
            .parent()
            .filter(|p| *p != root)
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| clip_id.clone());
        let checked = (|| -> Result<usize> {
            let audio = media::read_wav(&wav)?;
            let n = media::count_frames(&frames)?;
            let expected = n * SAMPLES_PER_FRAME;
            if n == 0 || audio.len().abs_diff(expected) > SAMPLES_PER_FRAME {
                return Err(Error::Corpus(format!(
                    "{n} frames imply {:.3} s but audio is {:.3} s",
                    n as f64 / VIDEO_FPS as f64,
                    audio.duration_s()
                )));
            }
            Ok(n)
        })();
        match checked {
            Ok(num_frames) => entries.push(ManifestEntry {
                clip_id,
                speaker_id,
                audio_path: rel_string(&wav, root),
                frames_path: rel_string(&frames, root),
                num_frames,
            }),
            Err(e) => {
                warn!("skipping clip {clip_id}: {e}");
                skipped.push((clip_id, e.to_string()));
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::Corpus(format!(
            "no valid clips under {} ({} skipped)",
            root.display(),
            skipped.len()
        )));
    }
    Ok(ScanReport { manifest: CorpusManifest::new(root, entries)?, skipped })
}

/// Manifest of every WAV directly inside `dir`, for noise and RIR banks.
pub fn build_audio_bank(dir: &Path) -> Result<CorpusManifest> {
    let mut entries = Vec::new();
    for p in sorted_children(dir)? {
        if !(p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav"))) {
            continue;
        }
        let audio = media::read_wav(&p)?;
        let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        entries.push(ManifestEntry {
            clip_id: id.clone(),
            speaker_id: id,
            audio_path: rel_string(&p, dir),
            frames_path: String::new(),
            num_frames: (audio.duration_s() * VIDEO_FPS as f64).round() as usize,
        });
    }
    CorpusManifest::new(dir, entries)
}

/// An audio-visual clip held in memory.
#[derive(Debug, Clone)]
pub struct Clip {
    pub clip_id: String,
    pub speaker_id: String,
    pub audio: Waveform,
    pub faces: FaceTrack,
    /// Present when a labels file sits next to the audio.
    pub labels: Option<LabelSequence>,
}

impl Clip {
    pub fn num_frames(&self) -> usize {
        self.faces.num_frames()
    }
}

/// All clips of a manifest, decoded. Audio is trimmed or zero-padded to
/// exactly `num_frames * 640` samples so that every clip is frame-aligned.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub clips: Vec<Clip>,
}

impl Corpus {
    pub fn load(manifest: &CorpusManifest) -> Result<Self> {
        let mut clips = Vec::with_capacity(manifest.len());
        for e in &manifest.entries {
            let audio_path = manifest.resolve(&e.audio_path);
            let audio = media::read_wav(&audio_path)?;
            let faces = media::read_frames(&manifest.resolve(&e.frames_path))?;
            let n = faces.num_frames();
            let mut samples = audio.into_samples();
            samples.resize(n * SAMPLES_PER_FRAME, 0.0);
            let labels_path = audio_path.parent().map(|p| p.join(LABELS_FILE)).filter(|p| p.is_file());
            let labels = match labels_path {
                Some(p) => {
                    let l = media::read_labels(&p)?;
                    if l.len() != n {
                        return Err(Error::Corpus(format!(
                            "clip {}: {} labels for {n} frames",
                            e.clip_id,
                            l.len()
                        )));
                    }
                    Some(l)
                }
                None => None,
            };
            clips.push(Clip {
                clip_id: e.clip_id.clone(),
                speaker_id: e.speaker_id.clone(),
                audio: Waveform::from_samples(samples)?,
                faces,
                labels,
            });
        }
        Ok(Self { clips })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn num_speakers(&self) -> usize {
        self.clips.iter().map(|c| c.speaker_id.as_str()).collect::<HashSet<_>>().len()
    }
}

/// Decoded non-speech audio (noise or room impulse responses).
#[derive(Debug, Clone, Default)]
pub struct AudioBank {
    pub ids: Vec<String>,
    pub waves: Vec<Waveform>,
}

impl AudioBank {
    pub fn load(manifest: &CorpusManifest) -> Result<Self> {
        let mut bank = Self::default();
        for e in &manifest.entries {
            bank.ids.push(e.clip_id.clone());
            bank.waves.push(media::read_wav(&manifest.resolve(&e.audio_path))?);
        }
        Ok(bank)
    }

    pub fn is_empty(&self) -> bool {
        self.waves.is_empty()
    }

    pub fn len(&self) -> usize {
        self.waves.len()
    }

    /// A random excerpt of `len` samples from a random entry, looping
    /// entries shorter than `len`.
    pub fn excerpt(&self, rng: &mut impl Rng, len: usize) -> Option<(usize, Waveform)> {
        if self.waves.is_empty() || len == 0 {
            return None;
        }
        let i = rng.random_range(0..self.waves.len());
        let src = self.waves[i].samples();
        let onset = if src.len() > len { rng.random_range(0..=src.len() - len) } else { 0 };
        let out: Vec<f64> = (0..len).map(|j| src[(onset + j) % src.len()]).collect();
        Waveform::new(out, self.waves[i].sample_rate()).ok().map(|w| (i, w))
    }
}

/// Composition of the interfering signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InterferenceMode {
    /// One non-speech noise source.
    N,
    /// One other speaker.
    S,
    /// One other speaker plus noise.
    SN,
    /// Two other speakers plus noise.
    SSN,
}

impl InterferenceMode {
    pub const ALL: [InterferenceMode; 4] = [Self::N, Self::S, Self::SN, Self::SSN];

    pub fn num_speakers(self) -> usize {
        match self {
            Self::N => 0,
            Self::S | Self::SN => 1,
            Self::SSN => 2,
        }
    }

    pub fn needs_noise(self) -> bool {
        !matches!(self, Self::S)
    }
}

impl fmt::Display for InterferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::N => "N",
            Self::S => "S",
            Self::SN => "SN",
            Self::SSN => "SSN",
        })
    }
}

impl std::str::FromStr for InterferenceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "N" => Ok(Self::N),
            "S" => Ok(Self::S),
            "SN" => Ok(Self::SN),
            "SSN" => Ok(Self::SSN),
            other => {
                Err(Error::invalid(format!("unknown interference mode `{other}` (expected N, S, SN or SSN)")))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceKind {
    Speech,
    Noise,
}

/// One interfering addend, already scaled.
#[derive(Debug, Clone)]
pub struct Interferer {
    pub kind: SourceKind,
    pub source_id: String,
    pub snr_db: f64,
    pub gain: f64,
    pub scaled: Waveform,
}

#[derive(Debug, Clone)]
pub struct MixtureSample {
    pub mixture: Waveform,
    pub clean_target: Waveform,
    pub faces: FaceTrack,
    pub mode: InterferenceMode,
    pub snr_db_used: Vec<f64>,
    pub target_id: String,
    pub onset_frame: usize,
    pub interferers: Vec<Interferer>,
}

impl MixtureSample {
    /// SI-SDR of the unprocessed mixture against the clean target.
    pub fn baseline_si_sdr(&self) -> Result<f64> {
        si_sdr(&self.mixture, &self.clean_target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixOptions {
    pub snr_range: (f64, f64),
    pub duration_s: f64,
}

impl Default for MixOptions {
    fn default() -> Self {
        Self { snr_range: (-10.0, 10.0), duration_s: 4.0 }
    }
}

const MAX_TARGET_TRIES: usize = 16;

fn frames_for(duration_s: f64) -> Result<usize> {
    let n = (duration_s * VIDEO_FPS as f64).round();
    if !(n >= 1.0) {
        return Err(Error::invalid(format!("duration {duration_s} s is shorter than one frame")));
    }
    Ok(n as usize)
}

fn crop_audio(clip: &Clip, onset: usize, frames: usize) -> Result<Waveform> {
    clip.audio.slice(onset * SAMPLES_PER_FRAME, frames * SAMPLES_PER_FRAME)
}

/// Checks that `corpus` and `noise` can serve `mode`.
pub fn check_mode_support(corpus: &Corpus, noise: Option<&AudioBank>, mode: InterferenceMode) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Corpus("corpus is empty".into()));
    }
    if mode.num_speakers() > 0 && corpus.num_speakers() < 2 {
        return Err(Error::Corpus(format!(
            "mode {mode} needs at least 2 distinct speakers, corpus has {}",
            corpus.num_speakers()
        )));
    }
    if mode.needs_noise() && noise.is_none_or(|b| b.is_empty()) {
        return Err(Error::Corpus(format!("mode {mode} needs a non-empty noise bank")));
    }
    Ok(())
}

/// Draws one training mixture. Deterministic in `seed`.
pub fn generate_mixture(
    corpus: &Corpus,
    noise: Option<&AudioBank>,
    mode: InterferenceMode,
    opts: &MixOptions,
    seed: u64,
) -> Result<MixtureSample> {
    check_mode_support(corpus, noise, mode)?;
    let (lo, hi) = opts.snr_range;
    if !(lo <= hi) {
        return Err(Error::invalid(format!("SNR range [{lo}, {hi}] is not ordered")));
    }
    let need = frames_for(opts.duration_s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut target = None;
    for _ in 0..MAX_TARGET_TRIES {
        let i = rng.random_range(0..corpus.len());
        if corpus.clips[i].num_frames() >= need {
            target = Some(i);
            break;
        }
    }
    let ti = target.ok_or_else(|| {
        Error::Corpus(format!(
            "no clip of at least {} s found after {MAX_TARGET_TRIES} draws",
            opts.duration_s
        ))
    })?;
    let tclip = &corpus.clips[ti];
    let onset = rng.random_range(0..=tclip.num_frames() - need);
    let clean = crop_audio(tclip, onset, need)?;
    let faces = tclip.faces.slice(onset, need)?;
    let len = clean.len();

    let others: Vec<usize> =
        (0..corpus.len()).filter(|&j| corpus.clips[j].speaker_id != tclip.speaker_id).collect();
    let mut interferers = Vec::new();
    let snr_draw = |rng: &mut ChaCha8Rng| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    for _ in 0..mode.num_speakers() {
        let j = others[rng.random_range(0..others.len())];
        let clip = &corpus.clips[j];
        let wave = if clip.num_frames() >= need {
            let o = rng.random_range(0..=clip.num_frames() - need);
            crop_audio(clip, o, need)?
        } else {
            let mut s = clip.audio.samples().to_vec();
            s.resize(len, 0.0);
            Waveform::from_samples(s)?
        };
        let snr = snr_draw(&mut rng);
        let gain = snr_gain(&clean, &wave, snr)?;
        interferers.push(Interferer {
            kind: SourceKind::Speech,
            source_id: clip.clip_id.clone(),
            snr_db: snr,
            gain,
            scaled: wave.scaled(gain),
        });
    }
    if mode.needs_noise() {
        let bank = noise.expect("checked above");
        let (k, wave) = bank
            .excerpt(&mut rng, len)
            .ok_or_else(|| Error::Corpus("noise bank produced no excerpt".into()))?;
        let snr = snr_draw(&mut rng);
        let gain = snr_gain(&clean, &wave, snr)?;
        interferers.push(Interferer {
            kind: SourceKind::Noise,
            source_id: bank.ids[k].clone(),
            snr_db: snr,
            gain,
            scaled: wave.scaled(gain),
        });
    }
    let mut mixture = clean.clone();
    for i in &interferers {
        mixture = mixture.add(&i.scaled)?;
    }
    Ok(MixtureSample {
        mixture,
        clean_target: clean,
        faces,
        mode,
        snr_db_used: interferers.iter().map(|i| i.snr_db).collect(),
        target_id: tclip.clip_id.clone(),
        onset_frame: onset,
        interferers,
    })
}

/// Writes `count` mixtures under `out_dir/<index>/` as `mixture.wav`,
/// `target.wav` and packed frames, plus an `index.jsonl` of sources and
/// gains.
pub fn write_mixtures(
    corpus: &Corpus,
    noise: Option<&AudioBank>,
    mode: InterferenceMode,
    opts: &MixOptions,
    seed: u64,
    count: usize,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let index_path = out_dir.join("index.jsonl");
    let mut index = Vec::new();
    for i in 0..count {
        let s = generate_mixture(corpus, noise, mode, opts, seed.wrapping_add(i as u64))?;
        let dir = out_dir.join(format!("{i:06}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        media::write_wav(&dir.join("mixture.wav"), &s.mixture)?;
        media::write_wav(&dir.join("target.wav"), &s.clean_target)?;
        media::write_packed_frames(&dir.join(media::PACKED_FRAMES_FILE), &s.faces)?;
        let record = serde_json::json!({
            "index": i,
            "mode": mode.to_string(),
            "target": s.target_id,
            "onset_frame": s.onset_frame,
            "baseline_si_sdr_db": s.baseline_si_sdr()?,
            "sources": s.interferers.iter().map(|x| serde_json::json!({
                "kind": x.kind,
                "id": x.source_id,
                "snr_db": x.snr_db,
                "gain": x.gain,
            })).collect::<Vec<_>>(),
        });
        writeln!(index, "{record}").map_err(|e| Error::io(&index_path, e))?;
    }
    fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))
}
