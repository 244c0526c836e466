//! Synthetic audio-visual corpus for offline end-to-end runs.
//!
//! Each speaker owns a carrier frequency, a lip rate and a background gray
//! level. While speaking, the audio is an amplitude-modulated tone whose
//! envelope follows the mouth opening drawn in the frames; silent stretches
//! hold a low noise floor and a closed mouth.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::media::{self, FaceTrack, LabelSequence, FACE_SIZE};
use crate::signal::{Waveform, SAMPLES_PER_FRAME, SAMPLE_RATE, VIDEO_FPS};
use crate::synth::{build_audio_bank, build_manifest, LABELS_FILE};

pub const TOY_FRAMES: usize = 100;
const NOISE_FLOOR: f64 = 0.002;
const TONE_AMP: f64 = 0.4;

#[derive(Debug, Clone, Copy)]
struct Voice {
    carrier_hz: f64,
    lip_hz: f64,
    gray: f32,
}

const VOICES: [Voice; 2] = [
    Voice { carrier_hz: 500.0, lip_hz: 2.5, gray: 0.3 },
    Voice { carrier_hz: 2000.0, lip_hz: 5.0, gray: 0.6 },
];

/// Where the generator put things.
#[derive(Debug, Clone)]
pub struct ToyPaths {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub noise_manifest: PathBuf,
    pub rir_manifest: PathBuf,
}

/// Alternating speaking/silent runs of 10 to 30 frames, redrawn until the
/// positive share lies in [0.4, 0.6].
fn draw_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    loop {
        let mut out = Vec::with_capacity(n);
        let mut speaking = rng.random_bool(0.5);
        while out.len() < n {
            let run = rng.random_range(10..=30).min(n - out.len());
            out.extend(std::iter::repeat_n(speaking, run));
            speaking = !speaking;
        }
        let pos = out.iter().filter(|&&b| b).count() as f64 / n as f64;
        if (0.4..=0.6).contains(&pos) {
            return out;
        }
    }
}

/// Mouth opening in [0, 1] at time `t` seconds.
fn envelope(v: &Voice, phase: f64, t: f64) -> f64 {
    0.5 + 0.5 * (TAU * v.lip_hz * t + phase).sin()
}

fn render_clip(rng: &mut ChaCha8Rng, voice: &Voice, n: usize) -> (Waveform, FaceTrack, LabelSequence) {
    let labels = draw_labels(rng, n);
    let phase = rng.random_range(0.0..TAU);
    let len = n * SAMPLES_PER_FRAME;
    let mut audio = Vec::with_capacity(len);
    for i in 0..len {
        let t = i as f64 / SAMPLE_RATE as f64;
        let noise = NOISE_FLOOR * rng.random_range(-1.0..1.0);
        let tone = if labels[i / SAMPLES_PER_FRAME] {
            let env = 0.6 + 0.4 * envelope(voice, phase, t);
            TONE_AMP * env * (TAU * voice.carrier_hz * t).sin()
        } else {
            0.0
        };
        audio.push(tone + noise);
    }

    let mut frames = Array3::<f32>::from_elem((n, FACE_SIZE, FACE_SIZE), voice.gray);
    for f in 0..n {
        let t = (f as f64 + 0.5) / VIDEO_FPS as f64;
        // closed mouth is a 2-pixel line; speaking opens it to 6..26 pixels
        let height = if labels[f] { 6 + (20.0 * envelope(voice, phase, t)).round() as usize } else { 2 };
        let (cy, cx, half_w) = (80usize, 56usize, 20usize);
        let top = cy - height / 2;
        for y in top..top + height {
            for x in cx - half_w..cx + half_w {
                frames[[f, y, x]] = 0.95;
            }
        }
        // eyes give the face some fixed structure
        for (ey, ex) in [(40usize, 36usize), (40, 76)] {
            for y in ey - 3..ey + 3 {
                for x in ex - 5..ex + 5 {
                    frames[[f, y, x]] = 0.05;
                }
            }
        }
    }
    (
        Waveform::from_samples(audio).expect("finite"),
        FaceTrack::new(frames).expect("112x112"),
        LabelSequence(labels),
    )
}

/// Lowpassed white noise with a per-file smoothing factor.
fn render_noise(rng: &mut ChaCha8Rng, len: usize, smooth: f64) -> Waveform {
    let mut y = 0.0;
    let s: Vec<f64> = (0..len)
        .map(|_| {
            y = smooth * y + (1.0 - smooth) * rng.random_range(-1.0..1.0);
            y
        })
        .collect();
    let peak = s.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    Waveform::from_samples(s.iter().map(|v| 0.5 * v / peak).collect()).expect("finite")
}

/// Direct path plus an exponentially decaying noise tail.
fn render_rir(rng: &mut ChaCha8Rng, len: usize, decay: f64) -> Waveform {
    let mut s = vec![0.0; len];
    s[0] = 1.0;
    for (i, v) in s.iter_mut().enumerate().skip(1) {
        *v = 0.3 * (-(i as f64) / decay).exp() * rng.random_range(-1.0..1.0);
    }
    Waveform::from_samples(s).expect("finite")
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes `num_clips` four-second clips, alternating between two speakers,
/// plus noise and RIR banks and their manifests. The same seed gives a
/// byte-identical tree.
pub fn make_toy_dataset(out_dir: &Path, num_clips: usize, seed: u64) -> Result<ToyPaths> {
    if num_clips == 0 {
        return Err(Error::invalid("num_clips must be positive"));
    }
    mkdir(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in 0..num_clips {
        let spk = c % VOICES.len();
        let dir = out_dir.join(format!("spk{spk}")).join(format!("clip{c:03}"));
        mkdir(&dir)?;
        let (audio, faces, labels) = render_clip(&mut rng, &VOICES[spk], TOY_FRAMES);
        media::write_wav(&dir.join("audio.wav"), &audio)?;
        media::write_frames_dir(&dir.join("frames"), &faces)?;
        media::write_labels(&dir.join(LABELS_FILE), &labels)?;
    }
    let noise_dir = out_dir.join("noise");
    mkdir(&noise_dir)?;
    for (i, smooth) in [0.0, 0.5, 0.9, 0.98].into_iter().enumerate() {
        let w = render_noise(&mut rng, 5 * SAMPLE_RATE as usize, smooth);
        media::write_wav(&noise_dir.join(format!("noise{i}.wav")), &w)?;
    }
    let rir_dir = out_dir.join("rir");
    mkdir(&rir_dir)?;
    for (i, decay) in [40.0, 120.0, 300.0].into_iter().enumerate() {
        let w = render_rir(&mut rng, 1600, decay);
        media::write_wav(&rir_dir.join(format!("rir{i}.wav")), &w)?;
    }

    let paths = ToyPaths {
        root: out_dir.to_path_buf(),
        manifest: out_dir.join("manifest.jsonl"),
        noise_manifest: noise_dir.join("manifest.jsonl"),
        rir_manifest: rir_dir.join("manifest.jsonl"),
    };
    let mut clips = build_manifest(out_dir)?.manifest;
    clips.entries.retain(|e| e.speaker_id.starts_with("spk"));
    clips.save(&paths.manifest)?;
    build_audio_bank(&noise_dir)?.save(&paths.noise_manifest)?;
    build_audio_bank(&rir_dir)?.save(&paths.rir_manifest)?;
    Ok(paths)
}
