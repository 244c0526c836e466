//! Face tracks, label/score sequences and their on-disk formats (16-bit PCM
//! WAV, 8-bit grayscale PNG frames, one-label-per-line text).

use std::fs;
use std::io::{BufWriter, Read};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::signal::{Waveform, SAMPLE_RATE};

/// Face crop side length in pixels.
pub const FACE_SIZE: usize = 112;

/// Name of the packed alternative to a PNG frame directory: raw `u8` pixels,
/// `N x 112 x 112`, row-major.
pub const PACKED_FRAMES_FILE: &str = "frames.u8";

/// Grayscale face crops at 25 fps, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceTrack {
    frames: Array3<f32>,
}

impl FaceTrack {
    pub fn new(frames: Array3<f32>) -> Result<Self> {
        let (n, h, w) = frames.dim();
        if n == 0 {
            return Err(Error::invalid("face track has no frames"));
        }
        if h != FACE_SIZE || w != FACE_SIZE {
            return Err(Error::shape(format!("face frames must be {FACE_SIZE}x{FACE_SIZE}, got {h}x{w}")));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("face track holds non-finite pixels"));
        }
        Ok(Self { frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn frames(&self) -> &Array3<f32> {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut Array3<f32> {
        &mut self.frames
    }

    pub fn frame(&self, i: usize) -> ArrayView2<'_, f32> {
        self.frames.index_axis(ndarray::Axis(0), i)
    }

    /// Frames `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.num_frames() {
            return Err(Error::invalid(format!(
                "frame slice [{start}, {}) outside track of {} frames",
                start + len,
                self.num_frames()
            )));
        }
        Self::new(self.frames.slice(ndarray::s![start..start + len, .., ..]).to_owned())
    }
}

/// Per-frame ground truth: `true` = speaking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSequence(pub Vec<bool>);

impl LabelSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// Per-frame speaking probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSequence(pub Vec<f64>);

impl ScoreSequence {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("score {p} outside [0, 1]")));
        }
        Ok(Self(probs))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::AudioFormat { path: path.to_path_buf(), detail: e.to_string() })?;
    let spec = reader.spec();
    let bad = |detail: String| Error::AudioFormat { path: path.to_path_buf(), detail };
    if spec.channels != 1 {
        return Err(bad(format!("channels = {} (expected mono)", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(bad(format!("sample rate = {} Hz (expected {SAMPLE_RATE})", spec.sample_rate)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(bad(format!(
            "sample format = {:?} {}-bit (expected 16-bit PCM)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| bad(e.to_string()))?;
    Waveform::new(samples, SAMPLE_RATE).map_err(|e| bad(e.to_string()))
}

/// Writes 16-bit PCM; samples are clipped to `[-1, 1)`.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(io_err)?;
    for &s in wave.samples() {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(io_err)?;
    }
    w.finalize().map_err(io_err)
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.png")
}

pub fn write_png_gray(path: &Path, frame: ArrayView2<'_, f32>) -> Result<()> {
    let (h, w) = frame.dim();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let data: Vec<u8> = frame.iter().map(|&v| to_u8(v)).collect();
    let png_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&data).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

pub fn read_png_gray(path: &Path) -> Result<Array2<f32>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let fmt = |d: String| Error::io(path, std::io::Error::other(d));
    let mut reader = decoder.read_info().map_err(|e| fmt(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| fmt(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(fmt(format!(
            "expected 8-bit grayscale PNG, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..w * h];
    Ok(Array2::from_shape_fn((h, w), |(r, c)| data[r * w + c] as f32 / 255.0))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes one PNG per frame into `dir` (created if needed).
pub fn write_frames_dir(dir: &Path, track: &FaceTrack) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for i in 0..track.num_frames() {
        write_png_gray(&dir.join(frame_file_name(i)), track.frame(i))?;
    }
    Ok(())
}

/// Loads a face track from a directory of zero-padded PNGs, or from a packed
/// `frames.u8` file when `path` points to one.
pub fn read_frames(path: &Path) -> Result<FaceTrack> {
    if path.is_file() {
        return read_packed_frames(path);
    }
    let packed = path.join(PACKED_FRAMES_FILE);
    if packed.is_file() {
        return read_packed_frames(&packed);
    }
    let files = list_frame_files(path)?;
    if files.is_empty() {
        return Err(Error::Corpus(format!("no PNG frames in {}", path.display())));
    }
    let mut frames = Array3::zeros((files.len(), FACE_SIZE, FACE_SIZE));
    for (i, f) in files.iter().enumerate() {
        let img = read_png_gray(f)?;
        if img.dim() != (FACE_SIZE, FACE_SIZE) {
            return Err(Error::shape(format!(
                "{}: frame is {:?}, expected {FACE_SIZE}x{FACE_SIZE}",
                f.display(),
                img.dim()
            )));
        }
        frames.index_axis_mut(ndarray::Axis(0), i).assign(&img);
    }
    FaceTrack::new(frames)
}

/// Sorted PNG paths in a frame directory.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Frame count of a frame directory or packed file without decoding pixels.
pub fn count_frames(path: &Path) -> Result<usize> {
    let packed = if path.is_file() { path.to_path_buf() } else { path.join(PACKED_FRAMES_FILE) };
    if packed.is_file() {
        let len = fs::metadata(&packed).map_err(|e| Error::io(&packed, e))?.len() as usize;
        if len % (FACE_SIZE * FACE_SIZE) != 0 {
            return Err(Error::Corpus(format!(
                "{}: size {len} is not a whole number of {FACE_SIZE}x{FACE_SIZE} frames",
                packed.display()
            )));
        }
        return Ok(len / (FACE_SIZE * FACE_SIZE));
    }
    Ok(list_frame_files(path)?.len())
}

fn read_packed_frames(path: &Path) -> Result<FaceTrack> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    let per = FACE_SIZE * FACE_SIZE;
    if bytes.is_empty() || bytes.len() % per != 0 {
        return Err(Error::Corpus(format!(
            "{}: size {} is not a whole number of frames",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / per;
    let frames = Array3::from_shape_vec(
        (n, FACE_SIZE, FACE_SIZE),
        bytes.into_iter().map(|b| b as f32 / 255.0).collect(),
    )
    .map_err(|e| Error::shape(e.to_string()))?;
    FaceTrack::new(frames)
}

pub fn write_packed_frames(path: &Path, track: &FaceTrack) -> Result<()> {
    let bytes: Vec<u8> = track.frames().iter().map(|&v| to_u8(v)).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<LabelSequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        match line.trim() {
            "" => continue,
            "0" => out.push(false),
            "1" => out.push(true),
            other => {
                return Err(Error::Corpus(format!(
                    "{}:{}: label must be 0 or 1, got `{other}`",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(LabelSequence(out))
}

pub fn write_labels(path: &Path, labels: &LabelSequence) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 2);
    for &b in &labels.0 {
        text.push(if b { '1' } else { '0' });
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
