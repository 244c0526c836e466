//! Time-domain DSP primitives shared by mixture synthesis, augmentation and
//! the network: SNR mixing, SI-SDR, RIR convolution and the 50%-overlap
//! chunking used by the dual-path encoder.

use ndarray::{s, Array2, Array3};

use crate::error::{Error, Result};
use crate::float::Float;

/// Canonical pipeline sample rate.
pub const SAMPLE_RATE: u32 = 16_000;
/// Face-track frame rate.
pub const VIDEO_FPS: u32 = 25;
/// Audio samples spanned by one visual frame (40 ms).
pub const SAMPLES_PER_FRAME: usize = (SAMPLE_RATE / VIDEO_FPS) as usize;

/// SI-SDR value standing in for +inf when the estimate is an exact rescaling
/// of the reference.
pub const SI_SDR_SENTINEL_DB: f64 = 1e9;

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform is empty"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    /// Builds a waveform at [`SAMPLE_RATE`].
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, SAMPLE_RATE)
    }

    pub fn zeros(len: usize) -> Result<Self> {
        Self::from_samples(vec![0.0; len])
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        energy(&self.samples)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Copy of `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.samples.len() || len == 0 {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) outside waveform of {} samples",
                start + len,
                self.samples.len()
            )));
        }
        Self::new(self.samples[start..start + len].to_vec(), self.sample_rate)
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self { samples: self.samples.iter().map(|x| x * gain).collect(), sample_rate: self.sample_rate }
    }

    pub fn add(&self, other: &Waveform) -> Result<Self> {
        check_compatible(self, other)?;
        let samples = self.samples.iter().zip(&other.samples).map(|(a, b)| a + b).collect();
        Ok(Self { samples, sample_rate: self.sample_rate })
    }

    pub fn sub(&self, other: &Waveform) -> Result<Self> {
        self.add(&other.scaled(-1.0))
    }
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn check_compatible(a: &Waveform, b: &Waveform) -> Result<()> {
    if a.sample_rate != b.sample_rate {
        return Err(Error::invalid(format!("sample rate mismatch: {} vs {}", a.sample_rate, b.sample_rate)));
    }
    if a.len() != b.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {} samples", a.len(), b.len())));
    }
    Ok(())
}

/// Gain that brings `interference` to `snr_db` below `target`.
pub fn snr_gain(target: &Waveform, interference: &Waveform, snr_db: f64) -> Result<f64> {
    check_compatible(target, interference)?;
    let et = target.energy();
    let ei = interference.energy();
    if et <= 0.0 {
        return Err(Error::invalid("target has zero energy"));
    }
    if ei <= 0.0 {
        return Err(Error::invalid("interference has zero energy"));
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid(format!("snr_db must be finite, got {snr_db}")));
    }
    Ok((et / (ei * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// `target + g * interference` with `g` chosen so the energy ratio of the two
/// addends is exactly `snr_db`.
pub fn mix_at_snr(target: &Waveform, interference: &Waveform, snr_db: f64) -> Result<Waveform> {
    let g = snr_gain(target, interference, snr_db)?;
    target.add(&interference.scaled(g))
}

/// Scale-invariant SDR in dB. Returns `+inf` when the estimate lies exactly on
/// the reference direction.
pub fn si_sdr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    check_compatible(estimate, reference)?;
    si_sdr_slices(estimate.samples(), reference.samples())
}

pub(crate) fn si_sdr_slices(est: &[f64], reference: &[f64]) -> Result<f64> {
    let ref_energy = energy(reference);
    if ref_energy <= 0.0 {
        return Err(Error::invalid("SI-SDR reference has zero energy"));
    }
    let dot: f64 = est.iter().zip(reference).map(|(a, b)| a * b).sum();
    let alpha = dot / ref_energy;
    let mut target = 0.0;
    let mut residual = 0.0;
    for (e, r) in est.iter().zip(reference) {
        let t = alpha * r;
        target += t * t;
        residual += (e - t) * (e - t);
    }
    if target <= 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    // Relative floor: a residual at rounding level of the projection is zero.
    if residual <= target * 1e-24 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (target / residual).log10())
}

/// Linear convolution with a room impulse response, truncated to the dry
/// length and rescaled to the dry signal's peak.
pub fn convolve_rir(dry: &Waveform, rir: &Waveform) -> Result<Waveform> {
    if rir.is_empty() {
        return Err(Error::invalid("empty RIR"));
    }
    if dry.sample_rate != rir.sample_rate {
        return Err(Error::invalid(format!(
            "sample rate mismatch: dry {} vs rir {}",
            dry.sample_rate, rir.sample_rate
        )));
    }
    if rir.len() >= dry.len() {
        return Err(Error::invalid(format!(
            "RIR ({} samples) must be shorter than the dry signal ({})",
            rir.len(),
            dry.len()
        )));
    }
    let x = dry.samples();
    let h = rir.samples();
    let n = x.len();
    let mut out = vec![0.0; n];
    for (k, &hk) in h.iter().enumerate() {
        if hk == 0.0 {
            continue;
        }
        for (o, &xi) in out[k..].iter_mut().zip(&x[..n - k]) {
            *o += hk * xi;
        }
    }
    let wet_peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let dry_peak = dry.peak();
    if wet_peak > 0.0 {
        let g = dry_peak / wet_peak;
        out.iter_mut().for_each(|v| *v *= g);
    }
    Waveform::new(out, dry.sample_rate)
}

/// Frame-major feature matrix (`frames x dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap2D<F> {
    pub values: Array2<F>,
}

impl<F: Float> FeatureMap2D<F> {
    pub fn new(values: Array2<F>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::invalid("feature map has zero frames"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map holds non-finite values"));
        }
        Ok(Self { values })
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Overlapping chunks of a feature map, stored `dim x chunk_len x num_chunks`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedFeature3D<F> {
    pub values: Array3<F>,
    pub hop: usize,
    pub orig_frames: usize,
}

impl<F: Float> ChunkedFeature3D<F> {
    pub fn dim(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn chunk_len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn num_chunks(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Padded length and chunk count for `frames` frames cut into chunks of `k`
/// with hop `k / 2`.
pub fn chunk_layout(frames: usize, k: usize) -> Result<(usize, usize)> {
    if k < 2 || k % 2 != 0 {
        return Err(Error::invalid(format!("chunk length must be even and >= 2, got {k}")));
    }
    if frames == 0 {
        return Err(Error::invalid("cannot chunk zero frames"));
    }
    let hop = k / 2;
    let padded = if frames <= k { k } else { k + (frames - k).div_ceil(hop) * hop };
    Ok((padded, (padded - k) / hop + 1))
}

/// Splits a feature map into 50%-overlapping chunks of length `k`, zero
/// padding the tail.
pub fn segment_chunks<F: Float>(feat: &FeatureMap2D<F>, k: usize) -> Result<ChunkedFeature3D<F>> {
    let frames = feat.frames();
    let (_, q) = chunk_layout(frames, k)?;
    let hop = k / 2;
    let dim = feat.dim();
    let mut values = Array3::zeros((dim, k, q));
    for c in 0..q {
        let start = c * hop;
        let end = (start + k).min(frames);
        if start >= end {
            continue;
        }
        let src = feat.values.slice(s![start..end, ..]);
        values.slice_mut(s![.., 0..end - start, c]).assign(&src.t());
    }
    Ok(ChunkedFeature3D { values, hop, orig_frames: frames })
}

/// Sums chunks back at their source offsets and truncates to the original
/// frame count. Interior frames receive two contributions; no averaging.
pub fn overlap_add<F: Float>(chunked: &ChunkedFeature3D<F>) -> Result<FeatureMap2D<F>> {
    let (dim, k, q) = chunked.values.dim();
    let hop = chunked.hop;
    if hop == 0 || hop * (q.max(1) - 1) + k < chunked.orig_frames {
        return Err(Error::invalid("chunk layout does not cover the original frames"));
    }
    let frames = chunked.orig_frames;
    let mut out = Array2::zeros((frames, dim));
    for c in 0..q {
        let start = c * hop;
        let end = (start + k).min(frames);
        if start >= end {
            continue;
        }
        let mut dst = out.slice_mut(s![start..end, ..]);
        dst += &chunked.values.slice(s![.., 0..end - start, c]).t();
    }
    Ok(FeatureMap2D { values: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn wave(v: &[f64]) -> Waveform {
        Waveform::from_samples(v.to_vec()).unwrap()
    }

    #[test]
    fn unit_gain_for_equal_energy() {
        let t = wave(&[1.0, -1.0, 0.5]);
        let n = wave(&[-0.5, 1.0, 1.0]);
        assert_eq!(snr_gain(&t, &n, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn half_gain_for_quadruple_interference_energy() {
        let t = wave(&[1.0, 0.0]);
        let n = wave(&[0.0, 2.0]);
        let g = snr_gain(&t, &n, 0.0).unwrap();
        assert!((g - 0.5).abs() < 1e-15);
        let mixed = mix_at_snr(&t, &n, 0.0).unwrap();
        assert_eq!(mixed.samples(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_energy_rejected() {
        let t = wave(&[0.0, 0.0]);
        let n = wave(&[1.0, 0.0]);
        assert!(mix_at_snr(&t, &n, 0.0).is_err());
        assert!(mix_at_snr(&n, &t, 0.0).is_err());
        assert!(mix_at_snr(&n, &wave(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn si_sdr_hand_example() {
        let s = wave(&[1.0, 0.0]);
        let e = wave(&[1.0, 1.0]);
        assert!(si_sdr(&e, &s).unwrap().abs() < 1e-12);
    }

    #[test]
    fn si_sdr_scaled_copy_is_infinite() {
        let s = wave(&[0.3, -0.2, 0.9, 0.1]);
        assert_eq!(si_sdr(&s.scaled(3.7), &s).unwrap(), f64::INFINITY);
        assert!(si_sdr(&s, &wave(&[0.0; 4])).is_err());
    }

    #[test]
    fn rir_identity_and_delay() {
        let dry: Vec<f64> = (0..64).map(|i| ((i * 7 % 13) as f64 - 6.0) / 6.0).collect();
        let dry = wave(&dry);
        let out = convolve_rir(&dry, &wave(&[1.0])).unwrap();
        assert_eq!(out, dry);

        let mut delta = vec![0.0; 11];
        delta[10] = 1.0;
        let out = convolve_rir(&dry, &wave(&delta)).unwrap();
        // the dry peak (index 0) survives the truncation, so no rescale
        assert_eq!(&out.samples()[10..], &dry.samples()[..54]);
        assert!(out.samples()[..10].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rir_errors() {
        let dry = wave(&[1.0, 2.0, 3.0]);
        assert!(convolve_rir(&dry, &wave(&[1.0, 0.0, 0.0])).is_err());
        let other_rate = Waveform::new(vec![1.0], 8000).unwrap();
        assert!(convolve_rir(&dry, &other_rate).is_err());
    }

    #[test]
    fn chunk_counts() {
        assert_eq!(chunk_layout(160, 160).unwrap(), (160, 1));
        assert_eq!(chunk_layout(3200, 160).unwrap(), (3200, 39));
        assert_eq!(chunk_layout(170, 160).unwrap(), (240, 2));
        assert_eq!(chunk_layout(3, 8).unwrap(), (8, 1));
        assert!(chunk_layout(0, 8).is_err());
        assert!(chunk_layout(10, 7).is_err());
    }

    #[test]
    fn single_chunk_round_trip_is_exact() {
        let x = Array2::from_shape_fn((16, 3), |(i, j)| (i * 3 + j) as f64);
        let feat = FeatureMap2D::new(x.clone()).unwrap();
        let chunked = segment_chunks(&feat, 16).unwrap();
        assert_eq!(chunked.num_chunks(), 1);
        assert_eq!(overlap_add(&chunked).unwrap().values, x);
    }

    #[test]
    fn padded_chunk_tail_is_zero() {
        let x = Array2::from_elem((170, 2), 1.0f64);
        let chunked = segment_chunks(&FeatureMap2D::new(x).unwrap(), 160).unwrap();
        assert_eq!(chunked.values.dim(), (2, 160, 2));
        // chunk 1 covers frames 80..240, real data stops at 170
        assert_eq!(chunked.values[[0, 89, 1]], 1.0);
        assert_eq!(chunked.values[[0, 90, 1]], 0.0);
    }
}
