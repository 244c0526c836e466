#![allow(dead_code)]

//! Brute-force reference implementations, written independently of the
//! library code they check.

use mused::signal::chunk_layout;

// Straight-line SI-SDR, written without sharing code with the library.
pub fn si_sdr_oracle(est: &[f64], s: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut ss = 0.0;
    for i in 0..s.len() {
        dot += est[i] * s[i];
        ss += s[i] * s[i];
    }
    let alpha = dot / ss;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..s.len() {
        let t = alpha * s[i];
        num += t * t;
        den += (est[i] - t) * (est[i] - t);
    }
    10.0 * (num / den).log10()
}

pub fn conv_oracle(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut full = vec![0.0; x.len() + h.len() - 1];
    for i in 0..x.len() {
        for j in 0..h.len() {
            full[i + j] += x[i] * h[j];
        }
    }
    full.truncate(x.len());
    let peak_in = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let peak_out = full.iter().map(|v| v.abs()).fold(0.0, f64::max);
    full.iter().map(|v| v * peak_in / peak_out).collect()
}

// Precision at the rank of each positive, counting everything ranked at or
// above it: higher scores, and equal scores that appear earlier.
pub fn ap_oracle(s: &[f64], y: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut npos = 0;
    for i in 0..s.len() {
        if !y[i] {
            continue;
        }
        npos += 1;
        let (mut above, mut pos_above) = (0, 0);
        for j in 0..s.len() {
            if s[j] > s[i] || (s[j] == s[i] && j <= i) {
                above += 1;
                if y[j] {
                    pos_above += 1;
                }
            }
        }
        total += pos_above as f64 / above as f64;
    }
    total / npos as f64
}

pub fn auroc_oracle(s: &[f64], y: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] && !y[j] {
                pairs += 1.0;
                if s[i] > s[j] {
                    wins += 1.0;
                } else if s[i] == s[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

// Sweep every distinct score as an acceptance threshold (accept when
// score >= t), then accept-nothing; interpolate where FAR - FRR changes sign.
pub fn eer_oracle(s: &[f64], y: &[bool]) -> f64 {
    let mut ts: Vec<f64> = s.to_vec();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts.push(f64::INFINITY);
    let npos = y.iter().filter(|&&v| v).count() as f64;
    let nneg = y.len() as f64 - npos;
    let pts: Vec<(f64, f64)> = ts
        .iter()
        .map(|&t| {
            let fa = (0..s.len()).filter(|&i| !y[i] && s[i] >= t).count() as f64 / nneg;
            let fr = (0..s.len()).filter(|&i| y[i] && s[i] < t).count() as f64 / npos;
            (fa, fr)
        })
        .collect();
    for k in 0..pts.len() - 1 {
        let (a0, r0) = pts[k];
        let (a1, r1) = pts[k + 1];
        if a0 == r0 {
            return a0;
        }
        if a0 > r0 && a1 <= r1 {
            let t = (a0 - r0) / ((a0 - r0) - (a1 - r1));
            return a0 + t * (a1 - a0);
        }
    }
    unreachable!()
}

pub fn bce_oracle(p: &[f64], y: &[bool]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        let q = p[i].max(1e-7).min(1.0 - 1e-7);
        let t = if y[i] { 1.0 } else { 0.0 };
        s -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
    }
    s / p.len() as f64
}

/// Frames covered by one chunk get 1x, by two chunks 2x.
pub fn coverage(frames: usize, k: usize) -> Vec<usize> {
    let (_, q) = chunk_layout(frames, k).unwrap();
    let mut c = vec![0; frames];
    for i in 0..q {
        for f in i * k / 2..(i * k / 2 + k).min(frames) {
            c[f] += 1;
        }
    }
    c
}

/// Overlap-add by visiting every (dim, offset, chunk) cell of a `D x K x Q`
/// array and accumulating it into its source frame.
pub fn scatter_overlap_add(values: &ndarray::Array3<f64>, hop: usize, frames: usize) -> Vec<Vec<f64>> {
    let (d, k, q) = values.dim();
    let mut out = vec![vec![0.0; d]; frames];
    for c in 0..q {
        for j in 0..k {
            let f = c * hop + j;
            if f < frames {
                for i in 0..d {
                    out[f][i] += values[[i, j, c]];
                }
            }
        }
    }
    out
}
