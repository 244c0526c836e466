//! Training objectives and the ranking/threshold metrics used for ASD.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{LabelSequence, ScoreSequence};
use crate::signal::{si_sdr, Waveform};

/// Probability clamp applied before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy with the prediction inside the logarithm.
pub fn asd_loss(scores: &ScoreSequence, labels: &LabelSequence) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::invalid("empty score sequence"));
    }
    let total: f64 = scores
        .0
        .iter()
        .zip(&labels.0)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / scores.len() as f64)
}

/// Negative SI-SDR in dB.
pub fn tse_loss(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    Ok(-si_sdr(estimate, reference)?)
}

fn check_pairs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    Ok(())
}

/// Indices by descending score; equal scores keep input order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Mean of precision-at-rank over the positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_pairs(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::invalid("average precision is undefined without positive labels"));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// AUROC with half credit for ties, and the equal error rate.
pub fn roc_metrics(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    check_pairs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("ROC metrics need both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Ascending sweep over groups of tied scores. `neg_below` counts
    // negatives strictly below the current group.
    let mut auc = 0.0;
    let mut neg_below = 0usize;
    // (FAR, FRR) when accepting scores >= each distinct threshold, plus the
    // accept-nothing end point.
    let mut curve = Vec::new();
    let mut pos_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        auc += gp as f64 * (neg_below as f64 + 0.5 * gn as f64);
        curve.push(((neg - neg_below) as f64 / neg as f64, pos_below as f64 / pos as f64));
        neg_below += gn;
        pos_below += gp;
        i = j;
    }
    curve.push((0.0, 1.0));
    let auroc = auc / (pos as f64 * neg as f64);
    Ok((auroc, eer_from_curve(&curve)))
}

/// Crossing of FAR and FRR along a curve ordered by rising threshold, where
/// FAR falls and FRR rises. Interpolates linearly between the two points
/// that bracket the crossing.
fn eer_from_curve(curve: &[(f64, f64)]) -> f64 {
    for w in curve.windows(2) {
        let (far0, frr0) = w[0];
        let (far1, frr1) = w[1];
        let d0 = far0 - frr0;
        let d1 = far1 - frr1;
        if d0 == 0.0 {
            return far0;
        }
        if d0 > 0.0 && d1 <= 0.0 {
            let t = d0 / (d0 - d1);
            return far0 + t * (far1 - far0);
        }
    }
    // FAR starts at 1 and FRR ends at 1, so a crossing always exists.
    let (far, frr) = curve[curve.len() - 1];
    0.5 * (far + frr)
}

/// F1 score with `score >= threshold` as a positive prediction.
pub fn f1_at_threshold(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check_pairs(scores, labels)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let r = if tp + fneg > 0 { tp as f64 / (tp + fneg) as f64 } else { 0.0 };
    Ok(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
}

/// Average precision of the pooled detections of all tracks.
pub fn mean_average_precision(tracks: &[(ScoreSequence, LabelSequence)]) -> Result<f64> {
    let (scores, labels) = pool(tracks)?;
    average_precision(&scores, &labels)
}

fn pool(tracks: &[(ScoreSequence, LabelSequence)]) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, (s, l)) in tracks.iter().enumerate() {
        if s.len() != l.len() {
            return Err(Error::shape(format!("track {i}: {} scores vs {} labels", s.len(), l.len())));
        }
        scores.extend_from_slice(&s.0);
        labels.extend_from_slice(&l.0);
    }
    Ok((scores, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub map_pct: f64,
    pub ap_pct: f64,
    pub auroc_pct: f64,
    pub eer_pct: f64,
    pub f1_pct: f64,
    pub num_frames: usize,
    pub threshold: f64,
}

impl MetricReport {
    /// Pools all tracks and computes every metric. Single-class pools give
    /// NaN for the metrics that need both classes.
    pub fn compute(tracks: &[(ScoreSequence, LabelSequence)], threshold: f64) -> Result<Self> {
        let (scores, labels) = pool(tracks)?;
        if scores.is_empty() {
            return Err(Error::invalid("no frames to evaluate"));
        }
        let ap = average_precision(&scores, &labels).unwrap_or(f64::NAN);
        let (auroc, eer) = roc_metrics(&scores, &labels).unwrap_or((f64::NAN, f64::NAN));
        let f1 = f1_at_threshold(&scores, &labels, threshold)?;
        Ok(Self {
            map_pct: 100.0 * ap,
            ap_pct: 100.0 * ap,
            auroc_pct: 100.0 * auroc,
            eer_pct: 100.0 * eer,
            f1_pct: 100.0 * f1,
            num_frames: scores.len(),
            threshold,
        })
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in [
            ("map_pct", self.map_pct),
            ("ap_pct", self.ap_pct),
            ("auroc_pct", self.auroc_pct),
            ("eer_pct", self.eer_pct),
            ("f1_pct", self.f1_pct),
        ] {
            let _ = writeln!(out, "{k} = {v:.4}");
        }
        let _ = writeln!(out, "num_frames = {}", self.num_frames);
        let _ = writeln!(out, "threshold = {}", self.threshold);
        out
    }

    /// One JSON object, no trailing newline.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}
