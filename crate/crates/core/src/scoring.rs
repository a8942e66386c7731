//! Per-pixel anomaly scores, threshold selection and fusion into
//! outlier-aware segmentation. Every score is oriented so that higher means
//! more anomalous: divergence scores are negated, so a uniform prediction
//! scores 0 and a confident one scores below 0.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::LogitMap;
use crate::data::{LabelMap, ScoreMap};
use crate::divergence::{divergence_from_logits, DivergenceKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OodScoreKind {
    /// Negated temperature-scaled Jensen-Shannon divergence to uniform.
    Jsd,
    /// One minus the temperature-scaled max-softmax.
    Msp,
    /// Negated max logit (temperature is ignored).
    MaxLogit,
    /// Negated forward KL to uniform.
    Kl,
    /// Negated reverse KL to uniform.
    Rkl,
}

impl OodScoreKind {
    pub const ALL: [OodScoreKind; 5] = [
        OodScoreKind::Jsd,
        OodScoreKind::Msp,
        OodScoreKind::MaxLogit,
        OodScoreKind::Kl,
        OodScoreKind::Rkl,
    ];

    fn divergence(self) -> Option<DivergenceKind> {
        match self {
            OodScoreKind::Jsd => Some(DivergenceKind::Js),
            OodScoreKind::Kl => Some(DivergenceKind::Kl),
            OodScoreKind::Rkl => Some(DivergenceKind::Rkl),
            _ => None,
        }
    }
}

impl fmt::Display for OodScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OodScoreKind::Jsd => "jsd",
            OodScoreKind::Msp => "msp",
            OodScoreKind::MaxLogit => "maxlogit",
            OodScoreKind::Kl => "kl",
            OodScoreKind::Rkl => "rkl",
        })
    }
}

impl FromStr for OodScoreKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsd" | "js" => Ok(OodScoreKind::Jsd),
            "msp" => Ok(OodScoreKind::Msp),
            "maxlogit" | "max-logit" => Ok(OodScoreKind::MaxLogit),
            "kl" => Ok(OodScoreKind::Kl),
            "rkl" => Ok(OodScoreKind::Rkl),
            other => Err(Error::Config(format!("unknown score kind '{other}'"))),
        }
    }
}

/// Anomaly score of one logit vector.
pub fn pixel_score(kind: OodScoreKind, logits: &[f64], temperature: f64) -> f64 {
    if kind == OodScoreKind::MaxLogit {
        return -logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    match kind.divergence() {
        Some(d) => -divergence_from_logits(d, &scaled),
        None => {
            let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scaled.iter().map(|l| (l - m).exp()).sum();
            1.0 - 1.0 / z
        }
    }
}

pub fn score_map(logits: &LogitMap, kind: OodScoreKind, temperature: f64) -> Result<ScoreMap> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let (h, w) = (logits.height(), logits.width());
    let mut buf = vec![0.0; logits.classes()];
    let scores = (0..h * w)
        .map(|i| {
            logits.pixel_into(i, &mut buf);
            pixel_score(kind, &buf, temperature) as f32
        })
        .collect();
    ScoreMap::new(h, w, scores)
}

/// Threshold at which at least `tpr` of the anomaly scores satisfy `s > delta`.
///
/// Returns the largest data value (or the float just below the minimum) that
/// achieves the rate; ties at the boundary resolve toward the higher rate.
pub fn select_threshold(anomaly_scores: &[f64], tpr: f64) -> Result<f64> {
    if anomaly_scores.is_empty() {
        return Err(Error::Empty("threshold selection needs at least one anomaly score".into()));
    }
    if !(0.0..=1.0).contains(&tpr) {
        return Err(Error::Domain(format!("tpr must lie in [0,1], got {tpr}")));
    }
    let mut s = anomaly_scores.to_vec();
    if s.iter().any(|v| v.is_nan()) {
        return Err(Error::Domain("NaN anomaly score".into()));
    }
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let required = ((tpr * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let j = n - required.min(n);
    if j == 0 {
        return Ok(s[0].next_down());
    }
    let cand = s[j - 1];
    if s[j] > cand {
        return Ok(cand);
    }
    // the candidate is tied with a value that must stay above the threshold
    match s[..j].iter().rev().find(|&&v| v < cand) {
        Some(&v) => Ok(v),
        None => Ok(s[0].next_down()),
    }
}

/// Closed-set labels with the outlier id written wherever the score exceeds `delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrediction {
    pub labels: LabelMap,
    pub threshold: f64,
}

pub fn fuse(closed_set: &LabelMap, scores: &ScoreMap, delta: f64, classes: usize) -> Result<FusedPrediction> {
    if (closed_set.height(), closed_set.width()) != (scores.height(), scores.width()) {
        return Err(Error::Shape(format!(
            "labels are {}x{} but scores are {}x{}",
            closed_set.height(),
            closed_set.width(),
            scores.height(),
            scores.width()
        )));
    }
    let outlier = u8::try_from(classes)
        .map_err(|_| Error::Config(format!("{classes} classes do not fit in 8-bit labels")))?;
    let ids = closed_set
        .ids()
        .iter()
        .zip(scores.scores())
        .map(|(&id, &s)| if s as f64 > delta { outlier } else { id })
        .collect();
    Ok(FusedPrediction {
        labels: LabelMap::new(closed_set.height(), closed_set.width(), ids)?,
        threshold: delta,
    })
}
