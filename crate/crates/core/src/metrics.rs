//! Pixel-pooled anomaly-detection metrics and outlier-aware segmentation
//! scores.

use serde::{Deserialize, Serialize};

use crate::data::{Calibration, DisparityMap, LabelMap, ScoreMap, IGNORE_ID};
use crate::error::{Error, Result};
use crate::scoring::select_threshold;

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Domain("both positive and negative samples are required".into()));
    }
    Ok((pos, neg))
}

/// Area under the step-wise precision-recall curve, anomalies positive.
/// Tied scores form a single threshold.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_binary(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        let tp_before = tp;
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if tp > tp_before {
            let d_recall = (tp - tp_before) as f64 / pos as f64;
            ap += d_recall * tp as f64 / (tp + fp) as f64;
        }
    }
    Ok(ap)
}

/// Mann-Whitney statistic with midranks: P(score_pos > score_neg) + ½ P(tie).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * idx[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Fraction of negatives above the threshold that keeps `tpr` of the positives.
pub fn fpr_at_tpr(scores_pos: &[f64], scores_neg: &[f64], tpr: f64) -> Result<f64> {
    if scores_neg.is_empty() {
        return Err(Error::Empty("no negative scores".into()));
    }
    let delta = select_threshold(scores_pos, tpr)?;
    Ok(scores_neg.iter().filter(|&&s| s > delta).count() as f64 / scores_neg.len() as f64)
}

/// `(K+1) x (K+1)` confusion matrix; rows are ground truth, the last row and
/// column are the outlier class. Ignore pixels are skipped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionK1 {
    classes: usize,
    counts: Vec<u64>,
}

/// Mean IoU together with the number of classes left out for having an
/// empty union.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouSummary {
    pub mean: f64,
    pub excluded: usize,
}

impl ConfusionK1 {
    pub fn new(classes: usize) -> Result<Self> {
        if classes < 1 {
            return Err(Error::Config("confusion needs at least one inlier class".into()));
        }
        Ok(Self {
            classes,
            counts: vec![0; (classes + 1) * (classes + 1)],
        })
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != (classes + 1) * (classes + 1) {
            return Err(Error::Shape("confusion size mismatch".into()));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * (self.classes + 1) + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add_pixel(&mut self, truth: u8, pred: u8) -> Result<()> {
        if truth == IGNORE_ID {
            return Ok(());
        }
        let k1 = self.classes + 1;
        let (t, p) = (truth as usize, pred as usize);
        if t >= k1 || p >= k1 {
            return Err(Error::Domain(format!("label pair ({t},{p}) outside {k1} classes")));
        }
        self.counts[t * k1 + p] += 1;
        Ok(())
    }

    pub fn add(&mut self, truth: &LabelMap, pred: &LabelMap) -> Result<()> {
        if (truth.height(), truth.width()) != (pred.height(), pred.width()) {
            return Err(Error::Shape("prediction and ground truth differ in size".into()));
        }
        for (&t, &p) in truth.ids().iter().zip(pred.ids()) {
            self.add_pixel(t, p)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape("cannot merge confusions of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn iou_over(&self, classes: impl Iterator<Item = usize>, size: usize) -> Result<IouSummary> {
        let (mut sum, mut n, mut excluded) = (0.0, 0usize, 0usize);
        for k in classes {
            let tp = self.get(k, k);
            let fn_: u64 = (0..size).filter(|&j| j != k).map(|j| self.get(k, j)).sum();
            let fp: u64 = (0..size).filter(|&i| i != k).map(|i| self.get(i, k)).sum();
            let union = tp + fp + fn_;
            if union == 0 {
                excluded += 1;
            } else {
                sum += tp as f64 / union as f64;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Empty("every class has an empty union".into()));
        }
        Ok(IouSummary {
            mean: sum / n as f64,
            excluded,
        })
    }

    /// Mean IoU over all K+1 classes.
    pub fn miou(&self) -> Result<IouSummary> {
        self.iou_over(0..=self.classes, self.classes + 1)
    }

    /// Mean IoU over the K inlier classes, with confusions against the
    /// outlier row and column counted as errors.
    pub fn open_miou(&self) -> Result<IouSummary> {
        self.iou_over(0..self.classes, self.classes + 1)
    }

    /// Mean IoU of the K x K inlier submatrix.
    pub fn closed_miou(&self) -> Result<IouSummary> {
        self.iou_over(0..self.classes, self.classes)
    }
}

/// Metric bundle written by the `evaluate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub auroc: f64,
    pub fpr95: f64,
    pub threshold: f64,
    pub miou: Option<f64>,
    pub open_miou: Option<f64>,
    pub closed_miou: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
}

/// Mergeable pixel-pooled score store. Outlier pixels are positives,
/// inlier pixels negatives, ignore pixels are skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OodAccumulator {
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
}

impl OodAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, scores: &ScoreMap, labels: &LabelMap, classes: usize) -> Result<()> {
        if (scores.height(), scores.width()) != (labels.height(), labels.width()) {
            return Err(Error::Shape("scores and labels differ in size".into()));
        }
        for (&s, &l) in scores.scores().iter().zip(labels.ids()) {
            if l == IGNORE_ID {
                continue;
            }
            if l as usize == classes {
                self.positives.push(s as f64);
            } else if (l as usize) < classes {
                self.negatives.push(s as f64);
            } else {
                return Err(Error::Domain(format!("label {l} outside {classes}+1 classes")));
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        self.positives.extend_from_slice(&other.positives);
        self.negatives.extend_from_slice(&other.negatives);
    }

    fn pooled(&self) -> (Vec<f64>, Vec<bool>) {
        let mut s = self.positives.clone();
        s.extend_from_slice(&self.negatives);
        let mut l = vec![true; self.positives.len()];
        l.extend(std::iter::repeat_n(false, self.negatives.len()));
        (s, l)
    }

    pub fn average_precision(&self) -> Result<f64> {
        let (s, l) = self.pooled();
        average_precision(&s, &l)
    }

    pub fn auroc(&self) -> Result<f64> {
        let (s, l) = self.pooled();
        auroc(&s, &l)
    }

    pub fn threshold(&self, tpr: f64) -> Result<f64> {
        select_threshold(&self.positives, tpr)
    }

    pub fn fpr_at_tpr(&self, tpr: f64) -> Result<f64> {
        fpr_at_tpr(&self.positives, &self.negatives, tpr)
    }

    pub fn result(&self, confusion: Option<&ConfusionK1>) -> Result<EvalResult> {
        let opt = |r: Result<IouSummary>| r.ok().map(|s| s.mean);
        Ok(EvalResult {
            ap: self.average_precision()?,
            auroc: self.auroc()?,
            fpr95: self.fpr_at_tpr(0.95)?,
            threshold: self.threshold(0.95)?,
            miou: confusion.and_then(|c| opt(c.miou())),
            open_miou: confusion.and_then(|c| opt(c.open_miou())),
            closed_miou: confusion.and_then(|c| opt(c.closed_miou())),
            positives: self.positives.len(),
            negatives: self.negatives.len(),
        })
    }
}

pub const DEPTH_MIN_M: f64 = 5.0;
pub const DEPTH_MAX_M: f64 = 50.0;
pub const DEPTH_STEP_M: f64 = 5.0;

/// Inlier false-positive rates per 5 m depth range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthBins {
    /// Bin edges in metres; bin i is `[edges[i], edges[i+1])`, the last bin
    /// also includes its upper edge.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub false_positives: Vec<u64>,
    /// `None` for empty bins.
    pub fpr: Vec<Option<f64>>,
    pub threshold: f64,
}

/// Bin index of a metric depth, if it lies within the analysed range.
pub fn depth_bin(depth: f64) -> Option<usize> {
    if !(DEPTH_MIN_M..=DEPTH_MAX_M).contains(&depth) {
        return None;
    }
    let n = ((DEPTH_MAX_M - DEPTH_MIN_M) / DEPTH_STEP_M).round() as usize;
    Some((((depth - DEPTH_MIN_M) / DEPTH_STEP_M).floor() as usize).min(n - 1))
}

/// Per-range FPR of inlier pixels at a fixed, dataset-wide threshold.
/// Depth is `focal * baseline / disparity`; pixels with nonpositive
/// disparity or depth outside [5, 50] m are skipped.
pub fn depth_binned_fpr(
    scores: &[ScoreMap],
    labels: &[LabelMap],
    disparities: &[DisparityMap],
    calibration: Option<Calibration>,
    classes: usize,
    delta: f64,
) -> Result<DepthBins> {
    let calib = calibration.ok_or_else(|| Error::Config("depth analysis needs calibration".into()))?;
    if scores.len() != labels.len() || scores.len() != disparities.len() {
        return Err(Error::Shape("score, label and disparity lists differ in length".into()));
    }
    let nbins = ((DEPTH_MAX_M - DEPTH_MIN_M) / DEPTH_STEP_M).round() as usize;
    let mut counts = vec![0u64; nbins];
    let mut fps = vec![0u64; nbins];
    for ((s, l), d) in scores.iter().zip(labels).zip(disparities) {
        if (s.height(), s.width()) != (l.height(), l.width())
            || (d.height, d.width) != (l.height(), l.width())
        {
            return Err(Error::Shape("score, label and disparity maps differ in size".into()));
        }
        for ((&sc, &lb), &disp) in s.scores().iter().zip(l.ids()).zip(&d.values) {
            if (lb as usize) >= classes || disp <= 0.0 {
                continue;
            }
            let depth = calib.focal_px * calib.baseline_m / disp as f64;
            if let Some(b) = depth_bin(depth) {
                counts[b] += 1;
                if sc as f64 > delta {
                    fps[b] += 1;
                }
            }
        }
    }
    Ok(DepthBins {
        edges: (0..=nbins).map(|i| DEPTH_MIN_M + DEPTH_STEP_M * i as f64).collect(),
        fpr: counts
            .iter()
            .zip(&fps)
            .map(|(&c, &f)| (c > 0).then(|| f as f64 / c as f64))
            .collect(),
        counts,
        false_positives: fps,
        threshold: delta,
    })
}

/// Aligned histograms of max-logit values for known and unknown pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationHistogram {
    pub edges: Vec<f64>,
    pub known: Vec<u64>,
    pub unknown: Vec<u64>,
    /// AUROC of the negated max-logit as an unknown-pixel detector.
    pub auroc: f64,
}

pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<u64> {
    let mut h = vec![0u64; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let b = if width > 0.0 {
            (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1)
        } else {
            0
        };
        h[b] += 1;
    }
    h
}

pub fn separation_histogram(known: &[f64], unknown: &[f64], bins: usize) -> Result<SeparationHistogram> {
    if known.is_empty() || unknown.is_empty() {
        return Err(Error::Empty("separation histogram needs both known and unknown values".into()));
    }
    if bins == 0 {
        return Err(Error::Config("at least one bin is required".into()));
    }
    let all = known.iter().chain(unknown);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let scores: Vec<f64> = unknown.iter().chain(known).map(|v| -v).collect();
    let labels: Vec<bool> = (0..unknown.len() + known.len()).map(|i| i < unknown.len()).collect();
    Ok(SeparationHistogram {
        edges: (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect(),
        known: histogram(known, lo, hi, bins),
        unknown: histogram(unknown, lo, hi, bins),
        auroc: auroc(&scores, &labels)?,
    })
}
