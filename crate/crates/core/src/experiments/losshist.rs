//! Per-pixel weighted negative losses of KL, reverse KL and JS on the same
//! freshly composed batches, at the start of joint fine-tuning.

use std::path::Path;
use std::time::Instant;

use candle_core::DType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ImageTensor, LabelMap};
use crate::divergence::{divergence_curve, divergence_from_logits, divergence_tensor, DivergenceKind};
use crate::error::{Error, Result};
use crate::experiments::plot::{bar_histograms, line_plot, Frame, BLUE, GREEN, RED};
use crate::experiments::{write_csv, ExperimentReport};
use crate::metrics::histogram;
use crate::trainer::JointState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossHistConfig {
    pub seed: u64,
    pub batches: usize,
    pub batch_size: usize,
    pub patch_min: usize,
    pub patch_max: usize,
    pub bins: usize,
    pub lambda_kl: f64,
    pub lambda_rkl: f64,
    pub lambda_js: f64,
    /// Winning logit of the constructed near-one-hot pixel.
    pub one_hot_logit: f64,
}

impl Default for LossHistConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            batches: 4,
            batch_size: 8,
            patch_min: 8,
            patch_max: 16,
            bins: 40,
            lambda_kl: 0.03,
            lambda_rkl: 0.03,
            lambda_js: 0.3,
            one_hot_logit: 40.0,
        }
    }
}

impl LossHistConfig {
    pub fn lambda(&self, kind: DivergenceKind) -> f64 {
        match kind {
            DivergenceKind::Kl => self.lambda_kl,
            DivergenceKind::Rkl => self.lambda_rkl,
            DivergenceKind::Js => self.lambda_js,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batches == 0 || self.batch_size == 0 || self.bins == 0 {
            return Err(Error::Config("batches, batch size and bins must be positive".into()));
        }
        if self.patch_min == 0 || self.patch_min > self.patch_max {
            return Err(Error::Config("patch range must satisfy 0 < min <= max".into()));
        }
        if DivergenceKind::ALL.iter().any(|&k| !(self.lambda(k) > 0.0)) {
            return Err(Error::Config("every lambda must be positive".into()));
        }
        Ok(())
    }
}

/// Weighted per-pixel losses of one divergence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindLosses {
    pub kind: DivergenceKind,
    pub lambda: f64,
    pub max: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossHistResult {
    pub kinds: Vec<KindLosses>,
    /// Whether a near-one-hot pixel had to be appended.
    pub constructed: bool,
    pub edges: Vec<f64>,
}

impl LossHistResult {
    pub fn get(&self, kind: DivergenceKind) -> &KindLosses {
        self.kinds.iter().find(|k| k.kind == kind).expect("all kinds present")
    }
}

/// Raw logits of the pasted pixels of `cfg.batches` composed batches.
fn negative_pixel_logits(state: &JointState, data: &Dataset, cfg: &LossHistConfig) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::new();
    for _ in 0..cfg.batches {
        order.shuffle(&mut rng);
        let take = cfg.batch_size.min(order.len());
        let imgs: Vec<&ImageTensor> = order[..take].iter().map(|&i| &data.images[i]).collect();
        let lbls: Vec<&LabelMap> = order[..take].iter().map(|&i| &data.labels[i]).collect();
        let b = state.compose_images(&imgs, &lbls, (cfg.patch_min, cfg.patch_max), &mut rng)?;
        let logits = state.classifier.forward(&b.composed, false)?.to_dtype(DType::F64)?;
        let (n, k, h, w) = logits.dims4()?;
        // (N, K, H, W) -> (N·H·W, K)
        let rows = logits.permute((0, 2, 3, 1))?.reshape((n * h * w, k))?.to_vec2::<f64>()?;
        let mask = b.mask.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        out.extend(rows.into_iter().zip(mask).filter(|(_, m)| *m > 0.5).map(|(r, _)| r));
    }
    Ok(out)
}

/// Histograms of `λ L_neg` over identical negative pixels for every kind.
/// When no pixel drives weighted KL above ten times `λ ln 2`, one
/// near-one-hot pixel is appended to all kinds.
pub fn loss_histogram_study(
    state: &JointState,
    data: &Dataset,
    cfg: &LossHistConfig,
    out: &Path,
) -> Result<(ExperimentReport, LossHistResult)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("loss histogram needs images".into()));
    }
    let started = Instant::now();
    std::fs::create_dir_all(out)?;
    let mut report = ExperimentReport::new("losshist", cfg);
    let mut pixels = negative_pixel_logits(state, data, cfg)?;
    let classes = state.classifier.classes();

    let kl_target = 10.0 * cfg.lambda_kl * std::f64::consts::LN_2;
    let kl_max = pixels
        .iter()
        .map(|l| cfg.lambda_kl * divergence_from_logits(DivergenceKind::Kl, l))
        .fold(0.0, f64::max);
    let constructed = kl_max <= kl_target;
    if constructed {
        let mut l = vec![0.0; classes];
        l[0] = cfg.one_hot_logit;
        pixels.push(l);
    }

    // one batched evaluation per kind over the same logits
    let flat: Vec<f64> = pixels.iter().flatten().copied().collect();
    let t = candle_core::Tensor::from_vec(flat, (pixels.len(), classes), &candle_core::Device::Cpu)?;
    let mut kinds = Vec::new();
    for kind in DivergenceKind::ALL {
        let lambda = cfg.lambda(kind);
        let values: Vec<f64> = divergence_tensor(kind, &t, 1)?
            .to_vec1::<f64>()?
            .into_iter()
            .map(|v| lambda * v)
            .collect();
        let max = values.iter().copied().fold(0.0, f64::max);
        kinds.push(KindLosses {
            kind,
            lambda,
            max,
            values,
        });
    }

    let hi = kinds.iter().map(|k| k.max).fold(f64::MIN_POSITIVE, f64::max);
    let edges: Vec<f64> = (0..=cfg.bins).map(|i| hi * i as f64 / cfg.bins as f64).collect();
    let counts: Vec<Vec<u64>> = kinds.iter().map(|k| histogram(&k.values, 0.0, hi, cfg.bins)).collect();
    let rows: Vec<Vec<String>> = (0..cfg.bins)
        .map(|b| {
            let mut r = vec![edges[b].to_string(), edges[b + 1].to_string()];
            r.extend(counts.iter().map(|c| c[b].to_string()));
            r
        })
        .collect();
    let p = out.join("losshist.csv");
    write_csv(&p, &["lo", "hi", "kl", "rkl", "js"], &rows)?;
    report.files.push(p);

    let summary: Vec<Vec<String>> = kinds
        .iter()
        .map(|k| {
            let bound = k.kind.upper_bound(classes).map(|b| k.lambda * b);
            vec![
                k.kind.to_string(),
                k.lambda.to_string(),
                k.max.to_string(),
                bound.map(|b| b.to_string()).unwrap_or_else(|| "inf".into()),
                k.values.len().to_string(),
            ]
        })
        .collect();
    let p = out.join("losshist_summary.csv");
    write_csv(&p, &["kind", "lambda", "max", "bound", "pixels"], &summary)?;
    report.files.push(p);

    let series: Vec<(&[u64], _)> = counts.iter().map(|c| c.as_slice()).zip([RED, GREEN, BLUE]).collect();
    let p = out.join("losshist.png");
    bar_histograms(&series, 480, 240).save(&p)?;
    report.files.push(p);

    for k in &kinds {
        report.metric(&format!("{}_max", k.kind), k.max);
        report.metric(&format!("{}_lambda", k.kind), k.lambda);
    }
    report.metric("constructed_one_hot", if constructed { 1.0 } else { 0.0 });
    report.metric("pixels", pixels.len() as f64);
    report.finish(out, started)?;
    Ok((
        report,
        LossHistResult {
            kinds,
            constructed,
            edges,
        },
    ))
}

/// Two-class divergence curves of every kind: `curves.csv` and `curves.png`.
pub fn divergence_curves(resolution: usize, out: &Path) -> Result<Vec<Vec<(f64, f64)>>> {
    std::fs::create_dir_all(out)?;
    let curves: Vec<Vec<(f64, f64)>> = DivergenceKind::ALL
        .iter()
        .map(|&k| divergence_curve(k, resolution))
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<String>> = (0..resolution)
        .map(|i| {
            let mut r = vec![curves[0][i].0.to_string()];
            r.extend(curves.iter().map(|c| c[i].1.to_string()));
            r
        })
        .collect();
    write_csv(&out.join("curves.csv"), &["p", "kl", "rkl", "js"], &rows)?;
    let top = curves.iter().flatten().map(|q| q.1).fold(0.0, f64::max);
    let frame = Frame {
        xmin: 0.0,
        xmax: 1.0,
        ymin: 0.0,
        ymax: top.min(3.0),
    };
    let series: Vec<(&[(f64, f64)], _)> = curves.iter().map(Vec::as_slice).zip([RED, GREEN, BLUE]).collect();
    line_plot(&series, &frame, 400, 300).save(&out.join("curves.png"))?;
    Ok(curves)
}
