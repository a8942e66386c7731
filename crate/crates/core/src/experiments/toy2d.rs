//! Two-moons toy: a point classifier trained with flow negatives against the
//! same classifier trained on inliers only, compared on a far-field ring.

use std::path::Path;
use std::time::Instant;

use candle_core::DType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{Activation, ClassifierArch, ClassifierModel};
use crate::divergence::{divergence_to_uniform, DivergenceKind};
use crate::error::{Error, Result};
use crate::experiments::plot::{blue_white_red, Canvas, Frame, BLUE, ORANGE, RED};
use crate::experiments::points::{
    from_tensor, grid_points, point_scores, ring, to_tensor, train_point_classifier, train_point_flow, two_moons,
    Point,
};
use crate::experiments::{write_csv, ExperimentReport};
use crate::flow::{FlowArch, FlowModel};
use crate::metrics::{auroc, average_precision};
use crate::scoring::OodScoreKind;
use crate::trainer::{JointState, JointStepConfig, StepLosses};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toy2dConfig {
    pub seed: u64,
    pub n_train: usize,
    pub noise: f64,
    pub n_eval: usize,
    pub cls_hidden: usize,
    pub cls_depth: usize,
    pub cls_activation: Activation,
    pub flow_steps: usize,
    pub flow_hidden: usize,
    pub pretrain_steps: usize,
    pub flow_pretrain_steps: usize,
    pub joint_steps: usize,
    pub batch: usize,
    pub negatives: usize,
    pub lambda: f64,
    pub loss: DivergenceKind,
    pub cls_lr: f64,
    pub flow_lr: f64,
    pub joint_cls_lr: f64,
    pub joint_flow_lr: f64,
    pub temperature: f64,
    pub ring_inner: f64,
    pub ring_outer: f64,
    pub extent: f64,
    pub grid: usize,
}

impl Default for Toy2dConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_train: 1024,
            noise: 0.1,
            n_eval: 1000,
            cls_hidden: 64,
            cls_depth: 3,
            cls_activation: Activation::Tanh,
            flow_steps: 1,
            flow_hidden: 4,
            pretrain_steps: 800,
            flow_pretrain_steps: 200,
            joint_steps: 12000,
            batch: 128,
            negatives: 128,
            lambda: 1.0,
            loss: DivergenceKind::Js,
            cls_lr: 3e-3,
            flow_lr: 3e-3,
            joint_cls_lr: 1e-3,
            joint_flow_lr: 3e-3,
            temperature: 1.0,
            ring_inner: 3.0,
            ring_outer: 4.0,
            extent: 4.5,
            grid: 90,
        }
    }
}

impl Toy2dConfig {
    fn validate(&self) -> Result<()> {
        if self.n_train < 2 || self.n_eval == 0 || self.batch == 0 || self.negatives == 0 || self.grid == 0 {
            return Err(Error::Config("toy sizes must be positive".into()));
        }
        if !(self.ring_inner > 0.0 && self.ring_outer >= self.ring_inner) {
            return Err(Error::Config("far-field ring needs 0 < inner <= outer".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Headline numbers of a toy run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Toy2dMetrics {
    pub method_auroc: f64,
    pub method_ap: f64,
    pub baseline_auroc: f64,
    pub baseline_ap: f64,
    pub method_accuracy: f64,
    pub baseline_accuracy: f64,
    pub max_neg_pixel: f64,
}

fn accuracy(model: &ClassifierModel, pts: &[Point], cls: &[u32]) -> Result<f64> {
    let logits = model.point_logits(&to_tensor(pts, model.dtype())?)?;
    let pred = logits.argmax(1)?.to_vec1::<u32>()?;
    Ok(pred.iter().zip(cls).filter(|(a, b)| a == b).count() as f64 / pts.len() as f64)
}

fn field_png(
    path: &Path,
    field: &[f64],
    res: usize,
    range: (f64, f64),
    frame: &Frame,
    inliers: &[Point],
    negatives: &[Point],
) -> Result<()> {
    let mut c = Canvas::new(4 * res, 4 * res, [255, 255, 255]);
    c.heatmap(field, res, res, range.0, range.1, blue_white_red);
    for p in inliers {
        c.point(frame, p[0], p[1], 1, BLUE);
    }
    for p in negatives {
        c.point(frame, p[0], p[1], 2, RED);
        c.point(frame, p[0], p[1], 0, ORANGE);
    }
    c.save(path)
}

/// Full toy run writing figures and tables into `out`.
pub fn toy2d_run(cfg: &Toy2dConfig, out: &Path) -> Result<(ExperimentReport, Toy2dMetrics)> {
    cfg.validate()?;
    let started = Instant::now();
    std::fs::create_dir_all(out)?;
    let mut report = ExperimentReport::new("toy2d", cfg);
    let dtype = DType::F64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train, train_cls) = two_moons(cfg.n_train, cfg.noise, &mut rng);
    let (test, test_cls) = two_moons(cfg.n_eval, cfg.noise, &mut rng);
    let far = ring(cfg.n_eval, cfg.ring_inner, cfg.ring_outer, &mut rng);

    let arch = ClassifierArch::Mlp {
        dims: 2,
        classes: 2,
        hidden: cfg.cls_hidden,
        depth: cfg.cls_depth,
        activation: cfg.cls_activation,
    };
    let init_seed = cfg.seed.wrapping_add(1);
    let classifier = ClassifierModel::new(arch, init_seed, dtype)?;
    train_point_classifier(&classifier, &train, &train_cls, cfg.pretrain_steps, cfg.batch, cfg.cls_lr, cfg.seed + 10)?;

    // baseline: same start, same number of further steps, no negatives
    let baseline = classifier.try_clone()?;
    train_point_classifier(&baseline, &train, &train_cls, cfg.joint_steps, cfg.batch, cfg.joint_cls_lr, cfg.seed + 11)?;

    let mut flow = FlowModel::new(FlowArch::points(2, cfg.flow_steps, cfg.flow_hidden), cfg.seed.wrapping_add(2), dtype)?;
    train_point_flow(&mut flow, &train, cfg.flow_pretrain_steps, cfg.batch, cfg.flow_lr, cfg.seed + 12)?;

    let mut state = JointState::new(classifier, flow, cfg.joint_cls_lr, cfg.joint_flow_lr);
    let step_cfg = JointStepConfig {
        lambda: cfg.lambda,
        kind: cfg.loss,
        patch: (1, 1),
        update_classifier: true,
        update_flow: true,
    };
    let mut joint_rng = ChaCha8Rng::seed_from_u64(cfg.seed + 13);
    let mut rows = Vec::with_capacity(cfg.joint_steps);
    let mut max_neg = 0f64;
    for step in 0..cfg.joint_steps {
        let idx: Vec<usize> = (0..cfg.batch.min(train.len()))
            .map(|_| joint_rng.random_range(0..train.len()))
            .collect();
        let pts: Vec<Point> = idx.iter().map(|&i| train[i]).collect();
        let cls: Vec<u32> = idx.iter().map(|&i| train_cls[i]).collect();
        let batch = state.compose_points(&to_tensor(&pts, dtype)?, &cls, cfg.negatives, &mut joint_rng)?;
        let l: StepLosses = state.step_on(&batch, &step_cfg)?;
        max_neg = l.neg_pixels.iter().fold(max_neg, |m, &v| m.max(v as f64));
        rows.push(vec![
            step.to_string(),
            format!("{:.6}", l.cls),
            format!("{:.6}", l.neg),
            format!("{:.6}", l.nll),
        ]);
    }
    let p = out.join("toy2d_losses.csv");
    write_csv(&p, &["step", "cls", "neg", "nll"], &rows)?;
    report.files.push(p);

    let method = &state.classifier;
    let t = cfg.temperature;
    let mut labels = vec![false; test.len()];
    labels.extend(std::iter::repeat_n(true, far.len()));
    let eval = |m: &ClassifierModel, kind: OodScoreKind| -> Result<(f64, f64, Vec<f64>)> {
        let mut s = point_scores(m, &test, kind, t)?;
        s.extend(point_scores(m, &far, kind, t)?);
        Ok((auroc(&s, &labels)?, average_precision(&s, &labels)?, s))
    };
    let (method_auroc, method_ap, _) = eval(method, OodScoreKind::Jsd)?;
    let (baseline_auroc, baseline_ap, _) = eval(&baseline, OodScoreKind::Msp)?;
    let (method_msp_auroc, _, _) = eval(method, OodScoreKind::Msp)?;
    let (baseline_jsd_auroc, _, _) = eval(&baseline, OodScoreKind::Jsd)?;
    let metrics = Toy2dMetrics {
        method_auroc,
        method_ap,
        baseline_auroc,
        baseline_ap,
        method_accuracy: accuracy(method, &test, &test_cls)?,
        baseline_accuracy: accuracy(&baseline, &test, &test_cls)?,
        max_neg_pixel: max_neg,
    };

    let negatives = from_tensor(&state.flow.sample_tensor(256, 1, 1, &mut ChaCha8Rng::seed_from_u64(cfg.seed + 14))?)?;
    let p = out.join("toy2d_negatives.csv");
    let neg_rows: Vec<Vec<String>> = negatives.iter().map(|q| vec![format!("{:.6}", q[0]), format!("{:.6}", q[1])]).collect();
    write_csv(&p, &["x", "y"], &neg_rows)?;
    report.files.push(p);

    let frame = Frame::square(cfg.extent);
    let grid = grid_points(&frame, cfg.grid);
    let base_field = point_scores(&baseline, &grid, OodScoreKind::Msp, t)?;
    let method_field = point_scores(method, &grid, OodScoreKind::Jsd, t)?;
    let p = out.join("toy2d_score_field.csv");
    let field_rows: Vec<Vec<String>> = grid
        .iter()
        .zip(base_field.iter().zip(&method_field))
        .map(|(q, (b, m))| vec![format!("{:.4}", q[0]), format!("{:.4}", q[1]), format!("{b:.6}"), format!("{m:.6}")])
        .collect();
    write_csv(&p, &["x", "y", "baseline_msp", "method_jsd"], &field_rows)?;
    report.files.push(p);

    let shown: Vec<Point> = test.iter().take(300).copied().collect();
    let p = out.join("toy2d_field_baseline_msp.png");
    field_png(&p, &base_field, cfg.grid, (0.0, 0.5), &frame, &shown, &[])?;
    report.files.push(p);
    // negated JS spans [-JS(U, one-hot), 0] for two classes
    let js_top = divergence_to_uniform(DivergenceKind::Js, &[1.0, 0.0])?;
    let p = out.join("toy2d_field_method_jsd.png");
    field_png(&p, &method_field, cfg.grid, (-js_top, 0.0), &frame, &shown, &negatives)?;
    report.files.push(p);

    let named = [
        ("method_jsd_auroc", metrics.method_auroc),
        ("method_jsd_ap", metrics.method_ap),
        ("method_msp_auroc", method_msp_auroc),
        ("baseline_msp_auroc", metrics.baseline_auroc),
        ("baseline_msp_ap", metrics.baseline_ap),
        ("baseline_jsd_auroc", baseline_jsd_auroc),
        ("method_accuracy", metrics.method_accuracy),
        ("baseline_accuracy", metrics.baseline_accuracy),
        ("max_weighted_neg_pixel", metrics.max_neg_pixel),
    ];
    let p = out.join("toy2d_metrics.csv");
    let m_rows: Vec<Vec<String>> = named.iter().map(|(k, v)| vec![k.to_string(), format!("{v:.6}")]).collect();
    write_csv(&p, &["metric", "value"], &m_rows)?;
    report.files.push(p);
    for (k, v) in named {
        report.metric(k, v);
    }
    report.finish(out, started)?;
    Ok((report, metrics))
}
