//! Mode-coverage diagnostic: flow negatives against adversarial negatives on
//! a ring of Gaussian modes, both trained jointly with a classifier under the
//! same step and batch budget.

use std::path::Path;
use std::time::Instant;

use candle_core::DType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{Activation, ClassifierArch, ClassifierModel};
use crate::divergence::DivergenceKind;
use crate::error::{Error, Result};
use crate::experiments::plot::{Canvas, Frame, BLUE, GRAY, RED, WHITE};
use crate::experiments::points::{
    classifier_negative_step, from_tensor, gaussian_ring_mixture, mode_centres, to_tensor, train_point_classifier,
    train_point_flow, Point,
};
use crate::experiments::{write_csv, ExperimentReport};
use crate::flow::{FlowArch, FlowModel};
use crate::gan::{GanArch, GanPair};
use crate::nn::{Optimizer, OptimizerKind};
use crate::trainer::{JointState, JointStepConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageConfig {
    pub seed: u64,
    pub modes: usize,
    pub radius: f64,
    pub sigma: f64,
    /// A mode counts as covered when a negative lies within this many
    /// standard deviations of its centre: the 3σ boundary plus a 3σ band.
    pub band_sigmas: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub pretrain_steps: usize,
    pub joint_steps: usize,
    pub batch: usize,
    pub negatives: usize,
    pub lambda: f64,
    pub loss: DivergenceKind,
    pub cls_hidden: usize,
    pub cls_depth: usize,
    pub cls_lr: f64,
    pub joint_cls_lr: f64,
    pub flow_steps: usize,
    pub flow_hidden: usize,
    pub flow_lr: f64,
    pub joint_flow_lr: f64,
    pub gan_latent: usize,
    pub gan_hidden: usize,
    pub gan_lr: f64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            modes: 8,
            radius: 4.0,
            sigma: 0.2,
            band_sigmas: 6.0,
            n_train: 2048,
            n_eval: 1000,
            pretrain_steps: 1000,
            joint_steps: 1000,
            batch: 128,
            negatives: 128,
            lambda: 1.0,
            loss: DivergenceKind::Js,
            cls_hidden: 64,
            cls_depth: 3,
            cls_lr: 3e-3,
            joint_cls_lr: 1e-3,
            flow_steps: 4,
            flow_hidden: 32,
            flow_lr: 3e-3,
            joint_flow_lr: 1e-3,
            gan_latent: 2,
            gan_hidden: 64,
            gan_lr: 1e-3,
        }
    }
}

/// Per-mode negative counts of both generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageResult {
    pub modes: usize,
    pub flow_per_mode: Vec<usize>,
    pub gan_per_mode: Vec<usize>,
}

impl CoverageResult {
    pub fn flow_covered(&self) -> usize {
        self.flow_per_mode.iter().filter(|&&c| c > 0).count()
    }

    pub fn gan_covered(&self) -> usize {
        self.gan_per_mode.iter().filter(|&&c| c > 0).count()
    }
}

/// Number of samples within `reach` of every centre.
pub fn mode_counts(samples: &[Point], centres: &[Point], reach: f64) -> Vec<usize> {
    centres
        .iter()
        .map(|c| {
            samples
                .iter()
                .filter(|p| (p[0] - c[0]).hypot(p[1] - c[1]) <= reach)
                .count()
        })
        .collect()
}

fn scatter(path: &Path, frame: &Frame, data: &[Point], negatives: &[Point], centres: &[Point], reach: f64) -> Result<()> {
    let mut c = Canvas::new(400, 400, WHITE);
    for m in centres {
        for k in 0..360 {
            let a = (k as f64).to_radians();
            c.point(frame, m[0] + reach * a.cos(), m[1] + reach * a.sin(), 0, GRAY);
        }
    }
    for p in data {
        c.point(frame, p[0], p[1], 1, BLUE);
    }
    for p in negatives {
        c.point(frame, p[0], p[1], 1, RED);
    }
    c.save(path)
}

fn batch_of<R: Rng + ?Sized>(pts: &[Point], cls: &[u32], n: usize, rng: &mut R) -> (Vec<Point>, Vec<u32>) {
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..pts.len())).collect();
    (idx.iter().map(|&i| pts[i]).collect(), idx.iter().map(|&i| cls[i]).collect())
}

pub fn coverage_diagnostic(cfg: &CoverageConfig, out: &Path) -> Result<(ExperimentReport, CoverageResult)> {
    if cfg.modes == 0 || cfg.n_train == 0 || cfg.batch == 0 || cfg.negatives == 0 || cfg.n_eval == 0 {
        return Err(Error::Config("coverage sizes must be positive".into()));
    }
    if !(cfg.sigma > 0.0) {
        return Err(Error::Config("mode spread must be positive".into()));
    }
    let started = Instant::now();
    std::fs::create_dir_all(out)?;
    let mut report = ExperimentReport::new("coverage", cfg);
    let dtype = DType::F64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (data, modes) = gaussian_ring_mixture(cfg.modes, cfg.n_train, cfg.radius, cfg.sigma, &mut rng);
    let classes: Vec<u32> = modes.iter().map(|m| m % 2).collect();
    let centres = mode_centres(cfg.modes, cfg.radius);
    let reach = cfg.band_sigmas * cfg.sigma;

    let arch = ClassifierArch::Mlp {
        dims: 2,
        classes: 2,
        hidden: cfg.cls_hidden,
        depth: cfg.cls_depth,
        activation: Activation::Tanh,
    };
    let classifier = ClassifierModel::new(arch, cfg.seed + 1, dtype)?;
    train_point_classifier(&classifier, &data, &classes, cfg.pretrain_steps, cfg.batch, cfg.cls_lr, cfg.seed + 10)?;
    let gan_classifier = classifier.try_clone()?;

    // flow negatives
    let mut flow = FlowModel::new(FlowArch::points(2, cfg.flow_steps, cfg.flow_hidden), cfg.seed + 2, dtype)?;
    train_point_flow(&mut flow, &data, cfg.pretrain_steps, cfg.batch, cfg.flow_lr, cfg.seed + 11)?;
    let mut state = JointState::new(classifier, flow, cfg.joint_cls_lr, cfg.joint_flow_lr);
    let step_cfg = JointStepConfig {
        lambda: cfg.lambda,
        kind: cfg.loss,
        patch: (1, 1),
        update_classifier: true,
        update_flow: true,
    };
    let mut jr = ChaCha8Rng::seed_from_u64(cfg.seed + 12);
    for _ in 0..cfg.joint_steps {
        let (p, c) = batch_of(&data, &classes, cfg.batch, &mut jr);
        let b = state.compose_points(&to_tensor(&p, dtype)?, &c, cfg.negatives, &mut jr)?;
        state.step_on(&b, &step_cfg)?;
    }
    let eval_seed = cfg.seed + 100;
    let flow_neg = from_tensor(&state.flow.sample_tensor(cfg.n_eval, 1, 1, &mut ChaCha8Rng::seed_from_u64(eval_seed))?)?;

    // adversarial negatives, same budget: plain GAN pre-training, then joint steps
    let mut gan = GanPair::new(
        GanArch {
            dims: 2,
            latent: cfg.gan_latent,
            hidden: cfg.gan_hidden,
            bounded: false,
        },
        cfg.seed + 3,
        cfg.gan_lr,
        dtype,
    )?;
    let mut gr = ChaCha8Rng::seed_from_u64(cfg.seed + 13);
    for _ in 0..cfg.pretrain_steps {
        let (p, _) = batch_of(&data, &classes, cfg.batch, &mut gr);
        gan.joint_step(&gan_classifier, &to_tensor(&p, dtype)?, 0.0, cfg.loss, true, &mut gr)?;
    }
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.joint_cls_lr);
    for step in 0..cfg.joint_steps {
        let (p, c) = batch_of(&data, &classes, cfg.batch, &mut gr);
        gan.joint_step(&gan_classifier, &to_tensor(&p, dtype)?, cfg.lambda, cfg.loss, true, &mut gr)?;
        let neg = gan.sample(cfg.negatives, cfg.seed.wrapping_mul(1_000_003).wrapping_add(step as u64))?;
        classifier_negative_step(&gan_classifier, &mut opt, &p, &c, &neg, cfg.lambda, cfg.loss)?;
    }
    let gan_neg = from_tensor(&gan.sample(cfg.n_eval, eval_seed)?)?;

    let result = CoverageResult {
        modes: cfg.modes,
        flow_per_mode: mode_counts(&flow_neg, &centres, reach),
        gan_per_mode: mode_counts(&gan_neg, &centres, reach),
    };

    let rows: Vec<Vec<String>> = centres
        .iter()
        .enumerate()
        .map(|(i, c)| {
            vec![
                i.to_string(),
                format!("{:.4}", c[0]),
                format!("{:.4}", c[1]),
                result.flow_per_mode[i].to_string(),
                result.gan_per_mode[i].to_string(),
            ]
        })
        .collect();
    let p = out.join("coverage_per_mode.csv");
    write_csv(&p, &["mode", "cx", "cy", "flow_negatives", "gan_negatives"], &rows)?;
    report.files.push(p);
    let p = out.join("coverage_summary.csv");
    write_csv(
        &p,
        &["generator", "covered", "modes"],
        &[
            vec!["flow".into(), result.flow_covered().to_string(), cfg.modes.to_string()],
            vec!["gan".into(), result.gan_covered().to_string(), cfg.modes.to_string()],
        ],
    )?;
    report.files.push(p);
    let sample_rows: Vec<Vec<String>> = flow_neg
        .iter()
        .map(|q| ("flow", q))
        .chain(gan_neg.iter().map(|q| ("gan", q)))
        .map(|(g, q)| vec![g.to_string(), format!("{:.6}", q[0]), format!("{:.6}", q[1])])
        .collect();
    let p = out.join("coverage_negatives.csv");
    write_csv(&p, &["generator", "x", "y"], &sample_rows)?;
    report.files.push(p);

    let frame = Frame::square(cfg.radius * 1.75);
    let shown: Vec<Point> = data.iter().take(600).copied().collect();
    let p = out.join("coverage_flow.png");
    scatter(&p, &frame, &shown, &flow_neg, &centres, reach)?;
    report.files.push(p);
    let p = out.join("coverage_gan.png");
    scatter(&p, &frame, &shown, &gan_neg, &centres, reach)?;
    report.files.push(p);

    report.metric("flow_modes_covered", result.flow_covered() as f64);
    report.metric("gan_modes_covered", result.gan_covered() as f64);
    report.metric("modes", cfg.modes as f64);
    report.finish(out, started)?;
    Ok((report, result))
}
