//! Toy-image pipeline stages: generate data, pre-train both models, train
//! jointly, write score maps and evaluate them. Every stage reads and writes
//! plain files so the stages can run as separate commands.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::classifier::{predict_argmax, ClassifierArch, ClassifierModel, LogitMap};
use crate::data::{generate_shapes_dataset, ShapesSpec};
use crate::data::{load_manifest, read_score_map, write_score_map, Dataset, LabelMap, RunConfig, ScoreMap};
use crate::error::{Error, Result};
use crate::experiments::write_csv;
use crate::flow::{FlowArch, FlowModel};
use crate::metrics::{
    depth_binned_fpr, histogram, separation_histogram, ConfusionK1, DepthBins, EvalResult, OodAccumulator,
    SeparationHistogram,
};
use crate::scoring::{fuse, score_map, OodScoreKind};
use crate::trainer::{
    joint_train, pretrain_classifier, pretrain_flow, write_history_csv, EpochRecord, FlowPretrainLog, JointSchedule,
    JointState, JointStepConfig, RunOutputs, StageSchedule,
};

pub const IMAGE_DTYPE: DType = DType::F32;

/// Operating point used for thresholds and FPR.
pub const TPR: f64 = 0.95;

pub fn shapes_spec(cfg: &RunConfig) -> ShapesSpec {
    ShapesSpec {
        seed: cfg.seed,
        n_train: cfg.data.n_train,
        n_test: cfg.data.n_test,
        classes: cfg.data.classes,
        image_size: cfg.data.image_size,
        levels: cfg.flow.levels,
    }
}

pub fn classifier_arch(cfg: &RunConfig) -> ClassifierArch {
    ClassifierArch::Image {
        in_channels: 3,
        classes: cfg.data.classes,
        width: cfg.classifier.width,
    }
}

pub fn flow_arch(cfg: &RunConfig) -> FlowArch {
    FlowArch::image(3, cfg.flow.levels, cfg.flow.steps_per_level, cfg.flow.hidden)
}

pub fn classifier_schedule(cfg: &RunConfig) -> StageSchedule {
    StageSchedule {
        epochs: cfg.classifier.pretrain_epochs,
        batch_size: cfg.batch_size,
        lr: cfg.classifier.lr,
        lr_floor: cfg.joint.lr_floor,
    }
}

pub fn flow_schedule(cfg: &RunConfig) -> StageSchedule {
    StageSchedule {
        epochs: cfg.flow.pretrain_epochs,
        batch_size: cfg.batch_size,
        lr: cfg.flow.lr,
        lr_floor: cfg.joint.lr_floor,
    }
}

pub fn joint_schedule(cfg: &RunConfig) -> JointSchedule {
    JointSchedule {
        epochs: cfg.joint.epochs,
        batch_size: cfg.batch_size,
        cls_lr: cfg.classifier.joint_lr,
        flow_lr: cfg.flow.joint_lr,
        lr_floor: cfg.joint.lr_floor,
        step: JointStepConfig {
            lambda: cfg.joint.lambda,
            kind: cfg.joint.loss,
            patch: (cfg.joint.patch_min, cfg.joint.patch_max),
            update_classifier: true,
            update_flow: true,
        },
        seed: cfg.seed.wrapping_add(12),
        hist_bins: 50,
    }
}

/// Write the shapes dataset under `dir`; returns the train and test manifest paths.
pub fn generate_stage(cfg: &RunConfig, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    generate_shapes_dataset(&shapes_spec(cfg), dir)?;
    Ok((dir.join("train.toml"), dir.join("test.toml")))
}

pub fn load_split(manifest: &Path) -> Result<Dataset> {
    let m = load_manifest(manifest)?;
    m.validate()?;
    m.load_all()
}

/// Fresh classifier with the run's architecture and seed.
pub fn new_classifier(cfg: &RunConfig) -> Result<ClassifierModel> {
    ClassifierModel::new(classifier_arch(cfg), cfg.seed.wrapping_add(1), IMAGE_DTYPE)
}

/// Fresh flow with the run's architecture and seed.
pub fn new_flow(cfg: &RunConfig) -> Result<FlowModel> {
    FlowModel::new(flow_arch(cfg), cfg.seed.wrapping_add(2), IMAGE_DTYPE)
}

/// Supervised pre-training; writes `classifier.ckpt` and `cls_history.csv`.
pub fn pretrain_cls_stage(cfg: &RunConfig, train: &Dataset, out: &Path) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_classes(cfg, train)?;
    std::fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;
    let model = new_classifier(cfg)?;
    let hist = pretrain_classifier(&model, train, &classifier_schedule(cfg), cfg.seed.wrapping_add(10))?;
    model.save(&out.join("classifier.ckpt"))?;
    write_history_csv(&out.join("cls_history.csv"), "cross_entropy", &hist)?;
    Ok(hist)
}

/// Likelihood pre-training on inlier crops; writes `flow.ckpt` and `flow_bpd.csv`.
pub fn pretrain_flow_stage(cfg: &RunConfig, train: &Dataset, out: &Path) -> Result<FlowPretrainLog> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;
    let mut flow = new_flow(cfg)?;
    let log = pretrain_flow(&mut flow, train, cfg.flow.crop, &flow_schedule(cfg), cfg.seed.wrapping_add(11))?;
    flow.save(&out.join("flow.ckpt"))?;
    let mut bpd = vec![log.initial_bpd];
    bpd.extend_from_slice(&log.epoch_bpd);
    let rows: Vec<Vec<String>> = bpd.iter().enumerate().map(|(i, v)| vec![i.to_string(), v.to_string()]).collect();
    write_csv(&out.join("flow_bpd.csv"), &["epoch", "bits_per_dim"], &rows)?;
    Ok(log)
}

fn check_classes(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    if data.classes != cfg.data.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the config expects {}",
            data.classes, cfg.data.classes
        )));
    }
    Ok(())
}

/// Joint fine-tuning. Starts from the given checkpoints, or from
/// `out/joint.ckpt` when `resume` is set and that file exists. Writes the
/// joint checkpoint, per-epoch logs and the final models.
pub fn joint_stage(
    cfg: &RunConfig,
    train: &Dataset,
    classifier_ckpt: &Path,
    flow_ckpt: &Path,
    out: &Path,
    resume: bool,
    on_epoch: &mut dyn FnMut(&JointState, &EpochRecord) -> Result<()>,
) -> Result<(JointState, Vec<EpochRecord>)> {
    cfg.validate()?;
    check_classes(cfg, train)?;
    std::fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;
    let resume_path = out.join("joint.ckpt");
    let schedule = joint_schedule(cfg);
    let mut state = if resume && resume_path.exists() {
        log::info!("resuming from {}", resume_path.display());
        JointState::load(&resume_path)?
    } else {
        let cls = ClassifierModel::load(classifier_ckpt)?;
        let flow = FlowModel::load(flow_ckpt)?;
        JointState::new(cls, flow, schedule.cls_lr, schedule.flow_lr)
    };
    let outputs = RunOutputs {
        dir: out.to_path_buf(),
        checkpoint_every: 1,
    };
    let records = joint_train(&mut state, train, &schedule, Some(&outputs), on_epoch)?;
    state.classifier.save(&out.join("classifier.ckpt"))?;
    state.flow.save(&out.join("flow.ckpt"))?;
    Ok((state, records))
}

/// Evaluation-mode logits of every image.
pub fn dataset_logits(model: &ClassifierModel, data: &Dataset) -> Result<Vec<LogitMap>> {
    data.images.iter().map(|im| model.forward_logits(im)).collect()
}

/// Pixel-pooled OOD metrics plus fused-segmentation IoUs for precomputed
/// logits. Also returns the score maps.
pub fn evaluate_logits(
    logits: &[LogitMap],
    data: &Dataset,
    kind: OodScoreKind,
    temperature: f64,
) -> Result<(EvalResult, Vec<ScoreMap>)> {
    let scores: Vec<ScoreMap> = logits.iter().map(|l| score_map(l, kind, temperature)).collect::<Result<_>>()?;
    let preds: Vec<LabelMap> = logits.iter().map(predict_argmax).collect();
    let r = evaluate_maps(&scores, &preds, &data.labels, data.classes)?;
    Ok((r, scores))
}

/// Metrics from score maps, closed-set predictions and ground truth.
pub fn evaluate_maps(scores: &[ScoreMap], preds: &[LabelMap], labels: &[LabelMap], classes: usize) -> Result<EvalResult> {
    if scores.len() != labels.len() || preds.len() != labels.len() {
        return Err(Error::Shape("score, prediction and label lists differ in length".into()));
    }
    let mut acc = OodAccumulator::new();
    for (s, l) in scores.iter().zip(labels) {
        acc.add(s, l, classes)?;
    }
    if acc.positives.is_empty() || acc.negatives.is_empty() {
        return Err(Error::Empty("evaluation needs both outlier and inlier pixels".into()));
    }
    let delta = acc.threshold(TPR)?;
    let mut conf = ConfusionK1::new(classes)?;
    for ((s, p), l) in scores.iter().zip(preds).zip(labels) {
        conf.add(l, &fuse(p, s, delta, classes)?.labels)?;
    }
    acc.result(Some(&conf))
}

/// Score every image of a split. Writes `{i:05}.smap` (anomaly scores),
/// `{i:05}_pred.png` (closed-set argmax) and `{i:05}_maxlogit.smap`.
pub fn score_stage(
    classifier_ckpt: &Path,
    data: &Dataset,
    kind: OodScoreKind,
    temperature: f64,
    out: &Path,
) -> Result<usize> {
    let model = ClassifierModel::load(classifier_ckpt)?;
    if model.classes() != data.classes {
        return Err(Error::Config(format!(
            "classifier predicts {} classes but the data has {}",
            model.classes(),
            data.classes
        )));
    }
    std::fs::create_dir_all(out)?;
    for (i, im) in data.images.iter().enumerate() {
        let l = model.forward_logits(im)?;
        write_score_map(&score_map(&l, kind, temperature)?, &out.join(format!("{i:05}.smap")))?;
        predict_argmax(&l).write_png(&out.join(format!("{i:05}_pred.png")))?;
        let ml = ScoreMap::new(l.height(), l.width(), l.max_logits())?;
        write_score_map(&ml, &out.join(format!("{i:05}_maxlogit.smap")))?;
    }
    Ok(data.len())
}

/// Everything the evaluate stage writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub result: EvalResult,
    pub depth: Option<DepthBins>,
    pub separation: Option<SeparationHistogram>,
}

/// Evaluate score files written by [`score_stage`] against a split.
pub fn evaluate_stage(score_dir: &Path, data: &Dataset, out: &Path, bins: usize) -> Result<EvalReport> {
    if bins == 0 {
        return Err(Error::Config("at least one histogram bin is required".into()));
    }
    let n = data.len();
    let mut scores = Vec::with_capacity(n);
    let mut preds = Vec::with_capacity(n);
    let mut maxl = Vec::with_capacity(n);
    for i in 0..n {
        scores.push(read_score_map(&score_dir.join(format!("{i:05}.smap")))?);
        preds.push(LabelMap::read_png(&score_dir.join(format!("{i:05}_pred.png")))?);
        let p = score_dir.join(format!("{i:05}_maxlogit.smap"));
        maxl.push(if p.exists() { Some(read_score_map(&p)?) } else { None });
    }
    let result = evaluate_maps(&scores, &preds, &data.labels, data.classes)?;
    std::fs::create_dir_all(out)?;

    // score histograms of inlier and outlier pixels
    let mut acc = OodAccumulator::new();
    for (s, l) in scores.iter().zip(&data.labels) {
        acc.add(s, l, data.classes)?;
    }
    let all = acc.positives.iter().chain(&acc.negatives);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let hp = histogram(&acc.positives, lo, hi, bins);
    let hn = histogram(&acc.negatives, lo, hi, bins);
    let rows: Vec<Vec<String>> = (0..bins)
        .map(|b| {
            let e = |k: usize| lo + (hi - lo) * k as f64 / bins as f64;
            vec![e(b).to_string(), e(b + 1).to_string(), hn[b].to_string(), hp[b].to_string()]
        })
        .collect();
    write_csv(&out.join("score_hist.csv"), &["lo", "hi", "inlier", "outlier"], &rows)?;

    let depth = if data.disparities.iter().all(Option::is_some) && data.calibration.is_some() {
        let disp: Vec<_> = data.disparities.iter().map(|d| d.clone().expect("checked")).collect();
        let d = depth_binned_fpr(&scores, &data.labels, &disp, data.calibration, data.classes, result.threshold)?;
        let rows: Vec<Vec<String>> = (0..d.counts.len())
            .map(|b| {
                vec![
                    d.edges[b].to_string(),
                    d.edges[b + 1].to_string(),
                    d.counts[b].to_string(),
                    d.false_positives[b].to_string(),
                    d.fpr[b].map(|v| v.to_string()).unwrap_or_default(),
                ]
            })
            .collect();
        write_csv(&out.join("depth_bins.csv"), &["from_m", "to_m", "pixels", "false_positives", "fpr"], &rows)?;
        Some(d)
    } else {
        None
    };

    let separation = if maxl.iter().all(Option::is_some) {
        let (mut known, mut unknown) = (Vec::new(), Vec::new());
        for (m, l) in maxl.iter().zip(&data.labels) {
            for (&v, &id) in m.as_ref().expect("checked").scores().iter().zip(l.ids()) {
                match (id as usize).cmp(&data.classes) {
                    std::cmp::Ordering::Less => known.push(v as f64),
                    std::cmp::Ordering::Equal => unknown.push(v as f64),
                    std::cmp::Ordering::Greater => {}
                }
            }
        }
        let s = separation_histogram(&known, &unknown, bins)?;
        let rows: Vec<Vec<String>> = (0..bins)
            .map(|b| {
                vec![
                    s.edges[b].to_string(),
                    s.edges[b + 1].to_string(),
                    s.known[b].to_string(),
                    s.unknown[b].to_string(),
                ]
            })
            .collect();
        write_csv(&out.join("separation.csv"), &["lo", "hi", "known", "unknown"], &rows)?;
        Some(s)
    } else {
        None
    };

    let report = EvalReport {
        result,
        depth,
        separation,
    };
    std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Output of a complete pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub cls_history: Vec<f64>,
    pub flow_bpd: Vec<f64>,
    pub joint: Vec<EpochRecord>,
    pub eval: EvalReport,
}

/// Every stage in order under one directory.
pub fn run_pipeline(cfg: &RunConfig, root: &Path) -> Result<PipelineSummary> {
    let (train_m, test_m) = generate_stage(cfg, &root.join("data"))?;
    let train = load_split(&train_m)?;
    let test = load_split(&test_m)?;
    let cls_history = pretrain_cls_stage(cfg, &train, &root.join("cls"))?;
    let flow_log = pretrain_flow_stage(cfg, &train, &root.join("flow"))?;
    let (_, joint) = joint_stage(
        cfg,
        &train,
        &root.join("cls/classifier.ckpt"),
        &root.join("flow/flow.ckpt"),
        &root.join("joint"),
        false,
        &mut |_, _| Ok(()),
    )?;
    let kind = cfg.score.kind;
    score_stage(
        &root.join("joint/classifier.ckpt"),
        &test,
        kind,
        cfg.score.temperature_for(kind),
        &root.join("scores"),
    )?;
    let eval = evaluate_stage(&root.join("scores"), &test, &root.join("eval"), 50)?;
    let mut flow_bpd = vec![flow_log.initial_bpd];
    flow_bpd.extend_from_slice(&flow_log.epoch_bpd);
    Ok(PipelineSummary {
        cls_history,
        flow_bpd,
        joint,
        eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.data.n_train = 8;
        c.data.n_test = 4;
        c.data.image_size = 16;
        c.flow.crop = 8;
        c.flow.hidden = 8;
        c.flow.steps_per_level = 1;
        c.flow.pretrain_epochs = 1;
        c.classifier.width = 4;
        c.classifier.pretrain_epochs = 1;
        c.joint.epochs = 1;
        c.joint.patch_min = 4;
        c.joint.patch_max = 8;
        c.batch_size = 4;
        c
    }

    #[test]
    fn stages_compose_and_rescoring_is_consistent() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        let s = run_pipeline(&cfg, dir.path()).unwrap();
        assert_eq!(s.joint.len(), 1);
        for f in ["eval/metrics.json", "eval/score_hist.csv", "eval/depth_bins.csv", "eval/separation.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        // in-memory evaluation of the same checkpoint agrees with the file-based one
        let test = load_split(&dir.path().join("data/test.toml")).unwrap();
        let model = ClassifierModel::load(&dir.path().join("joint/classifier.ckpt")).unwrap();
        let logits = dataset_logits(&model, &test).unwrap();
        let (r, _) = evaluate_logits(&logits, &test, cfg.score.kind, cfg.score.temperature).unwrap();
        assert_eq!(r, s.eval.result);
    }

    #[test]
    fn class_count_mismatch_rejected() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        let (train_m, _) = generate_stage(&cfg, dir.path()).unwrap();
        let train = load_split(&train_m).unwrap();
        let mut other = cfg.clone();
        other.data.classes = 4;
        assert!(pretrain_cls_stage(&other, &train, &dir.path().join("cls")).is_err());
    }
}
