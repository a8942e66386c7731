//! Ablation grids on the toy-image pipeline: negative loss and score kind,
//! negative generator, pre-training and score temperature. All cells start
//! from the same pre-trained checkpoints and share seeds; metrics are the
//! mean and half-range over the last few epoch evaluations.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{predict_argmax, ClassifierModel};
use crate::composer::{compose_tensor, sample_batch_specs};
use crate::data::{Dataset, ImageTensor, LabelMap, RunConfig};
use crate::divergence::DivergenceKind;
use crate::error::{Error, Result};
use crate::experiments::pipeline::{
    classifier_schedule, dataset_logits, evaluate_logits, flow_schedule, generate_stage, joint_schedule, load_split,
    new_classifier, new_flow, IMAGE_DTYPE,
};
use crate::experiments::{mean_spread, write_csv, ExperimentReport};
use crate::flow::FlowModel;
use crate::gan::{GanArch, GanPair};
use crate::metrics::EvalResult;
use crate::nn::{cosine_lr, Optimizer, OptimizerKind};
use crate::scoring::OodScoreKind;
use crate::trainer::{
    batches, joint_train, label_tensors, pretrain_classifier, pretrain_flow, routed_losses, JointState,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Data, models and schedules shared by every cell. The JS cells use
    /// `run.joint.lambda`.
    pub run: RunConfig,
    pub lambda_kl: f64,
    pub lambda_rkl: f64,
    /// Number of final epoch evaluations averaged per cell.
    pub last_epochs: usize,
    pub temperatures: Vec<f64>,
    /// Side of the fixed-size adversarial patches.
    pub gan_patch: usize,
    pub gan_latent: usize,
    pub gan_hidden: usize,
    pub gan_lr: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            lambda_kl: 0.03,
            lambda_rkl: 0.03,
            last_epochs: 3,
            temperatures: vec![1.0, 1.5, 2.0],
            gan_patch: 8,
            gan_latent: 16,
            gan_hidden: 128,
            gan_lr: 2e-4,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        if self.last_epochs == 0 {
            return Err(Error::Config("at least one evaluation epoch is required".into()));
        }
        if self.temperatures.is_empty() || self.temperatures.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(self.lambda_kl > 0.0 && self.lambda_rkl > 0.0) {
            return Err(Error::Config("lambdas must be positive".into()));
        }
        let side = self.run.data.image_size;
        if self.gan_patch == 0 || self.gan_patch > side {
            return Err(Error::Config(format!("GAN patch {} does not fit {side}px images", self.gan_patch)));
        }
        if self.gan_latent == 0 || self.gan_hidden == 0 || !(self.gan_lr > 0.0) {
            return Err(Error::Config("GAN sizes and learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One table row: summary statistics over the final evaluations, or the
/// error that stopped the cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub name: String,
    pub ap: (f64, f64),
    pub fpr95: (f64, f64),
    pub auroc: f64,
    pub open_miou: f64,
    pub epochs: usize,
    pub error: Option<String>,
    /// Digest of the closed-set predictions of the final evaluation.
    pub closed_digest: Option<u64>,
}

impl CellRow {
    fn from_evals(name: &str, evals: &[EvalResult], last: usize, digest: Option<u64>) -> Self {
        let tail = &evals[evals.len().saturating_sub(last)..];
        let pick = |f: fn(&EvalResult) -> f64| tail.iter().map(f).collect::<Vec<_>>();
        Self {
            name: name.to_string(),
            ap: mean_spread(&pick(|r| r.ap)),
            fpr95: mean_spread(&pick(|r| r.fpr95)),
            auroc: mean_spread(&pick(|r| r.auroc)).0,
            open_miou: mean_spread(&pick(|r| r.open_miou.unwrap_or(f64::NAN))).0,
            epochs: tail.len(),
            error: None,
            closed_digest: digest,
        }
    }

    fn failed(name: &str, e: &Error) -> Self {
        Self {
            name: name.to_string(),
            ap: (f64::NAN, f64::NAN),
            fpr95: (f64::NAN, f64::NAN),
            auroc: f64::NAN,
            open_miou: f64::NAN,
            epochs: 0,
            error: Some(e.to_string()),
            closed_digest: None,
        }
    }

    fn cells(&self) -> Vec<String> {
        vec![
            format!("{:.6}", self.ap.0),
            format!("{:.6}", self.ap.1),
            format!("{:.6}", self.fpr95.0),
            format!("{:.6}", self.fpr95.1),
            format!("{:.6}", self.auroc),
            format!("{:.6}", self.open_miou),
            self.epochs.to_string(),
            self.error.clone().unwrap_or_default().replace(',', ";"),
        ]
    }
}

const METRIC_COLUMNS: [&str; 8] = [
    "ap_mean",
    "ap_spread",
    "fpr95_mean",
    "fpr95_spread",
    "auroc_mean",
    "open_miou_mean",
    "epochs",
    "error",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub loss_and_score: Vec<CellRow>,
    pub generator: Vec<CellRow>,
    pub pretraining: Vec<CellRow>,
    pub temperature: Vec<CellRow>,
}

/// A score to evaluate after every epoch.
#[derive(Debug, Clone)]
struct Probe {
    name: String,
    kind: OodScoreKind,
    temperature: f64,
}

/// Per-epoch evaluation of a set of probes on the test split.
struct Tracker<'a> {
    test: &'a Dataset,
    probes: Vec<Probe>,
    evals: Vec<Vec<EvalResult>>,
    digest: Option<u64>,
}

impl<'a> Tracker<'a> {
    fn new(test: &'a Dataset, probes: Vec<Probe>) -> Self {
        let n = probes.len();
        Self {
            test,
            probes,
            evals: vec![Vec::new(); n],
            digest: None,
        }
    }

    fn record(&mut self, model: &ClassifierModel) -> Result<()> {
        let logits = dataset_logits(model, self.test)?;
        for (p, out) in self.probes.iter().zip(&mut self.evals) {
            out.push(evaluate_logits(&logits, self.test, p.kind, p.temperature)?.0);
        }
        self.digest = Some(prediction_digest(&logits.iter().map(predict_argmax).collect::<Vec<_>>()));
        Ok(())
    }

    fn rows(&self, last: usize) -> Vec<CellRow> {
        self.probes
            .iter()
            .zip(&self.evals)
            .map(|(p, e)| CellRow::from_evals(&p.name, e, last, self.digest))
            .collect()
    }
}

/// Order-sensitive digest of label maps.
fn prediction_digest(maps: &[LabelMap]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for m in maps {
        for &id in m.ids() {
            h = (h ^ id as u64).wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Shared starting point of every cell.
struct Start {
    classifier: ClassifierModel,
    flow: FlowModel,
    fresh_classifier: ClassifierModel,
    fresh_flow: FlowModel,
}

fn prepare(cfg: &AblationConfig, train: &Dataset) -> Result<Start> {
    let run = &cfg.run;
    let classifier = new_classifier(run)?;
    let fresh_classifier = classifier.try_clone()?;
    pretrain_classifier(&classifier, train, &classifier_schedule(run), run.seed.wrapping_add(10))?;
    let mut flow = new_flow(run)?;
    // zero epochs: data-dependent initialisation only
    let mut init_only = flow_schedule(run);
    init_only.epochs = 0;
    pretrain_flow(&mut flow, train, run.flow.crop, &init_only, run.seed.wrapping_add(11))?;
    let fresh_flow = flow.try_clone()?;
    pretrain_flow(&mut flow, train, run.flow.crop, &flow_schedule(run), run.seed.wrapping_add(11))?;
    Ok(Start {
        classifier,
        flow,
        fresh_classifier,
        fresh_flow,
    })
}

/// Joint training from the given models with a flow generator.
fn flow_cell(
    cfg: &AblationConfig,
    train: &Dataset,
    classifier: &ClassifierModel,
    flow: &FlowModel,
    kind: DivergenceKind,
    lambda: f64,
    tracker: &mut Tracker,
) -> Result<()> {
    let mut schedule = joint_schedule(&cfg.run);
    schedule.step.kind = kind;
    schedule.step.lambda = lambda;
    let mut state = JointState::new(classifier.try_clone()?, flow.try_clone()?, schedule.cls_lr, schedule.flow_lr);
    joint_train(&mut state, train, &schedule, None, &mut |s, _| tracker.record(&s.classifier))?;
    Ok(())
}

/// Joint training with a patch GAN in place of the flow. The generator is
/// first trained adversarially alone for as many epochs as the flow was
/// pre-trained, then jointly with the classifier under the JS loss.
fn gan_cell(cfg: &AblationConfig, train: &Dataset, classifier: &ClassifierModel, tracker: &mut Tracker) -> Result<()> {
    let run = &cfg.run;
    let p = cfg.gan_patch;
    let classifier = classifier.try_clone()?;
    let arch = GanArch {
        dims: 3 * p * p,
        latent: cfg.gan_latent,
        hidden: cfg.gan_hidden,
        bounded: true,
    };
    let mut gan = GanPair::new(arch, run.seed.wrapping_add(3), cfg.gan_lr, IMAGE_DTYPE)?;
    let schedule = joint_schedule(run);
    let mut cls_opt = Optimizer::new(OptimizerKind::Adam, schedule.cls_lr);
    let per_epoch = train.len().div_ceil(schedule.batch_size) as u64;
    let horizon = per_epoch * schedule.epochs as u64;
    let mut step = 0u64;
    let total = run.flow.pretrain_epochs + schedule.epochs;
    for epoch in 0..total {
        let joint = epoch >= run.flow.pretrain_epochs;
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        rng.set_stream(2000 + epoch as u64);
        for b in batches(train.len(), schedule.batch_size, &mut rng) {
            let imgs: Vec<&ImageTensor> = b.iter().map(|&i| &train.images[i]).collect();
            let lbls: Vec<&LabelMap> = b.iter().map(|&i| &train.labels[i]).collect();
            let n = imgs.len();
            let x = ImageTensor::stack(&imgs, IMAGE_DTYPE)?;
            let (_, _, h, w) = x.dims4()?;
            let specs = sample_batch_specs(&mut rng, n, (h, w), (p, p), 1)?;
            let zeros = candle_core::Tensor::zeros((n, 3, p, p), IMAGE_DTYPE, &candle_core::Device::Cpu)?;
            let (_, _, crops) = compose_tensor(&x, &zeros, &specs)?;
            let real = crops.reshape((n, 3 * p * p))?;
            let (idx, valid) = label_tensors(&lbls, IMAGE_DTYPE)?;
            let lambda = if joint { schedule.step.lambda } else { 0.0 };
            let mut last_fake = None;
            {
                let mut confidence = |fake: &candle_core::Tensor| -> Result<candle_core::Tensor> {
                    last_fake = Some(fake.detach());
                    if !joint {
                        return Ok(candle_core::Tensor::zeros((), IMAGE_DTYPE, &candle_core::Device::Cpu)?);
                    }
                    let (comp, mask, _) = compose_tensor(&x, &fake.reshape((n, 3, p, p))?, &specs)?;
                    let logits = classifier.forward(&comp, true)?;
                    Ok(routed_losses(&logits, &idx, &valid, &mask, DivergenceKind::Js)?.1)
                };
                gan.step_with(&real, lambda, true, &mut rng, &mut confidence)?;
            }
            if joint {
                let fake = last_fake.expect("generator ran").reshape((n, 3, p, p))?;
                let (comp, mask, _) = compose_tensor(&x, &fake, &specs)?;
                let logits = classifier.forward(&comp, true)?;
                let (l_cls, l_neg, _) = routed_losses(&logits, &idx, &valid, &mask, DivergenceKind::Js)?;
                let loss = (l_cls + (l_neg * lambda)?)?;
                let v = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        component: "classifier with adversarial negatives",
                        step,
                    });
                }
                cls_opt.set_lr(cosine_lr(schedule.cls_lr, schedule.lr_floor, step, horizon));
                cls_opt.step(classifier.params(), &loss.backward()?)?;
                step += 1;
            }
        }
        if joint {
            tracker.record(&classifier)?;
        }
    }
    Ok(())
}

fn probe(name: &str, kind: OodScoreKind, cfg: &AblationConfig) -> Probe {
    Probe {
        name: name.to_string(),
        kind,
        temperature: cfg.run.score.temperature_for(kind),
    }
}

/// Run a cell, turning a failure into error rows so the grid continues.
fn run_cell(
    names: &[&str],
    last: usize,
    tracker: &mut Tracker,
    body: impl FnOnce(&mut Tracker) -> Result<()>,
) -> Vec<CellRow> {
    match body(tracker) {
        Ok(()) if tracker.evals.iter().all(|e| !e.is_empty()) => tracker.rows(last),
        Ok(()) => {
            let e = Error::Empty("cell produced no evaluations".into());
            names.iter().map(|n| CellRow::failed(n, &e)).collect()
        }
        Err(e) => {
            log::warn!("ablation cell {} failed: {e}", names.join("/"));
            names.iter().map(|n| CellRow::failed(n, &e)).collect()
        }
    }
}

fn table(path: &Path, lead: &[&str], leads: &[Vec<String>], rows: &[CellRow]) -> Result<()> {
    let mut header: Vec<&str> = lead.to_vec();
    header.extend(METRIC_COLUMNS);
    let body: Vec<Vec<String>> = leads
        .iter()
        .zip(rows)
        .map(|(l, r)| {
            let mut v = l.clone();
            v.extend(r.cells());
            v
        })
        .collect();
    write_csv(path, &header, &body)
}

/// The four grids. Writes `loss_score.csv`, `generator.csv`,
/// `pretraining.csv`, `temperature.csv` and `report.json` into `out`.
pub fn ablation_grid(cfg: &AblationConfig, out: &Path) -> Result<(ExperimentReport, AblationResult)> {
    cfg.validate()?;
    let started = Instant::now();
    std::fs::create_dir_all(out)?;
    let mut report = ExperimentReport::new("ablation", cfg);
    let (train_m, test_m) = generate_stage(&cfg.run, &out.join("data"))?;
    let train = load_split(&train_m)?;
    let test = load_split(&test_m)?;
    let start = prepare(cfg, &train)?;
    let last = cfg.last_epochs;
    let lambda_js = cfg.run.joint.lambda;

    let mut kl = Tracker::new(&test, vec![probe("KL-MSP", OodScoreKind::Msp, cfg), probe("KL-KL", OodScoreKind::Kl, cfg)]);
    let kl_rows = run_cell(&["KL-MSP", "KL-KL"], last, &mut kl, |t| {
        flow_cell(cfg, &train, &start.classifier, &start.flow, DivergenceKind::Kl, cfg.lambda_kl, t)
    });
    let mut rkl = Tracker::new(&test, vec![probe("RKL-RKL", OodScoreKind::Rkl, cfg)]);
    let rkl_rows = run_cell(&["RKL-RKL"], last, &mut rkl, |t| {
        flow_cell(cfg, &train, &start.classifier, &start.flow, DivergenceKind::Rkl, cfg.lambda_rkl, t)
    });

    // the JS run also carries the temperature sweep on the same checkpoints
    let mut js_probes = vec![probe("JSD-MSP", OodScoreKind::Msp, cfg), probe("JSD-JSD", OodScoreKind::Jsd, cfg)];
    let t_names: Vec<String> = cfg.temperatures.iter().map(|t| format!("T={t}")).collect();
    for (name, &t) in t_names.iter().zip(&cfg.temperatures) {
        js_probes.push(Probe {
            name: name.clone(),
            kind: OodScoreKind::Jsd,
            temperature: t,
        });
    }
    let mut js = Tracker::new(&test, js_probes);
    let mut js_names = vec!["JSD-MSP", "JSD-JSD"];
    js_names.extend(t_names.iter().map(String::as_str));
    let js_rows = run_cell(&js_names, last, &mut js, |t| {
        flow_cell(cfg, &train, &start.classifier, &start.flow, DivergenceKind::Js, lambda_js, t)
    });
    let jsd_jsd = js_rows[1].clone();

    let mut loss_and_score = kl_rows;
    loss_and_score.extend(rkl_rows);
    loss_and_score.extend(js_rows[..2].iter().cloned());
    let temperature = js_rows[2..].to_vec();

    let mut g = Tracker::new(&test, vec![probe("GAN", OodScoreKind::Jsd, cfg)]);
    let mut generator = run_cell(&["GAN"], last, &mut g, |t| gan_cell(cfg, &train, &start.classifier, t));
    generator.push(CellRow {
        name: "NFlow".into(),
        ..jsd_jsd.clone()
    });

    let mut none = Tracker::new(&test, vec![probe("none", OodScoreKind::Jsd, cfg)]);
    let mut pretraining = run_cell(&["none"], last, &mut none, |t| {
        flow_cell(cfg, &train, &start.fresh_classifier, &start.fresh_flow, DivergenceKind::Js, lambda_js, t)
    });
    let mut cls_only = Tracker::new(&test, vec![probe("classifier", OodScoreKind::Jsd, cfg)]);
    pretraining.extend(run_cell(&["classifier"], last, &mut cls_only, |t| {
        flow_cell(cfg, &train, &start.classifier, &start.fresh_flow, DivergenceKind::Js, lambda_js, t)
    }));
    pretraining.push(CellRow {
        name: "both".into(),
        ..jsd_jsd
    });

    let result = AblationResult {
        loss_and_score,
        generator,
        pretraining,
        temperature,
    };

    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let p = out.join("loss_score.csv");
    let leads = vec![
        s(&["kl", "msp"]),
        s(&["kl", "kl"]),
        s(&["rkl", "rkl"]),
        s(&["js", "msp"]),
        s(&["js", "jsd"]),
    ];
    table(&p, &["loss", "score"], &leads, &result.loss_and_score)?;
    report.files.push(p);

    let p = out.join("generator.csv");
    table(&p, &["generator"], &[s(&["gan"]), s(&["flow"])], &result.generator)?;
    report.files.push(p);

    let p = out.join("pretraining.csv");
    let leads = vec![s(&["false", "false"]), s(&["true", "false"]), s(&["true", "true"])];
    table(&p, &["classifier_pretrained", "flow_pretrained"], &leads, &result.pretraining)?;
    report.files.push(p);

    let p = out.join("temperature.csv");
    let leads: Vec<Vec<String>> = result
        .temperature
        .iter()
        .zip(&cfg.temperatures)
        .map(|(r, t)| vec![t.to_string(), r.closed_digest.map(|d| format!("{d:016x}")).unwrap_or_default()])
        .collect();
    table(&p, &["temperature", "closed_set_digest"], &leads, &result.temperature)?;
    report.files.push(p);

    let all = result
        .loss_and_score
        .iter()
        .chain(&result.generator)
        .chain(&result.pretraining)
        .chain(&result.temperature);
    for r in all {
        report.metric(&format!("{}.ap", r.name), r.ap.0);
        report.metric(&format!("{}.fpr95", r.name), r.fpr95.0);
    }
    report.finish(out, started)?;
    Ok((report, result))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> AblationConfig {
        let mut c = AblationConfig::default();
        let r = &mut c.run;
        r.data.n_train = 8;
        r.data.n_test = 4;
        r.data.image_size = 16;
        r.flow.crop = 8;
        r.flow.hidden = 8;
        r.flow.steps_per_level = 1;
        r.flow.pretrain_epochs = 1;
        r.classifier.width = 4;
        r.classifier.pretrain_epochs = 1;
        r.joint.epochs = 2;
        r.joint.patch_min = 4;
        r.joint.patch_max = 8;
        r.batch_size = 4;
        c.gan_patch = 4;
        c.gan_hidden = 16;
        c
    }

    #[test]
    fn grids_have_table_shape() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        let (report, r) = ablation_grid(&cfg, dir.path()).unwrap();
        assert!(report.files.iter().all(|f| f.exists()));
        let names: Vec<&str> = r.loss_and_score.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["KL-MSP", "KL-KL", "RKL-RKL", "JSD-MSP", "JSD-JSD"]);
        assert_eq!(r.generator.len(), 2);
        assert_eq!(r.pretraining.len(), 3);
        assert_eq!(r.temperature.len(), 3);
        for c in r.loss_and_score.iter().chain(&r.generator).chain(&r.pretraining) {
            assert!(c.error.is_none(), "{}: {:?}", c.name, c.error);
            assert!((0.0..=1.0).contains(&c.ap.0) && (0.0..=1.0).contains(&c.fpr95.0));
            assert_eq!(c.epochs, 2);
        }
        let d = r.temperature[0].closed_digest;
        assert!(d.is_some() && r.temperature.iter().all(|c| c.closed_digest == d));
        let csv = std::fs::read_to_string(dir.path().join("loss_score.csv")).unwrap();
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn failing_cell_becomes_error_rows() {
        let test = Dataset {
            classes: 2,
            calibration: None,
            images: Vec::new(),
            labels: Vec::new(),
            disparities: Vec::new(),
        };
        let mut t = Tracker::new(&test, vec![probe("a", OodScoreKind::Jsd, &tiny())]);
        let rows = run_cell(&["a"], 3, &mut t, |_| Err(Error::Config("boom".into())));
        assert_eq!(rows.len(), 1);
        assert!(rows[0].error.as_deref().unwrap().contains("boom"));
        assert!(rows[0].ap.0.is_nan());
    }
}
