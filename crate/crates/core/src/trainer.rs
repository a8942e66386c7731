//! Two-stage training: separate pre-training of the classifier and the flow,
//! then joint fine-tuning on mixed-content batches.
//!
//! In a joint step the classifier minimises `L_cls + λ L_neg` and the flow
//! minimises `λ L_neg + L_nll`. The shared negative term is evaluated once
//! and differentiated for both parameter sets; the cross-entropy never
//! reaches the flow.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::composer::{compose_tensor, sample_batch_specs};
use crate::data::{Dataset, ImageTensor, LabelMap, IGNORE_ID};
use crate::divergence::{divergence_tensor, DivergenceKind};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::metrics::histogram;
use crate::nn::layers::log_softmax;
use crate::nn::{cosine_lr, Checkpoint, Optimizer, OptimizerKind};

/// Length and step size of one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_floor: f64,
}

impl StageSchedule {
    fn check(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        Ok(())
    }

    fn horizon(&self, n: usize) -> u64 {
        (self.epochs * n.div_ceil(self.batch_size)) as u64
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn finite(v: f64, component: &'static str, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss { component, step })
    }
}

/// Class indices `(N, 1, H, W)` with ignore pixels mapped to 0, and the
/// matching validity weights.
pub fn label_tensors(labels: &[&LabelMap], dtype: DType) -> Result<(Tensor, Tensor)> {
    let (h, w) = (labels[0].height(), labels[0].width());
    let mut idx = Vec::with_capacity(labels.len() * h * w);
    let mut valid = Vec::with_capacity(labels.len() * h * w);
    for l in labels {
        if (l.height(), l.width()) != (h, w) {
            return Err(Error::Shape("label maps in a batch differ in size".into()));
        }
        for &id in l.ids() {
            let ok = id != IGNORE_ID;
            idx.push(if ok { id as u32 } else { 0 });
            valid.push(if ok { 1f32 } else { 0.0 });
        }
    }
    let shape = (labels.len(), 1, h, w);
    Ok((
        Tensor::from_vec(idx, shape, &Device::Cpu)?,
        Tensor::from_vec(valid, shape, &Device::Cpu)?.to_dtype(dtype)?,
    ))
}

/// Per-pixel cross-entropy `(N, 1, H, W)`.
pub fn pixel_cross_entropy(logits: &Tensor, idx: &Tensor) -> Result<Tensor> {
    Ok(log_softmax(logits, 1)?.gather(idx, 1)?.neg()?)
}

/// `Σ v w / Σ w`, exactly zero when every weight is zero.
pub fn masked_mean(values: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let num = (values * weights)?.sum_all()?;
    let den = scalar(&weights.sum_all()?)?;
    Ok((num / den.max(1.0))?)
}

/// The two data terms of the classifier objective on a composed batch:
/// cross-entropy over unmasked, non-ignore pixels and the divergence to
/// uniform over masked pixels. Also returns the per-pixel divergence map.
pub fn routed_losses(
    logits: &Tensor,
    idx: &Tensor,
    valid: &Tensor,
    mask: &Tensor,
    kind: DivergenceKind,
) -> Result<(Tensor, Tensor, Tensor)> {
    let ce = pixel_cross_entropy(logits, idx)?;
    let keep = mask.affine(-1.0, 1.0)?;
    let l_cls = masked_mean(&ce, &(keep * valid)?)?;
    let div = divergence_tensor(kind, logits, 1)?.unsqueeze(1)?;
    let l_neg = masked_mean(&div, mask)?;
    Ok((l_cls, l_neg, div))
}

/// Mean negative log-likelihood per dimension, in nats.
pub fn flow_nll(flow: &FlowModel, x: &Tensor) -> Result<Tensor> {
    let dims = x.elem_count() / x.dim(0)?;
    Ok(flow.log_prob(x)?.mean_all()?.affine(-1.0 / dims as f64, 0.0)?)
}

pub(crate) fn batches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Supervised pre-training. Returns the mean training cross-entropy of
/// every epoch.
pub fn pretrain_classifier(
    model: &ClassifierModel,
    data: &Dataset,
    schedule: &StageSchedule,
    seed: u64,
) -> Result<Vec<f64>> {
    schedule.check()?;
    if data.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    for l in &data.labels {
        l.validate(data.classes, false)?;
    }
    if data.labels.iter().all(|l| l.ids().iter().all(|&i| i == IGNORE_ID)) {
        return Err(Error::Empty("no supervised pixels: every label is ignore".into()));
    }
    let dtype = model.dtype();
    let mut opt = Optimizer::new(OptimizerKind::Adam, schedule.lr);
    let horizon = schedule.horizon(data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::with_capacity(schedule.epochs);
    for _ in 0..schedule.epochs {
        let (mut sum, mut count) = (0.0, 0usize);
        for b in batches(data.len(), schedule.batch_size, &mut rng) {
            let imgs: Vec<&ImageTensor> = b.iter().map(|&i| &data.images[i]).collect();
            let lbls: Vec<&LabelMap> = b.iter().map(|&i| &data.labels[i]).collect();
            let x = ImageTensor::stack(&imgs, dtype)?;
            let (idx, valid) = label_tensors(&lbls, dtype)?;
            let logits = model.forward(&x, true)?;
            let loss = masked_mean(&pixel_cross_entropy(&logits, &idx)?, &valid)?;
            let v = finite(scalar(&loss)?, "classifier cross-entropy", opt.steps())?;
            opt.set_lr(cosine_lr(schedule.lr, schedule.lr_floor, opt.steps(), horizon));
            opt.step(model.params(), &loss.backward()?)?;
            sum += v * b.len() as f64;
            count += b.len();
        }
        history.push(sum / count as f64);
        log::info!("classifier epoch {}: ce {:.4}", history.len(), history.last().unwrap());
    }
    Ok(history)
}

/// Bits per dimension before and after every pre-training epoch, measured on
/// a fixed set of dequantised crops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowPretrainLog {
    pub initial_bpd: f64,
    pub epoch_bpd: Vec<f64>,
}

fn random_crops<R: Rng + ?Sized>(
    images: &[&ImageTensor],
    crop: usize,
    rng: &mut R,
    dtype: DType,
) -> Result<Tensor> {
    let crops = images
        .iter()
        .map(|im| {
            let top = rng.random_range(0..=im.height() - crop);
            let left = rng.random_range(0..=im.width() - crop);
            im.crop(top, left, crop, crop)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ImageTensor> = crops.iter().collect();
    ImageTensor::stack(&refs, dtype)
}

/// Maximum-likelihood pre-training on random square inlier crops.
pub fn pretrain_flow(
    model: &mut FlowModel,
    data: &Dataset,
    crop: usize,
    schedule: &StageSchedule,
    seed: u64,
) -> Result<FlowPretrainLog> {
    schedule.check()?;
    if data.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    let unit = model.arch().unit();
    if crop == 0 || !crop.is_multiple_of(unit) {
        return Err(Error::Config(format!("crop {crop} is not a positive multiple of {unit}")));
    }
    if data.images.iter().any(|im| im.height() < crop || im.width() < crop) {
        return Err(Error::Config(format!("crop {crop} is larger than a training image")));
    }
    let dtype = model.dtype();
    let all: Vec<&ImageTensor> = data.images.iter().collect();
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_f10e);
    let eval_n = all.len().min(32);
    let eval = FlowModel::dequantize(&random_crops(&all[..eval_n], crop, &mut eval_rng, dtype)?, &mut eval_rng)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if !model.is_initialized() {
        let n = all.len().min(64);
        let first = FlowModel::dequantize(&random_crops(&all[..n], crop, &mut rng, dtype)?, &mut rng)?;
        model.initialize(&first)?;
    }
    let initial_bpd = model.bits_per_dim(&eval)?;
    let mut opt = Optimizer::new(OptimizerKind::Adamax, schedule.lr);
    let horizon = schedule.horizon(data.len());
    let mut epoch_bpd = Vec::with_capacity(schedule.epochs);
    for _ in 0..schedule.epochs {
        for b in batches(data.len(), schedule.batch_size, &mut rng) {
            let imgs: Vec<&ImageTensor> = b.iter().map(|&i| all[i]).collect();
            let x = FlowModel::dequantize(&random_crops(&imgs, crop, &mut rng, dtype)?, &mut rng)?;
            let loss = flow_nll(model, &x)?;
            finite(scalar(&loss)?, "flow negative log-likelihood", opt.steps())?;
            opt.set_lr(cosine_lr(schedule.lr, schedule.lr_floor, opt.steps(), horizon));
            opt.step(model.params(), &loss.backward()?)?;
        }
        epoch_bpd.push(model.bits_per_dim(&eval)?);
        log::info!("flow epoch {}: {:.4} bits/dim", epoch_bpd.len(), epoch_bpd.last().unwrap());
    }
    Ok(FlowPretrainLog { initial_bpd, epoch_bpd })
}

/// Settings of one joint step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointStepConfig {
    pub lambda: f64,
    pub kind: DivergenceKind,
    /// Inclusive patch side range.
    pub patch: (usize, usize),
    pub update_classifier: bool,
    pub update_flow: bool,
}

/// Loss components of one step (before the update).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub cls: f64,
    pub neg: f64,
    pub nll: f64,
    /// `cls + λ neg + nll`.
    pub total: f64,
    /// `λ L_neg` of every pasted pixel.
    #[serde(skip)]
    pub neg_pixels: Vec<f32>,
}

/// Models, optimizers and counters of joint fine-tuning.
#[derive(Debug)]
pub struct JointState {
    pub classifier: ClassifierModel,
    pub flow: FlowModel,
    pub cls_opt: Optimizer,
    pub flow_opt: Optimizer,
    pub epoch: usize,
    pub step: u64,
}

/// Tensors of a composed batch, ready for the loss.
pub struct ComposedBatch {
    pub composed: Tensor,
    pub mask: Tensor,
    pub idx: Tensor,
    pub valid: Tensor,
    /// Inlier content that the negatives replaced, already in the flow's
    /// input domain (dequantised for images).
    pub replaced: Tensor,
}

impl JointState {
    pub fn new(classifier: ClassifierModel, flow: FlowModel, cls_lr: f64, flow_lr: f64) -> Self {
        Self {
            classifier,
            flow,
            cls_opt: Optimizer::new(OptimizerKind::Adam, cls_lr),
            flow_opt: Optimizer::new(OptimizerKind::Adamax, flow_lr),
            epoch: 0,
            step: 0,
        }
    }

    /// Draw one flow sample per image and paste it.
    pub fn compose_images<R: Rng + ?Sized>(
        &self,
        images: &[&ImageTensor],
        labels: &[&LabelMap],
        patch: (usize, usize),
        rng: &mut R,
    ) -> Result<ComposedBatch> {
        let dtype = self.classifier.dtype();
        let x = ImageTensor::stack(images, dtype)?;
        let (_, _, h, w) = x.dims4()?;
        let specs = sample_batch_specs(rng, images.len(), (h, w), patch, self.flow.arch().unit())?;
        let patches = self
            .flow
            .sample_tensor(images.len(), specs[0].height, specs[0].width, rng)?
            .clamp(0.0, 1.0)?
            .to_dtype(dtype)?;
        let (composed, mask, crops) = compose_tensor(&x, &patches, &specs)?;
        let (idx, valid) = label_tensors(labels, dtype)?;
        let replaced = FlowModel::dequantize(&crops.to_dtype(self.flow.dtype())?, rng)?;
        Ok(ComposedBatch {
            composed,
            mask,
            idx,
            valid,
            replaced,
        })
    }

    /// Point mode: inliers followed by `n_neg` flow samples; the flow's
    /// likelihood term uses the inliers.
    pub fn compose_points<R: Rng + ?Sized>(
        &self,
        points: &Tensor,
        classes: &[u32],
        n_neg: usize,
        rng: &mut R,
    ) -> Result<ComposedBatch> {
        let (n, d) = points.dims2()?;
        let dtype = self.classifier.dtype();
        let neg = self.flow.sample_tensor(n_neg, 1, 1, rng)?.to_dtype(dtype)?;
        let inl = points.reshape((n, d, 1, 1))?.to_dtype(dtype)?;
        let composed = Tensor::cat(&[&inl, &neg], 0)?;
        let total = n + n_neg;
        let m: Vec<f32> = (0..total).map(|i| if i < n { 0.0 } else { 1.0 }).collect();
        let mask = Tensor::from_vec(m, (total, 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
        let mut ids = classes.to_vec();
        ids.resize(total, 0);
        let idx = Tensor::from_vec(ids, (total, 1, 1, 1), &Device::Cpu)?;
        Ok(ComposedBatch {
            composed,
            valid: mask.ones_like()?,
            mask,
            idx,
            replaced: points.reshape((n, d, 1, 1))?.to_dtype(self.flow.dtype())?,
        })
    }

    /// Forward pass and the three loss tensors.
    fn losses(&self, batch: &ComposedBatch, kind: DivergenceKind) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let logits = self.classifier.forward(&batch.composed, true)?;
        let (l_cls, l_neg, div) = routed_losses(&logits, &batch.idx, &batch.valid, &batch.mask, kind)?;
        let l_nll = flow_nll(&self.flow, &batch.replaced)?;
        Ok((l_cls, l_neg, l_nll, div))
    }

    /// One simultaneous update of both models on a composed batch.
    pub fn step_on(&mut self, batch: &ComposedBatch, cfg: &JointStepConfig) -> Result<StepLosses> {
        let (l_cls, l_neg, l_nll, div) = self.losses(batch, cfg.kind)?;
        let step = self.step;
        let cls = finite(scalar(&l_cls)?, "cross-entropy", step)?;
        let neg = finite(scalar(&l_neg)?, "negative-pixel divergence", step)?;
        let nll = finite(scalar(&l_nll)?, "flow negative log-likelihood", step)?;
        let weighted = (l_neg * cfg.lambda)?;
        if cfg.update_classifier {
            let g = (&l_cls + &weighted)?.backward()?;
            self.cls_opt.step(self.classifier.params(), &g)?;
        }
        if cfg.update_flow {
            let g = (&weighted + &l_nll)?.backward()?;
            self.flow_opt.step(self.flow.params(), &g)?;
        }
        let neg_pixels = masked_values(&div, &batch.mask, cfg.lambda)?;
        self.step += 1;
        Ok(StepLosses {
            cls,
            neg,
            nll,
            total: cls + cfg.lambda * neg + nll,
            neg_pixels,
        })
    }

    /// Compose a fresh batch from images and take one step.
    pub fn joint_step<R: Rng + ?Sized>(
        &mut self,
        images: &[&ImageTensor],
        labels: &[&LabelMap],
        cfg: &JointStepConfig,
        rng: &mut R,
    ) -> Result<StepLosses> {
        let batch = self.compose_images(images, labels, cfg.patch, rng)?;
        self.step_on(&batch, cfg)
    }

    /// Loss values of a composed batch without updating anything.
    pub fn evaluate_losses(&self, batch: &ComposedBatch, cfg: &JointStepConfig) -> Result<StepLosses> {
        let (l_cls, l_neg, l_nll, div) = self.losses(batch, cfg.kind)?;
        let (cls, neg, nll) = (scalar(&l_cls)?, scalar(&l_neg)?, scalar(&l_nll)?);
        Ok(StepLosses {
            cls,
            neg,
            nll,
            total: cls + cfg.lambda * neg + nll,
            neg_pixels: masked_values(&div, &batch.mask, cfg.lambda)?,
        })
    }

    /// Squared gradient norms of `λ L_neg` alone on the flow and on the
    /// classifier parameters.
    pub fn coupling_gradients(&self, batch: &ComposedBatch, cfg: &JointStepConfig) -> Result<(f64, f64)> {
        let (_, l_neg, _, _) = self.losses(batch, cfg.kind)?;
        let g = (l_neg * cfg.lambda)?.backward()?;
        Ok((self.flow.params().grad_sq_norm(&g)?, self.classifier.params().grad_sq_norm(&g)?))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let cls = self.classifier.to_checkpoint()?;
        let flow = self.flow.to_checkpoint()?;
        let (cls_steps, cls_state) = self.cls_opt.state();
        let (flow_steps, flow_state) = self.flow_opt.state();
        let meta = serde_json::json!({
            "classifier": cls.meta,
            "flow": flow.meta,
            "epoch": self.epoch,
            "step": self.step,
            "cls_opt": { "steps": cls_steps, "lr": self.cls_opt.lr() },
            "flow_opt": { "steps": flow_steps, "lr": self.flow_opt.lr() },
        });
        let mut ck = Checkpoint::new("joint", meta);
        ck.insert_all("cls.", cls.tensors);
        ck.insert_all("flow.", flow.tensors);
        ck.insert_all("cls_opt.", cls_state);
        ck.insert_all("flow_opt.", flow_state);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = &ck.meta;
        let classifier = ClassifierModel::from_checkpoint(ck, &m["classifier"], "cls.")?;
        let flow = FlowModel::from_checkpoint(ck, &m["flow"], "flow.")?;
        let mut s = Self::new(
            classifier,
            flow,
            m["cls_opt"]["lr"].as_f64().unwrap_or(0.0),
            m["flow_opt"]["lr"].as_f64().unwrap_or(0.0),
        );
        s.cls_opt
            .load_state(m["cls_opt"]["steps"].as_u64().unwrap_or(0), &ck.section("cls_opt."));
        s.flow_opt
            .load_state(m["flow_opt"]["steps"].as_u64().unwrap_or(0), &ck.section("flow_opt."));
        s.epoch = m["epoch"].as_u64().unwrap_or(0) as usize;
        s.step = m["step"].as_u64().unwrap_or(0);
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path, "joint")?)
    }
}

fn masked_values(div: &Tensor, mask: &Tensor, lambda: f64) -> Result<Vec<f32>> {
    let d = div.detach().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let m = mask.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(d.iter()
        .zip(&m)
        .filter(|(_, &s)| s > 0.5)
        .map(|(&v, _)| (lambda * v as f64) as f32)
        .collect())
}

/// Settings of the joint stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub cls_lr: f64,
    pub flow_lr: f64,
    pub lr_floor: f64,
    pub step: JointStepConfig,
    pub seed: u64,
    pub hist_bins: usize,
}

/// Per-epoch means of the loss components plus the λ·L_neg histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cls: f64,
    pub neg: f64,
    pub nll: f64,
    pub total: f64,
    pub max_neg_pixel: f64,
    pub hist_edges: Vec<f64>,
    pub hist_counts: Vec<u64>,
}

/// Where joint training writes checkpoints and logs.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub dir: PathBuf,
    /// Save a checkpoint every this many epochs (and after the last one).
    pub checkpoint_every: usize,
}

/// Run the joint stage from `state.epoch` to `schedule.epochs`. Each epoch
/// draws its batch order and negatives from a stream keyed by the epoch
/// index, so a run resumed from an epoch checkpoint matches an
/// uninterrupted one. `on_epoch` runs after every epoch.
pub fn joint_train(
    state: &mut JointState,
    data: &Dataset,
    schedule: &JointSchedule,
    outputs: Option<&RunOutputs>,
    on_epoch: &mut dyn FnMut(&JointState, &EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    if data.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    if schedule.batch_size == 0 || schedule.hist_bins == 0 {
        return Err(Error::Config("batch size and histogram bins must be positive".into()));
    }
    let per_epoch = data.len().div_ceil(schedule.batch_size) as u64;
    let horizon = per_epoch * schedule.epochs as u64;
    let mut records = Vec::new();
    if let Some(o) = outputs {
        std::fs::create_dir_all(&o.dir)?;
    }
    while state.epoch < schedule.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        rng.set_stream(1000 + state.epoch as u64);
        let (mut sums, mut n) = ([0.0f64; 4], 0usize);
        let mut pixels: Vec<f32> = Vec::new();
        for b in batches(data.len(), schedule.batch_size, &mut rng) {
            let imgs: Vec<&ImageTensor> = b.iter().map(|&i| &data.images[i]).collect();
            let lbls: Vec<&LabelMap> = b.iter().map(|&i| &data.labels[i]).collect();
            let t = state.step;
            state
                .cls_opt
                .set_lr(cosine_lr(schedule.cls_lr, schedule.lr_floor, t, horizon));
            state
                .flow_opt
                .set_lr(cosine_lr(schedule.flow_lr, schedule.lr_floor, t, horizon));
            let l = state.joint_step(&imgs, &lbls, &schedule.step, &mut rng)?;
            for (s, v) in sums.iter_mut().zip([l.cls, l.neg, l.nll, l.total]) {
                *s += v * b.len() as f64;
            }
            n += b.len();
            pixels.extend_from_slice(&l.neg_pixels);
        }
        state.epoch += 1;
        let max_neg = pixels.iter().copied().fold(0f32, f32::max) as f64;
        let hi = match schedule.step.kind.upper_bound(2) {
            Some(_) if schedule.step.kind == DivergenceKind::Js => schedule.step.lambda * std::f64::consts::LN_2,
            _ => max_neg.max(f64::MIN_POSITIVE),
        };
        let vals: Vec<f64> = pixels.iter().map(|&v| v as f64).collect();
        let rec = EpochRecord {
            epoch: state.epoch,
            cls: sums[0] / n as f64,
            neg: sums[1] / n as f64,
            nll: sums[2] / n as f64,
            total: sums[3] / n as f64,
            max_neg_pixel: max_neg,
            hist_edges: (0..=schedule.hist_bins)
                .map(|i| hi * i as f64 / schedule.hist_bins as f64)
                .collect(),
            hist_counts: histogram(&vals, 0.0, hi, schedule.hist_bins),
        };
        log::info!(
            "joint epoch {}: cls {:.4} neg {:.4} nll {:.4}",
            rec.epoch,
            rec.cls,
            rec.neg,
            rec.nll
        );
        if let Some(o) = outputs {
            write_epoch_logs(&o.dir, &rec)?;
            if state.epoch.is_multiple_of(o.checkpoint_every.max(1)) || state.epoch == schedule.epochs {
                state.save(&o.dir.join("joint.ckpt"))?;
            }
        }
        on_epoch(state, &rec)?;
        records.push(rec);
    }
    Ok(records)
}

fn write_epoch_logs(dir: &Path, rec: &EpochRecord) -> Result<()> {
    let loss_path = dir.join("joint_losses.csv");
    let fresh = rec.epoch == 1 || !loss_path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&loss_path)?;
    if fresh {
        writeln!(f, "epoch,cls,neg,nll,total,max_neg_pixel")?;
    }
    writeln!(
        f,
        "{},{},{},{},{},{}",
        rec.epoch, rec.cls, rec.neg, rec.nll, rec.total, rec.max_neg_pixel
    )?;
    let mut h = String::from("lo,hi,count\n");
    for (i, c) in rec.hist_counts.iter().enumerate() {
        h += &format!("{},{},{}\n", rec.hist_edges[i], rec.hist_edges[i + 1], c);
    }
    std::fs::write(dir.join(format!("neg_hist_epoch{}.csv", rec.epoch)), h)?;
    Ok(())
}

/// Write `epoch,value` rows.
pub fn write_history_csv(path: &Path, header: &str, values: &[f64]) -> Result<()> {
    let mut s = format!("epoch,{header}\n");
    for (i, v) in values.iter().enumerate() {
        s += &format!("{},{v}\n", i + 1);
    }
    std::fs::write(path, s)?;
    Ok(())
}
