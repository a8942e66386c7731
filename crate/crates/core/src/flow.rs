//! Affine-coupling normalizing flow with exact log-likelihood and
//! resolution-agnostic sampling.
//!
//! Image mode: inputs in [0,1] are mapped to logit space (boundary margin
//! [`LOGIT_MARGIN`]), then pass through checkerboard couplings at full
//! resolution followed by `levels` rounds of squeeze + channel couplings.
//! Point mode treats d-dimensional points as `d x 1 x 1` images and uses
//! channel couplings with 1x1 (fully connected) conditioners only.
//!
//! All conditioners are fully convolutional, so one model can be sampled at
//! any spatial size divisible by `2^levels`.

use std::f64::consts::{LN_2, PI};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Conv2d, Init, ParamStore};

/// Boundary margin of the logit preprocessing.
pub const LOGIT_MARGIN: f64 = 0.05;
/// Coupling log-scales are squashed into (-SCALE_BOUND, SCALE_BOUND).
pub const SCALE_BOUND: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum FlowMode {
    Image { channels: usize },
    Points { dims: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowArch {
    pub mode: FlowMode,
    /// Squeeze operations (ignored in point mode).
    pub levels: usize,
    /// Normalisation + coupling pairs per resolution.
    pub steps_per_level: usize,
    pub hidden: usize,
}

impl FlowArch {
    pub fn image(channels: usize, levels: usize, steps_per_level: usize, hidden: usize) -> Self {
        Self {
            mode: FlowMode::Image { channels },
            levels,
            steps_per_level,
            hidden,
        }
    }

    pub fn points(dims: usize, steps: usize, hidden: usize) -> Self {
        Self {
            mode: FlowMode::Points { dims },
            levels: 0,
            steps_per_level: steps,
            hidden,
        }
    }

    pub fn channels(&self) -> usize {
        match self.mode {
            FlowMode::Image { channels } => channels,
            FlowMode::Points { dims } => dims,
        }
    }

    /// Spatial sides must be multiples of this.
    pub fn unit(&self) -> usize {
        match self.mode {
            FlowMode::Image { .. } => 1 << self.levels,
            FlowMode::Points { .. } => 1,
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self.mode, FlowMode::Image { .. })
    }
}

#[derive(Debug, Clone)]
struct ActNorm {
    bias: Var,
    log_scale: Var,
}

impl ActNorm {
    fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            bias: store.constant(&format!("{name}.bias"), &[channels], 0.0)?,
            log_scale: store.constant(&format!("{name}.log_scale"), &[channels], 0.0)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, c, h, w) = x.dims4()?;
        let b = self.bias.reshape((1, c, 1, 1))?;
        let s = self.log_scale.reshape((1, c, 1, 1))?;
        let y = x.broadcast_add(&b)?.broadcast_mul(&s.exp()?)?;
        let ld = (self.log_scale.sum_all()? * (h * w) as f64)?.broadcast_as(n)?;
        Ok((y, ld))
    }

    fn inverse(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, c, h, w) = y.dims4()?;
        let b = self.bias.reshape((1, c, 1, 1))?;
        let s = self.log_scale.reshape((1, c, 1, 1))?;
        let x = y.broadcast_mul(&s.neg()?.exp()?)?.broadcast_sub(&b)?;
        let ld = (self.log_scale.sum_all()? * -((h * w) as f64))?.broadcast_as(n)?;
        Ok((x, ld))
    }

    /// Set parameters so the current batch comes out zero-mean, unit-variance
    /// per channel.
    fn init_from(&self, x: &Tensor) -> Result<()> {
        let (n, c, h, w) = x.dims4()?;
        let flat = x.detach().transpose(0, 1)?.reshape((c, n * h * w))?;
        let mean = flat.mean_keepdim(1)?;
        let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
        let std = (var.sqrt()? + 1e-6)?;
        self.bias.set(&mean.flatten_all()?.neg()?)?;
        self.log_scale.set(&std.log()?.neg()?.flatten_all()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Mask {
    /// Pixels with (row + col) % 2 == parity condition the others.
    Checkerboard { parity: usize },
    /// The first (or second) half of the channels conditions the rest.
    Channel { first_conditions: bool },
}

#[derive(Debug, Clone)]
struct Coupling {
    mask: Mask,
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
}

fn checkerboard(h: usize, w: usize, parity: usize, dtype: DType) -> Result<Tensor> {
    let v: Vec<f32> = (0..h * w)
        .map(|i| if (i / w + i % w) % 2 == parity { 1.0 } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(v, (1, 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

impl Coupling {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        mask: Mask,
        channels: usize,
        hidden: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (cin, cout) = match mask {
            Mask::Checkerboard { .. } => (channels, channels),
            Mask::Channel { first_conditions } => {
                let a = channels / 2;
                if first_conditions {
                    (a, channels - a)
                } else {
                    (channels - a, a)
                }
            }
        };
        Ok(Self {
            mask,
            c1: Conv2d::new(store, &format!("{name}.c1"), cin, hidden, kernel, 1, Init::He, rng)?,
            c2: Conv2d::new(store, &format!("{name}.c2"), hidden, hidden, 1, 1, Init::He, rng)?,
            c3: Conv2d::new(store, &format!("{name}.c3"), hidden, 2 * cout, kernel, 1, Init::Zero, rng)?,
        })
    }

    /// Bounded log-scale and shift for the transformed part.
    fn params(&self, cond: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.c1.forward(cond)?.relu()?;
        let h = self.c2.forward(&h)?.relu()?;
        let out = self.c3.forward(&h)?;
        let c = out.dim(1)? / 2;
        let raw_s = out.narrow(1, 0, c)?;
        let t = out.narrow(1, c, c)?;
        let s = (raw_s / SCALE_BOUND)?.tanh()?.affine(SCALE_BOUND, 0.0)?;
        Ok((s, t))
    }

    fn split(&self, x: &Tensor, first_conditions: bool) -> Result<(Tensor, Tensor)> {
        let c = x.dim(1)?;
        let a = c / 2;
        let (p, q) = (x.narrow(1, 0, a)?, x.narrow(1, a, c - a)?);
        Ok(if first_conditions { (p, q) } else { (q, p) })
    }

    fn join(&self, cond: Tensor, moved: Tensor, first_conditions: bool) -> Result<Tensor> {
        let parts = if first_conditions { [cond, moved] } else { [moved, cond] };
        Ok(Tensor::cat(&parts, 1)?)
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        match self.mask {
            Mask::Checkerboard { parity } => {
                let (_, _, h, w) = x.dims4()?;
                let m = checkerboard(h, w, parity, x.dtype())?;
                let inv = m.affine(-1.0, 1.0)?;
                let xm = x.broadcast_mul(&m)?;
                let (s, t) = self.params(&xm)?;
                let s = s.broadcast_mul(&inv)?;
                let t = t.broadcast_mul(&inv)?;
                let y = (xm + (x.broadcast_mul(&inv)? * s.exp()?)?.add(&t)?)?;
                let ld = s.flatten_from(1)?.sum(1)?;
                Ok((y, ld))
            }
            Mask::Channel { first_conditions } => {
                let (cond, moved) = self.split(x, first_conditions)?;
                let (s, t) = self.params(&cond)?;
                let moved = ((moved * s.exp()?)? + t)?;
                let ld = s.flatten_from(1)?.sum(1)?;
                Ok((self.join(cond, moved, first_conditions)?, ld))
            }
        }
    }

    fn inverse(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        match self.mask {
            Mask::Checkerboard { parity } => {
                let (_, _, h, w) = y.dims4()?;
                let m = checkerboard(h, w, parity, y.dtype())?;
                let inv = m.affine(-1.0, 1.0)?;
                let ym = y.broadcast_mul(&m)?;
                let (s, t) = self.params(&ym)?;
                let s = s.broadcast_mul(&inv)?;
                let t = t.broadcast_mul(&inv)?;
                let moved = ((y.broadcast_mul(&inv)? - t)? * s.neg()?.exp()?)?;
                let x = (ym + moved)?;
                let ld = s.flatten_from(1)?.sum(1)?.neg()?;
                Ok((x, ld))
            }
            Mask::Channel { first_conditions } => {
                let (cond, moved) = self.split(y, first_conditions)?;
                let (s, t) = self.params(&cond)?;
                let moved = ((moved - t)? * s.neg()?.exp()?)?;
                let ld = s.flatten_from(1)?.sum(1)?.neg()?;
                Ok((self.join(cond, moved, first_conditions)?, ld))
            }
        }
    }
}

fn squeeze(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((n * c, h / 2, 2, w / 2, 2))?
        .permute((0, 2, 4, 1, 3))?
        .reshape((n, c * 4, h / 2, w / 2))?)
}

fn unsqueeze(x: &Tensor) -> Result<Tensor> {
    let (n, c4, h, w) = x.dims4()?;
    let c = c4 / 4;
    Ok(x
        .reshape((n * c, 2, 2, h, w))?
        .permute((0, 3, 1, 4, 2))?
        .reshape((n, c, h * 2, w * 2))?)
}

#[derive(Debug, Clone)]
enum Layer {
    ActNorm(ActNorm),
    Coupling(Coupling),
    Squeeze,
}

/// Invertible density model with a factorised standard-normal prior.
#[derive(Debug, Clone)]
pub struct FlowModel {
    arch: FlowArch,
    seed: u64,
    store: ParamStore,
    layers: Vec<Layer>,
    actnorm_initialized: bool,
}

fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

impl FlowModel {
    /// Build with identity couplings (zero-initialised output convolutions)
    /// and identity normalisation.
    pub fn new(arch: FlowArch, seed: u64, dtype: DType) -> Result<Self> {
        if arch.steps_per_level == 0 || arch.hidden == 0 {
            return Err(Error::Config("flow needs at least one step and hidden unit".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let mut layers = Vec::new();
        let mut idx = 0;
        let mut push_step = |store: &mut ParamStore,
                             layers: &mut Vec<Layer>,
                             mask: Mask,
                             channels: usize,
                             kernel: usize,
                             rng: &mut ChaCha8Rng|
         -> Result<()> {
            layers.push(Layer::ActNorm(ActNorm::new(store, &format!("l{idx}.an"), channels)?));
            layers.push(Layer::Coupling(Coupling::new(
                store,
                &format!("l{idx}.cp"),
                mask,
                channels,
                arch.hidden,
                kernel,
                rng,
            )?));
            idx += 1;
            Ok(())
        };
        match arch.mode {
            FlowMode::Image { channels } => {
                for i in 0..arch.steps_per_level {
                    let mask = Mask::Checkerboard { parity: i % 2 };
                    push_step(&mut store, &mut layers, mask, channels, 3, &mut rng)?;
                }
                let mut c = channels;
                for _ in 0..arch.levels {
                    layers.push(Layer::Squeeze);
                    c *= 4;
                    for i in 0..arch.steps_per_level {
                        let mask = Mask::Channel { first_conditions: i % 2 == 0 };
                        push_step(&mut store, &mut layers, mask, c, 3, &mut rng)?;
                    }
                }
            }
            FlowMode::Points { dims } => {
                if dims < 2 {
                    return Err(Error::Config("point mode needs at least 2 dimensions".into()));
                }
                for i in 0..arch.steps_per_level {
                    let mask = Mask::Channel { first_conditions: i % 2 == 0 };
                    push_step(&mut store, &mut layers, mask, dims, 1, &mut rng)?;
                }
            }
        }
        Ok(Self {
            arch,
            seed,
            store,
            layers,
            actnorm_initialized: false,
        })
    }

    pub fn arch(&self) -> &FlowArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Replace every parameter with small random values (tests and probes).
    pub fn randomize(&self, seed: u64, scale: f64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, var) in self.store.params() {
            let n = var.elem_count();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
            let t = Tensor::from_vec(v, var.dims(), &Device::Cpu)?.to_dtype(self.dtype())?;
            var.set(&t)?;
        }
        Ok(())
    }

    fn check_shape(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.arch.channels() {
            return Err(Error::Shape(format!(
                "flow expects {} channels, got {c}",
                self.arch.channels()
            )));
        }
        let unit = self.arch.unit();
        if !h.is_multiple_of(unit) || !w.is_multiple_of(unit) {
            return Err(Error::Config(format!(
                "spatial size {h}x{w} is not divisible by {unit}"
            )));
        }
        if !self.arch.is_image() && (h, w) != (1, 1) {
            return Err(Error::Shape("point-mode inputs must be d x 1 x 1".into()));
        }
        Ok(())
    }

    /// Map [0,1] images to logit space; returns per-sample log-determinant.
    fn preprocess(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if !self.arch.is_image() {
            let n = x.dim(0)?;
            return Ok((x.clone(), Tensor::zeros(n, x.dtype(), &Device::Cpu)?));
        }
        let a = LOGIT_MARGIN;
        let y = x.affine(1.0 - 2.0 * a, a)?;
        let ln_y = y.log()?;
        let ln_1my = y.affine(-1.0, 1.0)?.log()?;
        let v = (&ln_y - &ln_1my)?;
        let ld_elem = (ln_y + ln_1my)?.affine(-1.0, (1.0 - 2.0 * a).ln())?;
        let ld = ld_elem.flatten_from(1)?.sum(1)?;
        Ok((v, ld))
    }

    fn postprocess(&self, v: &Tensor) -> Result<Tensor> {
        if !self.arch.is_image() {
            return Ok(v.clone());
        }
        let a = LOGIT_MARGIN;
        let y = crate::nn::layers::sigmoid(v)?;
        Ok(y.affine(1.0 / (1.0 - 2.0 * a), -a / (1.0 - 2.0 * a))?)
    }

    fn ensure_finite(t: &Tensor, layer: usize, what: &str) -> Result<()> {
        let s = t.detach().abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if s.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric {
                layer,
                what: what.to_string(),
            })
        }
    }

    /// Data to latent. Returns `z` and the per-sample `ln|det dz/dx|`,
    /// including the logit preprocessing in image mode.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_shape(x)?;
        let (mut h, mut logdet) = self.preprocess(x)?;
        Self::ensure_finite(&h, 0, "preprocessing")?;
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, ld) = match layer {
                Layer::ActNorm(a) => a.forward(&h)?,
                Layer::Coupling(c) => c.forward(&h)?,
                Layer::Squeeze => (squeeze(&h)?, logdet.zeros_like()?),
            };
            h = next;
            logdet = (logdet + ld)?;
            Self::ensure_finite(&h, i + 1, "activation")?;
        }
        Self::ensure_finite(&logdet, self.layers.len(), "log-determinant")?;
        Ok((h, logdet))
    }

    /// Latent to data space (without the final clamp). Returns `x` and the
    /// per-sample `ln|det dx/dz|` of the flow layers (preprocessing excluded).
    pub fn inverse(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = z.dim(0)?;
        let mut h = z.clone();
        let mut logdet = Tensor::zeros(n, z.dtype(), &Device::Cpu)?;
        for layer in self.layers.iter().rev() {
            let (next, ld) = match layer {
                Layer::ActNorm(a) => a.inverse(&h)?,
                Layer::Coupling(c) => c.inverse(&h)?,
                Layer::Squeeze => (unsqueeze(&h)?, logdet.zeros_like()?),
            };
            h = next;
            logdet = (logdet + ld)?;
        }
        Ok((self.postprocess(&h)?, logdet))
    }

    /// Inverse of the flow layers only, in logit space (used by round-trip checks).
    pub fn inverse_latent(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = z.clone();
        for layer in self.layers.iter().rev() {
            h = match layer {
                Layer::ActNorm(a) => a.inverse(&h)?.0,
                Layer::Coupling(c) => c.inverse(&h)?.0,
                Layer::Squeeze => unsqueeze(&h)?,
            };
        }
        Ok(h)
    }

    /// Forward through the flow layers only, starting from logit space.
    pub fn forward_latent(&self, v: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = v.dim(0)?;
        let mut h = v.clone();
        let mut logdet = Tensor::zeros(n, v.dtype(), &Device::Cpu)?;
        for layer in &self.layers {
            let (next, ld) = match layer {
                Layer::ActNorm(a) => a.forward(&h)?,
                Layer::Coupling(c) => c.forward(&h)?,
                Layer::Squeeze => (squeeze(&h)?, logdet.zeros_like()?),
            };
            h = next;
            logdet = (logdet + ld)?;
        }
        Ok((h, logdet))
    }

    /// Per-sample `ln p(x)`; a density over [0,1]^D in image mode.
    pub fn log_prob(&self, x: &Tensor) -> Result<Tensor> {
        let (z, logdet) = self.forward(x)?;
        let d = z.elem_count() / z.dim(0)?;
        let prior = z
            .sqr()?
            .flatten_from(1)?
            .sum(1)?
            .affine(-0.5, -0.5 * d as f64 * (2.0 * PI).ln())?;
        Ok((prior + logdet)?)
    }

    /// Mean bits per dimension of an 8-bit image batch (already dequantised
    /// into [0,1]) or of a point batch.
    pub fn bits_per_dim(&self, x: &Tensor) -> Result<f64> {
        let lp = self.log_prob(x)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let dims = x.elem_count() / x.dim(0)?;
        let mean = lp.iter().sum::<f64>() / lp.len() as f64;
        Ok(log_prob_to_bits_per_dim(mean, dims, self.arch.is_image()))
    }

    /// Uniform dequantisation of 8-bit values in [0,1]: (255 x + u) / 256.
    pub fn dequantize<R: Rng + ?Sized>(x: &Tensor, rng: &mut R) -> Result<Tensor> {
        let noise: Vec<f64> = (0..x.elem_count()).map(|_| rng.random::<f64>()).collect();
        let u = Tensor::from_vec(noise, x.dims(), &Device::Cpu)?.to_dtype(x.dtype())?;
        Ok(((x * 255.0)? + u)?.affine(1.0 / 256.0, 0.0)?)
    }

    /// Latent shape for an `h x w` output.
    pub fn latent_shape(&self, n: usize, h: usize, w: usize) -> Result<Vec<usize>> {
        let unit = self.arch.unit();
        if h == 0 || w == 0 || !h.is_multiple_of(unit) || !w.is_multiple_of(unit) {
            return Err(Error::Config(format!(
                "sample size {h}x{w} must be a positive multiple of {unit}"
            )));
        }
        match self.arch.mode {
            FlowMode::Image { channels } => {
                let f = 1 << self.arch.levels;
                Ok(vec![n, channels * f * f, h / f, w / f])
            }
            FlowMode::Points { dims } => {
                if (h, w) != (1, 1) {
                    return Err(Error::Config("point-mode samples are 1x1".into()));
                }
                Ok(vec![n, dims, 1, 1])
            }
        }
    }

    /// Draw `n` samples of size `h x w`; differentiable w.r.t. the parameters.
    /// Image samples are not clamped.
    pub fn sample_tensor<R: Rng + ?Sized>(
        &self,
        n: usize,
        h: usize,
        w: usize,
        rng: &mut R,
    ) -> Result<Tensor> {
        let shape = self.latent_shape(n, h, w)?;
        let z = normal_tensor(rng, &shape, self.dtype())?;
        Ok(self.inverse(&z)?.0)
    }

    /// One seeded sample, clamped to [0,1], as an image.
    pub fn sample(&self, h: usize, w: usize, seed: u64) -> Result<ImageTensor> {
        if !self.arch.is_image() {
            return Err(Error::Config("use sample_tensor for point-mode flows".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = self.sample_tensor(1, h, w, &mut rng)?.clamp(0.0, 1.0)?;
        Ok(ImageTensor::unstack(&x.detach())?.remove(0))
    }

    /// Data-dependent initialisation of every normalisation layer from one batch.
    pub fn initialize(&mut self, x: &Tensor) -> Result<()> {
        self.check_shape(x)?;
        let (mut h, _) = self.preprocess(&x.detach())?;
        for layer in &self.layers {
            h = match layer {
                Layer::ActNorm(a) => {
                    a.init_from(&h)?;
                    a.forward(&h)?.0
                }
                Layer::Coupling(c) => c.forward(&h)?.0,
                Layer::Squeeze => squeeze(&h)?,
            }
            .detach();
        }
        self.actnorm_initialized = true;
        Ok(())
    }

    pub fn is_initialized(&self) -> bool {
        self.actnorm_initialized
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "arch": self.arch,
            "seed": self.seed,
            "dtype": format!("{:?}", self.dtype()),
            "actnorm_initialized": self.actnorm_initialized,
        });
        let mut ck = Checkpoint::new("flow", meta);
        ck.insert_all("", self.store.snapshot()?);
        Ok(ck)
    }

    /// Rebuild from a checkpoint written by [`FlowModel::to_checkpoint`]
    /// (possibly nested under `prefix`).
    pub fn from_checkpoint(ck: &Checkpoint, meta: &serde_json::Value, prefix: &str) -> Result<Self> {
        let arch: FlowArch = serde_json::from_value(meta["arch"].clone())
            .map_err(|e| Error::Checkpoint(format!("flow arch: {e}")))?;
        let seed = meta["seed"].as_u64().unwrap_or(0);
        let dtype = if meta["dtype"].as_str() == Some("F64") {
            DType::F64
        } else {
            DType::F32
        };
        let mut m = Self::new(arch, seed, dtype)?;
        m.store.restore(&ck.section(prefix))?;
        m.actnorm_initialized = meta["actnorm_initialized"].as_bool().unwrap_or(true);
        Ok(m)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck = Checkpoint::load(path, "flow")?;
        let meta = ck.meta.clone();
        Self::from_checkpoint(&ck, &meta, "")
    }

    /// Independent copy with its own parameter storage.
    pub fn try_clone(&self) -> Result<Self> {
        let mut m = Self::new(self.arch.clone(), self.seed, self.dtype())?;
        m.store.restore(&self.store.snapshot()?)?;
        m.actnorm_initialized = self.actnorm_initialized;
        Ok(m)
    }
}

/// Convert a per-sample log-likelihood in nats to bits per dimension. For
/// 8-bit data the dequantisation bin width adds 8 bits per dimension.
pub fn log_prob_to_bits_per_dim(log_prob: f64, dims: usize, quantized: bool) -> f64 {
    let bits = -log_prob / (dims as f64 * LN_2);
    if quantized {
        bits + 8.0
    } else {
        bits
    }
}

/// `ln N(z; 0, I)` summed over the trailing dimensions (host helper).
pub fn standard_normal_log_density(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * (2.0 * PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points_model(steps: usize) -> FlowModel {
        FlowModel::new(FlowArch::points(2, steps, 8), 1, DType::F64).unwrap()
    }

    fn pts(v: &[[f64; 2]]) -> Tensor {
        let flat: Vec<f64> = v.iter().flat_map(|p| p.iter().copied()).collect();
        Tensor::from_vec(flat, (v.len(), 2, 1, 1), &Device::Cpu).unwrap()
    }

    #[test]
    fn identity_point_flow_at_origin() {
        let m = points_model(2);
        let lp = m.log_prob(&pts(&[[0.0, 0.0]])).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((lp + (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn scaling_flow_log_prob_and_logdet() {
        // a single normalisation layer with log-scale ln a is z = a x (bias 0)
        let m = points_model(1);
        let a: f64 = 1.7;
        let an = m.params().get("l0.an.log_scale").unwrap();
        an.set(&Tensor::new(&[a.ln(), a.ln()], &Device::Cpu).unwrap()).unwrap();
        let x = [0.3, -1.1];
        let (_, ld) = m.forward(&pts(&[x])).unwrap();
        assert!((ld.to_vec1::<f64>().unwrap()[0] - 2.0 * a.ln()).abs() < 1e-12);
        let lp = m.log_prob(&pts(&[x])).unwrap().to_vec1::<f64>().unwrap()[0];
        let want = standard_normal_log_density(&[a * x[0], a * x[1]]) + 2.0 * a.ln();
        assert!((lp - want).abs() < 1e-12);
    }

    #[test]
    fn identity_image_flow_is_preprocessing() {
        let m = FlowModel::new(FlowArch::image(3, 1, 1, 4), 0, DType::F64).unwrap();
        let x = Tensor::full(0.25f64, (1, 3, 2, 2), &Device::Cpu).unwrap();
        let (z, ld) = m.forward(&x).unwrap();
        let y: f64 = 0.05 + 0.9 * 0.25;
        let v = (y / (1.0 - y)).ln();
        let zs = z.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(zs.len(), 12);
        assert!(zs.iter().all(|&q| (q - v).abs() < 1e-12));
        let want = 12.0 * (0.9f64.ln() - y.ln() - (1.0 - y).ln());
        assert!((ld.to_vec1::<f64>().unwrap()[0] - want).abs() < 1e-10);
    }

    #[test]
    fn squeeze_round_trip() {
        let x = Tensor::arange(0f64, 2.0 * 3.0 * 4.0 * 6.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 3, 4, 6))
            .unwrap();
        let s = squeeze(&x).unwrap();
        assert_eq!(s.dims(), &[2, 12, 2, 3]);
        let back = unsqueeze(&s).unwrap();
        assert_eq!(
            back.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        // each output channel group holds one 2x2 phase of the input
        let v = s.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let at = |c: usize| v[c * 6];
        assert_eq!((at(0), at(1), at(2), at(3)), (0.0, 1.0, 6.0, 7.0));
    }

    #[test]
    fn image_round_trip_and_logdet_symmetry() {
        let m = FlowModel::new(FlowArch::image(3, 2, 2, 8), 5, DType::F64).unwrap();
        m.randomize(9, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = normal_tensor(&mut rng, &[2, 3, 8, 12], DType::F64).unwrap();
        let (z, ld_f) = m.forward_latent(&v).unwrap();
        let back = m.inverse_latent(&z).unwrap();
        let err = (back - &v).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(err < 1e-5, "{err}");
        let (_, ld_i) = m.inverse(&z).unwrap();
        let s = (ld_f + ld_i).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(s < 1e-6, "{s}");
    }

    #[test]
    fn sampling_shapes_and_determinism() {
        let m = FlowModel::new(FlowArch::image(3, 2, 1, 4), 5, DType::F32).unwrap();
        for (h, w) in [(32, 48), (8, 8), (64, 16)] {
            let s = m.sample(h, w, 3).unwrap();
            assert_eq!((s.channels(), s.height(), s.width()), (3, h, w));
        }
        assert_eq!(m.sample(16, 16, 3).unwrap(), m.sample(16, 16, 3).unwrap());
        assert!(matches!(m.sample(10, 16, 3), Err(Error::Config(_))));
    }

    #[test]
    fn identity_flow_sample_is_post_processed_prior() {
        let m = FlowModel::new(FlowArch::image(3, 1, 1, 4), 5, DType::F64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = m.sample_tensor(1, 4, 4, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let z = normal_tensor(&mut rng, &[1, 12, 2, 2], DType::F64).unwrap();
        let want = m.postprocess(&unsqueeze(&z).unwrap()).unwrap();
        let d = (x - want).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
    }

    #[test]
    fn bits_per_dim_conversion() {
        // a density of 1 on [0,1]^D is the ideal model for uniform bytes
        assert_eq!(log_prob_to_bits_per_dim(0.0, 100, true), 8.0);
        // identity flow on standard-normal points: cross-entropy / (d ln 2)
        let m = points_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = normal_tensor(&mut rng, &[4000, 2, 1, 1], DType::F64).unwrap();
        let bpd = m.bits_per_dim(&x).unwrap();
        let analytic = 0.5 * (2.0 * PI * std::f64::consts::E).ln() / LN_2;
        assert!((bpd - analytic).abs() < 0.03, "{bpd} vs {analytic}");
    }

    #[test]
    fn non_finite_input_reports_layer() {
        let m = points_model(2);
        let x = pts(&[[f64::NAN, 0.0]]);
        assert!(matches!(m.forward(&x), Err(Error::Numeric { layer: 0, .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = FlowModel::new(FlowArch::image(3, 1, 1, 4), 5, DType::F32).unwrap();
        m.randomize(3, 0.1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ckpt");
        m.save(&p).unwrap();
        let back = FlowModel::load(&p).unwrap();
        assert_eq!(back.sample(8, 8, 1).unwrap(), m.sample(8, 8, 1).unwrap());
    }
}
