//! Dense K-way predictor: a three-level encoder-decoder with additive skips
//! for images, or a small MLP (stack of 1x1 convolutions) for 2D points.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageTensor, LabelMap};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Checkpoint, Conv2d, Init, ParamStore, Upsample2x};

/// Per-pixel logits, channel-major (K x H x W).
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl LogitMap {
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != classes * height * width {
            return Err(Error::Shape(format!(
                "logit buffer of {} values for {classes}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite logit".into()));
        }
        Ok(Self {
            classes,
            height,
            width,
            data,
        })
    }

    /// Split a `(N, K, H, W)` tensor into maps.
    pub fn from_batch(t: &Tensor) -> Result<Vec<Self>> {
        let (n, k, h, w) = t.dims4()?;
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let per = k * h * w;
        (0..n)
            .map(|i| Self::new(k, h, w, flat[i * per..(i + 1) * per].to_vec()))
            .collect()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, k: usize, y: usize, x: usize) -> f32 {
        self.data[(k * self.height + y) * self.width + x]
    }

    /// Copy the logit vector of flat pixel index `i` into `out`.
    pub fn pixel_into(&self, i: usize, out: &mut [f64]) {
        let hw = self.height * self.width;
        for (k, o) in out.iter_mut().enumerate().take(self.classes) {
            *o = self.data[k * hw + i] as f64;
        }
    }

    /// Largest logit per pixel.
    pub fn max_logits(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        (0..hw)
            .map(|i| {
                (0..self.classes)
                    .map(|k| self.data[k * hw + i])
                    .fold(f32::NEG_INFINITY, f32::max)
            })
            .collect()
    }
}

/// Closed-set prediction; ties go to the lowest class id.
pub fn predict_argmax(logits: &LogitMap) -> LabelMap {
    let hw = logits.height * logits.width;
    let ids = (0..hw)
        .map(|i| {
            let mut best = 0;
            for k in 1..logits.classes {
                if logits.data[k * hw + i] > logits.data[best * hw + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(logits.height, logits.width, ids).expect("argmax map has matching size")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ClassifierArch {
    Image {
        in_channels: usize,
        classes: usize,
        width: usize,
    },
    Mlp {
        dims: usize,
        classes: usize,
        hidden: usize,
        depth: usize,
        #[serde(default)]
        activation: Activation,
    },
}

/// Hidden-layer nonlinearity of the point classifier. Saturating units keep
/// far-field logits bounded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl ClassifierArch {
    pub fn classes(&self) -> usize {
        match *self {
            ClassifierArch::Image { classes, .. } | ClassifierArch::Mlp { classes, .. } => classes,
        }
    }

    pub fn in_channels(&self) -> usize {
        match *self {
            ClassifierArch::Image { in_channels, .. } => in_channels,
            ClassifierArch::Mlp { dims, .. } => dims,
        }
    }
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, 3, stride, Init::He, rng)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, train)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct EncoderDecoder {
    enc1: [ConvBn; 2],
    enc2: [ConvBn; 2],
    enc3: [ConvBn; 2],
    up2: Upsample2x,
    dec2: ConvBn,
    up1: Upsample2x,
    dec1: ConvBn,
    head: Conv2d,
}

#[derive(Debug, Clone)]
enum Body {
    Image(Box<EncoderDecoder>),
    Mlp {
        hidden: Vec<Conv2d>,
        head: Conv2d,
        activation: Activation,
    },
}

/// The dense classifier. Always differentiable w.r.t. its input.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    arch: ClassifierArch,
    seed: u64,
    store: ParamStore,
    body: Body,
}

impl ClassifierModel {
    pub fn new(arch: ClassifierArch, seed: u64, dtype: DType) -> Result<Self> {
        if arch.classes() < 2 {
            return Err(Error::Config("a classifier needs at least two classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new(dtype);
        let body = match arch {
            ClassifierArch::Image {
                in_channels,
                classes,
                width: w,
            } => {
                let r = &mut rng;
                Body::Image(Box::new(EncoderDecoder {
                    enc1: [
                        ConvBn::new(&mut s, "enc1.0", in_channels, w, 1, r)?,
                        ConvBn::new(&mut s, "enc1.1", w, w, 1, r)?,
                    ],
                    enc2: [
                        ConvBn::new(&mut s, "enc2.0", w, 2 * w, 2, r)?,
                        ConvBn::new(&mut s, "enc2.1", 2 * w, 2 * w, 1, r)?,
                    ],
                    enc3: [
                        ConvBn::new(&mut s, "enc3.0", 2 * w, 4 * w, 2, r)?,
                        ConvBn::new(&mut s, "enc3.1", 4 * w, 4 * w, 1, r)?,
                    ],
                    up2: Upsample2x::new(&mut s, "up2", 4 * w, 2 * w, r)?,
                    dec2: ConvBn::new(&mut s, "dec2", 2 * w, 2 * w, 1, r)?,
                    up1: Upsample2x::new(&mut s, "up1", 2 * w, w, r)?,
                    dec1: ConvBn::new(&mut s, "dec1", w, w, 1, r)?,
                    head: Conv2d::new(&mut s, "head", w, classes, 1, 1, Init::Default, r)?,
                }))
            }
            ClassifierArch::Mlp {
                dims,
                classes,
                hidden,
                depth,
                activation,
            } => {
                let mut layers = Vec::with_capacity(depth);
                for i in 0..depth {
                    let cin = if i == 0 { dims } else { hidden };
                    layers.push(Conv2d::new(&mut s, &format!("mlp.{i}"), cin, hidden, 1, 1, Init::He, &mut rng)?);
                }
                let cin = if depth == 0 { dims } else { hidden };
                let head = Conv2d::new(&mut s, "head", cin, classes, 1, 1, Init::Default, &mut rng)?;
                Body::Mlp {
                    hidden: layers,
                    head,
                    activation,
                }
            }
        };
        Ok(Self {
            arch,
            seed,
            store: s,
            body,
        })
    }

    pub fn arch(&self) -> &ClassifierArch {
        &self.arch
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn head(&self) -> &Conv2d {
        match &self.body {
            Body::Image(b) => &b.head,
            Body::Mlp { head, .. } => head,
        }
    }

    /// Zero the output layer so every pixel predicts the uniform distribution.
    pub fn zero_head(&self) -> Result<()> {
        let h = self.head();
        h.weight().set(&h.weight().zeros_like()?)?;
        h.bias().set(&h.bias().zeros_like()?)?;
        Ok(())
    }

    /// Logits `(N, K, H, W)` for a batch `(N, C, H, W)`. `train` selects
    /// batch statistics in normalisation layers (and updates running stats).
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.arch.in_channels() {
            return Err(Error::Config(format!(
                "classifier expects {} input channels, got {c}",
                self.arch.in_channels()
            )));
        }
        match &self.body {
            Body::Image(b) => {
                if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
                    return Err(Error::Config(format!(
                        "classifier input {h}x{w} must be a positive multiple of 4"
                    )));
                }
                let e1 = b.enc1[1].forward(&b.enc1[0].forward(x, train)?, train)?;
                let e2 = b.enc2[1].forward(&b.enc2[0].forward(&e1, train)?, train)?;
                let e3 = b.enc3[1].forward(&b.enc3[0].forward(&e2, train)?, train)?;
                let d2 = b.dec2.forward(&(b.up2.forward(&e3)? + e2)?, train)?;
                let d1 = b.dec1.forward(&(b.up1.forward(&d2)? + e1)?, train)?;
                b.head.forward(&d1)
            }
            Body::Mlp { hidden, head, activation } => {
                let mut y = x.clone();
                for l in hidden {
                    let z = l.forward(&y)?;
                    y = match activation {
                        Activation::Relu => z.relu()?,
                        Activation::Tanh => z.tanh()?,
                    };
                }
                head.forward(&y)
            }
        }
    }

    /// Evaluation-mode logits for one image.
    pub fn forward_logits(&self, x: &ImageTensor) -> Result<LogitMap> {
        let t = x.to_tensor(self.dtype())?;
        let out = self.forward(&t, false)?;
        Ok(LogitMap::from_batch(&out)?.remove(0))
    }

    /// Evaluation-mode logits for several same-sized images.
    pub fn forward_batch(&self, images: &[&ImageTensor]) -> Result<Vec<LogitMap>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let t = ImageTensor::stack(images, self.dtype())?;
        LogitMap::from_batch(&self.forward(&t, false)?)
    }

    /// Evaluation-mode logits for an `(N, d)` point set; returns `(N, K)`.
    pub fn point_logits(&self, points: &Tensor) -> Result<Tensor> {
        let (n, d) = points.dims2()?;
        let y = self.forward(&points.reshape((n, d, 1, 1))?, false)?;
        Ok(y.reshape((n, self.classes()))?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "arch": self.arch,
            "seed": self.seed,
            "dtype": format!("{:?}", self.dtype()),
        });
        let mut ck = Checkpoint::new("classifier", meta);
        ck.insert_all("", self.store.snapshot()?);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint, meta: &serde_json::Value, prefix: &str) -> Result<Self> {
        let arch: ClassifierArch = serde_json::from_value(meta["arch"].clone())
            .map_err(|e| Error::Checkpoint(format!("classifier arch: {e}")))?;
        let seed = meta["seed"].as_u64().unwrap_or(0);
        let dtype = if meta["dtype"].as_str() == Some("F64") {
            DType::F64
        } else {
            DType::F32
        };
        let m = Self::new(arch, seed, dtype)?;
        m.store.restore(&ck.section(prefix))?;
        Ok(m)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck = Checkpoint::load(path, "classifier")?;
        let meta = ck.meta.clone();
        Self::from_checkpoint(&ck, &meta, "")
    }

    pub fn try_clone(&self) -> Result<Self> {
        let m = Self::new(self.arch, self.seed, self.dtype())?;
        m.store.restore(&self.store.snapshot()?)?;
        Ok(m)
    }
}

/// Random image batch for tests and benchmarks.
pub fn random_batch(n: usize, c: usize, h: usize, w: usize, seed: u64, dtype: DType) -> Result<Tensor> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f32> = (0..n * c * h * w).map(|_| rng.random::<f32>()).collect();
    Ok(Tensor::from_vec(v, (n, c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}
