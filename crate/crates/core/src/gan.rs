//! Adversarial negative generator for 2D points.
//!
//! The discriminator maximises `E ln D(x) + E ln(1 - D(G(z)))`. The generator
//! minimises the two terms of the joint adversarial objective that depend
//! on it: `E ln(1 - D(G(z)))` and `λ E F(P(G(z)), U)` through a given
//! classifier.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::divergence::{divergence_rows, DivergenceKind};
use crate::error::{Error, Result};
use crate::nn::layers::softplus;
use crate::nn::{Conv2d, Init, Optimizer, OptimizerKind, ParamStore};

#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<Conv2d>,
}

impl Mlp {
    fn new(store: &mut ParamStore, name: &str, sizes: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let init = if i + 2 == sizes.len() { Init::Default } else { Init::He };
                Conv2d::new(store, &format!("{name}.{i}"), w[0], w[1], 1, 1, init, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// `(N, in)` to `(N, out)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        let mut h = x.reshape((n, d, 1, 1))?;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        let out = h.dim(1)?;
        Ok(h.reshape((n, out))?)
    }

    fn last(&self) -> &Conv2d {
        self.layers.last().expect("non-empty network")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GanArch {
    pub dims: usize,
    pub latent: usize,
    pub hidden: usize,
    /// Squash generator outputs into (0, 1), for image patches.
    #[serde(default)]
    pub bounded: bool,
}

/// Generator and discriminator with their optimizers.
#[derive(Debug)]
pub struct GanPair {
    pub arch: GanArch,
    gen_store: ParamStore,
    disc_store: ParamStore,
    generator: Mlp,
    discriminator: Mlp,
    gen_opt: Optimizer,
    disc_opt: Optimizer,
}

/// Which generator-loss terms are active. The real-data discriminator term
/// and the closed-set cross-entropy do not depend on the generator and are
/// only here to make that explicit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GanTerms {
    pub real: bool,
    pub fool: bool,
    pub cross_entropy: bool,
    pub confidence: bool,
}

impl GanTerms {
    pub const GENERATOR: GanTerms = GanTerms {
        real: false,
        fool: true,
        cross_entropy: false,
        confidence: true,
    };
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GanLosses {
    pub discriminator: f64,
    pub fool: f64,
    pub confidence: f64,
}

fn latent_draw<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize, dtype: DType) -> Result<Tensor> {
    let v: Vec<f64> = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, (n, d), &Device::Cpu)?.to_dtype(dtype)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl GanPair {
    pub fn new(arch: GanArch, seed: u64, lr: f64, dtype: DType) -> Result<Self> {
        if arch.dims == 0 || arch.latent == 0 || arch.hidden == 0 {
            return Err(Error::Config("GAN sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen_store = ParamStore::new(dtype);
        let mut disc_store = ParamStore::new(dtype);
        let generator = Mlp::new(&mut gen_store, "gen", &[arch.latent, arch.hidden, arch.hidden, arch.dims], &mut rng)?;
        let discriminator = Mlp::new(&mut disc_store, "disc", &[arch.dims, arch.hidden, arch.hidden, 1], &mut rng)?;
        Ok(Self {
            arch,
            gen_store,
            disc_store,
            generator,
            discriminator,
            gen_opt: Optimizer::new(OptimizerKind::Adam, lr),
            disc_opt: Optimizer::new(OptimizerKind::Adam, lr),
        })
    }

    pub fn generator_params(&self) -> &ParamStore {
        &self.gen_store
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.gen_opt.set_lr(lr);
        self.disc_opt.set_lr(lr);
    }

    /// Zero the discriminator's output layer so it outputs ½ everywhere.
    pub fn freeze_discriminator_at_half(&self) -> Result<()> {
        let l = self.discriminator.last();
        l.weight().set(&l.weight().zeros_like()?)?;
        l.bias().set(&l.bias().zeros_like()?)?;
        Ok(())
    }

    /// Differentiable generator output for given latents.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let y = self.generator.forward(z)?;
        if self.arch.bounded {
            Ok(crate::nn::layers::sigmoid(&y)?)
        } else {
            Ok(y)
        }
    }

    /// Generator loss built from the selected terms.
    #[allow(clippy::too_many_arguments)]
    pub fn generator_loss(
        &self,
        real: &Tensor,
        real_classes: &[u32],
        fake: &Tensor,
        classifier: &ClassifierModel,
        lambda: f64,
        kind: DivergenceKind,
        terms: GanTerms,
    ) -> Result<(Tensor, GanLosses)> {
        let mut loss = Tensor::zeros((), fake.dtype(), &Device::Cpu)?;
        let mut rec = GanLosses::default();
        if terms.real {
            // ln D(x) = -softplus(-logit)
            let t = softplus(&self.discriminator.forward(real)?.neg()?)?.mean_all()?.neg()?;
            loss = (loss + t)?;
        }
        if terms.fool {
            // ln(1 - D(G(z))) = -softplus(logit)
            let t = softplus(&self.discriminator.forward(fake)?)?.mean_all()?.neg()?;
            rec.fool = scalar(&t)?;
            loss = (loss + t)?;
        }
        if terms.cross_entropy {
            let n = real.dim(0)?;
            let idx = Tensor::from_vec(real_classes.to_vec(), (n, 1), &Device::Cpu)?;
            let logits = classifier.point_logits(real)?;
            let t = crate::nn::layers::log_softmax(&logits, 1)?
                .gather(&idx, 1)?
                .mean_all()?
                .neg()?;
            loss = (loss + t.to_dtype(fake.dtype())?)?;
        }
        if terms.confidence {
            let logits = classifier.point_logits(&fake.to_dtype(classifier.dtype())?)?;
            let t = divergence_rows(kind, &logits)?.mean_all()?;
            rec.confidence = scalar(&t)?;
            loss = (loss + (t * lambda)?.to_dtype(fake.dtype())?)?;
        }
        Ok((loss, rec))
    }

    /// Squared gradient norm of a generator loss on the generator parameters.
    pub fn generator_grad_sq_norm(&self, loss: &Tensor) -> Result<f64> {
        self.gen_store.grad_sq_norm(&loss.backward()?)
    }

    /// One discriminator update followed by one generator update.
    pub fn joint_step<R: Rng + ?Sized>(
        &mut self,
        classifier: &ClassifierModel,
        real: &Tensor,
        lambda: f64,
        kind: DivergenceKind,
        update_discriminator: bool,
        rng: &mut R,
    ) -> Result<GanLosses> {
        let mut confidence = |fake: &Tensor| -> Result<Tensor> {
            let logits = classifier.point_logits(&fake.to_dtype(classifier.dtype())?)?;
            divergence_rows(kind, &logits)?.mean_all().map_err(Into::into)
        };
        self.step_with(real, lambda, update_discriminator, rng, &mut confidence)
    }

    /// Like [`GanPair::joint_step`] with a caller-supplied confidence term:
    /// `confidence` maps a differentiable `(N, d)` batch of generated
    /// samples to the scalar mean divergence from uniform.
    pub fn step_with<R: Rng + ?Sized>(
        &mut self,
        real: &Tensor,
        lambda: f64,
        update_discriminator: bool,
        rng: &mut R,
        confidence: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    ) -> Result<GanLosses> {
        let n = real.dim(0)?;
        let dtype = self.gen_store.dtype();
        let real = real.to_dtype(dtype)?;
        let step = self.gen_opt.steps();

        let mut rec = GanLosses::default();
        if update_discriminator {
            let fake = self.generate(&latent_draw(rng, n, self.arch.latent, dtype)?)?.detach();
            let d_real = self.discriminator.forward(&real)?;
            let d_fake = self.discriminator.forward(&fake)?;
            let loss_d = (softplus(&d_real.neg()?)?.mean_all()? + softplus(&d_fake)?.mean_all()?)?;
            rec.discriminator = scalar(&loss_d)?;
            if !rec.discriminator.is_finite() {
                return Err(Error::NonFiniteLoss {
                    component: "discriminator",
                    step,
                });
            }
            self.disc_opt.step(&self.disc_store, &loss_d.backward()?)?;
        }

        let fake = self.generate(&latent_draw(rng, n, self.arch.latent, dtype)?)?;
        // ln(1 - D(G(z))) = -softplus(logit)
        let fool = softplus(&self.discriminator.forward(&fake)?)?.mean_all()?.neg()?;
        let conf = confidence(&fake)?;
        rec.fool = scalar(&fool)?;
        rec.confidence = scalar(&conf)?;
        let loss_g = (fool + (conf * lambda)?.to_dtype(dtype)?)?;
        if !scalar(&loss_g)?.is_finite() {
            return Err(Error::NonFiniteLoss { component: "generator", step });
        }
        self.gen_opt.step(&self.gen_store, &loss_g.backward()?)?;
        Ok(rec)
    }

    /// `n` seeded samples as an `(n, d)` tensor.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Tensor> {
        let dtype = self.gen_store.dtype();
        if n == 0 {
            return Ok(Tensor::zeros((0, self.arch.dims), dtype, &Device::Cpu)?);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self.generate(&latent_draw(&mut rng, n, self.arch.latent, dtype)?)?.detach())
    }
}
