use candle_core::{Tensor, Var, D};
use rand::Rng;

use super::params::ParamStore;
use crate::error::Result;

/// How a layer's weights are drawn at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He-uniform, suited to layers followed by a ReLU.
    He,
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    Default,
    /// All zeros (weights and bias).
    Zero,
}

fn bound(init: Init, fan_in: usize) -> f64 {
    match init {
        Init::He => (6.0 / fan_in as f64).sqrt(),
        Init::Default => 1.0 / (fan_in as f64).sqrt(),
        Init::Zero => 0.0,
    }
}

/// 2D convolution with square kernel. 1x1 kernels run as a matmul.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let b = bound(init, fan_in);
        let weight = store.uniform(
            &format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            b,
            rng,
        )?;
        let bias = store.constant(&format!("{name}.bias"), &[out_ch], 0.0)?;
        Ok(Self {
            weight,
            bias,
            kernel,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out_ch = self.weight.dim(0)?;
        if self.kernel == 1 && self.stride == 1 {
            let (n, c, h, w) = x.dims4()?;
            let flat = if h == 1 && w == 1 {
                x.reshape((n, c))?
            } else {
                x.permute((0, 2, 3, 1))?.reshape((n * h * w, c))?
            };
            let wt = self.weight.reshape((out_ch, c))?.t()?;
            let y = flat.matmul(&wt)?.broadcast_add(&self.bias)?;
            let y = if h == 1 && w == 1 {
                y.reshape((n, out_ch, 1, 1))?
            } else {
                y.reshape((n, h, w, out_ch))?.permute((0, 3, 1, 2))?.contiguous()?
            };
            return Ok(y);
        }
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, out_ch, 1, 1))?)?)
    }
}

/// Stride-2, kernel-2 transposed convolution (exact 2x upsampling).
#[derive(Debug, Clone)]
pub struct Upsample2x {
    weight: Var,
    bias: Var,
}

impl Upsample2x {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let b = bound(Init::He, in_ch);
        let weight = store.uniform(&format!("{name}.weight"), &[in_ch, out_ch, 2, 2], b, rng)?;
        let bias = store.constant(&format!("{name}.bias"), &[out_ch], 0.0)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out_ch = self.weight.dim(1)?;
        let y = x.conv_transpose2d(&self.weight, 0, 0, 2, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, out_ch, 1, 1))?)?)
    }
}

/// Batch normalisation over (N, H, W) per channel.
///
/// Training mode normalises with batch statistics and updates the running
/// estimates; evaluation mode uses the running estimates only.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.gamma"), &[channels], 1.0)?,
            beta: store.constant(&format!("{name}.beta"), &[channels], 0.0)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let flat = x.transpose(0, 1)?.reshape((c, n * h * w))?;
            let mean = flat.mean_keepdim(D::Minus1)?;
            let centered = flat.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
            let mean = mean.flatten_all()?;
            let var = var.flatten_all()?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 {
                var.detach().affine(count / (count - 1.0), 0.0)?
            } else {
                var.detach()
            };
            let m = self.momentum;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach() * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().clone(),
                self.running_var.as_tensor().clone(),
            )
        };
        let inv = (var + self.eps)?.sqrt()?.recip()?;
        let scale = (self.gamma.as_tensor() * inv)?;
        let shift = (self.beta.as_tensor() - (&mean * &scale)?)?;
        let y = x
            .broadcast_mul(&scale.reshape((1, c, 1, 1))?)?
            .broadcast_add(&shift.reshape((1, c, 1, 1))?)?;
        Ok(y)
    }
}

/// Numerically stable log-softmax over `dim`.
pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let m = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((pos + tail)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x * 0.5)?.tanh()?.affine(0.5, 0.5)?)
}
