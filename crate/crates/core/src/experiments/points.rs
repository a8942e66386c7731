//! 2D point data sets and point-mode training helpers shared by the toy
//! experiments.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};
use crate::experiments::plot::Frame;
use crate::flow::FlowModel;
use crate::nn::{Optimizer, OptimizerKind};
use crate::scoring::{pixel_score, OodScoreKind};
use crate::divergence::DivergenceKind;
use crate::trainer::{flow_nll, pixel_cross_entropy, routed_losses};

pub type Point = [f64; 2];

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

/// Two interleaved half circles centred on the origin; class 0 is the upper arc.
pub fn two_moons<R: Rng + ?Sized>(n: usize, noise: f64, rng: &mut R) -> (Vec<Point>, Vec<u32>) {
    let mut pts = Vec::with_capacity(n);
    let mut cls = Vec::with_capacity(n);
    for i in 0..n {
        let c = (i % 2) as u32;
        let t = rng.random::<f64>() * PI;
        let (x, y) = if c == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        pts.push([x - 0.5 + noise * normal(rng), y - 0.25 + noise * normal(rng)]);
        cls.push(c);
    }
    (pts, cls)
}

/// Points uniform in angle with radius uniform in `[inner, outer]`.
pub fn ring<R: Rng + ?Sized>(n: usize, inner: f64, outer: f64, rng: &mut R) -> Vec<Point> {
    (0..n)
        .map(|_| {
            let a = rng.random::<f64>() * 2.0 * PI;
            let r = inner + (outer - inner) * rng.random::<f64>();
            [r * a.cos(), r * a.sin()]
        })
        .collect()
}

/// Centres of `m` modes evenly spaced on a circle.
pub fn mode_centres(m: usize, radius: f64) -> Vec<Point> {
    if m == 1 {
        return vec![[radius, 0.0]];
    }
    (0..m)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / m as f64;
            [radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// Equal-weight Gaussian mixture on a circle; returns points and mode ids.
pub fn gaussian_ring_mixture<R: Rng + ?Sized>(
    m: usize,
    n: usize,
    radius: f64,
    sigma: f64,
    rng: &mut R,
) -> (Vec<Point>, Vec<u32>) {
    let centres = mode_centres(m, radius);
    let mut pts = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % m;
        pts.push([centres[k][0] + sigma * normal(rng), centres[k][1] + sigma * normal(rng)]);
        ids.push(k as u32);
    }
    (pts, ids)
}

pub fn to_tensor(points: &[Point], dtype: DType) -> Result<Tensor> {
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (points.len(), 2), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `(N, 2)` or `(N, 2, 1, 1)` tensor to points.
pub fn from_tensor(t: &Tensor) -> Result<Vec<Point>> {
    let n = t.dim(0)?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if v.len() != 2 * n {
        return Err(Error::Shape(format!("expected {n} 2D points, got {} values", v.len())));
    }
    Ok(v.chunks(2).map(|c| [c[0], c[1]]).collect())
}

fn minibatch<R: Rng + ?Sized>(n: usize, b: usize, rng: &mut R) -> Vec<usize> {
    (0..b.min(n)).map(|_| rng.random_range(0..n)).collect()
}

fn gather(points: &[Point], idx: &[usize]) -> Vec<Point> {
    idx.iter().map(|&i| points[i]).collect()
}

/// Cross-entropy training on labelled points. Returns the final-step loss.
pub fn train_point_classifier(
    model: &ClassifierModel,
    points: &[Point],
    classes: &[u32],
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizer::new(OptimizerKind::Adam, lr);
    let mut last = f64::NAN;
    for step in 0..steps {
        let b = minibatch(points.len(), batch, &mut rng);
        let x = to_tensor(&gather(points, &b), model.dtype())?;
        let ids: Vec<u32> = b.iter().map(|&i| classes[i]).collect();
        let idx = Tensor::from_vec(ids, (b.len(), 1, 1, 1), &Device::Cpu)?;
        let logits = model.forward(&x.reshape((b.len(), 2, 1, 1))?, true)?;
        let loss = pixel_cross_entropy(&logits, &idx)?.mean_all()?;
        last = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !last.is_finite() {
            return Err(Error::NonFiniteLoss {
                component: "point classifier cross-entropy",
                step: step as u64,
            });
        }
        opt.step(model.params(), &loss.backward()?)?;
    }
    Ok(last)
}

/// Maximum-likelihood training of a point flow. Returns the final-step NLL
/// per dimension.
pub fn train_point_flow(
    flow: &mut FlowModel,
    points: &[Point],
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let dtype = flow.dtype();
    if !flow.is_initialized() {
        let all = to_tensor(points, dtype)?.reshape((points.len(), 2, 1, 1))?;
        flow.initialize(&all)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizer::new(OptimizerKind::Adam, lr);
    let mut last = f64::NAN;
    for step in 0..steps {
        let b = minibatch(points.len(), batch, &mut rng);
        let x = to_tensor(&gather(points, &b), dtype)?.reshape((b.len(), 2, 1, 1))?;
        let loss = flow_nll(flow, &x)?;
        last = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !last.is_finite() {
            return Err(Error::NonFiniteLoss {
                component: "point flow negative log-likelihood",
                step: step as u64,
            });
        }
        opt.step(flow.params(), &loss.backward()?)?;
    }
    Ok(last)
}

/// One classifier update on labelled inliers plus given negatives, with the
/// same routing as joint training: cross-entropy on inliers and `λ` times
/// the divergence to uniform on negatives. Returns `(L_cls, L_neg)`.
#[allow(clippy::too_many_arguments)]
pub fn classifier_negative_step(
    model: &ClassifierModel,
    opt: &mut Optimizer,
    inliers: &[Point],
    classes: &[u32],
    negatives: &Tensor,
    lambda: f64,
    kind: DivergenceKind,
) -> Result<(f64, f64)> {
    let dtype = model.dtype();
    let n = inliers.len();
    let m = negatives.dim(0)?;
    let x = Tensor::cat(
        &[
            &to_tensor(inliers, dtype)?.reshape((n, 2, 1, 1))?,
            &negatives.detach().to_dtype(dtype)?.reshape((m, 2, 1, 1))?,
        ],
        0,
    )?;
    let mask: Vec<f64> = (0..n + m).map(|i| if i < n { 0.0 } else { 1.0 }).collect();
    let mask = Tensor::from_vec(mask, (n + m, 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
    let mut ids = classes.to_vec();
    ids.resize(n + m, 0);
    let idx = Tensor::from_vec(ids, (n + m, 1, 1, 1), &Device::Cpu)?;
    let logits = model.forward(&x, true)?;
    let (l_cls, l_neg, _) = routed_losses(&logits, &idx, &mask.ones_like()?, &mask, kind)?;
    let cls = l_cls.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let neg = l_neg.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !(cls.is_finite() && neg.is_finite()) {
        return Err(Error::NonFiniteLoss {
            component: "point classifier",
            step: opt.steps(),
        });
    }
    opt.step(model.params(), &(l_cls + (l_neg * lambda)?)?.backward()?)?;
    Ok((cls, neg))
}

/// Anomaly scores of a point classifier.
pub fn point_scores(model: &ClassifierModel, points: &[Point], kind: OodScoreKind, t: f64) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let logits = model.point_logits(&to_tensor(points, model.dtype())?)?;
    let rows = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(rows.iter().map(|l| pixel_score(kind, l, t)).collect())
}

/// Cell-centre coordinates of a `res x res` grid over `frame`, top row first.
pub fn grid_points(frame: &Frame, res: usize) -> Vec<Point> {
    let mut out = Vec::with_capacity(res * res);
    for r in 0..res {
        let y = frame.ymax - (r as f64 + 0.5) * (frame.ymax - frame.ymin) / res as f64;
        for c in 0..res {
            let x = frame.xmin + (c as f64 + 0.5) * (frame.xmax - frame.xmin) / res as f64;
            out.push([x, y]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moons_are_balanced_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (p, c) = two_moons(200, 0.0, &mut rng);
        assert_eq!(c.iter().filter(|&&k| k == 1).count(), 100);
        assert!(p.iter().all(|q| q[0].abs() <= 1.5 + 1e-12 && q[1].abs() <= 0.75 + 1e-12));
    }

    #[test]
    fn ring_radius_in_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for q in ring(100, 3.0, 4.0, &mut rng) {
            let r = q[0].hypot(q[1]);
            assert!((3.0..=4.0).contains(&r));
        }
    }

    #[test]
    fn mixture_modes_on_circle() {
        let c = mode_centres(8, 4.0);
        assert_eq!(c.len(), 8);
        for q in &c {
            assert!((q[0].hypot(q[1]) - 4.0).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, ids) = gaussian_ring_mixture(8, 80, 4.0, 0.0, &mut rng);
        for (q, &k) in p.iter().zip(&ids) {
            assert_eq!(*q, c[k as usize]);
        }
    }

    #[test]
    fn tensor_round_trip() {
        let p = vec![[1.0, 2.0], [-3.0, 0.5]];
        assert_eq!(from_tensor(&to_tensor(&p, DType::F64).unwrap()).unwrap(), p);
    }

    #[test]
    fn grid_is_row_major_from_top() {
        let g = grid_points(&Frame::square(1.0), 2);
        assert_eq!(g, vec![[-0.5, 0.5], [0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]]);
    }
}
