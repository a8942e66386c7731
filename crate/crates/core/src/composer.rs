//! Mixed-content images: one generated rectangle pasted over each inlier image.

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::data::{ImageTensor, LabelMap};
use crate::error::{Error, Result};

/// Size and top-left corner of a pasted rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub height: usize,
    pub width: usize,
    pub top: usize,
    pub left: usize,
}

impl PatchSpec {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.height >= 1 && self.width >= 1 && self.top + self.height <= h && self.left + self.width <= w
    }
}

fn check_range(image_hw: (usize, usize), range: (usize, usize), unit: usize) -> Result<()> {
    let (a, b) = range;
    let unit = unit.max(1);
    if a < unit || a > b || b > image_hw.0.min(image_hw.1) {
        return Err(Error::Config(format!(
            "patch range [{a},{b}] is infeasible for a {}x{} image with unit {unit}",
            image_hw.0, image_hw.1
        )));
    }
    Ok(())
}

fn side<R: Rng + ?Sized>(rng: &mut R, range: (usize, usize), unit: usize) -> usize {
    let unit = unit.max(1);
    let v = rng.random_range(range.0..=range.1);
    (v / unit) * unit
}

/// Independent uniform height and width in `range`, rounded down to a
/// multiple of `unit`, placed uniformly where the patch fits.
pub fn sample_patch_spec<R: Rng + ?Sized>(
    rng: &mut R,
    image_hw: (usize, usize),
    range: (usize, usize),
    unit: usize,
) -> Result<PatchSpec> {
    check_range(image_hw, range, unit)?;
    let height = side(rng, range, unit);
    let width = side(rng, range, unit);
    Ok(PatchSpec {
        height,
        width,
        top: rng.random_range(0..=image_hw.0 - height),
        left: rng.random_range(0..=image_hw.1 - width),
    })
}

/// Specs for a batch: one shared patch size (a single flow draw), one
/// location per image.
pub fn sample_batch_specs<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    image_hw: (usize, usize),
    range: (usize, usize),
    unit: usize,
) -> Result<Vec<PatchSpec>> {
    check_range(image_hw, range, unit)?;
    let height = side(rng, range, unit);
    let width = side(rng, range, unit);
    Ok((0..n)
        .map(|_| PatchSpec {
            height,
            width,
            top: rng.random_range(0..=image_hw.0 - height),
            left: rng.random_range(0..=image_hw.1 - width),
        })
        .collect())
}

/// A composed image with its paste mask, the replaced inlier crop and the
/// untouched labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub composed: ImageTensor,
    /// Row-major, true inside the pasted rectangle.
    pub mask: Vec<bool>,
    pub replaced: ImageTensor,
    pub labels: LabelMap,
    pub spec: PatchSpec,
}

impl MixedBatch {
    pub fn mask_area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Paste `patch` over `x_plus` at `spec`.
pub fn compose(x_plus: &ImageTensor, labels: &LabelMap, patch: &ImageTensor, spec: &PatchSpec) -> Result<MixedBatch> {
    let (c, h, w) = (x_plus.channels(), x_plus.height(), x_plus.width());
    if !spec.fits(h, w) {
        return Err(Error::Shape(format!("patch {spec:?} does not fit a {h}x{w} image")));
    }
    if (patch.channels(), patch.height(), patch.width()) != (c, spec.height, spec.width) {
        return Err(Error::Shape(format!(
            "patch is {}x{}x{}, spec wants {c}x{}x{}",
            patch.channels(),
            patch.height(),
            patch.width(),
            spec.height,
            spec.width
        )));
    }
    if (labels.height(), labels.width()) != (h, w) {
        return Err(Error::Shape("labels and image differ in size".into()));
    }
    let mut composed = x_plus.clone();
    for ch in 0..c {
        for y in 0..spec.height {
            for x in 0..spec.width {
                composed.set(ch, spec.top + y, spec.left + x, patch.get(ch, y, x));
            }
        }
    }
    let mask = (0..h * w).map(|i| spec.contains(i / w, i % w)).collect();
    Ok(MixedBatch {
        composed,
        mask,
        replaced: x_plus.crop(spec.top, spec.left, spec.height, spec.width)?,
        labels: labels.clone(),
        spec: *spec,
    })
}

/// Binary masks `(N, 1, H, W)` for a batch of specs.
pub fn mask_tensor(specs: &[PatchSpec], h: usize, w: usize, dtype: DType) -> Result<Tensor> {
    let mut v = vec![0f32; specs.len() * h * w];
    for (n, s) in specs.iter().enumerate() {
        for y in s.top..s.top + s.height {
            for x in s.left..s.left + s.width {
                v[(n * h + y) * w + x] = 1.0;
            }
        }
    }
    Ok(Tensor::from_vec(v, (specs.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Differentiable batch composition: `x' = (1 - s) x+ + pad(patch)`.
///
/// `patches` is `(N, C, ph, pw)`; gradients flow from the masked pixels of
/// the result back into `patches`. Returns `(x', s, x^c)` where `x^c` holds the
/// replaced inlier crops.
pub fn compose_tensor(x_plus: &Tensor, patches: &Tensor, specs: &[PatchSpec]) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = x_plus.dims4()?;
    let (pn, pc, ph, pw) = patches.dims4()?;
    if pn != n || pc != c || specs.len() != n {
        return Err(Error::Shape(format!(
            "{n} images, {pn} patches and {} specs with {c}/{pc} channels",
            specs.len()
        )));
    }
    let mut padded = Vec::with_capacity(n);
    let mut crops = Vec::with_capacity(n);
    for (i, s) in specs.iter().enumerate() {
        if (s.height, s.width) != (ph, pw) || !s.fits(h, w) {
            return Err(Error::Shape(format!("spec {s:?} does not match a {ph}x{pw} patch in {h}x{w}")));
        }
        let p = patches
            .narrow(0, i, 1)?
            .pad_with_zeros(2, s.top, h - s.top - ph)?
            .pad_with_zeros(3, s.left, w - s.left - pw)?;
        padded.push(p);
        crops.push(x_plus.narrow(0, i, 1)?.narrow(2, s.top, ph)?.narrow(3, s.left, pw)?);
    }
    let mask = mask_tensor(specs, h, w, x_plus.dtype())?;
    let keep = mask.affine(-1.0, 1.0)?;
    let composed = (x_plus.broadcast_mul(&keep)? + Tensor::cat(&padded, 0)?)?;
    Ok((composed, mask, Tensor::cat(&crops, 0)?))
}
