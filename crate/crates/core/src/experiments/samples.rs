//! Tiled PNGs of flow samples and of composed training inputs.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, ImageTensor, LabelMap};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::trainer::JointState;

/// Gap between tiles, in pixels.
const GAP: usize = 1;

/// Paste equally sized images into a `rows x cols` grid on white.
pub fn tile(images: &[ImageTensor], rows: usize, cols: usize) -> Result<ImageTensor> {
    let first = images.first().ok_or_else(|| Error::Empty("no images to tile".into()))?;
    let (c, h, w) = (first.channels(), first.height(), first.width());
    if images.len() != rows * cols {
        return Err(Error::Shape(format!("{} images for a {rows}x{cols} grid", images.len())));
    }
    if images.iter().any(|im| (im.channels(), im.height(), im.width()) != (c, h, w)) {
        return Err(Error::Shape("tiles differ in size".into()));
    }
    let gh = rows * h + (rows - 1) * GAP;
    let gw = cols * w + (cols - 1) * GAP;
    let mut out = ImageTensor::new(c, gh, gw, vec![1.0; c * gh * gw])?;
    for (i, im) in images.iter().enumerate() {
        let (top, left) = ((i / cols) * (h + GAP), (i % cols) * (w + GAP));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(ch, top + y, left + x, im.get(ch, y, x));
                }
            }
        }
    }
    Ok(out)
}

/// `rows x cols` seeded flow samples of size `hw`, clamped to [0, 1] and
/// written as one PNG.
pub fn sample_grid(flow: &FlowModel, rows: usize, cols: usize, hw: (usize, usize), seed: u64, path: &Path) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::Config("sample grid needs at least one row and one column".into()));
    }
    if !flow.arch().is_image() {
        return Err(Error::Config("sample grids need an image flow".into()));
    }
    let unit = flow.arch().unit();
    if hw.0 == 0 || hw.1 == 0 || !hw.0.is_multiple_of(unit) || !hw.1.is_multiple_of(unit) {
        return Err(Error::Config(format!("sample size {}x{} is not a positive multiple of {unit}", hw.0, hw.1)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = flow.sample_tensor(rows * cols, hw.0, hw.1, &mut rng)?.clamp(0.0, 1.0)?;
    tile(&ImageTensor::unstack(&x.detach())?, rows, cols)?.write_png(path)
}

/// Composed inputs of one training batch above their paste masks.
pub fn compose_debug(state: &JointState, data: &Dataset, n: usize, patch: (usize, usize), seed: u64, path: &Path) -> Result<()> {
    if n == 0 || data.is_empty() {
        return Err(Error::Config("compose debug needs at least one image".into()));
    }
    let n = n.min(data.len());
    let imgs: Vec<&ImageTensor> = data.images[..n].iter().collect();
    let lbls: Vec<&LabelMap> = data.labels[..n].iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = state.compose_images(&imgs, &lbls, patch, &mut rng)?;
    let mut tiles = ImageTensor::unstack(&b.composed.clamp(0.0, 1.0)?.detach())?;
    let c = tiles[0].channels();
    let masks = b.mask.repeat((1, c, 1, 1))?;
    tiles.extend(ImageTensor::unstack(&masks)?);
    tile(&tiles, 2, n)?.write_png(path)
}
