//! Dense rasters, dataset ingestion and on-disk formats.

mod config;
mod manifest;
mod raster;
mod shapes;
mod smap;

pub use config::{
    ClassifierConfig, FlowConfig, JointConfig, PipelineData, RunConfig, ScoreConfig,
};
pub use manifest::{load_manifest, Calibration, Dataset, DatasetManifest, ManifestEntry};
pub use raster::{read_disparity_pgm, write_disparity_pgm, DisparityMap};
pub use shapes::{generate_shapes_dataset, ShapesDataset, ShapesSpec};
pub use smap::{read_score_map, write_score_map, SMAP_MAGIC};

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Label id for pixels excluded from every loss and metric.
pub const IGNORE_ID: u8 = 255;

/// Channel-major image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite pixel value {v}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
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

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Copy of the `h x w` window with top-left corner at (`top`, `left`).
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Self::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, y, x, self.get(c, top + y, left + x));
                }
            }
        }
        Ok(out)
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.data.clone(),
            (1, self.channels, self.height, self.width),
            &Device::Cpu,
        )?
        .to_dtype(dtype)?)
    }

    /// Stack images of identical shape into `(N, C, H, W)`.
    pub fn stack(images: &[&ImageTensor], dtype: DType) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Empty("no images to stack".into()))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for im in images {
            if (im.channels, im.height, im.width) != (c, h, w) {
                return Err(Error::Shape("images in a batch differ in shape".into()));
            }
            data.extend_from_slice(&im.data);
        }
        Ok(Tensor::from_vec(data, (images.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Split a `(N, C, H, W)` tensor into images.
    pub fn unstack(t: &Tensor) -> Result<Vec<ImageTensor>> {
        let (n, c, h, w) = t.dims4()?;
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let per = c * h * w;
        (0..n)
            .map(|i| ImageTensor::new(c, h, w, flat[i * per..(i + 1) * per].to_vec()))
            .collect()
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::zeros(3, h, w);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, p[c] as f32 / 255.0);
            }
        }
        Ok(out)
    }

    /// 8-bit RGB PNG; single-channel images are written as gray.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height, self.width);
        let mut buf = vec![0u8; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let src = if self.channels == 1 { 0 } else { c.min(self.channels - 1) };
                    let v = self.get(src, y, x).clamp(0.0, 1.0);
                    buf[(y * w + x) * 3 + c] = (v * 255.0).round() as u8;
                }
            }
        }
        image::RgbImage::from_raw(w as u32, h as u32, buf)
            .ok_or_else(|| Error::Shape("png buffer size".into()))?
            .save(path)?;
        Ok(())
    }
}

/// Per-pixel class ids: `0..K` inliers, `K` outlier (evaluation only), 255 ignore.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} ids, got {}",
                height * width,
                ids.len()
            )));
        }
        Ok(Self { height, width, ids })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    /// Check every id is an inlier class, ignore, or (when allowed) the outlier id.
    pub fn validate(&self, classes: usize, allow_outlier: bool) -> Result<()> {
        for &id in &self.ids {
            let ok = (id as usize) < classes
                || id == IGNORE_ID
                || (allow_outlier && id as usize == classes);
            if !ok {
                return Err(Error::Domain(format!(
                    "label id {id} not allowed with {classes} classes"
                )));
            }
        }
        Ok(())
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::Shape("label crop out of bounds".into()));
        }
        let mut ids = Vec::with_capacity(h * w);
        for y in top..top + h {
            ids.extend_from_slice(&self.ids[y * self.width + left..y * self.width + left + w]);
        }
        Self::new(h, w, ids)
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::new(h, w, img.into_raw())
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        image::GrayImage::from_raw(self.width as u32, self.height as u32, self.ids.clone())
            .ok_or_else(|| Error::Shape("png buffer size".into()))?
            .save(path)?;
        Ok(())
    }
}

/// Per-pixel anomaly score; higher means more anomalous.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    scores: Vec<f32>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, scores: Vec<f32>) -> Result<Self> {
        if scores.len() != height * width {
            return Err(Error::Shape(format!(
                "score map {height}x{width} needs {} values, got {}",
                height * width,
                scores.len()
            )));
        }
        if let Some(v) = scores.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite score {v}")));
        }
        Ok(Self {
            height,
            width,
            scores,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.scores[y * self.width + x]
    }
}
