//! Seeded synthetic scenes: two textured background classes, coloured
//! geometric objects as the remaining inlier classes, and one held-out object
//! category that appears only in the test split (labelled as the outlier id).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{Calibration, Dataset, DatasetManifest, ManifestEntry};
use super::raster::{write_disparity_pgm, DisparityMap};
use super::{ImageTensor, LabelMap, IGNORE_ID};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Disc,
    Square,
    Diamond,
    Ring,
    Triangle,
}

const INLIER_OBJECTS: [(Shape, [f32; 3]); 4] = [
    (Shape::Disc, [0.85, 0.12, 0.12]),
    (Shape::Square, [0.15, 0.25, 0.85]),
    (Shape::Diamond, [0.7, 0.2, 0.75]),
    (Shape::Ring, [0.92, 0.92, 0.92]),
];
const OUTLIER_OBJECT: (Shape, [f32; 3]) = (Shape::Triangle, [0.95, 0.75, 0.1]);

pub const SHAPES_CALIBRATION: Calibration = Calibration {
    focal_px: 200.0,
    baseline_m: 0.2,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub classes: usize,
    pub image_size: usize,
    /// Flow squeeze levels; the image side must be divisible by 2^levels.
    pub levels: usize,
}

impl ShapesSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 2 + INLIER_OBJECTS.len() {
            return Err(Error::Config(format!(
                "shapes dataset supports 2..={} classes, got {}",
                2 + INLIER_OBJECTS.len(),
                self.classes
            )));
        }
        let unit = 1usize << self.levels;
        if self.image_size < 8 || !self.image_size.is_multiple_of(unit) {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of {unit} (2^{} levels) or is below 8",
                self.image_size, self.levels
            )));
        }
        Ok(())
    }
}

fn inside(shape: Shape, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        Shape::Disc => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        Shape::Diamond => dx.abs() + dy.abs() <= r,
        Shape::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= 0.3 * r * r
        }
        Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= 0.5 * (dy + r),
    }
}

struct Scene {
    image: ImageTensor,
    label: LabelMap,
    disparity: DisparityMap,
}

fn depth_of_row(y: f32, size: usize) -> f32 {
    50.0 - 45.0 * y / (size as f32 - 1.0)
}

fn render_scene(rng: &mut ChaCha8Rng, spec: &ShapesSpec, with_outlier: bool) -> Result<Scene> {
    let s = spec.image_size;
    let sf = s as f32;
    let mut rgb = vec![[0f32; 3]; s * s];
    let mut ids = vec![0u8; s * s];
    let mut depth = vec![0f32; s * s];

    let horizon = rng.random_range(0.25 * sf..0.5 * sf);
    let slope = rng.random_range(-0.2f32..0.2);
    #[allow(clippy::approx_constant)] // kept as-is so recorded datasets regenerate identically
    let phase = rng.random_range(0.0f32..6.28);
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            let boundary = horizon + slope * (x as f32 - 0.5 * sf);
            let n: f32 = rng.random_range(-1.0..1.0);
            if (y as f32) < boundary {
                let stripe = 0.08 * (0.8 * x as f32 + 0.3 * y as f32 + phase).sin();
                rgb[i] = [0.2 + 0.05 * n, 0.55 + stripe + 0.06 * n, 0.2 + 0.04 * n];
                ids[i] = 1;
            } else {
                let g = 0.45 + 0.07 * n;
                rgb[i] = [g, g, g + 0.02];
                ids[i] = 0;
            }
            depth[i] = depth_of_row(y as f32, s);
        }
    }

    let mut objects: Vec<(Shape, [f32; 3], u8)> = Vec::new();
    let n_obj_classes = spec.classes - 2;
    if n_obj_classes > 0 {
        let count = rng.random_range(1..=2);
        for _ in 0..count {
            let k = rng.random_range(0..n_obj_classes);
            let (shape, color) = INLIER_OBJECTS[k];
            objects.push((shape, color, (k + 2) as u8));
        }
    }
    if with_outlier {
        let (shape, color) = OUTLIER_OBJECT;
        objects.push((shape, color, spec.classes as u8));
    }

    for (shape, color, id) in objects {
        let r = rng.random_range(0.1 * sf..0.2 * sf);
        let cx = rng.random_range(r..sf - r);
        let cy = rng.random_range(r..sf - r);
        let obj_depth = depth_of_row((cy + r).min(sf - 1.0), s);
        let mut mask = vec![false; s * s];
        for y in 0..s {
            for x in 0..s {
                let dx = x as f32 + 0.5 - cx;
                let dy = y as f32 + 0.5 - cy;
                mask[y * s + x] = inside(shape, dx, dy, r);
            }
        }
        for y in 0..s {
            for x in 0..s {
                let i = y * s + x;
                if !mask[i] {
                    continue;
                }
                let n: f32 = rng.random_range(-1.0..1.0);
                rgb[i] = [
                    color[0] + 0.05 * n,
                    color[1] + 0.05 * n,
                    color[2] + 0.05 * n,
                ];
                depth[i] = obj_depth;
                let edge = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|(oy, ox)| {
                    let ny = y as i64 + oy;
                    let nx = x as i64 + ox;
                    ny < 0
                        || nx < 0
                        || ny >= s as i64
                        || nx >= s as i64
                        || !mask[ny as usize * s + nx as usize]
                });
                ids[i] = if edge { IGNORE_ID } else { id };
            }
        }
    }

    let mut data = vec![0f32; 3 * s * s];
    for i in 0..s * s {
        for c in 0..3 {
            let q = (rgb[i][c].clamp(0.0, 1.0) * 255.0).round();
            data[c * s * s + i] = q / 255.0;
        }
    }
    let fb = (SHAPES_CALIBRATION.focal_px * SHAPES_CALIBRATION.baseline_m) as f32;
    let disp = (0..s * s)
        .map(|i| {
            if i.is_multiple_of(s) {
                // leftmost column has no stereo match
                0.0
            } else {
                ((fb / depth[i]) * 256.0).round() / 256.0
            }
        })
        .collect();
    Ok(Scene {
        image: ImageTensor::new(3, s, s, data)?,
        label: LabelMap::new(s, s, ids)?,
        disparity: DisparityMap::new(s, s, disp)?,
    })
}

/// Both splits held in memory.
#[derive(Debug, Clone)]
pub struct ShapesDataset {
    pub train: Dataset,
    pub test: Dataset,
    pub train_manifest: Option<DatasetManifest>,
    pub test_manifest: Option<DatasetManifest>,
}

fn render_split(spec: &ShapesSpec, stream: u64, n: usize, outliers: bool) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut ds = Dataset {
        classes: spec.classes,
        calibration: outliers.then_some(SHAPES_CALIBRATION),
        images: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        disparities: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let scene = render_scene(&mut rng, spec, outliers)?;
        ds.images.push(scene.image);
        ds.labels.push(scene.label);
        ds.disparities.push(outliers.then_some(scene.disparity));
    }
    Ok(ds)
}

impl ShapesDataset {
    /// Render both splits without touching the filesystem.
    pub fn render(spec: &ShapesSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            train: render_split(spec, 1, spec.n_train, false)?,
            test: render_split(spec, 2, spec.n_test, true)?,
            train_manifest: None,
            test_manifest: None,
        })
    }
}

fn write_split(ds: &Dataset, dir: &Path, split: &str) -> Result<DatasetManifest> {
    let sub = dir.join(split);
    std::fs::create_dir_all(&sub)?;
    let mut entries = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let image = format!("{split}/img_{i:05}.png");
        let label = format!("{split}/lbl_{i:05}.png");
        ds.images[i].write_png(&dir.join(&image))?;
        ds.labels[i].write_png(&dir.join(&label))?;
        let disparity = match &ds.disparities[i] {
            Some(d) => {
                let p = format!("{split}/disp_{i:05}.pgm");
                write_disparity_pgm(d, &dir.join(&p))?;
                Some(p.into())
            }
            None => None,
        };
        entries.push(ManifestEntry {
            image: image.into(),
            label: label.into(),
            disparity,
        });
    }
    let m = DatasetManifest {
        split: split.to_string(),
        classes: ds.classes,
        calibration: ds.calibration,
        entries,
        root: dir.to_path_buf(),
    };
    m.save(&dir.join(format!("{split}.toml")))?;
    Ok(m)
}

/// Render the dataset and write PNG images, PNG labels, PGM disparities and
/// `train.toml` / `test.toml` manifests under `out_dir`.
pub fn generate_shapes_dataset(spec: &ShapesSpec, out_dir: &Path) -> Result<ShapesDataset> {
    let mut ds = ShapesDataset::render(spec)?;
    std::fs::create_dir_all(out_dir)?;
    ds.train_manifest = Some(write_split(&ds.train, out_dir, "train")?);
    ds.test_manifest = Some(write_split(&ds.test, out_dir, "test")?);
    Ok(ds)
}
