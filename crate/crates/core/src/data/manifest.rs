use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::raster::{read_disparity_pgm, DisparityMap};
use super::{ImageTensor, LabelMap};
use crate::error::{Error, Result};

/// Stereo rig parameters used to turn disparity into metric depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub focal_px: f64,
    pub baseline_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disparity: Option<PathBuf>,
}

/// One split of a dataset. Entry paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<Calibration>,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "manifest declares {} classes; at least 2 are required",
                self.classes
            )));
        }
        if self.classes >= 255 {
            return Err(Error::Config("class ids must fit below the ignore id".into()));
        }
        for (i, e) in self.entries.iter().enumerate() {
            for (what, p) in [("image", Some(&e.image)), ("label", Some(&e.label)), ("disparity", e.disparity.as_ref())] {
                if let Some(p) = p {
                    let full = self.resolve(p);
                    if !full.is_file() {
                        return Err(Error::Manifest {
                            entry: i,
                            msg: format!("{what} file {} does not exist", full.display()),
                        });
                    }
                }
            }
            if e.disparity.is_some() && self.calibration.is_none() {
                return Err(Error::Manifest {
                    entry: i,
                    msg: "disparity given but the manifest has no calibration".into(),
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, toml::to_string(self)?)?;
        Ok(())
    }

    /// Read every image, label and disparity map into memory.
    pub fn load_all(&self) -> Result<Dataset> {
        let mut ds = Dataset {
            classes: self.classes,
            calibration: self.calibration,
            images: Vec::with_capacity(self.entries.len()),
            labels: Vec::with_capacity(self.entries.len()),
            disparities: Vec::with_capacity(self.entries.len()),
        };
        for e in &self.entries {
            let im = ImageTensor::read_png(&self.resolve(&e.image))?;
            let lb = LabelMap::read_png(&self.resolve(&e.label))?;
            if (im.height(), im.width()) != (lb.height(), lb.width()) {
                return Err(Error::Shape(format!(
                    "{} and its label differ in size",
                    e.image.display()
                )));
            }
            let d = match &e.disparity {
                Some(p) => Some(read_disparity_pgm(&self.resolve(p))?),
                None => None,
            };
            ds.images.push(im);
            ds.labels.push(lb);
            ds.disparities.push(d);
        }
        Ok(ds)
    }
}

/// Parse and validate a manifest file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)?;
    let mut m: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::Format(format!("malformed manifest: {e}")))?;
    m.root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    m.validate()?;
    Ok(m)
}

/// An in-memory split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: usize,
    pub calibration: Option<Calibration>,
    pub images: Vec<ImageTensor>,
    pub labels: Vec<LabelMap>,
    pub disparities: Vec<Option<DisparityMap>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
