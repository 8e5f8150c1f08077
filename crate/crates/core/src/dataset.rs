//! Dataset manifests and in-memory samples.
//!
//! A manifest is a JSON file listing image/mask pairs with their split;
//! paths are relative to the manifest's directory:
//!
//! ```json
//! {"entries": [{"image": "images/0000.ppm", "mask": "masks/0000.pgm", "split": "train"}]}
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, ImageTensor, ValueSpace};
use crate::io::read_image;

/// Gray level at or above which a mask sample is salient.
pub const MASK_THRESHOLD: f64 = 128.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: ImageTensor,
    pub mask: BinaryMask,
}

/// Samples grouped by split, in manifest order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn push(&mut self, split: Split, sample: Sample) {
        match split {
            Split::Train => self.train.push(sample),
            Split::Val => self.val.push(sample),
            Split::Test => self.test.push(sample),
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-channel mean pixel of the training images.
    pub fn mean_pixel(&self) -> Vec<f64> {
        mean_pixel(&self.train)
    }
}

/// Per-channel mean over all pixels of `samples`; `[0; 3]` when empty.
pub fn mean_pixel(samples: &[Sample]) -> Vec<f64> {
    let Some(first) = samples.first() else {
        return vec![0.0; 3];
    };
    let c = first.image.channels();
    let mut sums = vec![0.0; c];
    let mut count = 0usize;
    for s in samples {
        for px in s.image.data().chunks_exact(c) {
            for (acc, v) in sums.iter_mut().zip(px) {
                *acc += v;
            }
        }
        count += s.image.pixel_count();
    }
    sums.into_iter().map(|v| v / count.max(1) as f64).collect()
}

/// Mask from a grayscale (or RGB, first channel) image, salient at `>= 128`.
pub fn binarize_mask(image: &ImageTensor) -> Result<BinaryMask> {
    let gray = if image.channels() == 1 {
        image.clone()
    } else {
        let data = image.data().chunks_exact(image.channels()).map(|p| p[0]).collect();
        ImageTensor::new(image.height(), image.width(), 1, data, ValueSpace::Rgb255)?
    };
    BinaryMask::from_gray(&gray, MASK_THRESHOLD)
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    base.join(rel)
}

fn sample_name(rel: &str) -> String {
    Path::new(rel)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| rel.to_string())
}

/// Loads every entry of a manifest. An empty manifest is an error.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = DatasetManifest::read(manifest_path)?;
    if manifest.entries.is_empty() {
        return Err(Error::Data(format!("{} lists no images", manifest_path.display())));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Dataset::default();
    for e in &manifest.entries {
        let image_path = resolve(base, &e.image);
        let mask_path = resolve(base, &e.mask);
        let image = read_image(&image_path)?;
        if image.channels() != 3 {
            return Err(Error::Data(format!("{} is not an RGB image", image_path.display())));
        }
        let mask = binarize_mask(&read_image(&mask_path)?)?;
        if !image.same_dims(mask.height(), mask.width()) {
            return Err(Error::Data(format!(
                "{} is {}x{} but {} is {}x{}",
                mask_path.display(),
                mask.height(),
                mask.width(),
                image_path.display(),
                image.height(),
                image.width()
            )));
        }
        out.push(
            e.split,
            Sample {
                name: sample_name(&e.image),
                image,
                mask,
            },
        );
    }
    Ok(out)
}
