//! Synthetic salient-object scenes with exact masks.
//!
//! Each image is a textured background in a cool color with one or more
//! flat warm-colored shapes on top. The mask is the union of the shapes,
//! rasterized with the same point-in-shape predicate used for painting, so
//! image and mask agree exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetManifest, ManifestEntry, Sample, Split};
use crate::error::{Error, Result};
use crate::image::{round_half_away, BinaryMask, ImageTensor, ValueSpace};
use crate::io::write_image;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Blob,
}

/// Per-channel `[lo, hi]` ranges a flat color is drawn from.
pub type Palette = [[f64; 2]; 3];

/// Background colors: low red, high blue.
pub const BACKGROUND_PALETTE: Palette = [[20.0, 110.0], [50.0, 190.0], [120.0, 230.0]];
/// Foreground colors: high red, low blue.
pub const FOREGROUND_PALETTE: Palette = [[150.0, 240.0], [50.0, 190.0], [20.0, 120.0]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_images: usize,
    /// The last `n_val + n_test` images form the validation and test splits.
    pub n_val: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub shapes: Vec<ShapeKind>,
    /// Shapes per image are drawn from `1..=max_shapes`.
    pub max_shapes: usize,
    /// Standard deviation of the per-sample background texture, 0-255 units.
    pub noise_level: f64,
    /// Standard deviation of the per-sample foreground texture.
    pub foreground_noise: f64,
    pub background: Palette,
    pub foreground: Palette,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_images: 280,
            n_val: 40,
            n_test: 40,
            height: 64,
            width: 64,
            shapes: vec![ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Blob],
            max_shapes: 2,
            noise_level: 6.0,
            foreground_noise: 0.0,
            background: BACKGROUND_PALETTE,
            foreground: FOREGROUND_PALETTE,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(Error::Config("synthetic dataset needs at least one image".into()));
        }
        if self.n_val + self.n_test > self.n_images {
            return Err(Error::Config(
                "validation and test splits exceed the image count".into(),
            ));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("synthetic images must be at least 8x8".into()));
        }
        if self.shapes.is_empty() || self.max_shapes == 0 {
            return Err(Error::Config(
                "need at least one shape kind and one shape per image".into(),
            ));
        }
        if !(self.noise_level >= 0.0
            && self.noise_level.is_finite()
            && self.foreground_noise >= 0.0
            && self.foreground_noise.is_finite())
        {
            return Err(Error::Config("noise level must be >= 0".into()));
        }
        for p in [&self.background, &self.foreground] {
            if p.iter().any(|[lo, hi]| !(0.0 <= *lo && lo <= hi && *hi <= 255.0)) {
                return Err(Error::Config("palette ranges must satisfy 0 <= lo <= hi <= 255".into()));
            }
        }
        Ok(())
    }

    pub fn split_of(&self, index: usize) -> Split {
        let n_train = self.n_images - self.n_val - self.n_test;
        if index < n_train {
            Split::Train
        } else if index < n_train + self.n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// A rendered shape; coordinates are in pixel-center units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Disk {
        cy: f64,
        cx: f64,
        radius: f64,
    },
    Rectangle {
        top: f64,
        left: f64,
        bottom: f64,
        right: f64,
    },
    /// Star-shaped region `d <= radius * (1 + a2 sin(2t + p2) + a3 sin(3t + p3))`.
    Blob {
        cy: f64,
        cx: f64,
        radius: f64,
        a2: f64,
        p2: f64,
        a3: f64,
        p3: f64,
    },
}

impl Shape {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (y, x) = (row as f64, col as f64);
        match *self {
            Shape::Disk { cy, cx, radius } => (y - cy).powi(2) + (x - cx).powi(2) <= radius * radius,
            Shape::Rectangle {
                top,
                left,
                bottom,
                right,
            } => (top..=bottom).contains(&y) && (left..=right).contains(&x),
            Shape::Blob {
                cy,
                cx,
                radius,
                a2,
                p2,
                a3,
                p3,
            } => {
                let (dy, dx) = (y - cy, x - cx);
                let t = dy.atan2(dx);
                let r = radius * (1.0 + a2 * (2.0 * t + p2).sin() + a3 * (3.0 * t + p3).sin());
                dy * dy + dx * dx <= r * r
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub background: [f64; 3],
    pub foreground: [f64; 3],
    pub shapes: Vec<Shape>,
}

fn draw_color(palette: &Palette, rng: &mut Rng) -> [f64; 3] {
    let mut c = [0.0; 3];
    for (v, [lo, hi]) in c.iter_mut().zip(palette) {
        *v = round_half_away(rng.uniform_range(*lo, *hi));
    }
    c
}

fn draw_shape(kind: ShapeKind, h: usize, w: usize, rng: &mut Rng) -> Shape {
    let side = h.min(w) as f64;
    let radius = rng.uniform_range(0.12, 0.26) * side;
    let cy = rng.uniform_range(radius, h as f64 - 1.0 - radius);
    let cx = rng.uniform_range(radius, w as f64 - 1.0 - radius);
    match kind {
        ShapeKind::Disk => Shape::Disk { cy, cx, radius },
        ShapeKind::Rectangle => {
            let hy = radius * rng.uniform_range(0.6, 1.0);
            let hx = radius * rng.uniform_range(0.6, 1.0);
            Shape::Rectangle {
                top: cy - hy,
                left: cx - hx,
                bottom: cy + hy,
                right: cx + hx,
            }
        }
        ShapeKind::Blob => Shape::Blob {
            cy,
            cx,
            radius: radius * 0.8,
            a2: rng.uniform_range(0.0, 0.2),
            p2: rng.uniform_range(0.0, std::f64::consts::TAU),
            a3: rng.uniform_range(0.0, 0.15),
            p3: rng.uniform_range(0.0, std::f64::consts::TAU),
        },
    }
}

/// Draws the scene for image `index`. Independent of every other index.
pub fn draw_scene(spec: &SyntheticSpec, index: usize) -> Scene {
    let mut rng = Rng::with_stream(spec.seed, 0).child(index as u64);
    let background = draw_color(&spec.background, &mut rng);
    let foreground = draw_color(&spec.foreground, &mut rng);
    let count = 1 + rng.below(spec.max_shapes as u64) as usize;
    let shapes = (0..count)
        .map(|_| {
            let kind = spec.shapes[rng.below(spec.shapes.len() as u64) as usize];
            draw_shape(kind, spec.height, spec.width, &mut rng)
        })
        .collect();
    Scene {
        background,
        foreground,
        shapes,
    }
}

/// Paints a scene with Gaussian texture of the given standard deviations
/// drawn from `rng`.
pub fn render_scene(
    scene: &Scene,
    height: usize,
    width: usize,
    background_noise: f64,
    foreground_noise: f64,
    rng: &mut Rng,
) -> Result<(ImageTensor, BinaryMask)> {
    let mut data = Vec::with_capacity(height * width * 3);
    let mut mask = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let inside = scene.shapes.iter().any(|s| s.contains(r, c));
            mask.push(u8::from(inside));
            let (base, sigma) = if inside {
                (scene.foreground, foreground_noise)
            } else {
                (scene.background, background_noise)
            };
            for v in base {
                data.push(if sigma > 0.0 {
                    round_half_away(v + sigma * rng.normal()).clamp(0.0, 255.0)
                } else {
                    v
                });
            }
        }
    }
    Ok((
        ImageTensor::new(height, width, 3, data, ValueSpace::Rgb255)?,
        BinaryMask::new(height, width, mask)?,
    ))
}

/// Renders image `index` of the dataset.
pub fn synthesize(spec: &SyntheticSpec, index: usize) -> Result<Sample> {
    let scene = draw_scene(spec, index);
    let mut rng = Rng::with_stream(spec.seed, 1).child(index as u64);
    let (image, mask) = render_scene(
        &scene,
        spec.height,
        spec.width,
        spec.noise_level,
        spec.foreground_noise,
        &mut rng,
    )?;
    Ok(Sample {
        name: format!("{index:04}"),
        image,
        mask,
    })
}

/// The whole dataset in memory.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut out = Dataset::default();
    for i in 0..spec.n_images {
        out.push(spec.split_of(i), synthesize(spec, i)?);
    }
    Ok(out)
}

/// Writes `images/NNNN.ppm`, `masks/NNNN.pgm` and `manifest.json` under
/// `out_dir` and returns the manifest.
pub fn gen_synthetic(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut entries = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let s = synthesize(spec, i)?;
        let image = format!("images/{}.ppm", s.name);
        let mask = format!("masks/{}.pgm", s.name);
        write_image(&s.image, out_dir.join(&image))?;
        write_image(&s.mask.to_image(), out_dir.join(&mask))?;
        entries.push(ManifestEntry {
            image,
            mask,
            split: spec.split_of(i),
        });
    }
    let manifest = DatasetManifest { entries };
    manifest.write(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::load_dataset;

    fn one_disk() -> SyntheticSpec {
        SyntheticSpec {
            n_images: 1,
            n_val: 0,
            n_test: 0,
            height: 32,
            width: 32,
            shapes: vec![ShapeKind::Disk],
            max_shapes: 1,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn disk_mask_matches_lattice_count() {
        let spec = one_disk();
        let scene = draw_scene(&spec, 0);
        let Shape::Disk { cy, cx, radius } = scene.shapes[0] else {
            panic!("expected a disk")
        };
        // count lattice points row by row from the chord half-width
        let mut area = 0usize;
        for r in 0..32 {
            let dy = r as f64 - cy;
            if dy.abs() > radius {
                continue;
            }
            let half = (radius * radius - dy * dy).sqrt();
            let lo = (cx - half).ceil().max(0.0) as i64;
            let hi = (cx + half).floor().min(31.0) as i64;
            area += (hi - lo + 1).max(0) as usize;
        }
        let s = synthesize(&spec, 0).unwrap();
        assert_eq!(s.mask.count_salient(), area);
        assert!(area > 0);
    }

    #[test]
    fn mask_marks_exactly_the_foreground_color() {
        let spec = SyntheticSpec {
            n_images: 3,
            n_val: 0,
            n_test: 0,
            noise_level: 0.0,
            ..SyntheticSpec::default()
        };
        for i in 0..3 {
            let scene = draw_scene(&spec, i);
            let s = synthesize(&spec, i).unwrap();
            for p in 0..s.mask.len() {
                let want = if s.mask.values()[p] == 1 {
                    scene.foreground
                } else {
                    scene.background
                };
                assert_eq!(s.image.pixel(p), &want);
            }
        }
    }

    #[test]
    fn noise_free_background_is_constant() {
        let spec = SyntheticSpec {
            noise_level: 0.0,
            ..one_disk()
        };
        let s = synthesize(&spec, 0).unwrap();
        let bg: Vec<&[f64]> = (0..s.mask.len())
            .filter(|&p| s.mask.values()[p] == 0)
            .map(|p| s.image.pixel(p))
            .collect();
        assert!(bg.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn same_seed_same_files() {
        let spec = SyntheticSpec {
            n_images: 4,
            n_val: 1,
            n_test: 1,
            height: 16,
            width: 16,
            ..SyntheticSpec::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_synthetic(&spec, a.path()).unwrap();
        gen_synthetic(&spec, b.path()).unwrap();
        for rel in ["manifest.json", "images/0000.ppm", "masks/0003.pgm"] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap()
            );
        }
    }

    #[test]
    fn round_trip_preserves_masks() {
        let spec = SyntheticSpec {
            n_images: 5,
            n_val: 1,
            n_test: 2,
            height: 20,
            width: 24,
            ..SyntheticSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        gen_synthetic(&spec, dir.path()).unwrap();
        let loaded = load_dataset(dir.path().join("manifest.json")).unwrap();
        let memory = synthetic_dataset(&spec).unwrap();
        assert_eq!(loaded, memory);
        assert_eq!((loaded.train.len(), loaded.val.len(), loaded.test.len()), (2, 1, 2));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(SyntheticSpec {
            n_images: 0,
            ..SyntheticSpec::default()
        }
        .validate()
        .is_err());
        assert!(SyntheticSpec {
            n_val: 300,
            ..SyntheticSpec::default()
        }
        .validate()
        .is_err());
        assert!(SyntheticSpec {
            noise_level: -1.0,
            ..SyntheticSpec::default()
        }
        .validate()
        .is_err());
        assert!(SyntheticSpec {
            shapes: vec![],
            ..SyntheticSpec::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn unwritable_output_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("file");
        std::fs::write(&file, b"x").unwrap();
        assert!(gen_synthetic(&one_disk(), &file).is_err());
    }
}
