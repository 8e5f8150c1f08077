//! Raster data model shared by every stage of the pipeline.
//!
//! Images are interleaved row-major `(row, column, channel)` buffers tagged
//! with the value space they live in. Saliency maps and ground-truth masks
//! are single-plane rasters with their own invariants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSpace {
    /// Samples in `[0, 255]`.
    Rgb255,
    /// `Rgb255` minus a per-channel mean pixel; unbounded.
    MeanSubtracted,
    /// Samples in `[0, 1]`.
    Unit,
}

impl ValueSpace {
    pub fn name(self) -> &'static str {
        match self {
            ValueSpace::Rgb255 => "rgb255",
            ValueSpace::MeanSubtracted => "mean_subtracted",
            ValueSpace::Unit => "unit",
        }
    }

    fn bounds(self) -> Option<(f64, f64)> {
        match self {
            ValueSpace::Rgb255 => Some((0.0, 255.0)),
            ValueSpace::Unit => Some((0.0, 1.0)),
            ValueSpace::MeanSubtracted => None,
        }
    }
}

/// Rounds half away from zero (`127.5 -> 128`, `-0.5 -> -1`).
#[inline]
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    space: ValueSpace,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>, space: ValueSpace) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("images carry 1 or 3 channels, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} samples, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some((lo, hi)) = space.bounds() {
            if let Some(v) = data.iter().find(|v| !(lo..=hi).contains(*v)) {
                return Err(Error::Data(format!(
                    "sample {v} outside [{lo}, {hi}] for {} image",
                    space.name()
                )));
            }
        } else if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite sample".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            space,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64, space: ValueSpace) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels], space)
    }

    /// Clamps every sample into the bounds of `space` before construction.
    pub fn new_clamped(
        height: usize,
        width: usize,
        channels: usize,
        mut data: Vec<f64>,
        space: ValueSpace,
    ) -> Result<Self> {
        if let Some((lo, hi)) = space.bounds() {
            for v in &mut data {
                *v = v.clamp(lo, hi);
            }
        }
        Self::new(height, width, channels, data, space)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn space(&self) -> ValueSpace {
        self.space
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Color vector of the pixel with flat index `i`.
    #[inline]
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn same_dims(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }

    pub(crate) fn require_space(&self, space: ValueSpace) -> Result<()> {
        if self.space == space {
            Ok(())
        } else {
            Err(Error::ValueSpace {
                expected: space.name(),
                actual: self.space.name(),
            })
        }
    }

    /// Rebuilds a tensor with the same geometry and new samples.
    pub fn with_data(&self, data: Vec<f64>, space: ValueSpace) -> Result<Self> {
        Self::new(self.height, self.width, self.channels, data, space)
    }

    /// Channel-major copy (`channel, row, column`).
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.pixel_count();
        let mut out = vec![0.0; n * self.channels];
        for i in 0..n {
            for ch in 0..self.channels {
                out[ch * n + i] = self.data[i * self.channels + ch];
            }
        }
        out
    }

    pub fn from_planar(
        height: usize,
        width: usize,
        channels: usize,
        planar: &[f64],
        space: ValueSpace,
    ) -> Result<Self> {
        let n = height * width;
        if planar.len() != n * channels {
            return Err(Error::Shape("planar buffer length".into()));
        }
        let mut data = vec![0.0; n * channels];
        for ch in 0..channels {
            for i in 0..n {
                data[i * channels + ch] = planar[ch * n + i];
            }
        }
        Self::new(height, width, channels, data, space)
    }

    pub fn linf_distance(&self, other: &ImageTensor) -> Result<f64> {
        if self.data.len() != other.data.len() {
            return Err(Error::Shape("linf distance between different shapes".into()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Per-channel mean of the samples.
    pub fn channel_mean(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += v;
            }
        }
        let n = self.pixel_count().max(1) as f64;
        sums.into_iter().map(|s| s / n).collect()
    }
}

fn check_mean(x: &ImageTensor, mean: &[f64]) -> Result<()> {
    if mean.len() != x.channels {
        return Err(Error::Shape(format!(
            "mean has {} entries for a {}-channel image",
            mean.len(),
            x.channels
        )));
    }
    Ok(())
}

/// `x - mean` per channel; `x` must be `Rgb255`.
pub fn to_mean_subtracted(x: &ImageTensor, mean: &[f64]) -> Result<ImageTensor> {
    x.require_space(ValueSpace::Rgb255)?;
    check_mean(x, mean)?;
    let c = x.channels;
    let data = x.data.iter().enumerate().map(|(i, v)| v - mean[i % c]).collect();
    x.with_data(data, ValueSpace::MeanSubtracted)
}

/// Adds the mean back without rounding or clamping. The result is tagged
/// `MeanSubtracted` when it leaves `[0, 255]`.
pub fn from_mean_subtracted(x: &ImageTensor, mean: &[f64]) -> Result<ImageTensor> {
    x.require_space(ValueSpace::MeanSubtracted)?;
    check_mean(x, mean)?;
    let c = x.channels;
    let data: Vec<f64> = x.data.iter().enumerate().map(|(i, v)| v + mean[i % c]).collect();
    let space = if data.iter().all(|v| (0.0..=255.0).contains(v)) {
        ValueSpace::Rgb255
    } else {
        ValueSpace::MeanSubtracted
    };
    x.with_data(data, space)
}

/// `clamp(round(x + mean), 0, 255)`, yielding an integer-valued `Rgb255` image.
pub fn round_to_rgb(x: &ImageTensor, mean: &[f64]) -> Result<ImageTensor> {
    check_mean(x, mean)?;
    let c = x.channels;
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, v)| round_half_away(v + mean[i % c]).clamp(0.0, 255.0))
        .collect();
    x.with_data(data, ValueSpace::Rgb255)
}

/// Dense per-pixel probability of the salient class.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} saliency map needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("saliency value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// The map as a single-channel `Unit` image.
    pub fn to_image(&self) -> ImageTensor {
        ImageTensor::new(self.height, self.width, 1, self.values.clone(), ValueSpace::Unit)
            .expect("saliency values are unit-bounded")
    }
}

/// Strictly binary ground truth; `1` marks salient pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Data("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, values })
    }

    /// Binarizes a gray image: samples `>= threshold` become 1.
    pub fn from_gray(image: &ImageTensor, threshold: f64) -> Result<Self> {
        if image.channels() != 1 {
            return Err(Error::Shape("mask source must be single-channel".into()));
        }
        let values = image.data().iter().map(|&v| u8::from(v >= threshold)).collect();
        Self::new(image.height(), image.width(), values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn count_salient(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    /// Mask as a `Rgb255` gray image (0 / 255).
    pub fn to_image(&self) -> ImageTensor {
        let data = self.values.iter().map(|&v| f64::from(v) * 255.0).collect();
        ImageTensor::new(self.height, self.width, 1, data, ValueSpace::Rgb255).expect("mask geometry is consistent")
    }
}
