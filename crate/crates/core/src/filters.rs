//! Bilateral guidance filter and the input-transformation baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{round_half_away, ImageTensor};

/// Reflect-101 index (`-1 -> 1`, `n -> n - 2`). Collapses to 0 for `n == 1`.
#[inline]
pub fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Half-sample symmetric index (`-1 -> 0`, `n -> n - 1`).
#[inline]
pub fn reflect_symmetric(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - 1 - j;
    }
    j as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BilateralConfig {
    /// Spatial bandwidth in pixels.
    pub sigma_spatial: f64,
    /// Range bandwidth on the 0-255 color scale.
    pub sigma_range: f64,
    /// Window half-size in pixels; `None` means `ceil(3 * sigma_spatial)`.
    #[serde(default)]
    pub radius: Option<usize>,
}

impl Default for BilateralConfig {
    fn default() -> Self {
        Self {
            sigma_spatial: 5.0,
            sigma_range: 30.0,
            radius: None,
        }
    }
}

impl BilateralConfig {
    pub fn effective_radius(&self) -> usize {
        self.radius
            .unwrap_or_else(|| (3.0 * self.sigma_spatial).ceil() as usize)
            .max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_spatial > 0.0) || !(self.sigma_range > 0.0) {
            return Err(Error::Config("bilateral sigmas must be positive".into()));
        }
        if self.radius == Some(0) {
            return Err(Error::Config("bilateral radius must be at least 1".into()));
        }
        Ok(())
    }
}

/// Edge-preserving smoothing with a joint spatial/range Gaussian weight.
///
/// The range distance is the Euclidean distance between full color vectors,
/// so all channels of a pixel share one weight. Borders use reflect-101.
pub fn bilateral_filter(image: &ImageTensor, cfg: &BilateralConfig) -> Result<ImageTensor> {
    cfg.validate()?;
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if h * w == 0 {
        return Err(Error::Shape("cannot filter an empty image".into()));
    }
    let r = cfg.effective_radius() as isize;
    let inv_s = 1.0 / (2.0 * cfg.sigma_spatial * cfg.sigma_spatial);
    let inv_r = 1.0 / (2.0 * cfg.sigma_range * cfg.sigma_range);
    let side = (2 * r + 1) as usize;
    let mut spatial = vec![0.0; side * side];
    for dy in -r..=r {
        for dx in -r..=r {
            spatial[((dy + r) as usize) * side + (dx + r) as usize] = (-((dy * dy + dx * dx) as f64) * inv_s).exp();
        }
    }

    let src = image.data();
    let mut out = vec![0.0; src.len()];
    let mut acc = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            let center = &src[(y * w + x) * c..(y * w + x + 1) * c];
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut norm = 0.0;
            for dy in -r..=r {
                let sy = reflect101(y as isize + dy, h);
                for dx in -r..=r {
                    let sx = reflect101(x as isize + dx, w);
                    let px = &src[(sy * w + sx) * c..(sy * w + sx + 1) * c];
                    let d2: f64 = px.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                    let wgt = spatial[((dy + r) as usize) * side + (dx + r) as usize] * (-d2 * inv_r).exp();
                    norm += wgt;
                    for (a, v) in acc.iter_mut().zip(px) {
                        *a += wgt * v;
                    }
                }
            }
            let o = &mut out[(y * w + x) * c..(y * w + x + 1) * c];
            for (dst, a) in o.iter_mut().zip(&acc) {
                *dst = a / norm;
            }
        }
    }
    ImageTensor::new_clamped(h, w, c, out, image.space())
}

/// Box-mean filter of half-size `radius` with half-sample symmetric borders.
pub fn smooth_baseline(image: &ImageTensor, radius: usize) -> Result<ImageTensor> {
    if radius == 0 {
        return Err(Error::Config("smooth radius must be at least 1".into()));
    }
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let r = radius as isize;
    let src = image.data();
    // separable: horizontal then vertical pass
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0.0;
                for dx in -r..=r {
                    let sx = reflect_symmetric(x as isize + dx, w);
                    s += src[(y * w + sx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = s;
            }
        }
    }
    let norm = 1.0 / ((2 * r + 1) * (2 * r + 1)) as f64;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0.0;
                for dy in -r..=r {
                    let sy = reflect_symmetric(y as isize + dy, h);
                    s += tmp[(sy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = s * norm;
            }
        }
    }
    ImageTensor::new_clamped(h, w, c, out, image.space())
}

/// Bit-depth reduction: snaps each `[0, 255]` sample to the nearest of
/// `2^bits` evenly spaced levels.
pub fn quant_baseline(image: &ImageTensor, bits: u32) -> Result<ImageTensor> {
    if !(1..=8).contains(&bits) {
        return Err(Error::Config(format!("quant bits must be in 1..=8, got {bits}")));
    }
    let levels = f64::from((1u32 << bits) - 1);
    let data = image
        .data()
        .iter()
        .map(|&v| {
            let v = v.clamp(0.0, 255.0);
            round_half_away(v / 255.0 * levels) / levels * 255.0
        })
        .collect();
    ImageTensor::new_clamped(image.height(), image.width(), image.channels(), data, image.space())
}
