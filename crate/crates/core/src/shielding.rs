//! Segment-wise shielding: superpixel decomposition by k-means in the joint
//! color/position space, then a random permutation of the pixels inside
//! every superpixel.
//!
//! The permutation keeps each region's color distribution and the region
//! boundaries intact while destroying any fine spatial pattern laid on top
//! of the image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::io::write_pgm16;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlicConfig {
    /// Target cluster count.
    pub k: usize,
    /// Weight of spatial distance against color distance.
    pub compactness: f64,
    pub max_iters: usize,
    /// Convergence threshold on the summed center movement, joint-space units.
    pub tol: f64,
}

impl Default for SlicConfig {
    fn default() -> Self {
        Self {
            k: 400,
            compactness: 10.0,
            max_iters: 10,
            tol: 1e-3,
        }
    }
}

impl SlicConfig {
    /// Default config with `k` scaled from 400 clusters per 400x300 image.
    pub fn for_size(height: usize, width: usize) -> Self {
        let k = (400.0 * (height * width) as f64 / 120_000.0).round() as usize;
        Self {
            k: k.clamp(1, (height * width).max(1)),
            ..Self::default()
        }
    }

    pub fn validate(&self, pixel_count: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("slic k must be at least 1".into()));
        }
        if self.k > pixel_count {
            return Err(Error::Config(format!(
                "slic k = {} exceeds pixel count {pixel_count}",
                self.k
            )));
        }
        if !(self.compactness > 0.0) {
            return Err(Error::Config("slic compactness must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("slic max_iters must be at least 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config("slic tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-pixel segment labels, compacted to `0..segment_count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    segment_count: usize,
}

impl SegmentMap {
    /// Compacts arbitrary labels, numbering them in order of their first
    /// appearance in ascending label value.
    pub fn from_labels(height: usize, width: usize, raw: &[u32]) -> Result<Self> {
        if raw.len() != height * width {
            return Err(Error::Shape("segment labels length".into()));
        }
        let mut used: Vec<u32> = raw.to_vec();
        used.sort_unstable();
        used.dedup();
        let labels = raw
            .iter()
            .map(|l| used.binary_search(l).expect("label present") as u32)
            .collect();
        Ok(Self {
            height,
            width,
            labels,
            segment_count: used.len(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn segment_count(&self) -> usize {
        self.segment_count
    }

    /// Pixel indices of every segment, each list in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.segment_count];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    /// Exports labels as a 16-bit PGM for inspection.
    pub fn write_pgm(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        if self.segment_count > usize::from(u16::MAX) + 1 {
            return Err(Error::Data("too many segments for a 16-bit PGM".into()));
        }
        let values: Vec<u16> = self.labels.iter().map(|&l| l as u16).collect();
        write_pgm16(self.height, self.width, &values, path)
    }
}

/// Chooses an `ny x nx` seeding grid with `ny * nx` as close to `k` as
/// possible, then cells as square as possible, then the wider grid.
fn seed_grid(height: usize, width: usize, k: usize) -> (usize, usize) {
    let mut best = (1, 1);
    let mut best_key = (usize::MAX, f64::INFINITY, 0usize);
    for ny in 1..=k.min(height) {
        let nx = ((k as f64 / ny as f64).round() as usize).clamp(1, width);
        let count_err = (ny * nx).abs_diff(k);
        let aspect = ((height as f64 / ny as f64) / (width as f64 / nx as f64)).ln().abs();
        let key = (count_err, aspect, usize::MAX - nx);
        let better = key.0 < best_key.0
            || (key.0 == best_key.0 && key.1 < best_key.1 - 1e-12)
            || (key.0 == best_key.0 && (key.1 - best_key.1).abs() <= 1e-12 && key.2 < best_key.2);
        if better {
            best = (ny, nx);
            best_key = key;
        }
    }
    best
}

#[derive(Clone)]
struct Center {
    color: Vec<f64>,
    y: f64,
    x: f64,
}

/// Superpixels by Lloyd iterations over `(color, position)`.
///
/// Centers start on a regular grid; each pixel joins the center minimizing
/// `d_color^2 + (m / S)^2 d_spatial^2` (with `m` the compactness and `S` the
/// grid step), then centers move to the mean of their members. Stops when
/// the summed joint-space movement is at most `tol` or after `max_iters`.
/// Ties go to the lower center index. Deterministic; no randomness.
pub fn slic_segment(image: &ImageTensor, cfg: &SlicConfig) -> Result<SegmentMap> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let n = h * w;
    if n == 0 {
        return Err(Error::Shape("cannot segment an empty image".into()));
    }
    cfg.validate(n)?;

    let (ny, nx) = seed_grid(h, w, cfg.k);
    let step = ((n as f64) / (ny * nx) as f64).sqrt();
    let spatial_weight = (cfg.compactness / step).powi(2);

    let mut centers: Vec<Center> = Vec::with_capacity(ny * nx);
    for gy in 0..ny {
        for gx in 0..nx {
            let y = (gy as f64 + 0.5) * h as f64 / ny as f64 - 0.5;
            let x = (gx as f64 + 0.5) * w as f64 / nx as f64 - 0.5;
            let (py, px) = (
                y.round().clamp(0.0, (h - 1) as f64),
                x.round().clamp(0.0, (w - 1) as f64),
            );
            let color = image.pixel(py as usize * w + px as usize).to_vec();
            centers.push(Center { color, y, x });
        }
    }

    let mut labels = vec![0u32; n];
    for _ in 0..cfg.max_iters {
        for (i, label) in labels.iter_mut().enumerate() {
            let (py, px) = ((i / w) as f64, (i % w) as f64);
            let color = image.pixel(i);
            let mut best = (f64::INFINITY, 0usize);
            for (ci, ctr) in centers.iter().enumerate() {
                let dc: f64 = color.iter().zip(&ctr.color).map(|(a, b)| (a - b) * (a - b)).sum();
                let ds = (py - ctr.y).powi(2) + (px - ctr.x).powi(2);
                let d = dc + spatial_weight * ds;
                if d < best.0 {
                    best = (d, ci);
                }
            }
            *label = best.1 as u32;
        }

        let mut sums = vec![(vec![0.0; c], 0.0, 0.0, 0usize); centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            let s = &mut sums[l as usize];
            for (acc, v) in s.0.iter_mut().zip(image.pixel(i)) {
                *acc += v;
            }
            s.1 += (i / w) as f64;
            s.2 += (i % w) as f64;
            s.3 += 1;
        }
        let mut movement = 0.0;
        for (ctr, (color, sy, sx, count)) in centers.iter_mut().zip(sums) {
            if count == 0 {
                continue;
            }
            let inv = 1.0 / count as f64;
            let new_color: Vec<f64> = color.iter().map(|v| v * inv).collect();
            let (ny_, nx_) = (sy * inv, sx * inv);
            let dc: f64 = new_color.iter().zip(&ctr.color).map(|(a, b)| (a - b) * (a - b)).sum();
            let ds = (ny_ - ctr.y).powi(2) + (nx_ - ctr.x).powi(2);
            movement += (dc + spatial_weight * ds).sqrt();
            *ctr = Center {
                color: new_color,
                y: ny_,
                x: nx_,
            };
        }
        if movement <= cfg.tol {
            break;
        }
    }

    SegmentMap::from_labels(h, w, &labels)
}

/// Permutes pixels uniformly at random inside each segment.
///
/// Segment `s` draws its permutation from `rng.child(s)`, so the result for
/// one segment is independent of every other segment.
pub fn shuffle_within_segments(image: &ImageTensor, seg: &SegmentMap, rng: &Rng) -> Result<ImageTensor> {
    if !image.same_dims(seg.height(), seg.width()) {
        return Err(Error::Shape(format!(
            "segment map {}x{} does not match image {}x{}",
            seg.height(),
            seg.width(),
            image.height(),
            image.width()
        )));
    }
    let c = image.channels();
    let src = image.data();
    let mut out = src.to_vec();
    for (s, members) in seg.members().iter().enumerate() {
        if members.len() < 2 {
            continue;
        }
        let perm = rng.child(s as u64).permutation(members.len());
        for (dst_slot, &src_slot) in perm.iter().enumerate() {
            let (d, s) = (members[dst_slot], members[src_slot]);
            out[d * c..(d + 1) * c].copy_from_slice(&src[s * c..(s + 1) * c]);
        }
    }
    image.with_data(out, image.space())
}

/// Segmentation followed by in-segment shuffling. The segment map is
/// returned for diagnostics.
pub fn shield(image: &ImageTensor, cfg: &SlicConfig, rng: &Rng) -> Result<(ImageTensor, SegmentMap)> {
    let seg = slic_segment(image, cfg)?;
    let shuffled = shuffle_within_segments(image, &seg, rng)?;
    Ok((shuffled, seg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ValueSpace;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> ImageTensor {
        let mut data = Vec::with_capacity(h * w * 3);
        for r in 0..h {
            for c in 0..w {
                let v = f(r, c);
                data.extend([v, v, v]);
            }
        }
        ImageTensor::new(h, w, 3, data, ValueSpace::Rgb255).unwrap()
    }

    fn cfg(k: usize) -> SlicConfig {
        SlicConfig {
            k,
            ..SlicConfig::default()
        }
    }

    /// Independent joint-space k-means: one Lloyd step from the given
    /// centers, written against plain tuples.
    fn lloyd_step(img: &ImageTensor, centers: &[(f64, f64, f64)], weight: f64) -> (Vec<usize>, Vec<(f64, f64, f64)>) {
        let w = img.width();
        let mut assign = Vec::new();
        for i in 0..img.pixel_count() {
            let (y, x, v) = ((i / w) as f64, (i % w) as f64, img.pixel(i)[0]);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, &(cy, cx, cv)) in centers.iter().enumerate() {
                let d = 3.0 * (v - cv).powi(2) + weight * ((y - cy).powi(2) + (x - cx).powi(2));
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            assign.push(best);
        }
        let mut next = vec![(0.0, 0.0, 0.0, 0.0); centers.len()];
        for (i, &k) in assign.iter().enumerate() {
            next[k].0 += (i / w) as f64;
            next[k].1 += (i % w) as f64;
            next[k].2 += img.pixel(i)[0];
            next[k].3 += 1.0;
        }
        let next = next.into_iter().map(|(y, x, v, n)| (y / n, x / n, v / n)).collect();
        (assign, next)
    }

    #[test]
    fn single_pixel_single_segment() {
        let img = gray(1, 1, |_, _| 10.0);
        let seg = slic_segment(&img, &cfg(1)).unwrap();
        assert_eq!(seg.labels(), &[0]);
        assert_eq!(seg.segment_count(), 1);
    }

    #[test]
    fn uniform_image_splits_into_blocks() {
        let img = gray(32, 32, |_, _| 128.0);
        let seg = slic_segment(&img, &cfg(4)).unwrap();
        assert_eq!(seg.segment_count(), 4);
        for r in 0..32 {
            for c in 0..32 {
                let expect = (r / 16) * 2 + c / 16;
                assert_eq!(seg.labels()[r * 32 + c] as usize, expect, "pixel ({r},{c})");
            }
        }
        // the blocks are a fixed point of the brute-force Lloyd step
        let centers = [
            (7.5, 7.5, 128.0),
            (7.5, 23.5, 128.0),
            (23.5, 7.5, 128.0),
            (23.5, 23.5, 128.0),
        ];
        let (assign, next) = lloyd_step(&img, &centers, (10.0f64 / 16.0).powi(2));
        assert!(assign.iter().zip(seg.labels()).all(|(a, &b)| *a == b as usize));
        for (a, b) in centers.iter().zip(&next) {
            assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_follows_color_edge() {
        let img = gray(16, 16, |_, c| if c < 8 { 0.0 } else { 255.0 });
        let seg = slic_segment(&img, &cfg(2)).unwrap();
        assert_eq!(seg.segment_count(), 2);
        for i in 0..256 {
            assert_eq!(seg.labels()[i], u32::from(i % 16 >= 8));
        }
        let centers = [(7.5, 3.5, 0.0), (7.5, 11.5, 255.0)];
        let (assign, next) = lloyd_step(&img, &centers, (10.0f64 / 128f64.sqrt()).powi(2));
        assert!(assign.iter().zip(seg.labels()).all(|(a, &b)| *a == b as usize));
        assert_eq!(next, centers.to_vec());
    }

    #[test]
    fn k_above_pixel_count_is_rejected() {
        let img = gray(2, 2, |_, _| 0.0);
        assert!(matches!(slic_segment(&img, &cfg(5)), Err(Error::Config(_))));
    }

    #[test]
    fn one_segment_per_pixel_when_k_is_n() {
        let img = gray(5, 7, |r, c| ((r * 31 + c * 17) % 256) as f64);
        let seg = slic_segment(&img, &cfg(35)).unwrap();
        assert_eq!(seg.segment_count(), 35);
        let (out, _) = shield(&img, &cfg(35), &Rng::new(1)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn constant_segments_are_untouched() {
        let img = gray(8, 8, |_, c| if c < 4 { 10.0 } else { 200.0 });
        let seg = SegmentMap::from_labels(8, 8, &(0..64).map(|i| u32::from(i % 8 >= 4)).collect::<Vec<_>>()).unwrap();
        assert_eq!(shuffle_within_segments(&img, &seg, &Rng::new(5)).unwrap(), img);
    }

    #[test]
    fn dimension_mismatch() {
        let img = gray(4, 4, |_, _| 0.0);
        let seg = SegmentMap::from_labels(2, 2, &[0, 0, 0, 0]).unwrap();
        assert!(matches!(
            shuffle_within_segments(&img, &seg, &Rng::new(0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn labels_are_compacted() {
        let seg = SegmentMap::from_labels(1, 4, &[7, 3, 7, 9]).unwrap();
        assert_eq!(seg.labels(), &[1, 0, 1, 2]);
        assert_eq!(seg.segment_count(), 3);
    }

    #[test]
    fn seeding_grid_choices() {
        assert_eq!(seed_grid(32, 32, 4), (2, 2));
        assert_eq!(seed_grid(16, 16, 2), (1, 2));
        assert_eq!(seed_grid(5, 7, 35), (5, 7));
        assert_eq!(seed_grid(64, 64, 16), (4, 4));
    }

    #[test]
    fn segments_draw_independent_streams() {
        let img = gray(2, 4, |y, x| (y * 4 + x) as f64 * 20.0);
        let a = SegmentMap::from_labels(2, 4, &[0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        let b = SegmentMap::from_labels(2, 4, &[0, 0, 0, 0, 1, 1, 2, 2]).unwrap();
        let rng = Rng::new(17);
        let out_a = shuffle_within_segments(&img, &a, &rng).unwrap();
        let out_b = shuffle_within_segments(&img, &b, &rng).unwrap();
        // relabeling the second row leaves the first row's draw untouched
        assert_eq!(out_a.data()[..12], out_b.data()[..12]);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn shuffle_preserves_segment_multisets(
            data in proptest::collection::vec(0u8..=255, 12 * 10 * 3),
            k in 1usize..20,
            seed in proptest::prelude::any::<u64>(),
        ) {
            let img = ImageTensor::new(12, 10, 3, data.into_iter().map(f64::from).collect(), ValueSpace::Rgb255).unwrap();
            let (out, seg) = shield(&img, &cfg(k), &Rng::new(seed)).unwrap();
            // partition + compaction
            let members = seg.members();
            proptest::prop_assert!(members.iter().all(|m| !m.is_empty()));
            proptest::prop_assert_eq!(members.iter().map(Vec::len).sum::<usize>(), 120);
            for m in &members {
                let mut a: Vec<Vec<u64>> = m.iter().map(|&i| img.pixel(i).iter().map(|v| v.to_bits()).collect()).collect();
                let mut b: Vec<Vec<u64>> = m.iter().map(|&i| out.pixel(i).iter().map(|v| v.to_bits()).collect()).collect();
                a.sort();
                b.sort();
                proptest::prop_assert_eq!(a, b);
            }
            let again = shield(&img, &cfg(k), &Rng::new(seed)).unwrap().0;
            proptest::prop_assert_eq!(out, again);
        }
    }
}
