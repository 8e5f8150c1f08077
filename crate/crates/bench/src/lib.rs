//! Shared inputs for the benchmarks under `benches/`.

use rosa_core::image::{ImageTensor, ValueSpace};
use rosa_core::rng::Rng;

/// Deterministic integer-valued RGB image.
pub fn test_image(height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = Rng::new(seed);
    let data = (0..height * width * 3).map(|_| rng.below(256) as f64).collect();
    ImageTensor::new(height, width, 3, data, ValueSpace::Rgb255).expect("valid dimensions")
}
