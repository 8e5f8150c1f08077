// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
// Numeric kernels index several buffers per loop on purpose.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments,
    clippy::type_complexity
)]

pub mod attack;
pub mod backbone;
pub mod checkpoint;
pub mod crf;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod filters;
pub mod image;
pub mod io;
pub mod pipeline;
pub mod rng;
pub mod shielding;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
