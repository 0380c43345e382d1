//! Desk-scale image-conditioned inpainting with a diffusion transformer:
//! three condition-integration configurations (token concatenation, channel
//! concatenation, control branch), two pose strategies (concat, stitch), a
//! rectified-flow objective with an Euler sampler, a procedural try-on
//! corpus, and paired/unpaired evaluation (SSIM, FID, KID).
//!
//! Data-parallel loops run on rayon behind the default `parallel` feature;
//! disabling it yields a dependency-free sequential build with bitwise
//! identical results.

pub mod archive;
pub mod backbone;
pub mod codec;
pub mod conditioning;
pub mod data;
pub mod error;
pub mod flow;
pub mod imaging;
pub mod math;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod token;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
