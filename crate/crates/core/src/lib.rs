//! Lossy image codec with a probabilistic decoder.
//!
//! An image is mapped by a reversible lifting transform to a subband
//! pyramid, rounded, and range coded under an autoregressive Gaussian
//! mixture model. The decoder turns the rounded pyramid into a per
//! coefficient Gaussian field and draws reconstructions from it.

pub mod codec;
pub mod entropy;
mod error;
pub mod lifting;
pub mod model;
pub mod nn;
pub mod posterior;
pub mod pyramid;
pub mod quant;
pub mod rangecoder;
pub mod sampler;
pub mod train;

pub use error::Error;
