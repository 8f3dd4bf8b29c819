//! Numerical toolkit for frequency-aware diffusion training, verifiable at
//! desk scale.
//!
//! The crate provides:
//!
//! - a dense row-major [`Tensor`] with deterministic PRNG, resampling and
//!   portable file I/O (`LWT1` tensor format, binary PGM/PPM),
//! - single- and multi-level orthonormal Haar wavelet transforms with exact
//!   inverses ([`wavelet`]),
//! - wavelet-energy saliency maps over latent tensors ([`saliency`]),
//! - time-dependent binary supervision masks driven by saliency ([`masking`]),
//! - flow-matching and four-term multi-scale autoencoder objectives with
//!   analytic gradients ([`objectives`]),
//! - desk-scale differentiable models and deterministic training loops
//!   ([`models`], [`trainer`]),
//! - a frequency-domain evaluation suite (HLFR, RDR, WQS, HFE, HFEI, MS-SSIM,
//!   GLCM texture statistics) in [`metrics`].
//!
//! Core numeric kernels are generic over the scalar type via [`Scalar`]
//! (`f32` or `f64`); the crate-root aliases pin the default double-precision
//! instantiation used by the models, the trainer and the CLI.

pub mod error;
pub mod io;
pub mod masking;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod resample;
pub mod rng;
pub mod saliency;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod wavelet;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default double-precision tensor used throughout the artifact.
pub type Tensor = tensor::Tensor<f64>;
/// Single-precision tensor, for callers that trade accuracy for size.
pub type Tensor32 = tensor::Tensor<f32>;

/// Double-precision single-level subband set.
pub type SubbandSet = wavelet::SubbandSet<f64>;
/// Double-precision multi-level wavelet pyramid.
pub type WaveletPyramid = wavelet::WaveletPyramid<f64>;
/// Double-precision saliency map.
pub type SaliencyMap = saliency::SaliencyMap<f64>;
/// Double-precision binary supervision mask.
pub type BinaryMask = masking::BinaryMask<f64>;
