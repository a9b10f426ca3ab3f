//! Reverse style transfer from sRGB to camera RAW.
//!
//! A Gram-matrix style encoder drives per-level AdaIN in a residual
//! encoder-decoder; training pairs a composite MS-SSIM / TV objective with a
//! wavelet-domain adversarial critic.

pub mod data;
pub mod error;
pub mod isp;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod ops;
pub mod style;
pub mod train;

pub use error::{Error, Result};

/// Tensor types appear in the public API; re-exported so callers need no direct dependency.
pub use candle_core;
