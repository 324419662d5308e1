//! UV-space adversarial makeup transfer for facial privacy protection.
//!
//! The pipeline fits faces into a shared UV texture space with a linear
//! morphable model, transfers reference makeup through an attention-based
//! generator, trains the result to impersonate a chosen target identity
//! against an ensemble of face-embedding models, and measures protection
//! with verification/identification metrics.
//!
//! Crate layout mirrors the pipeline stages:
//!
//! * [`face3d`] — morphable model, weak-perspective projection, cylindrical
//!   UV unwrapping, z-buffer visibility, differentiable texture rendering.
//! * [`generator`] — UV texture generator (encoders, makeup adjustment,
//!   makeup transfer attention, decoder) and the patch discriminators.
//! * [`losses`] — histogram-matching makeup losses, perceptual loss,
//!   adversarial losses, ensemble targeted-attack loss, weighted totals.
//! * [`fr_bank`] — face-embedding model abstraction, mock bank factory,
//!   FAR-threshold calibration.
//! * [`trainer`] — alternating discriminator/generator training loop.
//! * [`eval`] — ASR/PSR/rank-k protection, FID/SSIM/PSNR, API client stub.
//! * [`data`] — synthetic toy datasets, manifests, cached face artifacts.
//! * [`cli`] — the `uveil` command-line surface.

pub mod autodiff;
pub mod container;
pub mod error;
pub mod face3d;
pub mod fr_bank;

pub use error::{Error, Result};
