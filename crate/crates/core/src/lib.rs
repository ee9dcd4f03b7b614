//! Desk-scale workbench for CNN-assisted S-UNIWARD steganography.
//!
//! The crate is organised bottom-up:
//!
//! - [`media_io`]: Netpbm codec, resampling, manifests and synthetic covers.
//! - [`wavelet`]: Daubechies-8 directional filter bank and undecimated residuals.
//! - [`cost`]: parametric S-UNIWARD cost maps (σ, ε and wet-cost multipliers).
//! - [`embed`]: payload-limited ternary embedding simulator, LSB matching, change visualisation.
//! - [`nn`]: a small layer-based neural network engine with AdaM and checkpoints.
//! - [`detector`]: KV-residual steganalyzers and confusion matrices.
//! - [`assistant`]: the parameter-assistant CNN, grid search and grid cache.
//! - [`harness`]: experiment protocol, configuration and report emission.

pub mod assistant;
pub mod cost;
pub mod detector;
pub mod embed;
pub mod harness;
pub mod media_io;
pub mod nn;
pub mod wavelet;

mod error;

pub use error::{Error, Result};
