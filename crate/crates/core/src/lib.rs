//! Virtual aberration-corrected STEM and a multi-objective Bayesian
//! optimizer that tunes probe aberration coefficients against two
//! image-quality rewards.
//!
//! The pipeline is `optics` (probe PSF) → `virtual_scope` (specimen,
//! convolution, noise) → `rewards` (contrast, FFT power) → `mobo`
//! (independent GP surrogates in `gp`, EHVI over the `pareto` archive),
//! with every step written to a `trajectory` log.

pub mod cli;
pub mod config;
pub mod error;
pub mod fft2;
pub mod gp;
pub mod image;
pub mod mobo;
pub mod optics;
pub mod pareto;
pub mod rewards;
pub mod seeding;
pub mod trajectory;
pub mod virtual_scope;

pub use error::{Error, Result};
pub use image::{Image, ImageMeta};
pub use optics::{AberrationState, Coefficient, OpticalConfig};
pub use rewards::RewardVector;
