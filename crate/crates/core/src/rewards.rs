//! Image-quality rewards: RMS contrast σ/(μ + ε) and the DC-masked mean
//! log-magnitude spectrum ⟨ln(1 + |F|)·M⟩.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft2::{signed_index, to_complex, Fft2};
use crate::image::Image;

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// `[contrast, fft]`, both maximized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub contrast: f64,
    pub fft: f64,
}

impl RewardVector {
    pub fn new(contrast: f64, fft: f64) -> Self {
        Self { contrast, fft }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.contrast, self.fft]
    }
}

impl From<[f64; 2]> for RewardVector {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

/// Radius (in frequency bins) of the zeroed DC disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FftMaskConfig {
    dc_radius: usize,
}

impl FftMaskConfig {
    pub fn new(dc_radius: usize, grid_size: usize) -> Result<Self> {
        if dc_radius < 1 || 4 * dc_radius >= grid_size {
            return Err(Error::invalid(format!(
                "dc radius {dc_radius} must satisfy 1 ≤ r < {}/4",
                grid_size
            )));
        }
        Ok(Self { dc_radius })
    }

    /// 3 bins on a 64 grid, scaled linearly with the grid size.
    pub fn for_grid(grid_size: usize) -> Self {
        let r = ((3 * grid_size) as f64 / 64.0).round().max(1.0) as usize;
        Self { dc_radius: r }
    }

    pub fn dc_radius(&self) -> usize {
        self.dc_radius
    }
}

/// σ/(μ + ε) with the population standard deviation.
pub fn contrast_reward(image: &Image, epsilon: f64) -> f64 {
    image.std_dev() / (image.mean() + epsilon)
}

/// Mean over every frequency bin of ln(1 + |F|)·M, F the unnormalized DFT.
pub fn fft_reward(image: &Image, mask: &FftMaskConfig) -> f64 {
    let fft = Fft2::new(image.width, image.height);
    fft_reward_with(image, mask, &fft)
}

pub(crate) fn fft_reward_with(image: &Image, mask: &FftMaskConfig, fft: &Fft2) -> f64 {
    let (w, h) = (image.width, image.height);
    let mut spectrum = to_complex(&image.data);
    fft.forward(&mut spectrum);
    let r2 = (mask.dc_radius * mask.dc_radius) as i64;
    let mut total = 0.0;
    for y in 0..h {
        let fy = signed_index(y, h);
        for x in 0..w {
            let fx = signed_index(x, w);
            if fx * fx + fy * fy > r2 {
                total += spectrum[y * w + x].norm().ln_1p();
            }
        }
    }
    total / (w * h) as f64
}

/// Evaluates both rewards with a fixed mask and ε.
#[derive(Debug, Clone)]
pub struct RewardEvaluator {
    mask: FftMaskConfig,
    epsilon: f64,
    fft: Fft2,
}

impl RewardEvaluator {
    pub fn new(grid_size: usize) -> Self {
        Self::with_mask(FftMaskConfig::for_grid(grid_size), grid_size)
    }

    pub fn with_mask(mask: FftMaskConfig, grid_size: usize) -> Self {
        Self {
            mask,
            epsilon: DEFAULT_EPSILON,
            fft: Fft2::new(grid_size, grid_size),
        }
    }

    pub fn evaluate(&self, image: &Image) -> RewardVector {
        let fft_value = if image.width == self.fft.width() && image.height == self.fft.height() {
            fft_reward_with(image, &self.mask, &self.fft)
        } else {
            fft_reward(image, &self.mask)
        };
        RewardVector::new(contrast_reward(image, self.epsilon), fft_value)
    }
}

/// Both rewards with default ε and a mask scaled to the image size.
pub fn evaluate(image: &Image) -> RewardVector {
    let mask = FftMaskConfig::for_grid(image.width.min(image.height));
    RewardVector::new(contrast_reward(image, DEFAULT_EPSILON), fft_reward(image, &mask))
}
