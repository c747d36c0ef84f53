//! Electron optics of the probe: relativistic wavelength, the aberration
//! phase χ(α, φ), and the aperture-limited probe intensity (PSF).
//!
//! χ uses the polar expansion with order-n terms scaled by α^(n+1)/(n+1):
//!
//! ```text
//! χ(α, φ) = 2π/λ · [ α²/2 · (C10 + C12a cos2φ + C12b sin2φ)
//!                  + α³/3 · (C21a cosφ + C21b sinφ + C23a cos3φ + C23b sin3φ) ]
//! ```
//!
//! All coefficients are in nanometres, angles in radians.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft2::{fftshift, signed_index, Fft2};
use crate::image::Image;

const PLANCK: f64 = 6.626_070_15e-34;
const ELECTRON_MASS: f64 = 9.109_383_701_5e-31;
const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Relativistic electron wavelength in picometres.
pub fn wavelength(voltage_kv: f64) -> Result<f64> {
    if !(voltage_kv > 0.0 && voltage_kv.is_finite()) {
        return Err(Error::invalid(format!("voltage must be positive, got {voltage_kv} kV")));
    }
    let ev = ELEMENTARY_CHARGE * voltage_kv * 1e3;
    let rest = ELECTRON_MASS * SPEED_OF_LIGHT * SPEED_OF_LIGHT;
    let momentum = (2.0 * ELECTRON_MASS * ev * (1.0 + ev / (2.0 * rest))).sqrt();
    Ok(PLANCK / momentum * 1e12)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coefficient {
    C10,
    C12a,
    C12b,
    C21a,
    C21b,
    C23a,
    C23b,
}

impl Coefficient {
    pub const ALL: [Coefficient; 7] = [
        Coefficient::C10,
        Coefficient::C12a,
        Coefficient::C12b,
        Coefficient::C21a,
        Coefficient::C21b,
        Coefficient::C23a,
        Coefficient::C23b,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Default tuning range in nm: ±10 for first-order terms, ±300 for
    /// second-order terms.
    pub fn default_range(self) -> (f64, f64) {
        match self {
            Coefficient::C10 | Coefficient::C12a | Coefficient::C12b => (-10.0, 10.0),
            _ => (-300.0, 300.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Coefficient::C10 => "c10",
            Coefficient::C12a => "c12a",
            Coefficient::C12b => "c12b",
            Coefficient::C21a => "c21a",
            Coefficient::C21b => "c21b",
            Coefficient::C23a => "c23a",
            Coefficient::C23b => "c23b",
        }
    }
}

impl fmt::Display for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Coefficient {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Coefficient::ALL
            .into_iter()
            .find(|c| c.name() == lower)
            .ok_or_else(|| Error::invalid(format!("unknown aberration coefficient '{s}'")))
    }
}

/// Aberration coefficients in nm. Every coefficient enters χ; the active
/// flags mark which ones an optimizer is allowed to move.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AberrationState {
    values: [f64; 7],
    active: [bool; 7],
}

impl Default for AberrationState {
    fn default() -> Self {
        Self::zero()
    }
}

impl AberrationState {
    pub fn zero() -> Self {
        Self {
            values: [0.0; 7],
            active: [false; 7],
        }
    }

    pub fn from_values(values: [f64; 7]) -> Result<Self> {
        let mut state = Self::zero();
        for (c, v) in Coefficient::ALL.into_iter().zip(values) {
            state.set(c, v)?;
        }
        Ok(state)
    }

    pub fn get(&self, c: Coefficient) -> f64 {
        self.values[c.index()]
    }

    pub fn set(&mut self, c: Coefficient, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::invalid(format!("{c} must be finite, got {value}")));
        }
        self.values[c.index()] = value;
        Ok(())
    }

    pub fn with(mut self, c: Coefficient, value: f64) -> Result<Self> {
        self.set(c, value)?;
        Ok(self)
    }

    pub fn is_active(&self, c: Coefficient) -> bool {
        self.active[c.index()]
    }

    pub fn set_active(&mut self, c: Coefficient, active: bool) {
        self.active[c.index()] = active;
    }

    pub fn active_coefficients(&self) -> Vec<Coefficient> {
        Coefficient::ALL
            .into_iter()
            .filter(|c| self.is_active(*c))
            .collect()
    }

    pub fn values(&self) -> [f64; 7] {
        self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

/// Probe-forming optics and the sampling grid the PSF is computed on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpticalConfig {
    voltage_kv: f64,
    convergence_mrad: f64,
    grid_size: usize,
    pixel_size_nm: f64,
    wavelength_nm: f64,
}

impl OpticalConfig {
    pub fn new(
        voltage_kv: f64,
        convergence_mrad: f64,
        grid_size: usize,
        pixel_size_nm: f64,
    ) -> Result<Self> {
        let wavelength_nm = wavelength(voltage_kv)? * 1e-3;
        if !(convergence_mrad > 0.0 && convergence_mrad.is_finite()) {
            return Err(Error::invalid("convergence angle must be positive"));
        }
        if grid_size < 8 || !grid_size.is_power_of_two() {
            return Err(Error::invalid(format!(
                "grid size must be a power of two ≥ 8, got {grid_size}"
            )));
        }
        if !(pixel_size_nm > 0.0 && pixel_size_nm.is_finite()) {
            return Err(Error::invalid("pixel size must be positive"));
        }
        let config = Self {
            voltage_kv,
            convergence_mrad,
            grid_size,
            pixel_size_nm,
            wavelength_nm,
        };
        let nyquist = 0.5 / pixel_size_nm;
        if config.aperture_cutoff() >= nyquist {
            return Err(Error::invalid(format!(
                "aperture cutoff {:.3} nm⁻¹ is not inside the grid Nyquist limit {:.3} nm⁻¹",
                config.aperture_cutoff(),
                nyquist
            )));
        }
        Ok(config)
    }

    pub fn voltage_kv(&self) -> f64 {
        self.voltage_kv
    }

    pub fn convergence_mrad(&self) -> f64 {
        self.convergence_mrad
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn pixel_size_nm(&self) -> f64 {
        self.pixel_size_nm
    }

    pub fn wavelength_nm(&self) -> f64 {
        self.wavelength_nm
    }

    /// Convergence semi-angle in radians.
    pub fn aperture_angle(&self) -> f64 {
        self.convergence_mrad * 1e-3
    }

    /// Aperture radius in reciprocal space, nm⁻¹.
    pub fn aperture_cutoff(&self) -> f64 {
        self.aperture_angle() / self.wavelength_nm
    }
}

impl Default for OpticalConfig {
    /// 60 kV, 30 mrad, 128 × 128 grid at 0.02 nm/pixel.
    fn default() -> Self {
        Self::new(60.0, 30.0, 128, 0.02).expect("default optics are valid")
    }
}

/// Aberration phase χ in radians at scattering angle `alpha` and azimuth `phi`.
pub fn chi(alpha: f64, phi: f64, state: &AberrationState, config: &OpticalConfig) -> f64 {
    chi_with_wavelength(alpha, phi, state, config.wavelength_nm)
}

fn chi_with_wavelength(alpha: f64, phi: f64, state: &AberrationState, wavelength_nm: f64) -> f64 {
    let [c10, c12a, c12b, c21a, c21b, c23a, c23b] = state.values;
    let a2 = alpha * alpha;
    let second = 0.5 * a2 * (c10 + c12a * (2.0 * phi).cos() + c12b * (2.0 * phi).sin());
    let third = a2 * alpha / 3.0
        * (c21a * phi.cos() + c21b * phi.sin() + c23a * (3.0 * phi).cos() + c23b * (3.0 * phi).sin());
    2.0 * PI / wavelength_nm * (second + third)
}

/// Probe model with the aperture geometry precomputed for repeated PSF
/// evaluations on a fixed grid.
#[derive(Debug, Clone)]
pub struct ProbeModel {
    config: OpticalConfig,
    fft: Fft2,
    /// (flat index, α, φ) for every reciprocal-space pixel inside the aperture.
    aperture: Vec<(usize, f64, f64)>,
}

impl ProbeModel {
    pub fn new(config: OpticalConfig) -> Self {
        let n = config.grid_size;
        let dk = 1.0 / (n as f64 * config.pixel_size_nm);
        let alpha_max = config.aperture_angle();
        let mut aperture = Vec::new();
        for iy in 0..n {
            let ky = signed_index(iy, n) as f64 * dk;
            for ix in 0..n {
                let kx = signed_index(ix, n) as f64 * dk;
                let alpha = config.wavelength_nm * kx.hypot(ky);
                if alpha <= alpha_max {
                    aperture.push((iy * n + ix, alpha, ky.atan2(kx)));
                }
            }
        }
        Self {
            config,
            fft: Fft2::new(n, n),
            aperture,
        }
    }

    pub fn config(&self) -> &OpticalConfig {
        &self.config
    }

    /// Number of reciprocal-space pixels passed by the aperture.
    pub fn aperture_pixels(&self) -> usize {
        self.aperture.len()
    }

    /// |ψ(r)|² before normalization, centred at `(n/2, n/2)`.
    pub fn intensity_unnormalized(&self, state: &AberrationState) -> Vec<f64> {
        let n = self.config.grid_size;
        let mut wave = vec![Complex64::new(0.0, 0.0); n * n];
        for &(idx, alpha, phi) in &self.aperture {
            let phase = chi_with_wavelength(alpha, phi, state, self.config.wavelength_nm);
            wave[idx] = Complex64::from_polar(1.0, -phase);
        }
        self.fft.inverse(&mut wave);
        let intensity: Vec<f64> = wave.iter().map(|c| c.norm_sqr()).collect();
        fftshift(&intensity, n, n)
    }

    /// Probe PSF normalized to unit sum.
    pub fn psf(&self, state: &AberrationState) -> Image {
        let mut data = self.intensity_unnormalized(state);
        let total: f64 = data.iter().sum();
        for v in &mut data {
            *v /= total;
        }
        let n = self.config.grid_size;
        let mut image = Image::from_raw(n, n, data, self.config.pixel_size_nm);
        image.meta.state = Some(*state);
        image
    }
}

/// PSF = |IFFT(A(k)·exp(−iχ(k)))|², unit sum, centred on the grid.
pub fn probe_psf(state: &AberrationState, config: &OpticalConfig) -> Image {
    ProbeModel::new(*config).psf(state)
}
