//! The simulated instrument: a periodic hexagonal two-sublattice specimen,
//! PSF convolution, correlated-Gaussian + Poisson corruption, and a latency
//! ledger. [`VirtualScope::acquire`] is the only entry point an optimizer
//! needs.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft2::{ifftshift, signed_index, to_complex, Fft2};
use crate::image::Image;
use crate::optics::{AberrationState, Coefficient, OpticalConfig, ProbeModel};
use crate::seeding::{derive_seed, SeedRole};

/// One basis site given in fractional coordinates of the primitive vectors
/// a₁ = (a, 0), a₂ = (a/2, a√3/2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisAtom {
    pub position: [f64; 2],
    pub amplitude: f64,
    pub width_nm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecimenParams {
    pub lattice_constant_nm: f64,
    pub basis: Vec<BasisAtom>,
    pub field_of_view_nm: f64,
    pub grid_size: usize,
}

impl SpecimenParams {
    /// WS₂-like honeycomb: a heavy metal column and a lighter chalcogen pair.
    pub fn ws2_like(field_of_view_nm: f64, grid_size: usize) -> Self {
        Self {
            lattice_constant_nm: 0.315,
            basis: vec![
                BasisAtom {
                    position: [0.0, 0.0],
                    amplitude: 1.0,
                    width_nm: 0.03,
                },
                BasisAtom {
                    position: [1.0 / 3.0, 1.0 / 3.0],
                    amplitude: 0.6,
                    width_nm: 0.03,
                },
            ],
            field_of_view_nm,
            grid_size,
        }
    }
}

/// Projected potential on a periodic square grid. The hexagonal lattice is
/// fitted to the field of view with a whole number of rectangular
/// (a × a√3) cells along each axis, so wrap-around is seamless.
#[derive(Debug, Clone)]
pub struct Specimen {
    pub params: SpecimenParams,
    /// Rectangular cells along x and y.
    pub cells: (usize, usize),
    /// Fitted rectangular cell size in nm (x, y).
    pub cell_size: (f64, f64),
    pub atoms: Vec<([f64; 2], BasisAtom)>,
    pub potential: Image,
}

impl Specimen {
    /// Number of primitive cells in the field of view.
    pub fn primitive_cells(&self) -> usize {
        2 * self.cells.0 * self.cells.1
    }
}

pub fn build_specimen(params: SpecimenParams) -> Result<Specimen> {
    let a = params.lattice_constant_nm;
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::invalid("lattice constant must be positive"));
    }
    if params.basis.is_empty() {
        return Err(Error::invalid("specimen basis is empty"));
    }
    for atom in &params.basis {
        if !(atom.amplitude >= 0.0 && atom.width_nm > 0.0) {
            return Err(Error::invalid("basis amplitudes must be ≥ 0 and widths > 0"));
        }
    }
    let fov = params.field_of_view_nm;
    if !(fov >= 4.0 * a * (1.0 - 1e-9)) {
        return Err(Error::invalid(format!(
            "field of view {fov} nm spans fewer than 4 unit cells of {a} nm"
        )));
    }
    let n = params.grid_size;
    if n == 0 {
        return Err(Error::invalid("grid size must be positive"));
    }
    let rect_h = a * 3f64.sqrt();
    let nx = (fov / a).round().max(1.0) as usize;
    let ny = (fov / rect_h).round().max(1.0) as usize;
    let (cx, cy) = (fov / nx as f64, fov / ny as f64);
    let (sx, sy) = (cx / a, cy / rect_h);

    // Positions inside one rectangular cell: each primitive basis site and
    // its copy shifted by the centring vector (a/2, a√3/2).
    let mut cell_sites = Vec::new();
    for atom in &params.basis {
        let [u, v] = atom.position;
        let base = [u * a + 0.5 * v * a, v * 0.5 * rect_h];
        for shift in [[0.0, 0.0], [0.5 * a, 0.5 * rect_h]] {
            let px = (base[0] + shift[0]).rem_euclid(a);
            let py = (base[1] + shift[1]).rem_euclid(rect_h);
            cell_sites.push(([px * sx, py * sy], *atom));
        }
    }
    let mut atoms = Vec::with_capacity(cell_sites.len() * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            for (p, atom) in &cell_sites {
                atoms.push(([p[0] + i as f64 * cx, p[1] + j as f64 * cy], *atom));
            }
        }
    }

    let dx = fov / n as f64;
    let mut data = vec![0.0; n * n];
    for (pos, atom) in &atoms {
        let cutoff = 8.0 * atom.width_nm;
        let inv = 1.0 / (2.0 * atom.width_nm * atom.width_nm);
        let reach = (cutoff / dx).ceil() as i64;
        let (px, py) = (pos[0] / dx, pos[1] / dx);
        let (ix0, iy0) = (px.round() as i64, py.round() as i64);
        for iy in iy0 - reach..=iy0 + reach {
            let ddy = (iy as f64 - py) * dx;
            let row = iy.rem_euclid(n as i64) as usize;
            for ix in ix0 - reach..=ix0 + reach {
                let ddx = (ix as f64 - px) * dx;
                let r2 = ddx * ddx + ddy * ddy;
                if r2 <= cutoff * cutoff {
                    data[row * n + ix.rem_euclid(n as i64) as usize] += atom.amplitude * (-r2 * inv).exp();
                }
            }
        }
    }
    let potential = Image::new(n, n, data, dx)?;
    Ok(Specimen {
        params,
        cells: (nx, ny),
        cell_size: (cx, cy),
        atoms,
        potential,
    })
}

/// Circular convolution of `specimen` with a PSF centred at `(h/2, w/2)`.
pub fn render_clean(specimen: &Image, psf: &Image) -> Result<Image> {
    if specimen.width != psf.width || specimen.height != psf.height {
        return Err(Error::invalid(format!(
            "specimen is {}×{} but PSF is {}×{}",
            specimen.width, specimen.height, psf.width, psf.height
        )));
    }
    let fft = Fft2::new(specimen.width, specimen.height);
    Ok(render_with(specimen, psf, &fft))
}

fn render_with(specimen: &Image, psf: &Image, fft: &Fft2) -> Image {
    let (w, h) = (specimen.width, specimen.height);
    let mut spec = to_complex(&specimen.data);
    let mut kernel = to_complex(&ifftshift(&psf.data, w, h));
    fft.forward(&mut spec);
    fft.forward(&mut kernel);
    for (s, k) in spec.iter_mut().zip(&kernel) {
        *s *= k;
    }
    fft.inverse(&mut spec);
    let norm = 1.0 / (w * h) as f64;
    let data = spec.iter().map(|c| (c.re * norm).max(0.0)).collect();
    let mut out = Image::from_raw(w, h, data, specimen.pixel_size);
    out.meta.state = psf.meta.state;
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub enabled: bool,
    /// Expected total counts per image.
    pub dose: f64,
    /// Correlated-field std as a fraction of the clean-image std.
    pub correlated_amplitude: f64,
    /// Pixels.
    pub correlation_length: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            dose: 1e7,
            correlated_amplitude: 0.05,
            correlation_length: 8.0,
        }
    }
}

impl NoiseConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dose > 0.0 && self.dose.is_finite()) {
            return Err(Error::invalid("dose must be positive"));
        }
        if !(self.correlated_amplitude >= 0.0) {
            return Err(Error::invalid("correlated amplitude must be ≥ 0"));
        }
        if !(self.correlation_length >= 1.0) {
            return Err(Error::invalid("correlation length must be ≥ 1 pixel"));
        }
        Ok(())
    }
}

/// Inverse-transform sampling below a mean of 30, rounded Gaussian above.
fn poisson<R: Rng>(rng: &mut R, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    if mean < 30.0 {
        let u: f64 = rng.random();
        let mut p = (-mean).exp();
        let mut cdf = p;
        let mut k = 0u32;
        while u > cdf && k < 1000 {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
        }
        k as f64
    } else {
        let z: f64 = rng.sample(StandardNormal);
        (mean + mean.sqrt() * z).round().max(0.0)
    }
}

/// Adds a low-pass Gaussian field, then draws Poisson counts at the
/// configured dose. Deterministic for a fixed seed.
pub fn corrupt(image: &Image, noise: &NoiseConfig, seed: u64) -> Image {
    if !noise.enabled {
        return image.clone();
    }
    let fft = Fft2::new(image.width, image.height);
    corrupt_with(image, noise, seed, &fft)
}

fn corrupt_with(image: &Image, noise: &NoiseConfig, seed: u64, fft: &Fft2) -> Image {
    let (w, h) = (image.width, image.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = image.data.clone();

    if noise.correlated_amplitude > 0.0 {
        let mut field: Vec<Complex64> = (0..w * h)
            .map(|_| Complex64::new(rng.sample(StandardNormal), 0.0))
            .collect();
        fft.forward(&mut field);
        let sigma = 1.0 / noise.correlation_length;
        let inv = 1.0 / (2.0 * sigma * sigma);
        for y in 0..h {
            let fy = signed_index(y, h) as f64 / h as f64;
            for x in 0..w {
                let fx = signed_index(x, w) as f64 / w as f64;
                field[y * w + x] *= (-(fx * fx + fy * fy) * inv).exp();
            }
        }
        fft.inverse(&mut field);
        let re: Vec<f64> = field.iter().map(|c| c.re).collect();
        let mean = re.iter().sum::<f64>() / re.len() as f64;
        let std = (re.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / re.len() as f64).sqrt();
        let target = noise.correlated_amplitude * image.std_dev();
        if std > 0.0 {
            for (v, r) in values.iter_mut().zip(&re) {
                *v += (r - mean) / std * target;
            }
        }
    }

    for v in &mut values {
        *v = v.max(0.0);
    }
    let total: f64 = values.iter().sum();
    let gain = if total > 0.0 { noise.dose / total } else { 0.0 };
    let data = values.iter().map(|v| poisson(&mut rng, v * gain)).collect();
    let mut out = Image::from_raw(w, h, data, image.pixel_size);
    out.meta = image.meta.clone();
    out.meta.seed = Some(seed);
    out.meta.dose = Some(noise.dose);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LatencyModel {
    pub hw_seconds_per_acquire: f64,
    /// Actually wait for the latency instead of only charging it.
    pub realtime: bool,
}

impl LatencyModel {
    /// Fixed ≈4 s per acquisition, charged but not slept.
    pub fn bench() -> Self {
        Self {
            hw_seconds_per_acquire: 4.0,
            realtime: false,
        }
    }
}

/// Result of one simulated acquisition.
#[derive(Debug, Clone)]
pub struct Acquisition {
    pub image: Image,
    /// Simulated latency plus measured compute.
    pub hw_seconds: f64,
    pub seed: u64,
    pub call_index: u64,
}

/// Anything that turns an aberration state into an image.
pub trait Instrument {
    fn acquire(&mut self, state: &AberrationState) -> Result<Acquisition>;
}

#[derive(Debug, Clone)]
pub struct ScopeConfig {
    pub optics: OpticalConfig,
    pub specimen: SpecimenParams,
    pub noise: NoiseConfig,
    pub latency: LatencyModel,
    /// Allowed (lower, upper) range per coefficient, indexed like [`Coefficient::ALL`].
    pub limits: [(f64, f64); 7],
    pub master_seed: u64,
}

impl ScopeConfig {
    pub fn new(optics: OpticalConfig, master_seed: u64) -> Self {
        let fov = optics.grid_size() as f64 * optics.pixel_size_nm();
        Self {
            specimen: SpecimenParams::ws2_like(fov, optics.grid_size()),
            optics,
            noise: NoiseConfig::default(),
            latency: LatencyModel::default(),
            limits: Coefficient::ALL.map(Coefficient::default_range),
            master_seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VirtualScope {
    probe: ProbeModel,
    specimen: Specimen,
    noise: NoiseConfig,
    latency: LatencyModel,
    limits: [(f64, f64); 7],
    master_seed: u64,
    calls: u64,
    fft: Fft2,
}

impl VirtualScope {
    pub fn new(config: ScopeConfig) -> Result<Self> {
        config.noise.validate()?;
        if !(config.latency.hw_seconds_per_acquire >= 0.0) {
            return Err(Error::invalid("hardware latency must be ≥ 0"));
        }
        let n = config.optics.grid_size();
        if config.specimen.grid_size != n {
            return Err(Error::invalid("specimen and optics grids differ"));
        }
        let fov = n as f64 * config.optics.pixel_size_nm();
        if (config.specimen.field_of_view_nm - fov).abs() > 1e-9 * fov {
            return Err(Error::invalid("specimen field of view must equal grid × pixel size"));
        }
        for (c, (lo, hi)) in Coefficient::ALL.iter().zip(config.limits) {
            if !(lo <= 0.0 && 0.0 <= hi && lo < hi) {
                return Err(Error::invalid(format!("{c} limits [{lo}, {hi}] must bracket zero")));
            }
        }
        Ok(Self {
            probe: ProbeModel::new(config.optics),
            specimen: build_specimen(config.specimen)?,
            noise: config.noise,
            latency: config.latency,
            limits: config.limits,
            master_seed: config.master_seed,
            calls: 0,
            fft: Fft2::new(n, n),
        })
    }

    pub fn specimen(&self) -> &Specimen {
        &self.specimen
    }

    pub fn optics(&self) -> &OpticalConfig {
        self.probe.config()
    }

    pub fn noise(&self) -> &NoiseConfig {
        &self.noise
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn latency(&self) -> &LatencyModel {
        &self.latency
    }

    pub fn check_bounds(&self, state: &AberrationState) -> Result<()> {
        for c in Coefficient::ALL {
            let (lower, upper) = self.limits[c.index()];
            let value = state.get(c);
            if !(lower..=upper).contains(&value) {
                return Err(Error::OutOfBounds {
                    coefficient: c,
                    value,
                    lower,
                    upper,
                });
            }
        }
        Ok(())
    }

    /// Noise-free image; a pure function of the state.
    pub fn render(&self, state: &AberrationState) -> Result<Image> {
        self.check_bounds(state)?;
        let psf = self.probe.psf(state);
        Ok(render_with(&self.specimen.potential, &psf, &self.fft))
    }

    /// Noisy image for an explicit noise seed, without touching the call counter.
    pub fn render_noisy(&self, state: &AberrationState, seed: u64) -> Result<Image> {
        let clean = self.render(state)?;
        Ok(if self.noise.enabled {
            corrupt_with(&clean, &self.noise, seed, &self.fft)
        } else {
            clean
        })
    }
}

impl Instrument for VirtualScope {
    fn acquire(&mut self, state: &AberrationState) -> Result<Acquisition> {
        let started = Instant::now();
        let call_index = self.calls;
        let seed = derive_seed(self.master_seed, call_index, SeedRole::Acquire);
        let mut image = self.render_noisy(state, seed)?;
        self.calls += 1;
        image.meta.state = Some(*state);
        image.meta.seed = Some(seed);
        if self.latency.realtime && self.latency.hw_seconds_per_acquire > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(self.latency.hw_seconds_per_acquire));
        }
        let compute = if self.latency.realtime {
            started.elapsed().as_secs_f64()
        } else {
            started.elapsed().as_secs_f64() + self.latency.hw_seconds_per_acquire
        };
        Ok(Acquisition {
            image,
            hw_seconds: compute,
            seed,
            call_index,
        })
    }
}
