//! TOML run configuration. Every field has a default; [`RunConfig::resolve`]
//! fills profile-dependent values and validates, and the resolved form is
//! what a run snapshots.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpConfig;
use crate::mobo::{MoboConfig, SearchSpace};
use crate::optics::{Coefficient, OpticalConfig};
use crate::virtual_scope::{BasisAtom, LatencyModel, NoiseConfig, ScopeConfig, SpecimenParams};

pub const BENCH_LATENCY_S: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// No simulated hardware latency.
    #[default]
    Desk,
    /// Charge a fixed 4 s per acquisition.
    Bench,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpticsSection {
    pub voltage_kv: f64,
    pub convergence_mrad: f64,
    pub grid_size: usize,
    pub pixel_size_nm: f64,
}

impl Default for OpticsSection {
    fn default() -> Self {
        Self {
            voltage_kv: 60.0,
            convergence_mrad: 30.0,
            grid_size: 64,
            pixel_size_nm: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSection {
    pub position: [f64; 2],
    pub amplitude: f64,
    pub width_nm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecimenSection {
    pub lattice_constant_nm: f64,
    pub basis: Vec<BasisSection>,
}

impl Default for SpecimenSection {
    fn default() -> Self {
        let ws2 = SpecimenParams::ws2_like(1.0, 8);
        Self {
            lattice_constant_nm: ws2.lattice_constant_nm,
            basis: ws2
                .basis
                .iter()
                .map(|b| BasisSection {
                    position: b.position,
                    amplitude: b.amplitude,
                    width_nm: b.width_nm,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub enabled: bool,
    pub dose: f64,
    pub correlated_amplitude: f64,
    pub correlation_length: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        let n = NoiseConfig::default();
        Self {
            enabled: n.enabled,
            dose: n.dose,
            correlated_amplitude: n.correlated_amplitude,
            correlation_length: n.correlation_length,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceSection {
    pub coefficients: Vec<Coefficient>,
    /// Per-coefficient [lower, upper] in nm; missing entries use the defaults.
    pub bounds: BTreeMap<Coefficient, [f64; 2]>,
}

impl Default for SpaceSection {
    fn default() -> Self {
        Self {
            coefficients: vec![Coefficient::C10, Coefficient::C12a, Coefficient::C12b],
            bounds: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoboSection {
    /// Defaults to 2d + 2.
    pub n_init: Option<usize>,
    pub n_iterations: usize,
    pub mc_samples: usize,
    pub acq_candidates: usize,
    pub acq_refine: usize,
    pub gp_starts: usize,
}

impl Default for MoboSection {
    fn default() -> Self {
        Self {
            n_init: None,
            n_iterations: 25,
            mc_samples: 128,
            acq_candidates: 256,
            acq_refine: 5,
            gp_starts: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencySection {
    /// Defaults from the profile: 0 for desk, 4 s for bench.
    pub hw_seconds_per_acquire: Option<f64>,
    pub realtime: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub levels: usize,
    /// Landscapes with more vertices than this are refused.
    pub max_evaluations: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            levels: 7,
            max_evaluations: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub profile: Profile,
    pub optics: OpticsSection,
    pub specimen: SpecimenSection,
    pub noise: NoiseSection,
    pub space: SpaceSection,
    pub mobo: MoboSection,
    pub latency: LatencySection,
    pub grid: GridSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            profile: Profile::Desk,
            optics: OpticsSection::default(),
            specimen: SpecimenSection::default(),
            noise: NoiseSection::default(),
            space: SpaceSection::default(),
            mobo: MoboSection::default(),
            latency: LatencySection::default(),
            grid: GridSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format(format!("config: {e}")))
    }

    /// Fills defaults that depend on other fields and validates everything.
    pub fn resolve(mut self) -> Result<Self> {
        if self.latency.hw_seconds_per_acquire.is_none() {
            self.latency.hw_seconds_per_acquire = Some(match self.profile {
                Profile::Desk => 0.0,
                Profile::Bench => BENCH_LATENCY_S,
            });
        }
        for c in &self.space.coefficients {
            self.space.bounds.entry(*c).or_insert_with(|| {
                let (lo, hi) = c.default_range();
                [lo, hi]
            });
        }
        let unused: Vec<String> = self
            .space
            .bounds
            .keys()
            .filter(|c| !self.space.coefficients.contains(c))
            .map(|c| c.to_string())
            .collect();
        if !unused.is_empty() {
            return Err(Error::invalid(format!("bounds given for inactive coefficients: {}", unused.join(", "))));
        }
        if self.mobo.n_init.is_none() {
            self.mobo.n_init = Some(2 * self.space.coefficients.len() + 2);
        }
        self.scope_config()?;
        self.search_space()?;
        self.mobo_config()?.validate()?;
        Ok(self)
    }

    pub fn optical_config(&self) -> Result<OpticalConfig> {
        let o = &self.optics;
        OpticalConfig::new(o.voltage_kv, o.convergence_mrad, o.grid_size, o.pixel_size_nm)
    }

    pub fn noise_config(&self) -> NoiseConfig {
        NoiseConfig {
            enabled: self.noise.enabled,
            dose: self.noise.dose,
            correlated_amplitude: self.noise.correlated_amplitude,
            correlation_length: self.noise.correlation_length,
        }
    }

    pub fn scope_config(&self) -> Result<ScopeConfig> {
        let optics = self.optical_config()?;
        let mut cfg = ScopeConfig::new(optics, self.seed);
        cfg.specimen = SpecimenParams {
            lattice_constant_nm: self.specimen.lattice_constant_nm,
            basis: self
                .specimen
                .basis
                .iter()
                .map(|b| BasisAtom {
                    position: b.position,
                    amplitude: b.amplitude,
                    width_nm: b.width_nm,
                })
                .collect(),
            field_of_view_nm: optics.grid_size() as f64 * optics.pixel_size_nm(),
            grid_size: optics.grid_size(),
        };
        cfg.noise = self.noise_config();
        cfg.noise.validate()?;
        let hw = self.latency.hw_seconds_per_acquire.unwrap_or(0.0);
        if !(hw >= 0.0 && hw.is_finite()) {
            return Err(Error::invalid("hardware latency must be a finite value ≥ 0"));
        }
        cfg.latency = LatencyModel {
            hw_seconds_per_acquire: hw,
            realtime: self.latency.realtime,
        };
        for (c, [lo, hi]) in &self.space.bounds {
            let (dlo, dhi) = cfg.limits[c.index()];
            cfg.limits[c.index()] = (dlo.min(*lo), dhi.max(*hi));
        }
        Ok(cfg)
    }

    pub fn search_space(&self) -> Result<SearchSpace> {
        let axes: Vec<(Coefficient, f64, f64)> = self
            .space
            .coefficients
            .iter()
            .map(|c| {
                let [lo, hi] = self.space.bounds.get(c).copied().unwrap_or_else(|| {
                    let (lo, hi) = c.default_range();
                    [lo, hi]
                });
                (*c, lo, hi)
            })
            .collect();
        SearchSpace::new(&axes)
    }

    pub fn mobo_config(&self) -> Result<MoboConfig> {
        let space = self.search_space()?;
        let m = &self.mobo;
        let base = MoboConfig::for_space(&space, self.seed);
        Ok(MoboConfig {
            n_init: m.n_init.unwrap_or(base.n_init),
            n_iterations: m.n_iterations,
            mc_samples: m.mc_samples,
            acq_candidates: m.acq_candidates,
            acq_refine: m.acq_refine,
            gp: GpConfig {
                n_starts: m.gp_starts,
                ..base.gp.clone()
            },
            ..base
        })
    }
}
