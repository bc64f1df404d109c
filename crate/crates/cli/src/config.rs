//! Experiment configuration: a sectioned TOML document with defaults,
//! unknown keys rejected and cross-field checks.

use std::f64::consts::PI;
use std::path::PathBuf;

use serde::Deserialize;
use thiserror::Error;

use emrom::forward::{ArrayGeometry, NearDomain, PulseSpec, SpectralMethod};
use emrom::grid::{Collar, LebedevGrid, PhantomKind, PhantomSpec, Region, Shape, SpeedTensor};
use emrom::internal_wave::RunSettings;
use emrom::inversion::{InversionConfig, NuBase, ObjectiveKind, Parametrization};
use emrom::rom::Regularization;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub n1: usize,
    pub n2: usize,
    pub spacing: f64,
    pub c_o: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { n1: 100, n2: 50, spacing: 1.0, c_o: 1.0 }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PulseSection {
    /// Wavelength at the central frequency, in `ℓ`.
    pub lambda_o: f64,
    /// Explicit band parameter; otherwise set from `cutoff_db`.
    pub omega_b: Option<f64>,
    pub cutoff_db: f64,
}

impl Default for PulseSection {
    fn default() -> Self {
        PulseSection { lambda_o: 26.7, omega_b: None, cutoff_db: -25.0 }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ArraySection {
    pub m: usize,
    pub separation: f64,
    pub depth: f64,
}

impl Default for ArraySection {
    fn default() -> Self {
        ArraySection { m: 5, separation: 4.0, depth: 8.0 }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum RegularizationKind {
    None,
    Boost,
    Spectral,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Dense,
    Chebyshev,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RomSection {
    pub n: usize,
    /// `τ = tau_factor · π / ω_c` unless `tau` is given.
    pub tau_factor: f64,
    pub tau: Option<f64>,
    pub substeps: usize,
    pub regularization: RegularizationKind,
    pub threshold: f64,
    pub rank: Option<usize>,
    pub alpha: f64,
    /// Relative Gaussian noise added to the data by `simulate`.
    pub noise: f64,
    pub method: MethodKind,
}

impl Default for RomSection {
    fn default() -> Self {
        RomSection {
            n: 20,
            tau_factor: 0.3,
            tau: None,
            substeps: 16,
            regularization: RegularizationKind::Spectral,
            threshold: 1e-9,
            rank: None,
            alpha: 0.0,
            noise: 0.0,
            method: MethodKind::Chebyshev,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKindName {
    Homogeneous,
    Crack,
    MultiCrack,
    AnisoInclusions,
    Rectangle,
}

/// Region geometry in units of `λ_c`, speed tensor relative to `c_o`.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, tag = "shape", rename_all = "snake_case")]
pub enum RegionSection {
    Rect { x1: [f64; 2], x2: [f64; 2], c11: f64, c22: f64, #[serde(default)] c12: f64 },
    Ellipse { center: [f64; 2], semi_axes: [f64; 2], c11: f64, c22: f64, #[serde(default)] c12: f64 },
    Segment { start: [f64; 2], end: [f64; 2], thickness: f64, c11: f64, c22: f64, #[serde(default)] c12: f64 },
}

impl RegionSection {
    fn region(&self) -> Region {
        match *self {
            RegionSection::Rect { x1, x2, c11, c22, c12 } => Region {
                shape: Shape::Rect { x1: (x1[0], x1[1]), x2: (x2[0], x2[1]) },
                contrast: SpeedTensor::new(c11, c22, c12),
            },
            RegionSection::Ellipse { center, semi_axes, c11, c22, c12 } => Region {
                shape: Shape::Ellipse { center: (center[0], center[1]), semi_axes: (semi_axes[0], semi_axes[1]) },
                contrast: SpeedTensor::new(c11, c22, c12),
            },
            RegionSection::Segment { start, end, thickness, c11, c22, c12 } => Region {
                shape: Shape::Segment { start: (start[0], start[1]), end: (end[0], end[1]), thickness },
                contrast: SpeedTensor::new(c11, c22, c12),
            },
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub kind: PhantomKindName,
    /// Geometry unit; the pulse's `λ_c` when absent.
    pub lambda_c: Option<f64>,
    pub collar_boundary: f64,
    pub array_band: f64,
    pub regions: Vec<RegionSection>,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            kind: PhantomKindName::Homogeneous,
            lambda_c: None,
            collar_boundary: 4.0,
            array_band: 16.0,
            regions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ImagingSection {
    /// Top of the imaging window in `λ_c`.
    pub x1_min: f64,
    pub stride: usize,
    /// Pairs `(p′, p)`.
    pub polarizations: Vec<[u8; 2]>,
    pub rtm: bool,
    /// Deepest point to image, in `ℓ` below the array; checked against `n c_o τ`.
    pub depth: Option<f64>,
}

impl Default for ImagingSection {
    fn default() -> Self {
        ImagingSection { x1_min: 1.0, stride: 1, polarizations: vec![[2, 2]], rtm: false, depth: None }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveName {
    Rom,
    Fwi,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum NuBaseName {
    Basis,
    Unknowns,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct InversionSection {
    pub objective: ObjectiveName,
    pub fd_step: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub nu_fraction: f64,
    /// `ν` is the eigenvalue of `JᵀJ` at `nu_fraction` times this count.
    pub nu_base: NuBaseName,
    pub schedule: Vec<usize>,
    /// Lattice extent in `ℓ`; the whole domain inside the collar when absent.
    pub x1: Option<[f64; 2]>,
    pub x2: Option<[f64; 2]>,
    /// Lattice spacings in `ℓ`; `(λ_c/4, 5λ_c/16)` when absent.
    pub lattice_spacing: Option<[f64; 2]>,
    pub sigma: [f64; 2],
}

impl Default for InversionSection {
    fn default() -> Self {
        let d = InversionConfig::default();
        InversionSection {
            objective: ObjectiveName::Rom,
            fd_step: d.fd_step,
            max_iterations: d.max_iterations,
            tolerance: d.tolerance,
            nu_fraction: d.nu_fraction,
            nu_base: NuBaseName::Basis,
            schedule: Vec::new(),
            x1: None,
            x2: None,
            lattice_spacing: None,
            sigma: [2.3, 2.9],
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection { output_dir: PathBuf::from("out"), seed: 1 }
    }
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub grid: GridSection,
    pub pulse: PulseSection,
    pub array: ArraySection,
    pub rom: RomSection,
    pub phantom: PhantomSection,
    pub imaging: ImagingSection,
    pub inversion: InversionSection,
    pub io: IoSection,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
        line: e.span().map_or(0, |s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

impl ExperimentConfig {
    pub fn grid(&self) -> LebedevGrid {
        LebedevGrid::new(self.grid.n1, self.grid.n2, self.grid.spacing).expect("validated grid")
    }

    pub fn pulse(&self) -> PulseSpec {
        let omega_o = 2.0 * PI * self.grid.c_o / self.pulse.lambda_o;
        match self.pulse.omega_b {
            Some(b) => PulseSpec::new(omega_o, b),
            None => PulseSpec::with_cutoff(omega_o, self.pulse.cutoff_db),
        }
    }

    pub fn lambda_c(&self) -> f64 {
        self.pulse().lambda_c(self.grid.c_o)
    }

    pub fn tau(&self) -> f64 {
        self.rom.tau.unwrap_or(self.rom.tau_factor * PI / self.pulse().omega_c)
    }

    pub fn run(&self) -> RunSettings {
        RunSettings {
            tau: self.tau(),
            substeps: self.rom.substeps,
            near: NearDomain { depth: f64::INFINITY, min_margin: 0.0 },
            method: match self.rom.method {
                MethodKind::Dense => SpectralMethod::Dense,
                MethodKind::Chebyshev => SpectralMethod::Chebyshev,
            },
        }
    }

    pub fn array(&self) -> Result<ArrayGeometry, ConfigError> {
        ArrayGeometry::linear(&self.grid(), self.array.m, self.array.separation, self.array.depth)
            .map_err(|e| ConfigError::Validation(e.to_string()))
    }

    pub fn regularization(&self) -> Regularization {
        match self.rom.regularization {
            RegularizationKind::None => Regularization::None,
            RegularizationKind::Boost => Regularization::Boost { alpha: self.rom.alpha },
            RegularizationKind::Spectral => Regularization::Spectral { threshold: self.rom.threshold, rank: self.rom.rank },
        }
    }

    pub fn phantom(&self) -> PhantomSpec {
        let regions: Vec<Region> = self.phantom.regions.iter().map(RegionSection::region).collect();
        let first = || regions.first().cloned().expect("validated region count");
        let kind = match self.phantom.kind {
            PhantomKindName::Homogeneous => PhantomKind::Homogeneous,
            PhantomKindName::Crack => PhantomKind::Crack(first()),
            PhantomKindName::Rectangle => PhantomKind::RectangleInclusion(first()),
            PhantomKindName::MultiCrack => PhantomKind::MultiCrack(regions.clone()),
            PhantomKindName::AnisoInclusions => PhantomKind::AnisoInclusions(regions.clone()),
        };
        PhantomSpec {
            kind,
            lambda_c: self.phantom.lambda_c.unwrap_or_else(|| self.lambda_c()),
            collar: Collar { boundary: self.phantom.collar_boundary, array_band: self.phantom.array_band },
        }
    }

    pub fn inversion_config(&self) -> InversionConfig {
        let s = &self.inversion;
        InversionConfig {
            objective: match s.objective {
                ObjectiveName::Rom => ObjectiveKind::Rom,
                ObjectiveName::Fwi => ObjectiveKind::Fwi,
            },
            fd_step: s.fd_step,
            max_iterations: s.max_iterations,
            tolerance: s.tolerance,
            nu_fraction: s.nu_fraction,
            nu_base: match s.nu_base {
                NuBaseName::Basis => NuBase::Basis,
                NuBaseName::Unknowns => NuBase::Unknowns,
            },
            schedule: s.schedule.clone(),
            ..InversionConfig::default()
        }
    }

    pub fn parametrization(&self) -> Result<Parametrization, ConfigError> {
        let s = &self.inversion;
        let (l1, l2) = self.grid().extent();
        let b = self.phantom.collar_boundary;
        let x1 = s.x1.unwrap_or([self.phantom.array_band.max(b), l1 - b]);
        let x2 = s.x2.unwrap_or([b, l2 - b]);
        let lc = self.lambda_c();
        let spacing = s.lattice_spacing.unwrap_or([lc / 4.0, 5.0 * lc / 16.0]);
        let sp = self.grid.spacing;
        Parametrization::lattice(
            (x1[0], x1[1]),
            (x2[0], x2[1]),
            (spacing[0], spacing[1]),
            (s.sigma[0] * sp, s.sigma[1] * sp),
            self.grid.c_o,
        )
        .map_err(|e| ConfigError::Validation(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Validation(m));
        if LebedevGrid::new(self.grid.n1, self.grid.n2, self.grid.spacing).is_err() {
            return fail(format!("grid {}×{} with spacing {}", self.grid.n1, self.grid.n2, self.grid.spacing));
        }
        if !(self.grid.c_o > 0.0) || !(self.pulse.lambda_o > 0.0) {
            return fail("c_o and lambda_o must be positive".into());
        }
        if self.rom.n == 0 || self.rom.substeps == 0 {
            return fail("rom.n and rom.substeps must be positive".into());
        }
        let pulse = self.pulse();
        let tau = self.tau();
        if !(tau > 0.0) || tau > PI / pulse.omega_o {
            return fail(format!("τ = {tau} exceeds the Nyquist bound π/ω_o = {}", PI / pulse.omega_o));
        }
        if let Some(depth) = self.imaging.depth {
            let reach = self.rom.n as f64 * self.grid.c_o * tau;
            if reach < depth {
                return fail(format!("n·c_o·τ = {reach} is less than the imaging depth L = {depth}"));
            }
        }
        if self.array.m > 1 && self.array.separation < self.grid.spacing {
            return fail(format!("antenna separation {} is below the grid spacing {}", self.array.separation, self.grid.spacing));
        }
        self.array()?;
        let regions = self.phantom.regions.len();
        let needed = match self.phantom.kind {
            PhantomKindName::Homogeneous => regions == 0,
            PhantomKindName::Crack | PhantomKindName::Rectangle => regions == 1,
            PhantomKindName::MultiCrack | PhantomKindName::AnisoInclusions => regions >= 1,
        };
        if !needed {
            return fail(format!("phantom kind {:?} does not accept {regions} regions", self.phantom.kind));
        }
        for [pp, p] in &self.imaging.polarizations {
            if !(1..=2).contains(pp) || !(1..=2).contains(p) {
                return fail(format!("polarization ({pp}, {p}) must use indices 1 and 2"));
            }
        }
        if self.imaging.stride == 0 {
            return fail("imaging.stride must be positive".into());
        }
        self.inversion_config().validate(self.rom.n).map_err(|e| ConfigError::Validation(e.to_string()))?;
        Ok(())
    }
}
