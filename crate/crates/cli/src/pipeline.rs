//! Subcommand implementations and on-disk artifacts.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use emrom::forward::{
    add_noise, compute_data, simulate_response, transform_response, DataSeries, ForwardError, ResponseSeries,
};
use emrom::grid::{assemble_operator, build_medium, GridError, MediumField};
use emrom::imaging::{range_derivative, reference_greens, rom_image, rtm_image, ImageField, ImagingError, ImagingGrid};
use emrom::internal_wave::{medium_snapshots, ReferenceBasis, WaveError};
use emrom::inversion::{invert, ForwardContext, InversionError, Parametrization};
use emrom::rom::{build_rom_from_data, verify_interpolation, Regularization, Rom, RomError};

use crate::config::{parse_config, ConfigError, ExperimentConfig};

pub const DATA_FILE: &str = "data.romd";
pub const RESPONSE_FILE: &str = "response.romw";
pub const ROM_FILE: &str = "rom.romr";
pub const REPORT_FILE: &str = "rom_report.json";
pub const ALPHA_FILE: &str = "alpha.json";
pub const LOG_FILE: &str = "inversion_log.jsonl";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing artifact {}: run `emrom {producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Rom(#[from] RomError),
    #[error(transparent)]
    Wave(#[from] WaveError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Inversion(#[from] InversionError),
    #[error("{0}")]
    Failed(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(parse_config(&text)?)
}

fn output_dir(config: &ExperimentConfig) -> Result<PathBuf> {
    let dir = config.io.output_dir.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn open_artifact(path: &Path, producer: &'static str) -> Result<BufReader<File>> {
    if !path.exists() {
        return Err(CliError::MissingArtifact { path: path.to_path_buf(), producer });
    }
    Ok(BufReader::new(File::open(path).map_err(io_err(path))?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(io_err(path))
}

/// Gaussian-basis coefficients with the lattice they refer to.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AlphaFile {
    pub centers: Vec<[f64; 2]>,
    pub sigma: [f64; 2],
    pub c_o: f64,
    pub alpha: Vec<f64>,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub converged: bool,
}

impl AlphaFile {
    pub fn parametrization(&self) -> Result<Parametrization> {
        let centers = self.centers.iter().map(|c| (c[0], c[1])).collect();
        Ok(Parametrization::new(centers, self.sigma[0], self.sigma[1], self.c_o)?)
    }

    pub fn medium(&self, config: &ExperimentConfig) -> Result<MediumField> {
        let param = self.parametrization()?;
        if self.alpha.len() != param.num_params() {
            return Err(CliError::Failed(format!(
                "alpha has {} coefficients, lattice needs {}",
                self.alpha.len(),
                param.num_params()
            )));
        }
        Ok(param.medium(&DVector::from_column_slice(&self.alpha), &config.grid())?)
    }
}

pub fn read_alpha(path: &Path) -> Result<AlphaFile> {
    let r = open_artifact(path, "invert")?;
    serde_json::from_reader(r).map_err(|source| CliError::Json { path: path.to_path_buf(), source })
}

pub fn read_data(dir: &Path) -> Result<DataSeries> {
    let path = dir.join(DATA_FILE);
    let mut r = open_artifact(&path, "simulate")?;
    Ok(DataSeries::read_from(&mut r)?)
}

/// One component (`0` c11, `1` c22, `2` c12) of a medium on the family-A
/// lattice as an 8-bit graymap, range down the page.
pub fn write_medium_pgm(medium: &MediumField, component: usize, w: &mut impl Write) -> std::io::Result<()> {
    let grid = medium.grid;
    let values: Vec<f64> = (0..grid.num_a())
        .map(|k| {
            let t = medium.tensors[k];
            [t.c11, t.c22, t.c12][component]
        })
        .collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    write!(w, "P5\n{} {}\n255\n", grid.n2, grid.n1)?;
    let bytes: Vec<u8> = values.iter().map(|v| (255.0 * (v - lo) / span).round() as u8).collect();
    w.write_all(&bytes)
}

fn write_medium(dir: &Path, stem: &str, medium: &MediumField) -> Result<()> {
    write_text(&dir.join(format!("{stem}.csv")), &medium.to_csv())?;
    for (c, name) in ["c11", "c22", "c12"].iter().enumerate() {
        let path = dir.join(format!("{stem}_{name}.pgm"));
        let mut w = create(&path)?;
        write_medium_pgm(medium, c, &mut w).map_err(io_err(&path))?;
        finish(w, &path)?;
    }
    Ok(())
}

fn write_image(dir: &Path, img: &ImageField) -> Result<()> {
    let stem = img.file_stem();
    write_text(&dir.join(format!("{stem}.csv")), &img.to_csv())?;
    let path = dir.join(format!("{stem}.pgm"));
    let mut w = create(&path)?;
    img.write_pgm(&mut w)?;
    finish(w, &path)
}

/// Data in the configured phantom; with `response`, through the measured
/// array response, which is also stored.
pub fn simulate(config: &ExperimentConfig, response: bool) -> Result<Vec<PathBuf>> {
    let dir = output_dir(config)?;
    let grid = config.grid();
    let medium = build_medium(&config.phantom(), &grid, config.grid.c_o)?;
    let array = config.array()?;
    let pulse = config.pulse();
    let run = config.run();
    let n = config.rom.n;
    let mut written = Vec::new();
    let data = if response {
        let op = assemble_operator(&medium);
        let t_end = (2 * n - 1) as f64 * run.tau + pulse.support_time();
        let (w, _) = simulate_response(&op, &array, &pulse, config.grid.c_o, run.dt(), t_end, None)?;
        let path = dir.join(RESPONSE_FILE);
        let mut f = create(&path)?;
        w.write_to(&mut f)?;
        finish(f, &path)?;
        written.push(path);
        transform_response(&w, &pulse, config.grid.c_o, run.tau, 2 * n)?
    } else {
        let snaps = medium_snapshots(&medium, &array, &pulse, &run, 2 * n)?;
        compute_data(&snaps, &snaps[0], run.tau)?
    };
    let data = if config.rom.noise > 0.0 { add_noise(&data, config.rom.noise, config.io.seed) } else { data };
    let path = dir.join(DATA_FILE);
    let mut f = create(&path)?;
    data.write_to(&mut f)?;
    finish(f, &path)?;
    written.push(path);
    write_text(&dir.join("data.csv"), &data.to_csv())?;
    write_medium(&dir, "medium", &medium)?;
    written.push(dir.join("medium.csv"));
    Ok(written)
}

#[derive(Debug, Serialize)]
struct ReportJson {
    order: usize,
    requested_order: usize,
    block_size: usize,
    tau: f64,
    regularization: &'static str,
    regularization_parameter: f64,
    max_residual: f64,
    last_residual: f64,
    residuals: Vec<f64>,
    off_tridiagonal: f64,
    p_norm: f64,
}

/// Builds the ROM from stored data and reports its interpolation residuals.
pub fn rom(config: &ExperimentConfig) -> Result<Rom> {
    let dir = output_dir(config)?;
    let data = read_data(&dir)?;
    let rom = build_rom_from_data(&data, &config.regularization())?;
    let report = verify_interpolation(&rom, &data);
    let path = dir.join(ROM_FILE);
    let mut f = create(&path)?;
    rom.write_to(&mut f)?;
    finish(f, &path)?;
    let json = ReportJson {
        order: rom.order(),
        requested_order: data.n(),
        block_size: rom.block_size(),
        tau: rom.tau,
        regularization: match rom.record.method {
            0 => "none",
            1 => "boost",
            _ => "spectral",
        },
        regularization_parameter: rom.record.parameter,
        max_residual: report.max_residual,
        last_residual: report.last_residual,
        residuals: report.residuals,
        off_tridiagonal: report.off_tridiagonal,
        p_norm: report.p_norm,
    };
    let path = dir.join(REPORT_FILE);
    let text = serde_json::to_string_pretty(&json).map_err(|source| CliError::Json { path: path.clone(), source })?;
    write_text(&path, &text)?;
    Ok(rom)
}

/// ROM images (and their range derivatives) per polarization pair in the
/// reference medium `c_o I` or the one described by `reference`; RTM from
/// the stored response when configured.
pub fn image(config: &ExperimentConfig, reference: Option<&Path>) -> Result<Vec<ImageField>> {
    let dir = output_dir(config)?;
    let rom_path = dir.join(ROM_FILE);
    let rom = Rom::read_from(&mut open_artifact(&rom_path, "rom")?)?;
    let grid = config.grid();
    let medium_ref = match reference {
        Some(path) => read_alpha(path)?.medium(config)?,
        None => MediumField::homogeneous(grid, config.grid.c_o),
    };
    let array = config.array()?;
    let pulse = config.pulse();
    let run = config.run();
    let im = ImagingGrid::below(grid, config.imaging.x1_min * config.lambda_c(), config.imaging.stride)?;
    let mut images = Vec::new();
    let threshold = match config.regularization() {
        Regularization::Spectral { threshold, .. } => threshold,
        _ => 1e-9,
    };
    let reg = Regularization::Spectral { threshold, rank: Some(rom.order() * rom.block_size()) };
    let basis = ReferenceBasis::compute(&medium_ref, &array, &pulse, &run, rom.n, &reg)?;
    for &[pp, p] in &config.imaging.polarizations {
        let img = rom_image(&basis, &rom.r, p, pp, &im)?;
        images.push(range_derivative(&img));
        images.push(img);
    }
    if config.imaging.rtm {
        let path = dir.join(RESPONSE_FILE);
        if !path.exists() {
            return Err(CliError::MissingArtifact { path, producer: "simulate --response" });
        }
        let w = ResponseSeries::read_from(&mut open_artifact(&path, "simulate --response")?)?;
        let count = 2 * rom.n;
        let (greens, _) = reference_greens(&medium_ref, &array, &pulse, run.dt(), run.tau, count, &im)?;
        for &[pp, p] in &config.imaging.polarizations {
            let img = rtm_image(&w, &greens, count, p, pp)?;
            images.push(range_derivative(&img));
            images.push(img);
        }
    }
    for img in &images {
        write_image(&dir, img)?;
    }
    Ok(images)
}

/// Gauss–Newton estimate of the wave speed from stored data.
pub fn invert_command(config: &ExperimentConfig) -> Result<AlphaFile> {
    let dir = output_dir(config)?;
    let data = read_data(&dir)?;
    let param = config.parametrization()?;
    let context = ForwardContext {
        grid: config.grid(),
        array: config.array()?,
        pulse: config.pulse(),
        run: config.run(),
        n: data.n(),
        regularization: config.regularization(),
    };
    let result = invert(&data, &context, &config.inversion_config(), &param)?;
    let alpha = AlphaFile {
        centers: param.centers.iter().map(|c| [c.0, c.1]).collect(),
        sigma: [param.sigma1, param.sigma2],
        c_o: param.c_o,
        alpha: result.alpha.iter().copied().collect(),
        initial_objective: result.initial_objective,
        final_objective: result.final_objective,
        converged: result.converged,
    };
    let path = dir.join(ALPHA_FILE);
    let text = serde_json::to_string_pretty(&alpha).map_err(|source| CliError::Json { path: path.clone(), source })?;
    write_text(&path, &text)?;
    let mut log = String::new();
    for r in &result.log {
        let line = serde_json::json!({
            "stage": r.stage,
            "iteration": r.iteration,
            "objective": r.objective,
            "step_norm": r.step_norm,
            "nu": r.nu,
            "halvings": r.halvings,
        });
        log.push_str(&line.to_string());
        log.push('\n');
    }
    write_text(&dir.join(LOG_FILE), &log)?;
    write_medium(&dir, "estimate", &result.medium)?;
    Ok(alpha)
}
