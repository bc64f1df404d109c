//! ROM and RTM imaging functions and display post-processing.

use std::io::Write;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::forward::{simulate_response, ArrayGeometry, ForwardError, PulseSpec, ResponseSeries};
use crate::grid::{assemble_operator, LebedevGrid, MediumField, PhantomSpec};
use crate::internal_wave::{ReferenceBasis, WaveError};
use crate::linalg::BlockTriangular;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("polarization index must be 1 or 2, got {0}")]
    InvalidPolarization(u8),
    #[error("imaging grid does not fit strictly inside the {n1}×{n2} grid")]
    OutsideDomain { n1: usize, n2: usize },
    #[error("imaging point {0} is not on the grid of the basis")]
    PointOutsideBasis(usize),
    #[error("reference Green fields missing or too short: have {have}, need {need}")]
    MissingGreens { have: usize, need: usize },
    #[error("no imaging points in the {0} region")]
    EmptyRegion(&'static str),
    #[error(transparent)]
    Wave(#[from] WaveError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ImagingError>;

/// Lattice of family-A nodes `(i0 + a·stride, j0 + b·stride)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagingGrid {
    pub grid: LebedevGrid,
    pub i0: usize,
    pub j0: usize,
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
}

impl ImagingGrid {
    pub fn new(grid: LebedevGrid, i0: usize, j0: usize, rows: usize, cols: usize, stride: usize) -> Result<Self> {
        let last_i = i0 + (rows.max(1) - 1) * stride;
        let last_j = j0 + (cols.max(1) - 1) * stride;
        if rows == 0 || cols == 0 || stride == 0 || i0 == 0 || j0 == 0 || last_i + 1 >= grid.n1 || last_j + 1 >= grid.n2 {
            return Err(ImagingError::OutsideDomain { n1: grid.n1, n2: grid.n2 });
        }
        Ok(ImagingGrid { grid, i0, j0, rows, cols, stride })
    }

    /// Every interior node from depth `x1_min` (length units) down, full width.
    pub fn below(grid: LebedevGrid, x1_min: f64, stride: usize) -> Result<Self> {
        let i0 = ((x1_min / grid.spacing).ceil() as usize).max(1);
        let rows = grid.n1.saturating_sub(1 + i0).div_ceil(stride);
        let cols = (grid.n2 - 2).div_ceil(stride);
        Self::new(grid, i0, 1, rows, cols, stride)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node(&self, k: usize) -> usize {
        let (a, b) = (k / self.cols, k % self.cols);
        self.grid.node_a(self.i0 + a * self.stride, self.j0 + b * self.stride)
    }

    pub fn nodes(&self) -> Vec<usize> {
        (0..self.len()).map(|k| self.node(k)).collect()
    }

    pub fn position(&self, k: usize) -> (f64, f64) {
        self.grid.position(self.node(k))
    }

    /// Lattice spacing in range.
    pub fn step(&self) -> f64 {
        self.stride as f64 * self.grid.spacing
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Rom,
    Rtm,
    Ideal,
}

impl Provenance {
    fn tag(&self) -> &'static str {
        match self {
            Provenance::Rom => "rom",
            Provenance::Rtm => "rtm",
            Provenance::Ideal => "ideal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Display {
    Raw,
    RangeDerivative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageField {
    pub im: ImagingGrid,
    /// Row-major over the lattice (range index first).
    pub values: Vec<f64>,
    /// `(p′, p)`.
    pub polarization: (u8, u8),
    pub provenance: Provenance,
    pub display: Display,
}

impl ImageField {
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Lattice index of the largest `|value|`.
    pub fn argmax_abs(&self) -> usize {
        let mut best = 0;
        for (k, v) in self.values.iter().enumerate() {
            if v.abs() > self.values[best].abs() {
                best = k;
            }
        }
        best
    }

    pub fn file_stem(&self) -> String {
        let d = match self.display {
            Display::Raw => "",
            Display::RangeDerivative => "_dx1",
        };
        format!("{}_p{}{}{}", self.provenance.tag(), self.polarization.0, self.polarization.1, d)
    }

    fn normalized(&self) -> Vec<f64> {
        let s = self.max_abs();
        let s = if s > 0.0 { s } else { 1.0 };
        self.values.iter().map(|v| v / s).collect()
    }

    /// CSV `x1,x2,value`, normalized by the largest magnitude.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x1,x2,value\n");
        for (k, v) in self.normalized().iter().enumerate() {
            let (x1, x2) = self.position(k);
            out.push_str(&format!("{x1},{x2},{v}\n"));
        }
        out
    }

    fn position(&self, k: usize) -> (f64, f64) {
        self.im.position(k)
    }

    /// Binary 8-bit graymap, range down the page.
    pub fn write_pgm(&self, w: &mut impl Write) -> Result<()> {
        let v = self.normalized();
        let lo = v.iter().copied().fold(0.0, f64::min);
        let hi = v.iter().copied().fold(0.0, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        write!(w, "P5\n{} {}\n255\n", self.im.cols, self.im.rows)?;
        let bytes: Vec<u8> = v.iter().map(|x| (255.0 * (x - lo) / span).round() as u8).collect();
        w.write_all(&bytes)?;
        Ok(())
    }
}

fn pol_index(p: u8) -> Result<usize> {
    match p {
        1 | 2 => Ok(p as usize - 1),
        _ => Err(ImagingError::InvalidPolarization(p)),
    }
}

/// `𝓘^{(p′,p)}(y) = Σ_j Σ_s |e_{p′}ᵀ u_j^{est(s,p)}(y)|²`.
pub fn rom_image(basis: &ReferenceBasis, r_data: &BlockTriangular, p: u8, p_prime: u8, im: &ImagingGrid) -> Result<ImageField> {
    image_from_basis(basis, r_data, p, p_prime, im, Provenance::Rom)
}

/// Imaging function with the true internal wave (`c̃` = truth, `R = R(c̃)`).
pub fn ideal_image(basis: &ReferenceBasis, p: u8, p_prime: u8, im: &ImagingGrid) -> Result<ImageField> {
    image_from_basis(basis, basis.r_ref(), p, p_prime, im, Provenance::Ideal)
}

fn image_from_basis(
    basis: &ReferenceBasis,
    r_data: &BlockTriangular,
    p: u8,
    p_prime: u8,
    im: &ImagingGrid,
    provenance: Provenance,
) -> Result<ImageField> {
    let (pi, ppi) = (pol_index(p)?, pol_index(p_prime)?);
    if im.grid != basis.grid {
        return Err(ImagingError::PointOutsideBasis(0));
    }
    let dofs: Vec<usize> = im.nodes().iter().map(|&node| 2 * node + ppi).collect();
    let est = basis.estimate_rows(r_data, &dofs)?;
    let b = basis.block_size();
    let m = b / 2;
    let values = (0..im.len())
        .map(|k| {
            let mut acc = 0.0;
            for j in 0..est.ncols() / b {
                for s in 0..m {
                    let v = est[(k, j * b + ArrayGeometry::column(s, pi))];
                    acc += v * v;
                }
            }
            acc
        })
        .collect();
    Ok(ImageField { im: *im, values, polarization: (p_prime, p), provenance, display: Display::Raw })
}

/// Reference fields `G(t_j, y, x_s) e_p` (pulse-convolved) on the imaging
/// lattice, `j = 0..count`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceGreens {
    pub im: ImagingGrid,
    pub tau: f64,
    /// `fields[j]` is `2·points × 2m`, row `2k + component`.
    pub fields: Vec<DMatrix<f64>>,
}

/// Dipole runs in `medium_ref` from every antenna and polarization; returns
/// the Green fields on the lattice and the reference array response.
#[allow(clippy::too_many_arguments)]
pub fn reference_greens(
    medium_ref: &MediumField,
    array: &ArrayGeometry,
    pulse: &PulseSpec,
    dt: f64,
    tau: f64,
    count: usize,
    im: &ImagingGrid,
) -> Result<(ReferenceGreens, ResponseSeries)> {
    let op = assemble_operator(medium_ref);
    let nodes = im.nodes();
    let t_end = (count.max(1) - 1) as f64 * tau + pulse.support_time();
    let (w, rec) = simulate_response(&op, array, pulse, medium_ref.c_o, dt, t_end, Some((&nodes, tau)))?;
    let mut fields = rec.map(|r| r.fields).unwrap_or_default();
    fields.truncate(count);
    Ok((ReferenceGreens { im: *im, tau, fields }, w))
}

/// `𝓘^RTM(y) = τ² Σ_{j+k ≤ K−1} w_j w_k Σ_{s,s′} g_j^{(s′,p′)}(y) · g_k^{(s,p)}(y) 𝒲^{(s′,p′),(s,p)}(t_{j+k})`,
/// with trapezoidal end weights `w_0 = ½` and `K` Green samples.
pub fn rtm_image(w: &ResponseSeries, greens: &ReferenceGreens, count: usize, p: u8, p_prime: u8) -> Result<ImageField> {
    let (pi, ppi) = (pol_index(p)?, pol_index(p_prime)?);
    if greens.fields.len() < count || count == 0 {
        return Err(ImagingError::MissingGreens { have: greens.fields.len(), need: count });
    }
    let samples = w.sampled(greens.tau, count)?;
    let m = samples[0].nrows() / 2;
    let rows: Vec<usize> = (0..m).map(|s| ArrayGeometry::column(s, ppi)).collect();
    let cols: Vec<usize> = (0..m).map(|s| ArrayGeometry::column(s, pi)).collect();
    let wsub: Vec<DMatrix<f64>> = samples.iter().map(|x| x.select_rows(&rows).select_columns(&cols)).collect();
    let weight = |j: usize| if j == 0 { 0.5 } else { 1.0 };
    let tau2 = greens.tau * greens.tau;
    let im = greens.im;
    let values = (0..im.len())
        .map(|k| {
            let gj: Vec<DMatrix<f64>> =
                greens.fields[..count].iter().map(|f| f.rows(2 * k, 2).select_columns(&rows)).collect();
            let gk: Vec<DMatrix<f64>> =
                greens.fields[..count].iter().map(|f| f.rows(2 * k, 2).select_columns(&cols)).collect();
            let mut acc = 0.0;
            for j in 0..count {
                for l in 0..count - j {
                    let c = gj[j].transpose() * &gk[l];
                    acc += weight(j) * weight(l) * c.dot(&wsub[j + l]);
                }
            }
            tau2 * acc
        })
        .collect();
    Ok(ImageField { im, values, polarization: (p_prime, p), provenance: Provenance::Rtm, display: Display::Raw })
}

/// Centered difference along range, one-sided on the first and last rows.
pub fn range_derivative(img: &ImageField) -> ImageField {
    let (rows, cols) = (img.im.rows, img.im.cols);
    let h = img.im.step();
    let at = |a: usize, b: usize| img.values[a * cols + b];
    let mut values = vec![0.0; rows * cols];
    if rows > 1 {
        for a in 0..rows {
            for b in 0..cols {
                values[a * cols + b] = if a == 0 {
                    (at(1, b) - at(0, b)) / h
                } else if a == rows - 1 {
                    (at(a, b) - at(a - 1, b)) / h
                } else {
                    (at(a + 1, b) - at(a - 1, b)) / (2.0 * h)
                };
            }
        }
    }
    ImageField { values, display: Display::RangeDerivative, ..img.clone() }
}

/// Largest `|img|` within `λ_c/2` of the phantom's regions over the largest
/// `|img|` at distance `≥ 2λ_c` from them and not shallower than their top.
/// Capped at `1e6`.
pub fn peak_to_artifact(img: &ImageField, truth: &PhantomSpec) -> Result<f64> {
    let shapes = truth.shapes_in_length_units();
    if shapes.is_empty() {
        return Err(ImagingError::EmptyRegion("reflector"));
    }
    let top = shapes.iter().map(|s| s.bounds().0 .0).fold(f64::INFINITY, f64::min);
    let lc = truth.lambda_c;
    let (mut peak, mut artifact) = (None::<f64>, None::<f64>);
    for (k, v) in img.values.iter().enumerate() {
        let x = img.im.position(k);
        let d = shapes.iter().map(|s| s.distance(x)).fold(f64::INFINITY, f64::min);
        if d <= 0.5 * lc {
            peak = Some(peak.unwrap_or(0.0).max(v.abs()));
        } else if d >= 2.0 * lc && x.0 >= top {
            artifact = Some(artifact.unwrap_or(0.0).max(v.abs()));
        }
    }
    let peak = peak.ok_or(ImagingError::EmptyRegion("reflector"))?;
    let artifact = artifact.ok_or(ImagingError::EmptyRegion("artifact"))?;
    if artifact == 0.0 {
        return Ok(if peak > 0.0 { 1e6 } else { 1.0 });
    }
    Ok((peak / artifact).min(1e6))
}

/// Distance from the largest `|img|` to the closest phantom region.
pub fn peak_offset(img: &ImageField, truth: &PhantomSpec) -> f64 {
    let x = img.im.position(img.argmax_abs());
    truth
        .shapes_in_length_units()
        .iter()
        .map(|s| s.distance(x))
        .fold(f64::INFINITY, f64::min)
}
