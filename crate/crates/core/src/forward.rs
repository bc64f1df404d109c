//! Pulse model, antenna array, initial snapshot, time stepping and data
//! matrices.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::grid::{assemble_operator, DiscreteOperator, LebedevGrid, MediumField};
use crate::linalg::sym_eigen_desc;

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error("time step {dt} violates the CFL bound {bound}")]
    CflViolation { dt: f64, bound: f64 },
    #[error("snapshot spacing {tau} is not an integer multiple of the time step {dt}")]
    StepMismatch { tau: f64, dt: f64 },
    #[error("non-finite field value at step {step}")]
    NonFiniteField { step: usize },
    #[error("operator with {dofs} unknowns is too large for a dense eigensolve")]
    TooLarge { dofs: usize },
    #[error("near-array subdomain depth {depth} leaves less than {required} below the deepest antenna")]
    SubdomainTooSmall { depth: f64, required: f64 },
    #[error("antenna layout invalid: {0}")]
    InvalidArray(String),
    #[error("expected {expected} snapshots, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("response sampled with step {dt} is too coarse for snapshot spacing {tau}")]
    UndersampledInput { dt: f64, tau: f64 },
    #[error("response record ends at {end} but {needed} is required")]
    ShortRecord { end: f64, needed: f64 },
    #[error("data file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ForwardError>;

/// Gaussian-modulated pulse with spectrum
/// `f̂(ω) = (ω²/2)[exp(−(ω−ω_o)²/2ω_b²) + exp(−(ω+ω_o)²/2ω_b²)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseSpec {
    pub omega_o: f64,
    pub omega_b: f64,
    pub omega_c: f64,
}

/// Frequency samples used to synthesize `f(t)` from `f̂(ω)`.
pub const PULSE_FREQUENCY_SAMPLES: usize = 4096;

impl PulseSpec {
    pub fn new(omega_o: f64, omega_b: f64) -> Self {
        PulseSpec { omega_o, omega_b, omega_c: 5.0 / 3.0 * omega_o }
    }

    /// Pulse whose spectrum at `ω_c = 5ω_o/3` sits `cutoff_db` below its
    /// peak (amplitude decibels, `20 log₁₀`).
    pub fn with_cutoff(omega_o: f64, cutoff_db: f64) -> Self {
        let omega_c = 5.0 / 3.0 * omega_o;
        let target = 10f64.powf(-cutoff_db.abs() / 20.0);
        let ratio = |wb: f64| {
            let p = PulseSpec { omega_o, omega_b: wb, omega_c };
            p.spectrum(omega_c) / p.spectrum_peak()
        };
        let (mut lo, mut hi) = (1e-3 * omega_o, omega_o);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if ratio(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        PulseSpec { omega_o, omega_b: 0.5 * (lo + hi), omega_c }
    }

    /// Pulse with central wavelength `λ_o` and a −25 dB cutoff.
    pub fn from_wavelength(lambda_o: f64, c_o: f64) -> Self {
        Self::with_cutoff(2.0 * PI * c_o / lambda_o, 25.0)
    }

    pub fn spectrum(&self, omega: f64) -> f64 {
        let s2 = 2.0 * self.omega_b * self.omega_b;
        let a = omega - self.omega_o;
        let b = omega + self.omega_o;
        0.5 * omega * omega * ((-a * a / s2).exp() + (-b * b / s2).exp())
    }

    /// Maximum of `f̂` over `ω ≥ 0`.
    pub fn spectrum_peak(&self) -> f64 {
        let hi = self.omega_o + 10.0 * self.omega_b;
        let n = 4000;
        let mut best = (0.0, 0.0);
        for k in 0..=n {
            let w = hi * k as f64 / n as f64;
            let v = self.spectrum(w);
            if v > best.1 {
                best = (w, v);
            }
        }
        // golden-section refinement around the sampled maximum
        let h = hi / n as f64;
        let (mut a, mut b) = ((best.0 - h).max(0.0), best.0 + h);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..100 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if self.spectrum(c) > self.spectrum(d) {
                b = d;
            } else {
                a = c;
            }
        }
        self.spectrum(0.5 * (a + b)).max(best.1)
    }

    pub fn lambda_o(&self, c_o: f64) -> f64 {
        2.0 * PI * c_o / self.omega_o
    }

    pub fn lambda_c(&self, c_o: f64) -> f64 {
        2.0 * PI * c_o / self.omega_c
    }

    fn frequency_grid(&self) -> (f64, usize) {
        let top = self.omega_o + 12.0 * self.omega_b;
        (top / (PULSE_FREQUENCY_SAMPLES - 1) as f64, PULSE_FREQUENCY_SAMPLES)
    }

    /// `f(t) = (1/π) ∫₀^∞ f̂(ω) cos(ωt) dω`, trapezoidal rule on
    /// `PULSE_FREQUENCY_SAMPLES` uniform frequencies in `[0, ω_o + 12ω_b]`.
    pub fn waveform(&self, t: f64) -> f64 {
        let (dw, n) = self.frequency_grid();
        let mut acc = 0.0;
        for k in 0..n {
            let w = k as f64 * dw;
            let trap = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
            acc += trap * self.spectrum(w) * (w * t).cos();
        }
        acc * dw / PI
    }

    /// `f′(t)` by the same quadrature.
    pub fn waveform_derivative(&self, t: f64) -> f64 {
        let (dw, n) = self.frequency_grid();
        let mut acc = 0.0;
        for k in 0..n {
            let w = k as f64 * dw;
            let trap = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
            acc -= trap * w * self.spectrum(w) * (w * t).sin();
        }
        acc * dw / PI
    }

    /// Time after which `|f(t)| / max |f|` stays below `1e−6`.
    pub fn support_time(&self) -> f64 {
        let dt = 0.05 / self.omega_o;
        let t_max = 12.0 / self.omega_b;
        let steps = (t_max / dt).ceil() as usize;
        let values: Vec<f64> = (0..=steps).map(|k| self.waveform(k as f64 * dt).abs()).collect();
        let peak = values.iter().copied().fold(0.0, f64::max);
        let last = values.iter().rposition(|v| *v >= 1e-6 * peak).unwrap_or(0);
        (last + 1) as f64 * dt
    }
}

pub fn pulse_spectrum(pulse: &PulseSpec, omega: f64) -> f64 {
    pulse.spectrum(omega)
}

/// Collinear array of point-like antennas on family-A nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    pub nodes: Vec<usize>,
    pub positions: Vec<(f64, f64)>,
}

impl ArrayGeometry {
    /// `m` antennas at range `depth`, centered in cross-range with the
    /// given separation, snapped to the nearest family-A nodes.
    pub fn linear(grid: &LebedevGrid, m: usize, separation: f64, depth: f64) -> Result<Self> {
        if m == 0 {
            return Err(ForwardError::InvalidArray("no antennas".into()));
        }
        if separation < grid.spacing && m > 1 {
            return Err(ForwardError::InvalidArray(format!(
                "separation {separation} below grid spacing {}",
                grid.spacing
            )));
        }
        let (l1, l2) = grid.extent();
        let center = 0.5 * l2;
        let mut nodes = Vec::with_capacity(m);
        for s in 0..m {
            let x2 = center + (s as f64 - 0.5 * (m as f64 - 1.0)) * separation;
            if depth <= 0.0 || depth >= l1 || x2 <= 0.0 || x2 >= l2 {
                return Err(ForwardError::InvalidArray(format!("antenna {s} at ({depth}, {x2}) outside the domain")));
            }
            let node = grid.nearest_a(depth, x2);
            if nodes.contains(&node) {
                return Err(ForwardError::InvalidArray(format!("antenna {s} collides with another antenna")));
            }
            nodes.push(node);
        }
        let positions = nodes.iter().map(|&k| grid.position(k)).collect();
        Ok(ArrayGeometry { nodes, positions })
    }

    pub fn m(&self) -> usize {
        self.nodes.len()
    }

    pub fn aperture(&self) -> f64 {
        let xs: Vec<f64> = self.positions.iter().map(|p| p.1).collect();
        xs.iter().copied().fold(f64::MIN, f64::max) - xs.iter().copied().fold(f64::MAX, f64::min)
    }

    /// Column of the `2m` source/polarization index `(s, p)`, `p ∈ {0, 1}`.
    pub fn column(s: usize, p: usize) -> usize {
        2 * s + p
    }

    /// Footprint `F^(s) e_p` as a grid vector: `1/w` at the antenna node.
    pub fn footprint(&self, grid: &LebedevGrid, s: usize, p: usize) -> Vec<f64> {
        let mut v = vec![0.0; grid.num_dofs()];
        v[2 * self.nodes[s] + p] = 1.0 / grid.weight();
        v
    }
}

/// Field with `2m` columns (one per source/polarization) at time index `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotField {
    pub grid: LebedevGrid,
    pub j: usize,
    /// `num_dofs × 2m`, DOF `2·node + component`.
    pub values: DMatrix<f64>,
}

impl SnapshotField {
    pub fn zeros(grid: LebedevGrid, j: usize, columns: usize) -> Self {
        SnapshotField { grid, j, values: DMatrix::zeros(grid.num_dofs(), columns) }
    }

    pub fn columns(&self) -> usize {
        self.values.ncols()
    }

    /// Field vector of column `col` at `node`.
    pub fn at(&self, node: usize, col: usize) -> [f64; 2] {
        [self.values[(2 * node, col)], self.values[(2 * node + 1, col)]]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Weighted Gram matrix `Σ w aᵀb` between the columns of two fields.
    pub fn gram(&self, other: &SnapshotField) -> DMatrix<f64> {
        self.values.transpose() * &other.values * self.grid.weight()
    }

    /// CSV rows `x1,x2,column,component,value` for family-A nodes.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x1,x2,column,component,value\n");
        for node in 0..self.grid.num_a() {
            let (x1, x2) = self.grid.position(node);
            for col in 0..self.columns() {
                for comp in 0..2 {
                    s.push_str(&format!("{x1},{x2},{col},{comp},{}\n", self.values[(2 * node + comp, col)]));
                }
            }
        }
        s
    }
}

/// How `|f̂|(√A)` is applied when building the initial snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpectralMethod {
    /// Dense symmetric eigensolve of the near-array operator.
    Dense,
    /// Chebyshev expansion of `θ ↦ |f̂(√θ)|/θ` applied to `A F`.
    Chebyshev,
}

/// Subdomain around the array used for the initial snapshot: the full width
/// of the grid and the top `depth` in range. A depth beyond the grid means
/// the whole grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearDomain {
    pub depth: f64,
    /// Smallest distance allowed between the deepest antenna and the
    /// artificial bottom wall.
    pub min_margin: f64,
}

impl NearDomain {
    /// Depth `antenna depth + 2 c_o T_f + 4ℓ` with margin `2 c_o T_f`.
    pub fn standard(antenna_depth: f64, pulse: &PulseSpec, c_o: f64, spacing: f64) -> Self {
        let margin = 2.0 * c_o * pulse.support_time();
        NearDomain { depth: antenna_depth + margin + 4.0 * spacing, min_margin: margin }
    }
}

/// Spectral initial snapshot `u₀ = |f̂|(√A_near) F e_p`, where `A_near` is
/// the operator of `medium` restricted to the near-array subdomain; the
/// result is zero-padded onto the full grid.
pub fn initial_snapshot(
    medium: &MediumField,
    array: &ArrayGeometry,
    pulse: &PulseSpec,
    near: &NearDomain,
    method: SpectralMethod,
) -> Result<SnapshotField> {
    let grid = &medium.grid;
    let (l1, _) = grid.extent();
    let deepest = array.positions.iter().map(|p| p.0).fold(0.0, f64::max);
    let n1_near = if near.depth >= l1 {
        grid.n1
    } else {
        if near.depth - deepest < near.min_margin {
            return Err(ForwardError::SubdomainTooSmall { depth: near.depth, required: deepest + near.min_margin });
        }
        ((near.depth / grid.spacing).ceil() as usize + 1).clamp(8, grid.n1)
    };
    let near_grid = LebedevGrid::new(n1_near, grid.n2, grid.spacing).expect("near grid inherits valid dimensions");
    let to_full = |node: usize| match near_grid.locate(node) {
        (crate::grid::Family::A, i, j) => grid.node_a(i, j),
        (crate::grid::Family::B, i, j) => grid.node_b(i, j),
    };
    let near_medium = MediumField {
        grid: near_grid,
        c_o: medium.c_o,
        tensors: (0..near_grid.num_nodes()).map(|k| medium.tensors[to_full(k)]).collect(),
    };
    let op = assemble_operator(&near_medium);
    let near_array = ArrayGeometry {
        nodes: array
            .nodes
            .iter()
            .map(|&k| {
                let (_, i, j) = grid.locate(k);
                near_grid.node_a(i, j)
            })
            .collect(),
        positions: array.positions.clone(),
    };
    let near_u0 = match method {
        SpectralMethod::Dense => spectral_dense(&op, &near_array, pulse)?,
        SpectralMethod::Chebyshev => spectral_chebyshev(&op, &near_array, pulse),
    };
    let mut u0 = SnapshotField::zeros(*grid, 0, 2 * array.m());
    for node in 0..near_grid.num_nodes() {
        let full = to_full(node);
        for col in 0..u0.columns() {
            u0.values[(2 * full, col)] = near_u0[(2 * node, col)];
            u0.values[(2 * full + 1, col)] = near_u0[(2 * node + 1, col)];
        }
    }
    Ok(u0)
}

/// Largest dense problem accepted by the eigensolver paths.
pub const DENSE_LIMIT: usize = 5000;

fn spectral_dense(op: &DiscreteOperator, array: &ArrayGeometry, pulse: &PulseSpec) -> Result<DMatrix<f64>> {
    let n = op.dim();
    if n > DENSE_LIMIT {
        return Err(ForwardError::TooLarge { dofs: n });
    }
    let (theta, vectors) = sym_eigen_desc(&op.matrix.to_dense());
    let amp: Vec<f64> = theta.iter().map(|&t| pulse.spectrum(t.max(0.0).sqrt()).abs()).collect();
    let max = amp.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..n).filter(|&q| amp[q] >= 1e-12 * max && amp[q] > 0.0).collect();
    let cols = 2 * array.m();
    let mut out = DMatrix::zeros(n, cols);
    let w = op.weight;
    for s in 0..array.m() {
        for p in 0..2 {
            let col = ArrayGeometry::column(s, p);
            let dof = 2 * array.nodes[s] + p;
            for &q in &keep {
                let coeff = amp[q] * vectors[(dof, q)] / w;
                for r in 0..n {
                    out[(r, col)] += coeff * vectors[(r, q)];
                }
            }
        }
    }
    Ok(out)
}

/// Gershgorin bound on the spectrum of the operator.
pub fn gershgorin_bound(op: &DiscreteOperator) -> f64 {
    let m = &op.matrix;
    (0..m.n)
        .map(|r| (m.row_ptr[r]..m.row_ptr[r + 1]).map(|k| m.vals[k].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Chebyshev coefficients of `g` on `[0, top]`, chopped where a run of 64
/// consecutive coefficients stays below `1e−13 · max |g|`.
fn chebyshev_coefficients(g: impl Fn(f64) -> f64, top: f64) -> Vec<f64> {
    const RUN: usize = 64;
    let mut n = 1024;
    loop {
        let values: Vec<f64> = (0..n)
            .map(|k| {
                let x = (PI * (k as f64 + 0.5) / n as f64).cos();
                g(0.5 * top * (x + 1.0))
            })
            .collect();
        let coeffs: Vec<f64> = (0..n)
            .map(|j| {
                let s: f64 = values
                    .iter()
                    .enumerate()
                    .map(|(k, v)| v * (PI * j as f64 * (k as f64 + 0.5) / n as f64).cos())
                    .sum();
                s * if j == 0 { 1.0 } else { 2.0 } / n as f64
            })
            .collect();
        let tol = 1e-13 * values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let chop = (0..n - RUN).find(|&k| coeffs[k..k + RUN].iter().all(|c| c.abs() < tol));
        match chop {
            Some(k) if k < n / 2 => return coeffs[..k.max(1)].to_vec(),
            _ if n >= 1 << 14 => return coeffs,
            _ => n *= 2,
        }
    }
}

fn spectral_chebyshev(op: &DiscreteOperator, array: &ArrayGeometry, pulse: &PulseSpec) -> DMatrix<f64> {
    let top = gershgorin_bound(op);
    let s2 = 2.0 * pulse.omega_b * pulse.omega_b;
    // |f̂(√θ)| = θ h(θ)
    let h = |theta: f64| {
        let r = theta.max(0.0).sqrt();
        0.5 * ((-(r - pulse.omega_o).powi(2) / s2).exp() + (-(r + pulse.omega_o).powi(2) / s2).exp())
    };
    let coeffs = chebyshev_coefficients(h, top);
    let n = op.dim();
    let cols = 2 * array.m();
    let mut out = DMatrix::zeros(n, cols);
    let grid = op.grid;
    let mut tmp = vec![0.0; n];
    for s in 0..array.m() {
        for p in 0..2 {
            let col = ArrayGeometry::column(s, p);
            let f = array.footprint(&grid, s, p);
            let mut x = vec![0.0; n];
            op.apply(&f, &mut x);
            // Clenshaw on the affine map t = 2θ/top − 1
            let mut b1 = vec![0.0; n];
            let mut b2 = vec![0.0; n];
            for k in (1..coeffs.len()).rev() {
                op.apply(&b1, &mut tmp);
                for r in 0..n {
                    let tb = 2.0 * tmp[r] / top - b1[r];
                    let next = coeffs[k] * x[r] + 2.0 * tb - b2[r];
                    b2[r] = b1[r];
                    b1[r] = next;
                }
            }
            op.apply(&b1, &mut tmp);
            for r in 0..n {
                let tb = 2.0 * tmp[r] / top - b1[r];
                out[(r, col)] = coeffs[0] * x[r] + tb - b2[r];
            }
        }
    }
    out
}

/// Leapfrog time stepping of `ü + A u = 0` from `u₀` at rest. Returns the
/// snapshots at `t_j = jτ`, `j = 0..n_snapshots`.
pub fn propagate(
    op: &DiscreteOperator,
    u0: &SnapshotField,
    dt: f64,
    tau: f64,
    n_snapshots: usize,
) -> Result<Vec<SnapshotField>> {
    let stride = step_ratio(tau, dt)?;
    check_cfl(op, dt)?;
    let n = op.dim();
    let cols = u0.columns();
    let mut out: Vec<SnapshotField> = (0..n_snapshots).map(|j| SnapshotField::zeros(u0.grid, j, cols)).collect();
    let dt2 = dt * dt;
    let mut au = vec![0.0; n];
    let total = n_snapshots.saturating_sub(1) * stride;
    for col in 0..cols {
        out[0].values.set_column(col, &u0.values.column(col));
        if total == 0 {
            continue;
        }
        let mut prev: Vec<f64> = u0.values.column(col).iter().copied().collect();
        op.apply(&prev, &mut au);
        let mut cur: Vec<f64> = prev.iter().zip(&au).map(|(u, a)| u - 0.5 * dt2 * a).collect();
        let mut next = vec![0.0; n];
        for k in 1..=total {
            if k % stride == 0 {
                if cur.iter().any(|v| !v.is_finite()) {
                    return Err(ForwardError::NonFiniteField { step: k });
                }
                out[k / stride].values.column_mut(col).copy_from_slice(&cur);
            }
            if k == total {
                break;
            }
            op.apply(&cur, &mut au);
            for r in 0..n {
                next[r] = 2.0 * cur[r] - prev[r] - dt2 * au[r];
            }
            std::mem::swap(&mut prev, &mut cur);
            std::mem::swap(&mut cur, &mut next);
        }
    }
    Ok(out)
}

pub fn step_ratio(tau: f64, dt: f64) -> Result<usize> {
    let ratio = tau / dt;
    let k = ratio.round();
    if !(dt > 0.0) || k < 1.0 || (ratio - k).abs() > 1e-9 * ratio {
        return Err(ForwardError::StepMismatch { tau, dt });
    }
    Ok(k as usize)
}

/// CFL bound `0.9 · 2/√λ_max` with `λ_max` from power iteration.
pub fn cfl_bound(op: &DiscreteOperator) -> f64 {
    let lmax = op.lambda_max_estimate(200);
    if lmax <= 0.0 {
        return f64::INFINITY;
    }
    0.9 * 2.0 / lmax.sqrt()
}

fn check_cfl(op: &DiscreteOperator, dt: f64) -> Result<()> {
    let bound = cfl_bound(op);
    if dt > bound {
        return Err(ForwardError::CflViolation { dt, bound });
    }
    Ok(())
}

/// Exact snapshots `cos(jτ√A) u₀` from a dense eigendecomposition.
pub fn exact_snapshots(op: &DiscreteOperator, u0: &SnapshotField, tau: f64, n_snapshots: usize) -> Result<Vec<SnapshotField>> {
    let n = op.dim();
    if n > DENSE_LIMIT {
        return Err(ForwardError::TooLarge { dofs: n });
    }
    let (theta, v) = sym_eigen_desc(&op.matrix.to_dense());
    let coeff = v.transpose() * &u0.values;
    let freqs: Vec<f64> = theta.iter().map(|t| t.max(0.0).sqrt()).collect();
    Ok((0..n_snapshots)
        .map(|j| {
            let mut c = coeff.clone();
            for (q, mut row) in c.row_iter_mut().enumerate() {
                row *= (j as f64 * tau * freqs[q]).cos();
            }
            SnapshotField { grid: u0.grid, j, values: &v * c }
        })
        .collect())
}

/// Sequence of `2m × 2m` data matrices `𝔻_j`, `j = 0..2n−1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSeries {
    pub tau: f64,
    pub m: usize,
    pub matrices: Vec<DMatrix<f64>>,
}

const DATA_MAGIC: &[u8; 4] = b"ROMD";
const DATA_VERSION: u32 = 1;
const RESPONSE_MAGIC: &[u8; 4] = b"ROMW";

impl DataSeries {
    pub fn new(tau: f64, m: usize, matrices: Vec<DMatrix<f64>>) -> Self {
        DataSeries { tau, m, matrices }
    }

    /// ROM order `n` (half the number of samples).
    pub fn n(&self) -> usize {
        self.matrices.len() / 2
    }

    /// `𝔻(t_k)` with the even extension `𝔻(t_{−k}) = 𝔻(t_k)`.
    pub fn at(&self, k: isize) -> &DMatrix<f64> {
        &self.matrices[k.unsigned_abs()]
    }

    /// Leading `2n′` samples.
    pub fn truncated(&self, n: usize) -> DataSeries {
        DataSeries { tau: self.tau, m: self.m, matrices: self.matrices[..2 * n].to_vec() }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(DATA_MAGIC)?;
        w.write_all(&DATA_VERSION.to_le_bytes())?;
        w.write_all(&(self.m as u32).to_le_bytes())?;
        w.write_all(&(self.n() as u32).to_le_bytes())?;
        w.write_all(&self.tau.to_le_bytes())?;
        for mat in &self.matrices {
            write_matrix(w, mat)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATA_MAGIC {
            return Err(ForwardError::Format("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != DATA_VERSION {
            return Err(ForwardError::Format(format!("unsupported version {version}")));
        }
        let m = read_u32(r)? as usize;
        let n = read_u32(r)? as usize;
        let tau = read_f64(r)?;
        let matrices = (0..2 * n).map(|_| read_matrix(r, 2 * m)).collect::<Result<Vec<_>>>()?;
        Ok(DataSeries { tau, m, matrices })
    }

    /// CSV rows `j,row,col,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("j,row,col,value\n");
        for (j, mat) in self.matrices.iter().enumerate() {
            for r in 0..mat.nrows() {
                for c in 0..mat.ncols() {
                    s.push_str(&format!("{j},{r},{c},{}\n", mat[(r, c)]));
                }
            }
        }
        s
    }
}

pub(crate) fn write_matrix(w: &mut impl Write, mat: &DMatrix<f64>) -> std::io::Result<()> {
    for r in 0..mat.nrows() {
        for c in 0..mat.ncols() {
            w.write_all(&mat[(r, c)].to_le_bytes())?;
        }
    }
    Ok(())
}

pub(crate) fn read_matrix(r: &mut impl Read, n: usize) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = read_f64(r)?;
        }
    }
    Ok(m)
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// `𝔻_j = Σ w u₀ᵀ u_j` for the snapshots `j = 0..len`.
pub fn compute_data(snapshots: &[SnapshotField], u0: &SnapshotField, tau: f64) -> Result<DataSeries> {
    if snapshots.len() < 2 || !snapshots.len().is_multiple_of(2) {
        return Err(ForwardError::LengthMismatch { expected: 2 * (snapshots.len() / 2).max(1), got: snapshots.len() });
    }
    let matrices = snapshots.iter().map(|u| u0.gram(u)).collect();
    Ok(DataSeries { tau, m: u0.columns() / 2, matrices })
}

/// Adds i.i.d. Gaussian noise with standard deviation `level` times the
/// RMS of all data entries.
pub fn add_noise(data: &DataSeries, level: f64, seed: u64) -> DataSeries {
    if level == 0.0 {
        return data.clone();
    }
    let count: usize = data.matrices.iter().map(|m| m.len()).sum();
    let rms = (data.matrices.iter().map(|m| m.norm_squared()).sum::<f64>() / count as f64).sqrt();
    let normal = Normal::new(0.0, level * rms).expect("finite noise level");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let matrices = data
        .matrices
        .iter()
        .map(|m| m.map(|v| v + normal.sample(&mut rng)))
        .collect();
    DataSeries { tau: data.tau, m: data.m, matrices }
}

/// Array response `𝒲(t_k)` on the fine grid `t_k = t0 + k dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSeries {
    pub dt: f64,
    pub t0: f64,
    pub matrices: Vec<DMatrix<f64>>,
}

impl ResponseSeries {
    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn end(&self) -> f64 {
        self.time(self.matrices.len().saturating_sub(1))
    }

    /// Samples at `t = jτ`, `j = 0..count`.
    pub fn sampled(&self, tau: f64, count: usize) -> Result<Vec<DMatrix<f64>>> {
        let stride = step_ratio(tau, self.dt)?;
        let offset = (-self.t0 / self.dt).round() as usize;
        (0..count)
            .map(|j| {
                self.matrices.get(offset + j * stride).cloned().ok_or(ForwardError::ShortRecord {
                    end: self.end(),
                    needed: j as f64 * tau,
                })
            })
            .collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(RESPONSE_MAGIC)?;
        w.write_all(&DATA_VERSION.to_le_bytes())?;
        let size = self.matrices.first().map_or(0, |m| m.nrows());
        w.write_all(&(size as u32).to_le_bytes())?;
        w.write_all(&(self.matrices.len() as u32).to_le_bytes())?;
        w.write_all(&self.dt.to_le_bytes())?;
        w.write_all(&self.t0.to_le_bytes())?;
        for mat in &self.matrices {
            write_matrix(w, mat)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != RESPONSE_MAGIC {
            return Err(ForwardError::Format("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != DATA_VERSION {
            return Err(ForwardError::Format(format!("unsupported version {version}")));
        }
        let size = read_u32(r)? as usize;
        let count = read_u32(r)? as usize;
        let dt = read_f64(r)?;
        let t0 = read_f64(r)?;
        let matrices = (0..count).map(|_| read_matrix(r, size)).collect::<Result<Vec<_>>>()?;
        Ok(ResponseSeries { dt, t0, matrices })
    }

    pub fn scaled_sum(&self, a: f64, other: &ResponseSeries, b: f64) -> ResponseSeries {
        ResponseSeries {
            dt: self.dt,
            t0: self.t0,
            matrices: self.matrices.iter().zip(&other.matrices).map(|(x, y)| x * a + y * b).collect(),
        }
    }
}

/// Field samples recorded during a response simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub nodes: Vec<usize>,
    /// `fields[j]` is `2·nodes × 2m` at `t = jτ`.
    pub fields: Vec<DMatrix<f64>>,
}

/// Simulates `(A + ∂t²) U = −c_o² f′(t) F e_p` from rest at `t0 ≈ −T_f`
/// until `t_end`, recording the array response at every fine step and,
/// optionally, the field at `record_nodes` every `tau` for `t = 0..`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_response(
    op: &DiscreteOperator,
    array: &ArrayGeometry,
    pulse: &PulseSpec,
    c_o: f64,
    dt: f64,
    t_end: f64,
    record: Option<(&[usize], f64)>,
) -> Result<(ResponseSeries, Option<Recording>)> {
    check_cfl(op, dt)?;
    let tf = pulse.support_time();
    let start = (tf / dt).ceil() as usize;
    let t0 = -(start as f64) * dt;
    let steps = ((t_end - t0) / dt).ceil() as usize + 1;
    let source: Vec<f64> = (0..steps).map(|k| -c_o * c_o * pulse.waveform_derivative(t0 + k as f64 * dt)).collect();
    let m = array.m();
    let n = op.dim();
    let w = op.weight;
    let mut matrices = vec![DMatrix::zeros(2 * m, 2 * m); steps];
    let mut recording = match record {
        Some((nodes, tau)) => {
            let stride = step_ratio(tau, dt)?;
            let count = (steps - 1 - start) / stride + 1;
            Some((nodes, stride, vec![DMatrix::zeros(2 * nodes.len(), 2 * m); count]))
        }
        None => None,
    };
    let dt2 = dt * dt;
    let mut au = vec![0.0; n];
    for s in 0..m {
        for p in 0..2 {
            let col = ArrayGeometry::column(s, p);
            let src_dof = 2 * array.nodes[s] + p;
            let mut prev = vec![0.0; n];
            let mut cur = vec![0.0; n];
            let mut next = vec![0.0; n];
            for k in 0..steps {
                for (r, &node) in array.nodes.iter().enumerate() {
                    matrices[k][(2 * r, col)] = cur[2 * node];
                    matrices[k][(2 * r + 1, col)] = cur[2 * node + 1];
                }
                if let Some((nodes, stride, fields)) = recording.as_mut() {
                    if k >= start && (k - start).is_multiple_of(*stride) {
                        let f = &mut fields[(k - start) / *stride];
                        for (r, &node) in nodes.iter().enumerate() {
                            f[(2 * r, col)] = cur[2 * node];
                            f[(2 * r + 1, col)] = cur[2 * node + 1];
                        }
                    }
                }
                if k + 1 == steps {
                    break;
                }
                op.apply(&cur, &mut au);
                for r in 0..n {
                    next[r] = 2.0 * cur[r] - prev[r] - dt2 * au[r];
                }
                next[src_dof] += dt2 * source[k] / w;
                std::mem::swap(&mut prev, &mut cur);
                std::mem::swap(&mut cur, &mut next);
            }
            if cur.iter().any(|v| !v.is_finite()) {
                return Err(ForwardError::NonFiniteField { step: steps });
            }
        }
    }
    let rec = recording.map(|(nodes, _, fields)| Recording { nodes: nodes.to_vec(), fields });
    Ok((ResponseSeries { dt, t0, matrices }, rec))
}

/// Maps the raw response to `𝔻(t) = −c_o⁻²[f(−t)⋆𝒲(t) + f(t)⋆𝒲(−t)]` by
/// trapezoidal convolution and samples it at `t_j = jτ`, `j = 0..count`.
pub fn transform_response(
    w: &ResponseSeries,
    pulse: &PulseSpec,
    c_o: f64,
    tau: f64,
    count: usize,
) -> Result<DataSeries> {
    let stride = step_ratio(tau, w.dt)?;
    if stride < 8 {
        return Err(ForwardError::UndersampledInput { dt: w.dt, tau });
    }
    let tf = pulse.support_time();
    let needed = (count - 1) as f64 * tau + tf;
    if w.end() < needed {
        return Err(ForwardError::ShortRecord { end: w.end(), needed });
    }
    let half = (tf / w.dt).ceil() as isize + 1;
    let table: Vec<f64> = (-half..=half).map(|k| pulse.waveform(k as f64 * w.dt)).collect();
    let f = |k: isize| -> f64 {
        if k.abs() > half {
            0.0
        } else {
            table[(k + half) as usize]
        }
    };
    let offset = (-w.t0 / w.dt).round() as isize;
    let size = w.matrices[0].nrows();
    let last = w.matrices.len() - 1;
    let m = size / 2;
    let matrices = (0..count)
        .map(|j| {
            let tj = (j * stride) as isize;
            let mut acc = DMatrix::zeros(size, size);
            for (k, wk) in w.matrices.iter().enumerate() {
                // sample time index relative to t = 0
                let sk = k as isize - offset;
                let coeff = f(sk - tj) + f(tj + sk);
                if coeff != 0.0 {
                    let trap = if k == 0 || k == last { 0.5 } else { 1.0 };
                    acc += wk * (trap * coeff);
                }
            }
            acc * (-w.dt / (c_o * c_o))
        })
        .collect();
    Ok(DataSeries { tau, m, matrices })
}
