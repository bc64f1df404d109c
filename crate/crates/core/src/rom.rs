//! Data-driven mass and stiffness matrices, regularization, and the reduced
//! order model (block Cholesky factor `R` and propagator `P`).

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::forward::{read_f64, read_matrix, read_u32, write_matrix, DataSeries, ForwardError};
use crate::linalg::{
    block_cholesky_tol, block_lanczos_partial, block_lanczos_tol, block_tri_inverse_tol, spd_sqrt, spectral_rank, spectral_truncate, sym_eigen_desc,
    BlockMatrix, BlockTriangular, LinalgError, Tolerances,
};

#[derive(Debug, Error)]
pub enum RomError {
    #[error("need at least {needed} data matrices, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("mass matrix is not positive definite ({0}); regularize the data first")]
    NotSpd(LinalgError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("ROM file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<ForwardError> for RomError {
    fn from(e: ForwardError) -> Self {
        match e {
            ForwardError::Io(io) => RomError::Io(io),
            other => RomError::Format(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, RomError>;

fn check_len(data: &DataSeries) -> Result<usize> {
    let n = data.n();
    if n == 0 {
        return Err(RomError::InsufficientData { needed: 2, got: data.matrices.len() });
    }
    Ok(n)
}

/// `𝕄_{j,l} = ½[𝔻(t_{j+l}) + 𝔻(t_{|j−l|})]`, symmetrized.
pub fn assemble_mass(data: &DataSeries) -> Result<BlockMatrix> {
    let n = check_len(data)?;
    let b = 2 * data.m;
    let mut m = BlockMatrix::zeros(n, b);
    for j in 0..n {
        for l in 0..n {
            let blk = (data.at((j + l) as isize) + data.at(j as isize - l as isize)) * 0.5;
            m.set_block(j, l, &blk);
        }
    }
    m.symmetrize();
    Ok(m)
}

/// `𝕊_{j,l} = ¼[𝔻(t_{j+l+1}) + 𝔻(t_{|j−l−1|}) + 𝔻(t_{|j+l−1|}) + 𝔻(t_{|j−l+1|})]`,
/// symmetrized; negative times use the even extension.
pub fn assemble_stiffness(data: &DataSeries) -> Result<BlockMatrix> {
    let n = check_len(data)?;
    let b = 2 * data.m;
    let mut s = BlockMatrix::zeros(n, b);
    for j in 0..n as isize {
        for l in 0..n as isize {
            let blk = (data.at(j + l + 1) + data.at(j - l - 1) + data.at(j + l - 1) + data.at(j - l + 1)) * 0.25;
            s.set_block(j as usize, l as usize, &blk);
        }
    }
    s.symmetrize();
    Ok(s)
}

/// Replaces `𝔻(0)` by `(1 + 2α)𝔻(0)`.
pub fn regularize_boost(data: &DataSeries, alpha: f64) -> DataSeries {
    let mut out = data.clone();
    if let Some(d0) = out.matrices.first_mut() {
        *d0 *= 1.0 + 2.0 * alpha;
    }
    out
}

/// Output of the spectral projection and block Lanczos step.
#[derive(Debug, Clone)]
pub struct SpectralRegularization {
    /// Leading eigenvectors of `𝕄` (`2nm × 2rm`).
    pub y: DMatrix<f64>,
    /// Kept eigenvalues, descending.
    pub lambda: DVector<f64>,
    /// Lanczos basis (`2rm × 2km`, `k = r` unless the recursion broke down).
    pub q: DMatrix<f64>,
    /// `QᵀΛQ`.
    pub m_reg: BlockMatrix,
    /// `QᵀΠQ`, block tridiagonal.
    pub p_reg: BlockMatrix,
    /// Coordinates of the first state in the Lanczos basis (`2km × 2m`),
    /// nonzero only in the first block.
    pub first_state: DMatrix<f64>,
}

/// Projects on the `rank` leading eigenvectors of `𝕄`, forms
/// `Π = Λ^{−1/2} Yᵀ 𝕊 Y Λ^{−1/2}` and tridiagonalizes it by block Lanczos
/// started on `Λ^{−1/2} Yᵀ 𝕄 𝔦₀` (orthonormalized).
pub fn regularize_spectral(m: &BlockMatrix, s: &BlockMatrix, rank: usize) -> Result<SpectralRegularization> {
    regularize_spectral_tol(m, s, rank, &Tolerances::default())
}

pub fn regularize_spectral_tol(
    m: &BlockMatrix,
    s: &BlockMatrix,
    rank: usize,
    tol: &Tolerances,
) -> Result<SpectralRegularization> {
    spectral(m, s, rank, tol, false)
}

fn spectral(m: &BlockMatrix, s: &BlockMatrix, rank: usize, tol: &Tolerances, partial: bool) -> Result<SpectralRegularization> {
    let b = m.block_size();
    let (y, lambda) = spectral_truncate(m, rank)?;
    let inv_sqrt = DMatrix::from_diagonal(&lambda.map(|v| 1.0 / v.sqrt()));
    let mut pi = &inv_sqrt * y.transpose() * s.data() * &y * &inv_sqrt;
    crate::linalg::symmetrize_in_place(&mut pi);
    let x = &inv_sqrt * y.transpose() * m.data().columns(0, b);
    let c = spd_sqrt(&(x.transpose() * &x))?;
    let c_inv = c.clone().try_inverse().ok_or(LinalgError::Singular { block: 0, cond: f64::INFINITY })?;
    let b0 = &x * &c_inv;
    let (q, p_reg) =
        if partial { block_lanczos_partial(&pi, b, &b0, tol)? } else { block_lanczos_tol(&pi, b, &b0, tol)? };
    let mut m_reg = q.transpose() * DMatrix::from_diagonal(&lambda) * &q;
    crate::linalg::symmetrize_in_place(&mut m_reg);
    let mut first_state = DMatrix::zeros(q.ncols(), b);
    first_state.view_mut((0, 0), (b, b)).copy_from(&c);
    Ok(SpectralRegularization {
        y,
        lambda,
        q,
        m_reg: BlockMatrix::new(m_reg, b)?,
        p_reg,
        first_state,
    })
}

/// Regularization applied before the Cholesky factorization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularization {
    None,
    /// Diagonal boost of `𝔻(0)` by `α`.
    Boost { alpha: f64 },
    /// Spectral projection keeping the eigenvalues above `threshold · λ_max`
    /// (rounded down to a multiple of `2m`), at most `rank` of them.
    Spectral { threshold: f64, rank: Option<usize> },
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization::Spectral { threshold: 1e-9, rank: None }
    }
}

/// What was done to build a ROM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizationRecord {
    /// 0 none, 1 boost, 2 spectral.
    pub method: u32,
    pub parameter: f64,
    /// Effective order `r` (number of blocks).
    pub order: usize,
}

#[derive(Debug, Clone)]
pub struct Rom {
    pub r: BlockTriangular,
    pub s: BlockMatrix,
    pub p: BlockMatrix,
    pub m: usize,
    /// Number of snapshot blocks the ROM was built from.
    pub n: usize,
    pub tau: f64,
    pub record: RegularizationRecord,
    /// Maps snapshot coordinates to the orthonormal ROM basis,
    /// `V = 𝒰 · basis_map` (`2nm × 2rm`): `R^{−1}` without truncation,
    /// `Y Λ^{−1/2} Q` after spectral regularization.
    pub basis_map: DMatrix<f64>,
}

impl Rom {
    pub fn order(&self) -> usize {
        self.record.order
    }

    pub fn block_size(&self) -> usize {
        2 * self.m
    }
}

/// ROM from an SPD mass matrix: `R = chol(𝕄)`, `P = R^{−T} 𝕊 R^{−1}`.
pub fn build_rom(m: &BlockMatrix, s: &BlockMatrix, tau: f64) -> Result<Rom> {
    build_rom_tol(m, s, tau, &Tolerances::default())
}

pub fn build_rom_tol(m: &BlockMatrix, s: &BlockMatrix, tau: f64, tol: &Tolerances) -> Result<Rom> {
    let r = block_cholesky_tol(m, tol).map_err(|e| match e {
        LinalgError::PivotNotSpd { .. } => RomError::NotSpd(e),
        other => RomError::Linalg(other),
    })?;
    let r_inv = block_tri_inverse_tol(&r, tol)?;
    let mut p = r_inv.transpose() * s.data() * &r_inv;
    crate::linalg::symmetrize_in_place(&mut p);
    let b = m.block_size();
    let n = m.num_blocks();
    Ok(Rom {
        r,
        s: s.clone(),
        p: BlockMatrix::new(p, b)?,
        m: b / 2,
        n,
        tau,
        record: RegularizationRecord { method: 0, parameter: 0.0, order: n },
        basis_map: r_inv,
    })
}

/// ROM from mass and stiffness matrices with the requested regularization.
/// The boost reads `𝔻(0)` off the leading block of `𝕄`.
pub fn build_rom_regularized(m: &BlockMatrix, s: &BlockMatrix, tau: f64, reg: &Regularization) -> Result<Rom> {
    let tol = Tolerances { symmetry: 1e-10, ..Tolerances::default() };
    match *reg {
        Regularization::None => build_rom_tol(m, s, tau, &tol),
        Regularization::Boost { alpha } => {
            let b = m.block_size();
            let n = m.num_blocks();
            // 𝕄 and 𝕊 are linear in the data, so the boost adds the matrices
            // assembled from the series 2α𝔻(0), 0, 0, ...
            let mut impulse = vec![DMatrix::zeros(b, b); 2 * n];
            impulse[0] = m.block(0, 0) * (2.0 * alpha);
            let impulse = DataSeries::new(tau, b / 2, impulse);
            let mb = BlockMatrix::new(m.data() + assemble_mass(&impulse)?.data(), b)?;
            let sb = BlockMatrix::new(s.data() + assemble_stiffness(&impulse)?.data(), b)?;
            let mut rom = build_rom_tol(&mb, &sb, tau, &tol)?;
            rom.record = RegularizationRecord { method: 1, parameter: alpha, order: rom.n };
            Ok(rom)
        }
        Regularization::Spectral { threshold, rank } => {
            let b = m.block_size();
            let (values, _) = sym_eigen_desc(m.data());
            let own = spectral_rank(&values, threshold, b);
            let rank = rank.map_or(own, |r| r.min(own));
            if rank == 0 {
                return Err(RomError::Linalg(LinalgError::RankTooLarge { rank, dim: m.dim(), block: b }));
            }
            // a Lanczos breakdown lowers the order to the reachable Krylov space
            let reg = spectral(m, s, rank, &tol, true)?;
            let mut rom = rom_from_spectral(&reg, m.num_blocks(), tau)?;
            rom.record.parameter = threshold;
            Ok(rom)
        }
    }
}

/// Block Cholesky square root of the mass matrix after regularization:
/// `chol(𝕄)`, `chol` of the boosted `𝕄`, or `chol(M_reg)` with
/// `M_reg = QᵀΛQ` for spectral truncation.
pub fn mass_factor(m: &BlockMatrix, s: &BlockMatrix, tau: f64, reg: &Regularization) -> Result<BlockTriangular> {
    let tol = Tolerances { symmetry: 1e-10, ..Tolerances::default() };
    let chol = |mm: &BlockMatrix| {
        block_cholesky_tol(mm, &tol).map_err(|e| match e {
            LinalgError::PivotNotSpd { .. } => RomError::NotSpd(e),
            other => RomError::Linalg(other),
        })
    };
    match *reg {
        Regularization::None => chol(m),
        Regularization::Boost { .. } => {
            let rom = build_rom_regularized(m, s, tau, reg)?;
            Ok(rom.r)
        }
        Regularization::Spectral { threshold, rank } => {
            let (values, _) = sym_eigen_desc(m.data());
            let own = spectral_rank(&values, threshold, m.block_size());
            let rank = rank.map_or(own, |r| r.min(own));
            if rank == 0 {
                return Err(RomError::Linalg(LinalgError::RankTooLarge { rank, dim: m.dim(), block: m.block_size() }));
            }
            chol(&spectral(m, s, rank, &tol, true)?.m_reg)
        }
    }
}

/// Causal ROM of a spectral regularization. The first state is propagated
/// with `P_reg`; the coordinates of the ROM snapshots in the Lanczos basis
/// form `R`, which is block upper triangular because `P_reg` is block
/// tridiagonal. The orthonormal basis is `V = 𝒰 Y Λ^{−1/2} Q`.
fn rom_from_spectral(reg: &SpectralRegularization, n_data: usize, tau: f64) -> Result<Rom> {
    let b = reg.first_state.ncols();
    let dim = reg.q.ncols();
    let order = dim / b;
    let p = reg.p_reg.data();
    let mut r = DMatrix::zeros(dim, dim);
    let mut prev = reg.first_state.clone();
    r.view_mut((0, 0), (dim, b)).copy_from(&prev);
    if order > 1 {
        let mut cur = p * &prev;
        r.view_mut((0, b), (dim, b)).copy_from(&cur);
        for j in 2..order {
            let next = p * &cur * 2.0 - &prev;
            r.view_mut((0, j * b), (dim, b)).copy_from(&next);
            prev = cur;
            cur = next;
        }
    }
    // roundoff below the block diagonal
    for bj in 0..order {
        for bi in (bj + 1)..order {
            r.view_mut((bi * b, bj * b), (b, b)).fill(0.0);
        }
    }
    let mut s = r.transpose() * p * &r;
    crate::linalg::symmetrize_in_place(&mut s);
    let inv_sqrt = DMatrix::from_diagonal(&reg.lambda.map(|v| 1.0 / v.sqrt()));
    Ok(Rom {
        r: BlockTriangular::new(r, b)?,
        s: BlockMatrix::new(s, b)?,
        p: reg.p_reg.clone(),
        m: b / 2,
        n: n_data,
        tau,
        record: RegularizationRecord { method: 2, parameter: 0.0, order },
        basis_map: &reg.y * inv_sqrt * &reg.q,
    })
}

/// Builds the ROM straight from data.
pub fn build_rom_from_data(data: &DataSeries, reg: &Regularization) -> Result<Rom> {
    let m = assemble_mass(data)?;
    let s = assemble_stiffness(data)?;
    build_rom_regularized(&m, &s, data.tau, reg)
}

/// ROM snapshots `u_{j+1} = 2P u_j − u_{|j−1|}` from `u₀ = R 𝔦₀`, `j = 0..=j_max`.
pub fn rom_propagate(rom: &Rom, j_max: usize) -> Vec<DMatrix<f64>> {
    let b = rom.block_size();
    let p = rom.p.data();
    let mut out = Vec::with_capacity(j_max + 1);
    out.push(rom.r.data().columns(0, b).into_owned());
    if j_max >= 1 {
        out.push(p * &out[0]);
    }
    for j in 1..j_max {
        let next = p * &out[j] * 2.0 - &out[j - 1];
        out.push(next);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationReport {
    /// `‖(u₀)ᵀu_j − 𝔻(t_j)‖_F / ‖𝔻(t_j)‖_F` for `j = 0..=2n−1`.
    pub residuals: Vec<f64>,
    /// Maximum over `j ≤ 2n−2`.
    pub max_residual: f64,
    /// Residual at `j = 2n−1` (informational).
    pub last_residual: f64,
    /// Frobenius norm of the blocks of `P` off the block tridiagonal.
    pub off_tridiagonal: f64,
    pub p_norm: f64,
}

pub fn verify_interpolation(rom: &Rom, data: &DataSeries) -> InterpolationReport {
    let n = rom.order();
    let count = (2 * n).min(data.matrices.len());
    let snaps = rom_propagate(rom, count.saturating_sub(1));
    let residuals: Vec<f64> = (0..count)
        .map(|j| {
            let fit = snaps[0].transpose() * &snaps[j];
            let d = &data.matrices[j];
            (fit - d).norm() / d.norm()
        })
        .collect();
    let max_residual = residuals.iter().take(count.saturating_sub(1)).copied().fold(0.0, f64::max);
    InterpolationReport {
        last_residual: residuals.last().copied().unwrap_or(0.0),
        residuals,
        max_residual,
        off_tridiagonal: rom.p.off_tridiagonal_norm(),
        p_norm: rom.p.frobenius_norm(),
    }
}

const ROM_MAGIC: &[u8; 4] = b"ROMR";
const ROM_VERSION: u32 = 1;

impl Rom {
    /// Writes `R`, `S`, `P` and the regularization record. The basis map is
    /// not stored and comes back empty.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(ROM_MAGIC)?;
        w.write_all(&ROM_VERSION.to_le_bytes())?;
        w.write_all(&(self.m as u32).to_le_bytes())?;
        w.write_all(&(self.n as u32).to_le_bytes())?;
        w.write_all(&self.tau.to_le_bytes())?;
        w.write_all(&self.record.method.to_le_bytes())?;
        w.write_all(&self.record.parameter.to_le_bytes())?;
        w.write_all(&(self.record.order as u32).to_le_bytes())?;
        write_matrix(w, self.r.data())?;
        write_matrix(w, self.s.data())?;
        write_matrix(w, self.p.data())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Rom> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != ROM_MAGIC {
            return Err(RomError::Format("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != ROM_VERSION {
            return Err(RomError::Format(format!("unsupported version {version}")));
        }
        let m = read_u32(r)? as usize;
        let n = read_u32(r)? as usize;
        let tau = read_f64(r)?;
        let method = read_u32(r)?;
        let parameter = read_f64(r)?;
        let order = read_u32(r)? as usize;
        let dim = 2 * m * order;
        let rm = read_matrix(r, dim)?;
        let s = read_matrix(r, dim)?;
        let p = read_matrix(r, dim)?;
        let b = 2 * m;
        Ok(Rom {
            r: BlockTriangular::new(rm, b)?,
            s: BlockMatrix::new(s, b)?,
            p: BlockMatrix::new(p, b)?,
            m,
            n,
            tau,
            record: RegularizationRecord { method, parameter, order },
            basis_map: DMatrix::zeros(0, 0),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(n: usize, m: usize, f: impl Fn(usize, usize, usize) -> f64) -> DataSeries {
        let b = 2 * m;
        DataSeries::new(0.5, m, (0..2 * n).map(|j| DMatrix::from_fn(b, b, |r, c| f(j, r, c))).collect())
    }

    #[test]
    fn mass_and_stiffness_leading_blocks() {
        let d = series(3, 1, |j, r, c| (j as f64 + 1.0) * if r == c { 2.0 } else { 0.3 });
        let m = assemble_mass(&d).unwrap();
        assert_eq!(m.block(0, 0), d.matrices[0]);
        for j in 0..3 {
            assert_eq!(m.block(0, j), d.matrices[j]);
        }
        let s = assemble_stiffness(&d).unwrap();
        assert_eq!(s.block(0, 0), d.matrices[1]);
        assert_eq!(s.asymmetry(), 0.0);
    }

    #[test]
    fn boost_changes_only_first_sample() {
        let d = series(2, 1, |j, r, c| (j + r + c) as f64 + 1.0);
        assert_eq!(regularize_boost(&d, 0.0), d);
        let b = regularize_boost(&d, 0.1);
        assert_eq!(b.matrices[0], &d.matrices[0] * 1.2);
        assert_eq!(b.matrices[1..], d.matrices[1..]);
        let m0 = assemble_mass(&d).unwrap();
        let m1 = assemble_mass(&b).unwrap();
        for k in 0..2 {
            let w = if k == 0 { 0.2 } else { 0.1 };
            let diff = m1.block(k, k) - m0.block(k, k) - &d.matrices[0] * w;
            assert!(diff.norm() < 1e-14);
        }
    }

    #[test]
    fn boost_on_matrices_matches_boost_on_data() {
        let d = series(3, 1, |j, r, c| (-(j as f64) * 0.4).exp() * if r == c { 2.0 } else { 0.2 });
        let m = assemble_mass(&d).unwrap();
        let s = assemble_stiffness(&d).unwrap();
        let a = build_rom_regularized(&m, &s, d.tau, &Regularization::Boost { alpha: 0.3 }).unwrap();
        let b = build_rom_from_data(&regularize_boost(&d, 0.3), &Regularization::None).unwrap();
        assert!((a.r.data() - b.r.data()).norm() < 1e-12);
        assert!((a.p.data() - b.p.data()).norm() < 1e-12);
    }

    #[test]
    fn one_block_rom() {
        let d0 = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let d1 = DMatrix::from_row_slice(2, 2, &[1.1, 0.2, 0.2, 0.4]);
        let data = DataSeries::new(1.0, 1, vec![d0.clone(), d1.clone()]);
        let rom = build_rom_from_data(&data, &Regularization::None).unwrap();
        let r = spd_sqrt(&d0).unwrap();
        assert!((rom.r.data() - &r).norm() < 1e-14);
        let ri = r.clone().try_inverse().unwrap();
        assert!((rom.p.data() - &ri * d1 * &ri).norm() < 1e-13);
    }

    #[test]
    fn identity_propagator_is_stationary() {
        let r = BlockTriangular::new(DMatrix::from_fn(4, 4, |i, j| if i == j { 2.0 } else if j > i + 1 { 0.5 } else { 0.0 }), 2).unwrap();
        let rom = Rom {
            r: r.clone(),
            s: BlockMatrix::new(DMatrix::identity(4, 4), 2).unwrap(),
            p: BlockMatrix::new(DMatrix::identity(4, 4), 2).unwrap(),
            m: 1,
            n: 2,
            tau: 1.0,
            record: RegularizationRecord { method: 0, parameter: 0.0, order: 2 },
            basis_map: DMatrix::identity(4, 4),
        };
        let snaps = rom_propagate(&rom, 5);
        for u in &snaps {
            assert_eq!(u, &snaps[0]);
        }
    }
}
