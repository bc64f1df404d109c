//! Reference orthonormal basis `V(·; c̃)` and the estimated internal wave.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::forward::{
    initial_snapshot, propagate, step_ratio, ArrayGeometry, ForwardError, NearDomain, PulseSpec, SnapshotField,
    SpectralMethod,
};
use crate::grid::{assemble_operator, LebedevGrid, MediumField};
use crate::linalg::{BlockMatrix, BlockTriangular};
use crate::rom::{build_rom_regularized, Regularization, Rom, RomError};

#[derive(Debug, Error)]
pub enum WaveError {
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Rom(#[from] RomError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("snapshot index {j} outside 0..{order}")]
    IndexOutOfRange { j: usize, order: usize },
}

pub type Result<T> = std::result::Result<T, WaveError>;

/// Forward-run settings shared by the data run and reference runs.
#[derive(Debug, Clone, Copy)]
pub struct RunSettings {
    pub tau: f64,
    /// Fine steps per `τ`.
    pub substeps: usize,
    pub near: NearDomain,
    pub method: SpectralMethod,
}

impl RunSettings {
    pub fn dt(&self) -> f64 {
        self.tau / self.substeps as f64
    }
}

/// Snapshots `u_j`, `j = 0..count`, of the transformed wave in `medium`.
pub fn medium_snapshots(
    medium: &MediumField,
    array: &ArrayGeometry,
    pulse: &PulseSpec,
    run: &RunSettings,
    count: usize,
) -> Result<Vec<SnapshotField>> {
    let u0 = initial_snapshot(medium, array, pulse, &run.near, run.method)?;
    let op = assemble_operator(medium);
    Ok(propagate(&op, &u0, run.dt(), run.tau, count)?)
}

/// Orthonormal causal basis `V = Ũ · map` built from reference snapshots.
#[derive(Debug, Clone)]
pub struct ReferenceBasis {
    pub grid: LebedevGrid,
    /// `ũ_0 … ũ_{n−1}` side by side (`num_dofs × 2nm`).
    pub snapshots: DMatrix<f64>,
    pub rom: Rom,
}

impl ReferenceBasis {
    /// Brute-force Grams `∫ũ_jᵀũ_l` and `∫ũ_jᵀ½(ũ_{l+1} + ũ_{|l−1|})` from
    /// `n + 1` snapshots, then the ROM with `reg` (use the data-side rank
    /// for spectral truncation).
    pub fn from_snapshots(snaps: &[SnapshotField], tau: f64, reg: &Regularization) -> Result<Self> {
        if snaps.len() < 2 {
            return Err(WaveError::DimensionMismatch("need at least two snapshots".into()));
        }
        let n = snaps.len() - 1;
        let b = snaps[0].columns();
        let grid = snaps[0].grid;
        let mut u = DMatrix::zeros(grid.num_dofs(), n * b);
        for (j, s) in snaps[..n].iter().enumerate() {
            u.view_mut((0, j * b), (grid.num_dofs(), b)).copy_from(&s.values);
        }
        let w = grid.weight();
        let mass = u.transpose() * &u * w;
        let mut stiff = DMatrix::zeros(n * b, n * b);
        for l in 0..n {
            let pu = if l == 0 { snaps[1].values.clone() } else { (&snaps[l + 1].values + &snaps[l - 1].values) * 0.5 };
            let col = u.transpose() * pu * w;
            stiff.view_mut((0, l * b), (n * b, b)).copy_from(&col);
        }
        let mut mass = BlockMatrix::new(mass, b).map_err(RomError::from)?;
        mass.symmetrize();
        let mut stiff = BlockMatrix::new(stiff, b).map_err(RomError::from)?;
        stiff.symmetrize();
        let rom = build_rom_regularized(&mass, &stiff, tau, reg)?;
        Ok(ReferenceBasis { grid, snapshots: u, rom })
    }

    /// Runs the forward solver in `medium` and builds the basis.
    pub fn compute(
        medium: &MediumField,
        array: &ArrayGeometry,
        pulse: &PulseSpec,
        run: &RunSettings,
        n: usize,
        reg: &Regularization,
    ) -> Result<Self> {
        step_ratio(run.tau, run.dt())?;
        let snaps = medium_snapshots(medium, array, pulse, run, n + 1)?;
        Self::from_snapshots(&snaps, run.tau, reg)
    }

    pub fn block_size(&self) -> usize {
        self.rom.block_size()
    }

    pub fn order(&self) -> usize {
        self.rom.order()
    }

    pub fn r_ref(&self) -> &BlockTriangular {
        &self.rom.r
    }

    /// `V` materialized on the whole grid (`num_dofs × 2rm`).
    pub fn basis(&self) -> DMatrix<f64> {
        &self.snapshots * &self.rom.basis_map
    }

    /// Rows of `V` at the given DOFs.
    pub fn basis_rows(&self, dofs: &[usize]) -> DMatrix<f64> {
        let sub = self.snapshots.select_rows(dofs);
        sub * &self.rom.basis_map
    }

    /// Common order of the basis and `r_data`; the leading blocks of both are
    /// used when they differ.
    pub fn common_order(&self, r_data: &BlockTriangular) -> Result<usize> {
        if r_data.block_size() != self.block_size() {
            return Err(WaveError::DimensionMismatch(format!(
                "R has blocks of size {}, basis has {}",
                r_data.block_size(),
                self.block_size()
            )));
        }
        Ok(self.order().min(r_data.num_blocks()))
    }

    /// Coefficients of `V R 𝔦_j`, `j < k`, in the snapshot columns.
    fn coefficients(&self, r_data: &BlockTriangular) -> Result<DMatrix<f64>> {
        let k = self.common_order(r_data)?;
        let cols = k * self.block_size();
        Ok(self.rom.basis_map.columns(0, cols) * r_data.leading(k).data())
    }

    /// All estimated snapshots `V R 𝔦_j`, `j < k`, side by side.
    pub fn estimate_all(&self, r_data: &BlockTriangular) -> Result<DMatrix<f64>> {
        Ok(&self.snapshots * self.coefficients(r_data)?)
    }

    /// All estimated snapshots restricted to `dofs`.
    pub fn estimate_rows(&self, r_data: &BlockTriangular, dofs: &[usize]) -> Result<DMatrix<f64>> {
        Ok(self.snapshots.select_rows(dofs) * self.coefficients(r_data)?)
    }
}

/// `u_j^est = V(·; c̃) R 𝔦_j`.
pub fn estimate_internal_wave(basis: &ReferenceBasis, r_data: &BlockTriangular, j: usize) -> Result<SnapshotField> {
    let order = basis.common_order(r_data)?;
    if j >= order {
        return Err(WaveError::IndexOutOfRange { j, order });
    }
    let b = basis.block_size();
    let coeff = basis.rom.basis_map.columns(0, order * b) * r_data.data().view((0, j * b), (order * b, b));
    Ok(SnapshotField { grid: basis.grid, j, values: &basis.snapshots * coeff })
}

/// Reference snapshots recovered as `V(·; c̃) R(c̃) 𝔦_j`.
pub fn born_wave(basis: &ReferenceBasis, j: usize) -> Result<SnapshotField> {
    estimate_internal_wave(basis, &basis.rom.r, j)
}
