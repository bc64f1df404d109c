//! Dense structured linear algebra on symmetric block matrices.
//!
//! Everything here works on `nalgebra::DMatrix<f64>` with an explicit block
//! size `b`. The kernels are the ones a block ROM needs: SPD square roots,
//! block Cholesky with SPD diagonal blocks, inversion of block upper
//! triangular factors, spectral truncation and block Lanczos with full
//! reorthogonalization.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not symmetric (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive definite (smallest eigenvalue {0:.3e})")]
    NotSpd(f64),
    #[error("Schur pivot of block {block} is not positive definite (smallest eigenvalue {min_eig:.3e})")]
    PivotNotSpd { block: usize, min_eig: f64 },
    #[error("diagonal block {block} is numerically singular (condition {cond:.3e})")]
    Singular { block: usize, cond: f64 },
    #[error("requested rank {rank} exceeds dimension {dim} or is not a multiple of block size {block}")]
    RankTooLarge { rank: usize, dim: usize, block: usize },
    #[error("kept eigenvalue {index} is not positive ({value:.3e}); reduce the rank")]
    NonPositiveSpectrum { index: usize, value: f64 },
    #[error("block Lanczos breakdown at step {step}")]
    Breakdown { step: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Tolerances used by the kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Relative Frobenius asymmetry accepted as "symmetric".
    pub symmetry: f64,
    /// Largest accepted condition number of a diagonal block.
    pub max_condition: f64,
    /// Lanczos residual blocks with smallest singular value below
    /// `breakdown * ‖Π‖_F` count as rank deficient.
    pub breakdown: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            symmetry: 1e-12,
            max_condition: 1e14,
            breakdown: 1e-12,
        }
    }
}

/// Square matrix partitioned into `b × b` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatrix {
    data: DMatrix<f64>,
    block_size: usize,
}

impl BlockMatrix {
    pub fn new(data: DMatrix<f64>, block_size: usize) -> Result<Self> {
        check_blocked(&data, block_size)?;
        Ok(BlockMatrix { data, block_size })
    }

    pub fn zeros(num_blocks: usize, block_size: usize) -> Self {
        let n = num_blocks * block_size;
        BlockMatrix {
            data: DMatrix::zeros(n, n),
            block_size,
        }
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.data.nrows() / self.block_size
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let b = self.block_size;
        self.data.view((i * b, j * b), (b, b)).into_owned()
    }

    pub fn set_block(&mut self, i: usize, j: usize, value: &DMatrix<f64>) {
        let b = self.block_size;
        self.data.view_mut((i * b, j * b), (b, b)).copy_from(value);
    }

    /// Replace the matrix by `(M + Mᵀ)/2`.
    pub fn symmetrize(&mut self) {
        symmetrize_in_place(&mut self.data);
    }

    /// `‖M − Mᵀ‖_F / ‖M‖_F`.
    pub fn asymmetry(&self) -> f64 {
        relative_asymmetry(&self.data)
    }

    /// Frobenius norm of all blocks `(i, j)` with `|i − j| ≥ 2`.
    pub fn off_tridiagonal_norm(&self) -> f64 {
        let nb = self.num_blocks();
        let mut acc = 0.0;
        for i in 0..nb {
            for j in 0..nb {
                if i.abs_diff(j) >= 2 {
                    acc += self.block(i, j).norm_squared();
                }
            }
        }
        acc.sqrt()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.norm()
    }
}

/// Upper block triangular matrix with SPD diagonal blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTriangular {
    data: DMatrix<f64>,
    block_size: usize,
}

impl BlockTriangular {
    /// Validates the zero pattern below the block diagonal.
    pub fn new(data: DMatrix<f64>, block_size: usize) -> Result<Self> {
        check_blocked(&data, block_size)?;
        let b = block_size;
        let nb = data.nrows() / b;
        for bi in 0..nb {
            for bj in 0..bi {
                if data.view((bi * b, bj * b), (b, b)).iter().any(|v| *v != 0.0) {
                    return Err(LinalgError::DimensionMismatch(format!(
                        "block ({bi}, {bj}) below the diagonal is nonzero"
                    )));
                }
            }
        }
        Ok(BlockTriangular {
            data,
            block_size,
        })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.data.nrows() / self.block_size
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let b = self.block_size;
        self.data.view((i * b, j * b), (b, b)).into_owned()
    }

    /// Leading `k × k` block principal submatrix (still upper block triangular).
    pub fn leading(&self, num_blocks: usize) -> BlockTriangular {
        let k = num_blocks * self.block_size;
        BlockTriangular {
            data: self.data.view((0, 0), (k, k)).into_owned(),
            block_size: self.block_size,
        }
    }
}

fn check_blocked(data: &DMatrix<f64>, block_size: usize) -> Result<()> {
    if block_size == 0 || data.nrows() != data.ncols() || !data.nrows().is_multiple_of(block_size) {
        return Err(LinalgError::DimensionMismatch(format!(
            "{}x{} matrix with block size {}",
            data.nrows(),
            data.ncols(),
            block_size
        )));
    }
    Ok(())
}

pub fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let norm = m.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).norm() / norm
}

pub fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let mut sym = m.clone();
    symmetrize_in_place(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// `V f(Λ) Vᵀ` for a symmetric eigendecomposition.
fn spectral_map(values: &DVector<f64>, vectors: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let mut scaled = vectors.clone();
    for (k, mut col) in scaled.column_iter_mut().enumerate() {
        col *= f(values[k]);
    }
    let mut out = scaled * vectors.transpose();
    symmetrize_in_place(&mut out);
    out
}

/// Unique SPD square root of an SPD matrix.
pub fn spd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spd_sqrt_tol(m, &Tolerances::default())
}

pub fn spd_sqrt_tol(m: &DMatrix<f64>, tol: &Tolerances) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::DimensionMismatch("spd_sqrt needs a square matrix".into()));
    }
    let asym = relative_asymmetry(m);
    if asym > tol.symmetry {
        return Err(LinalgError::NotSymmetric(asym));
    }
    let (values, vectors) = sym_eigen_desc(m);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) {
        return Err(LinalgError::NotSpd(min));
    }
    Ok(spectral_map(&values, &vectors, f64::sqrt))
}

/// Returns `(S, S⁻¹)` with `S` the SPD square root.
fn sqrt_and_inverse(pivot: &DMatrix<f64>) -> std::result::Result<(DMatrix<f64>, DMatrix<f64>), f64> {
    let (values, vectors) = sym_eigen_desc(pivot);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) {
        return Err(min);
    }
    Ok((
        spectral_map(&values, &vectors, f64::sqrt),
        spectral_map(&values, &vectors, |v| 1.0 / v.sqrt()),
    ))
}

/// Block Cholesky factorization `M = RᵀR` with `R` upper block triangular and
/// SPD diagonal blocks (square roots of the Schur pivots).
pub fn block_cholesky(m: &BlockMatrix) -> Result<BlockTriangular> {
    block_cholesky_tol(m, &Tolerances::default())
}

pub fn block_cholesky_tol(m: &BlockMatrix, tol: &Tolerances) -> Result<BlockTriangular> {
    let asym = m.asymmetry();
    if asym > tol.symmetry {
        return Err(LinalgError::NotSymmetric(asym));
    }
    let b = m.block_size();
    let nb = m.num_blocks();
    let dim = m.dim();
    let mut r = DMatrix::<f64>::zeros(dim, dim);
    for k in 0..nb {
        let above = r.view((0, k * b), (k * b, b)).into_owned();
        let mut pivot = m.block(k, k) - above.transpose() * &above;
        symmetrize_in_place(&mut pivot);
        let (root, root_inv) =
            sqrt_and_inverse(&pivot).map_err(|min_eig| LinalgError::PivotNotSpd { block: k, min_eig })?;
        r.view_mut((k * b, k * b), (b, b)).copy_from(&root);
        if k + 1 < nb {
            let width = dim - (k + 1) * b;
            let rest = m.data().view((k * b, (k + 1) * b), (b, width)).into_owned();
            let above_rest = r.view((0, (k + 1) * b), (k * b, width)).into_owned();
            let row = &root_inv * (rest - above.transpose() * above_rest);
            r.view_mut((k * b, (k + 1) * b), (b, width)).copy_from(&row);
        }
    }
    Ok(BlockTriangular { data: r, block_size: b })
}

/// Inverse of an upper block triangular matrix with SPD diagonal blocks.
pub fn block_tri_inverse(r: &BlockTriangular) -> Result<DMatrix<f64>> {
    block_tri_inverse_tol(r, &Tolerances::default())
}

pub fn block_tri_inverse_tol(r: &BlockTriangular, tol: &Tolerances) -> Result<DMatrix<f64>> {
    let b = r.block_size();
    let nb = r.num_blocks();
    let dim = r.dim();
    let mut diag_inv = Vec::with_capacity(nb);
    for k in 0..nb {
        let (values, vectors) = sym_eigen_desc(&r.block(k, k));
        let max = values[0];
        let min = values[b - 1];
        if !(min > 0.0) || max / min > tol.max_condition {
            let cond = if min > 0.0 { max / min } else { f64::INFINITY };
            return Err(LinalgError::Singular { block: k, cond });
        }
        diag_inv.push(spectral_map(&values, &vectors, |v| 1.0 / v));
    }
    let mut x = DMatrix::<f64>::zeros(dim, dim);
    for j in 0..nb {
        x.view_mut((j * b, j * b), (b, b)).copy_from(&diag_inv[j]);
        for i in (0..j).rev() {
            let len = (j - i) * b;
            let row = r.data().view((i * b, (i + 1) * b), (b, len));
            let col = x.view(((i + 1) * b, j * b), (len, b));
            let blk = -(&diag_inv[i] * (row * col));
            x.view_mut((i * b, j * b), (b, b)).copy_from(&blk);
        }
    }
    Ok(x)
}

/// Eigenpairs belonging to the `rank` algebraically largest eigenvalues,
/// sorted descending. Returns `(Y, diag(Λ))`.
pub fn spectral_truncate(m: &BlockMatrix, rank: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let b = m.block_size();
    let dim = m.dim();
    if rank == 0 || rank > dim || !rank.is_multiple_of(b) {
        return Err(LinalgError::RankTooLarge { rank, dim, block: b });
    }
    let (values, vectors) = sym_eigen_desc(m.data());
    for k in 0..rank {
        if !(values[k] > 0.0) {
            return Err(LinalgError::NonPositiveSpectrum { index: k, value: values[k] });
        }
    }
    Ok((vectors.columns(0, rank).into_owned(), values.rows(0, rank).into_owned()))
}

/// Number of eigenvalues above `threshold · λ_max`, rounded down to a
/// multiple of `block`.
pub fn spectral_rank(values_desc: &DVector<f64>, threshold: f64, block: usize) -> usize {
    let Some(&max) = values_desc.iter().next() else {
        return 0;
    };
    let count = values_desc.iter().take_while(|&&v| v > threshold * max).count();
    count - count % block
}

/// Block Lanczos tridiagonalization of `Π` started from the orthonormal block
/// `B₀`, with full reorthogonalization at every step. Runs to completion
/// (`Q` square) and returns `(Q, T = QᵀΠQ)`.
pub fn block_lanczos(pi: &DMatrix<f64>, block: usize, b0: &DMatrix<f64>) -> Result<(DMatrix<f64>, BlockMatrix)> {
    block_lanczos_tol(pi, block, b0, &Tolerances::default())
}

pub fn block_lanczos_tol(
    pi: &DMatrix<f64>,
    block: usize,
    b0: &DMatrix<f64>,
    tol: &Tolerances,
) -> Result<(DMatrix<f64>, BlockMatrix)> {
    lanczos(pi, block, b0, tol, false)
}

/// Like [`block_lanczos_tol`], but a breakdown at step `k` ends the
/// recursion and returns the `dim × kb` basis of the reachable Krylov space
/// with its `kb × kb` projection.
pub fn block_lanczos_partial(
    pi: &DMatrix<f64>,
    block: usize,
    b0: &DMatrix<f64>,
    tol: &Tolerances,
) -> Result<(DMatrix<f64>, BlockMatrix)> {
    lanczos(pi, block, b0, tol, true)
}

fn lanczos(
    pi: &DMatrix<f64>,
    block: usize,
    b0: &DMatrix<f64>,
    tol: &Tolerances,
    partial: bool,
) -> Result<(DMatrix<f64>, BlockMatrix)> {
    check_blocked(pi, block)?;
    let dim = pi.nrows();
    if b0.nrows() != dim || b0.ncols() != block {
        return Err(LinalgError::DimensionMismatch(format!(
            "starting block is {}x{}, expected {}x{}",
            b0.nrows(),
            b0.ncols(),
            dim,
            block
        )));
    }
    let steps = dim / block;
    let scale = pi.norm().max(f64::MIN_POSITIVE);
    let mut q = DMatrix::<f64>::zeros(dim, dim);
    q.view_mut((0, 0), (dim, block)).copy_from(b0);
    let mut done = steps;
    for j in 0..steps - 1 {
        let filled = (j + 1) * block;
        let current = q.view((0, j * block), (dim, block)).into_owned();
        let mut w = pi * current;
        for _ in 0..2 {
            let basis = q.view((0, 0), (dim, filled));
            let coeff = basis.transpose() * &w;
            w -= basis * coeff;
        }
        let gram = w.transpose() * &w;
        let (values, vectors) = sym_eigen_desc(&gram);
        let min = values[block - 1];
        if !(min > (tol.breakdown * scale).powi(2)) {
            if partial {
                done = j + 1;
                break;
            }
            return Err(LinalgError::Breakdown { step: j + 1 });
        }
        let inv_root = spectral_map(&values, &vectors, |v| 1.0 / v.sqrt());
        let next = w * inv_root;
        q.view_mut((0, filled), (dim, block)).copy_from(&next);
    }
    let q = q.columns(0, done * block).into_owned();
    let mut t = q.transpose() * pi * &q;
    symmetrize_in_place(&mut t);
    Ok((q, BlockMatrix { data: t, block_size: block }))
}
