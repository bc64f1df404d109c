//! Wave-speed estimation: Gaussian parametrization of the Cholesky factor of
//! `c̃^{−2}`, ROM and FWI objectives, finite-difference Jacobians and
//! Gauss–Newton with adaptive Tikhonov regularization and layer peeling.

use nalgebra::{DMatrix, DVector, Matrix2};
use rayon::prelude::*;
use thiserror::Error;

use crate::forward::{compute_data, ArrayGeometry, DataSeries, ForwardError, PulseSpec};
use crate::grid::{LebedevGrid, MediumField, SpeedTensor};
use crate::internal_wave::{medium_snapshots, RunSettings, WaveError};
use crate::linalg::{sym_eigen_desc, BlockTriangular};
use crate::rom::{assemble_mass, assemble_stiffness, mass_factor, Regularization, RomError};

#[derive(Debug, Error)]
pub enum InversionError {
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Wave(#[from] WaveError),
    #[error(transparent)]
    Rom(#[from] RomError),
    #[error("γ has diagonal entry {value} at ({x1}, {x2})")]
    DegenerateGamma { value: f64, x1: f64, x2: f64 },
    #[error("reference ROM has order {got}, data ROM has order {expected}")]
    OrderMismatch { expected: usize, got: usize },
    #[error("data ROM factor is singular")]
    SingularFactor,
    #[error("Gauss–Newton system is singular")]
    SingularSystem,
    #[error("Jacobian column {index}: {source}")]
    Column { index: usize, source: Box<InversionError> },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, InversionError>;

/// Gaussian basis `φ_j(x) = exp[−(x₁−X₁ⱼ)²/2σ₁² − (x₂−X₂ⱼ)²/2σ₂²]` and the
/// background `c_o`. Coefficients are laid out `(α₁,·, α₂,·, α₃,·)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parametrization {
    pub centers: Vec<(f64, f64)>,
    pub sigma1: f64,
    pub sigma2: f64,
    pub c_o: f64,
}

impl Parametrization {
    pub fn new(centers: Vec<(f64, f64)>, sigma1: f64, sigma2: f64, c_o: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(InversionError::InvalidConfig("no basis functions".into()));
        }
        if !(sigma1 > 0.0 && sigma2 > 0.0 && c_o > 0.0) {
            return Err(InversionError::InvalidConfig("widths and c_o must be positive".into()));
        }
        Ok(Parametrization { centers, sigma1, sigma2, c_o })
    }

    /// Centers `x1.0, x1.0 + d1, … ≤ x1.1` times `x2.0, x2.0 + d2, … ≤ x2.1`.
    pub fn lattice(
        x1: (f64, f64),
        x2: (f64, f64),
        spacing: (f64, f64),
        sigma: (f64, f64),
        c_o: f64,
    ) -> Result<Self> {
        if !(spacing.0 > 0.0 && spacing.1 > 0.0) || x1.1 < x1.0 || x2.1 < x2.0 {
            return Err(InversionError::InvalidConfig("empty lattice".into()));
        }
        let count = |lo: f64, hi: f64, d: f64| ((hi - lo) / d + 1e-9).floor() as usize + 1;
        let mut centers = Vec::new();
        for i in 0..count(x1.0, x1.1, spacing.0) {
            for j in 0..count(x2.0, x2.1, spacing.1) {
                centers.push((x1.0 + i as f64 * spacing.0, x2.0 + j as f64 * spacing.1));
            }
        }
        Self::new(centers, sigma.0, sigma.1, c_o)
    }

    /// Lattice with spacings `λ_c/4` and `5λ_c/16`, `σ₁ = 2.3ℓ`, `σ₂ = 2.9ℓ`.
    pub fn standard(x1: (f64, f64), x2: (f64, f64), lambda_c: f64, spacing: f64, c_o: f64) -> Result<Self> {
        Self::lattice(x1, x2, (lambda_c / 4.0, 5.0 * lambda_c / 16.0), (2.3 * spacing, 2.9 * spacing), c_o)
    }

    /// Number of basis functions `N`.
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn num_params(&self) -> usize {
        3 * self.len()
    }

    pub fn phi(&self, j: usize, x: (f64, f64)) -> f64 {
        let (c1, c2) = self.centers[j];
        let a = (x.0 - c1) / self.sigma1;
        let b = (x.1 - c2) / self.sigma2;
        (-0.5 * (a * a + b * b)).exp()
    }

    /// `c̃(α)` at every node of `grid`.
    pub fn medium(&self, alpha: &DVector<f64>, grid: &LebedevGrid) -> Result<MediumField> {
        let tensors = (0..grid.num_nodes())
            .map(|k| {
                let x = grid.position(k);
                speed_from_gamma(&gamma_field(self, alpha, x), self.c_o).map_err(|e| match e {
                    InversionError::DegenerateGamma { value, .. } => {
                        InversionError::DegenerateGamma { value, x1: x.0, x2: x.1 }
                    }
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MediumField { grid: *grid, c_o: self.c_o, tensors })
    }
}

/// Upper triangular `γ(x)` with `γ_l = (1 − δ_{l3}) c_o^{−1} + Σⱼ α_{l,j} φⱼ(x)`.
pub fn gamma_field(param: &Parametrization, alpha: &DVector<f64>, x: (f64, f64)) -> Matrix2<f64> {
    let n = param.len();
    assert_eq!(alpha.len(), 3 * n, "coefficient vector has the wrong length");
    let mut g = [1.0 / param.c_o, 1.0 / param.c_o, 0.0];
    for j in 0..n {
        let phi = param.phi(j, x);
        if phi == 0.0 {
            continue;
        }
        for (l, gl) in g.iter_mut().enumerate() {
            *gl += alpha[l * n + j] * phi;
        }
    }
    Matrix2::new(g[0], g[2], 0.0, g[1])
}

/// `c̃ = ((γᵀγ)^{−1})^{1/2}`.
pub fn speed_from_gamma(gamma: &Matrix2<f64>, c_o: f64) -> Result<SpeedTensor> {
    let floor = 1e-12 / c_o;
    for d in [gamma[(0, 0)], gamma[(1, 1)]] {
        if !(d > floor) {
            return Err(InversionError::DegenerateGamma { value: d, x1: f64::NAN, x2: f64::NAN });
        }
    }
    let g_inv = Matrix2::new(
        1.0 / gamma[(0, 0)],
        -gamma[(0, 1)] / (gamma[(0, 0)] * gamma[(1, 1)]),
        0.0,
        1.0 / gamma[(1, 1)],
    );
    // c̃² = γ^{−1} γ^{−T}
    let c2 = g_inv * g_inv.transpose();
    let det = c2[(0, 0)] * c2[(1, 1)] - c2[(0, 1)] * c2[(1, 0)];
    let s = det.sqrt();
    let t = (c2[(0, 0)] + c2[(1, 1)] + 2.0 * s).sqrt();
    let root = (c2 + Matrix2::identity() * s) / t;
    Ok(SpeedTensor::from_matrix(&root))
}

/// Everything needed to synthesize data in a trial medium.
#[derive(Debug, Clone)]
pub struct ForwardContext {
    pub grid: LebedevGrid,
    pub array: ArrayGeometry,
    pub pulse: PulseSpec,
    pub run: RunSettings,
    /// ROM order; `2n` data matrices are synthesized.
    pub n: usize,
    pub regularization: Regularization,
}

impl ForwardContext {
    /// `𝔻(jτ; c̃)`, `j = 0..2n`, from snapshots in `medium`.
    pub fn data(&self, medium: &MediumField) -> Result<DataSeries> {
        let snaps = medium_snapshots(medium, &self.array, &self.pulse, &self.run, 2 * self.n)?;
        Ok(compute_data(&snaps, &snaps[0], self.run.tau)?)
    }

    /// `R(c̃)` built with the same regularization as the data side.
    pub fn factor(&self, medium: &MediumField) -> Result<BlockTriangular> {
        data_factor(&self.data(medium)?, &self.regularization)
    }

    pub fn with_order(&self, n: usize) -> Self {
        ForwardContext { n, ..self.clone() }
    }
}

/// Square root `R` of the regularized mass matrix of `data`.
pub fn data_factor(data: &DataSeries, reg: &Regularization) -> Result<BlockTriangular> {
    let m = assemble_mass(data)?;
    let s = assemble_stiffness(data)?;
    Ok(mass_factor(&m, &s, data.tau, reg)?)
}

/// `‖R(c̃)R^{−1} − I‖_F²` as a least-squares residual, over the leading
/// `order` blocks.
pub struct RomObjective<'a> {
    pub context: &'a ForwardContext,
    pub param: &'a Parametrization,
    r_data_inv: DMatrix<f64>,
    block: usize,
    order: usize,
}

impl<'a> RomObjective<'a> {
    pub fn new(context: &'a ForwardContext, param: &'a Parametrization, r_data: &BlockTriangular) -> Result<Self> {
        let r_data_inv = r_data.data().clone().lu().try_inverse().ok_or(InversionError::SingularFactor)?;
        if !r_data_inv.iter().all(|v| v.is_finite()) {
            return Err(InversionError::SingularFactor);
        }
        Ok(RomObjective { context, param, r_data_inv, block: r_data.block_size(), order: r_data.num_blocks() })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Compares only the leading `order` blocks from now on.
    pub fn limit_order(&mut self, order: usize) {
        self.order = self.order.min(order).max(1);
    }

    /// Value and residual matrix `R(c̃)R^{−1} − I`.
    pub fn evaluate(&self, alpha: &DVector<f64>) -> Result<(f64, DMatrix<f64>)> {
        let medium = self.param.medium(alpha, &self.context.grid)?;
        let r = self.context.factor(&medium)?;
        if r.num_blocks() < self.order {
            return Err(InversionError::OrderMismatch { expected: self.order, got: r.num_blocks() });
        }
        let dim = self.order * self.block;
        let res = r.leading(self.order).data() * self.r_data_inv.view((0, 0), (dim, dim)) - DMatrix::identity(dim, dim);
        Ok((res.norm_squared(), res))
    }
}

/// `τ Σⱼ ‖𝔻(jτ) − 𝔻(jτ; c̃)‖_F²` with residual `√τ vec(𝔻 − 𝔻(c̃))`.
pub struct FwiObjective<'a> {
    pub context: &'a ForwardContext,
    pub param: &'a Parametrization,
    pub data: &'a DataSeries,
}

impl FwiObjective<'_> {
    pub fn evaluate(&self, alpha: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let medium = self.param.medium(alpha, &self.context.grid)?;
        let synth = self.context.data(&medium)?;
        Ok(fwi_misfit(self.data, &synth))
    }
}

/// FWI value and residual between two series of equal length.
pub fn fwi_misfit(data: &DataSeries, synth: &DataSeries) -> (f64, DVector<f64>) {
    let scale = data.tau.sqrt();
    let entries: Vec<f64> = data
        .matrices
        .iter()
        .zip(&synth.matrices)
        .flat_map(|(d, s)| (d - s).iter().map(|v| v * scale).collect::<Vec<_>>())
        .collect();
    let r = DVector::from_vec(entries);
    (r.norm_squared(), r)
}

pub fn rom_objective(
    alpha: &DVector<f64>,
    r_data: &BlockTriangular,
    context: &ForwardContext,
    param: &Parametrization,
) -> Result<(f64, DMatrix<f64>)> {
    RomObjective::new(context, param, r_data)?.evaluate(alpha)
}

pub fn fwi_objective(
    alpha: &DVector<f64>,
    data: &DataSeries,
    context: &ForwardContext,
    param: &Parametrization,
) -> Result<(f64, DVector<f64>)> {
    FwiObjective { context, param, data }.evaluate(alpha)
}

/// Forward-difference Jacobian of `residual` at `alpha`, columns in parallel.
/// A column whose forward evaluation fails falls back to the backward
/// difference. `r0` is the residual at `alpha` if already known.
pub fn jacobian_fd<F>(residual: F, alpha: &DVector<f64>, h: f64, r0: Option<&DVector<f64>>) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    if !(h > 0.0) {
        return Err(InversionError::InvalidConfig(format!("finite-difference step {h}")));
    }
    let base = match r0 {
        Some(r) => r.clone(),
        None => residual(alpha)?,
    };
    let cols = (0..alpha.len())
        .into_par_iter()
        .map(|k| {
            let mut a = alpha.clone();
            a[k] += h;
            residual(&a).map(|r| (r - &base) / h).or_else(|_| {
                a[k] = alpha[k] - h;
                residual(&a)
                    .map(|r| (&base - r) / h)
                    .map_err(|e| InversionError::Column { index: k, source: Box::new(e) })
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_columns(&cols))
}

/// `ν = λ_{round(fraction · base)}` of the descending spectrum of `JᵀJ`
/// (1-based, clamped to the spectrum).
pub fn adaptive_nu(h: &DMatrix<f64>, fraction: f64, base: usize) -> f64 {
    let (values, _) = sym_eigen_desc(h);
    let idx = ((fraction * base as f64).round() as usize).clamp(1, values.len());
    values[idx - 1].max(0.0)
}

/// `Δα = −(JᵀJ + νI)^{−1} Jᵀr`.
pub fn tikhonov_step(j: &DMatrix<f64>, r: &DVector<f64>, nu: f64) -> Result<DVector<f64>> {
    let g = j.transpose() * r;
    if g.iter().all(|&v| v == 0.0) {
        return Ok(DVector::zeros(j.ncols()));
    }
    let h = j.transpose() * j + DMatrix::identity(j.ncols(), j.ncols()) * nu;
    let chol = h.cholesky().ok_or(InversionError::SingularSystem)?;
    let step = -chol.solve(&g);
    if step.iter().all(|v| v.is_finite()) {
        Ok(step)
    } else {
        Err(InversionError::SingularSystem)
    }
}

/// Gauss–Newton step with `ν` from [`adaptive_nu`]; `base` is the number of
/// basis functions `N`. Returns `(Δα, ν)`.
pub fn gauss_newton_step(j: &DMatrix<f64>, r: &DVector<f64>, fraction: f64, base: usize) -> Result<(DVector<f64>, f64)> {
    let nu = adaptive_nu(&(j.transpose() * j), fraction, base);
    Ok((tikhonov_step(j, r, nu)?, nu))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Rom,
    Fwi,
}

/// Count that multiplies the `ν` fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NuBase {
    /// Number of basis functions `N`.
    Basis,
    /// Number of unknowns `3N`.
    Unknowns,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionConfig {
    pub objective: ObjectiveKind,
    pub fd_step: f64,
    pub max_iterations: usize,
    /// Stop after `patience` consecutive relative decreases below this.
    pub tolerance: f64,
    pub patience: usize,
    pub nu_fraction: f64,
    pub nu_base: NuBase,
    /// Increasing orders `n′` for layer peeling; empty means the full data.
    pub schedule: Vec<usize>,
    pub max_halvings: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            objective: ObjectiveKind::Rom,
            fd_step: 1e-4,
            max_iterations: 30,
            tolerance: 1e-4,
            patience: 2,
            nu_fraction: 0.9,
            nu_base: NuBase::Basis,
            schedule: Vec::new(),
            max_halvings: 10,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.nu_fraction > 0.0 && self.nu_fraction <= 1.0) {
            return Err(InversionError::InvalidConfig(format!("ν fraction {} outside (0, 1]", self.nu_fraction)));
        }
        if !(self.fd_step > 0.0) {
            return Err(InversionError::InvalidConfig(format!("finite-difference step {}", self.fd_step)));
        }
        if self.schedule.windows(2).any(|w| w[1] <= w[0]) {
            return Err(InversionError::InvalidConfig("schedule must be strictly increasing".into()));
        }
        if self.schedule.iter().any(|&k| k == 0 || k > n) {
            return Err(InversionError::InvalidConfig(format!("schedule entries must lie in 1..={n}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// Order `n′` of the current layer-peeling stage.
    pub stage: usize,
    pub iteration: usize,
    /// Objective after the update.
    pub objective: f64,
    pub step_norm: f64,
    pub nu: f64,
    pub halvings: usize,
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub alpha: DVector<f64>,
    pub medium: MediumField,
    /// Objective at `α = 0` for the first stage.
    pub initial_objective: f64,
    pub final_objective: f64,
    pub log: Vec<IterationRecord>,
    /// False when the last stage stopped on the iteration cap or a failed
    /// line search; the best iterate is still returned.
    pub converged: bool,
}

/// Residual and value of the selected objective for one stage.
enum Stage<'a> {
    Rom(RomObjective<'a>),
    Fwi(FwiObjective<'a>),
}

impl Stage<'_> {
    fn residual(&self, alpha: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Stage::Rom(o) => o.evaluate(alpha).map(|(_, r)| DVector::from_column_slice(r.as_slice())),
            Stage::Fwi(o) => o.evaluate(alpha).map(|(_, r)| r),
        }
    }
}

/// Gauss–Newton inversion from `α = 0`, stage by stage over the schedule.
/// The data-side factor uses `context.regularization`; with spectral
/// truncation the trial factors are capped at the data rank, and the
/// objective compares the blocks both sides have at the start of a stage.
pub fn invert(
    data: &DataSeries,
    context: &ForwardContext,
    config: &InversionConfig,
    param: &Parametrization,
) -> Result<InversionResult> {
    let n = data.n();
    config.validate(n)?;
    let schedule = if config.schedule.is_empty() { vec![n] } else { config.schedule.clone() };
    let mut alpha = DVector::zeros(param.num_params());
    let mut log = Vec::new();
    let mut initial_objective = None;
    let mut value = 0.0;
    let mut converged = false;
    for &order in &schedule {
        let ctx = context.with_order(order);
        let window = data.truncated(order);
        let r_data = match config.objective {
            ObjectiveKind::Rom => Some(data_factor(&window, &ctx.regularization)?),
            ObjectiveKind::Fwi => None,
        };
        let ctx = match (&r_data, ctx.regularization) {
            (Some(r), Regularization::Spectral { threshold, .. }) => ForwardContext {
                regularization: Regularization::Spectral { threshold, rank: Some(r.dim()) },
                ..ctx
            },
            _ => ctx,
        };
        let stage = match &r_data {
            Some(r) => {
                let mut objective = RomObjective::new(&ctx, param, r)?;
                if let Err(InversionError::OrderMismatch { got, .. }) = objective.evaluate(&alpha) {
                    objective.limit_order(got);
                }
                Stage::Rom(objective)
            }
            None => Stage::Fwi(FwiObjective { context: &ctx, param, data: &window }),
        };
        let mut r = stage.residual(&alpha)?;
        value = r.norm_squared();
        initial_objective.get_or_insert(value);
        converged = false;
        let mut slow = 0;
        for iteration in 0..config.max_iterations {
            if value == 0.0 {
                converged = true;
                log.push(IterationRecord { stage: order, iteration, objective: 0.0, step_norm: 0.0, nu: 0.0, halvings: 0 });
                break;
            }
            let j = jacobian_fd(|a| stage.residual(a), &alpha, config.fd_step, Some(&r))?;
            let base = match config.nu_base {
                NuBase::Basis => param.len(),
                NuBase::Unknowns => param.num_params(),
            };
            let (step, nu) = gauss_newton_step(&j, &r, config.nu_fraction, base)?;
            let mut scale = 1.0;
            let mut accepted = None;
            for halvings in 0..=config.max_halvings {
                let trial = &alpha + &step * scale;
                match stage.residual(&trial) {
                    Ok(rt) if rt.norm_squared() <= value => {
                        accepted = Some((trial, rt, halvings));
                        break;
                    }
                    Ok(_) | Err(InversionError::DegenerateGamma { .. }) | Err(InversionError::OrderMismatch { .. }) => {}
                    Err(InversionError::Rom(_)) => {}
                    Err(e) => return Err(e),
                }
                scale *= 0.5;
            }
            let Some((trial, rt, halvings)) = accepted else {
                break;
            };
            let new_value = rt.norm_squared();
            log.push(IterationRecord {
                stage: order,
                iteration,
                objective: new_value,
                step_norm: step.norm() * scale,
                nu,
                halvings,
            });
            let decrease = (value - new_value) / value;
            alpha = trial;
            r = rt;
            value = new_value;
            slow = if decrease < config.tolerance { slow + 1 } else { 0 };
            if slow >= config.patience {
                converged = true;
                break;
            }
        }
    }
    let medium = param.medium(&alpha, &context.grid)?;
    Ok(InversionResult {
        alpha,
        medium,
        initial_objective: initial_objective.unwrap_or(0.0),
        final_objective: value,
        log,
        converged,
    })
}
