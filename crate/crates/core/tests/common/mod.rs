//! Oracles shared by the integration tests.
#![allow(dead_code)]

use emrom::forward::{exact_snapshots, initial_snapshot, propagate, ArrayGeometry, NearDomain, PulseSpec, SpectralMethod};
use emrom::grid::{assemble_operator, LebedevGrid, MediumField, SpeedTensor};

/// Smooth anisotropic medium centered in `[0, 10]²`.
pub fn smooth_tensor(x: (f64, f64)) -> SpeedTensor {
    let g = (-((x.0 - 5.0).powi(2) + (x.1 - 5.0).powi(2)) / 8.0).exp();
    SpeedTensor::new(1.0 + 0.3 * g, 1.0 + 0.2 * g, 0.1 * g)
}

fn psi(x: (f64, f64)) -> [f64; 2] {
    let g = (-((x.0 - 5.2).powi(2) + (x.1 - 4.8).powi(2)) / 3.0).exp();
    [g * (0.7 * x.1).sin(), g * (0.5 * x.0).cos()]
}

fn c_psi(x: (f64, f64)) -> [f64; 2] {
    let c = smooth_tensor(x);
    let p = psi(x);
    [c.c11 * p[0] + c.c12 * p[1], c.c12 * p[0] + c.c22 * p[1]]
}

/// `∂₁(cψ)₂ − ∂₂(cψ)₁` by fine central differences.
fn rot(x: (f64, f64)) -> f64 {
    let d = 1e-4;
    (c_psi((x.0 + d, x.1))[1] - c_psi((x.0 - d, x.1))[1]) / (2.0 * d)
        - (c_psi((x.0, x.1 + d))[0] - c_psi((x.0, x.1 - d))[0]) / (2.0 * d)
}

/// `−c ∇⊥(∇⊥·cψ)` evaluated pointwise.
fn continuous_operator(x: (f64, f64)) -> [f64; 2] {
    let d = 1e-3;
    let v = [
        (rot((x.0, x.1 + d)) - rot((x.0, x.1 - d))) / (2.0 * d),
        -(rot((x.0 + d, x.1)) - rot((x.0 - d, x.1))) / (2.0 * d),
    ];
    let c = smooth_tensor(x);
    [c.c11 * v[0] + c.c12 * v[1], c.c12 * v[0] + c.c22 * v[1]]
}

/// Max error of the assembled operator on the manufactured field over
/// `[2, 8]²`, for grid spacing `h` on `[0, 10]²`.
pub fn operator_error(h: f64) -> f64 {
    let n = (10.0 / h).round() as usize + 1;
    let grid = LebedevGrid::new(n, n, h).unwrap();
    let op = assemble_operator(&MediumField::from_fn(grid, 1.0, smooth_tensor));
    let x: Vec<f64> =
        (0..grid.num_dofs()).map(|d| if grid.is_pinned(d) { 0.0 } else { psi(grid.position(d / 2))[d % 2] }).collect();
    let mut y = vec![0.0; x.len()];
    op.apply(&x, &mut y);
    let mut err = 0.0_f64;
    for (d, v) in y.iter().enumerate() {
        let p = grid.position(d / 2);
        if (p.0 - 5.0).abs() <= 3.0 && (p.1 - 5.0).abs() <= 3.0 {
            err = err.max((v - continuous_operator(p)[d % 2]).abs());
        }
    }
    err
}

/// Relative error of leapfrog snapshots against the cosine propagator at
/// `t = 4τ`, for `substeps` steps per `τ`.
pub fn leapfrog_errors(substeps: &[usize]) -> Vec<f64> {
    let grid = LebedevGrid::new(16, 12, 1.0).unwrap();
    let medium = MediumField::from_fn(grid, 1.0, |x| smooth_tensor((x.0 * 10.0 / 15.0, x.1 * 10.0 / 11.0)));
    let pulse = PulseSpec::new(0.9, 0.25);
    let array = ArrayGeometry::linear(&grid, 2, 4.0, 3.0).unwrap();
    let near = NearDomain { depth: f64::INFINITY, min_margin: 0.0 };
    let u0 = initial_snapshot(&medium, &array, &pulse, &near, SpectralMethod::Dense).unwrap();
    let op = assemble_operator(&medium);
    let tau = 0.8;
    let exact = exact_snapshots(&op, &u0, tau, 5).unwrap();
    substeps
        .iter()
        .map(|&k| {
            let approx = propagate(&op, &u0, tau / k as f64, tau, 5).unwrap();
            (&approx[4].values - &exact[4].values).norm() / exact[4].values.norm()
        })
        .collect()
}

/// `log₂` of successive error ratios for halved steps.
pub fn observed_orders(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}
