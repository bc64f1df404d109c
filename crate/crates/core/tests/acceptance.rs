//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p emrom --test acceptance -- 7 9` runs a subset.

mod common;

use std::cell::OnceCell;
use std::error::Error;
use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use emrom::forward::{
    add_noise, compute_data, exact_snapshots, initial_snapshot, simulate_response, transform_response, ArrayGeometry,
    DataSeries, NearDomain, PulseSpec, SnapshotField, SpectralMethod,
};
use emrom::grid::{
    assemble_operator, build_medium, Collar, LebedevGrid, MediumField, PhantomKind, PhantomSpec, Region, Shape,
    SpeedTensor,
};
use emrom::imaging::{
    peak_offset, peak_to_artifact, range_derivative, reference_greens, rom_image, rtm_image, ImageField, ImagingGrid,
};
use emrom::internal_wave::{estimate_internal_wave, medium_snapshots, ReferenceBasis, RunSettings};
use emrom::inversion::{
    data_factor, gauss_newton_step, invert, jacobian_fd, ForwardContext, InversionConfig, Parametrization, RomObjective,
};
use emrom::linalg::{block_cholesky, block_lanczos, spd_sqrt, spectral_rank, sym_eigen_desc};
use emrom::rom::{
    assemble_mass, assemble_stiffness, build_rom_from_data, regularize_spectral, verify_interpolation, Regularization,
};

type Res<T> = Result<T, Box<dyn Error>>;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Res<Outcome> {
    Ok(Outcome { passed, detail })
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

fn no_near() -> NearDomain {
    NearDomain { depth: f64::INFINITY, min_margin: 0.0 }
}

fn crack(lc: f64, depth: f64, contrast: f64) -> PhantomSpec {
    PhantomSpec {
        kind: PhantomKind::Crack(Region {
            shape: Shape::Segment { start: (depth, 0.9), end: (depth, 2.2), thickness: 0.15 },
            contrast: SpeedTensor::isotropic(contrast),
        }),
        lambda_c: lc,
        collar: Collar { boundary: 4.0, array_band: 16.0 },
    }
}

/// 100×50 crack setup at `λ_o = 26.7`.
struct Desk {
    grid: LebedevGrid,
    array: ArrayGeometry,
    pulse: PulseSpec,
    run: RunSettings,
    n: usize,
    spec: PhantomSpec,
}

impl Desk {
    fn new(m: usize, n: usize, tau_factor: f64, sep: f64) -> Res<Self> {
        let grid = LebedevGrid::new(100, 50, 1.0)?;
        let pulse = PulseSpec::from_wavelength(26.7, 1.0);
        let lc = pulse.lambda_c(1.0);
        let run = RunSettings {
            tau: tau_factor * PI / pulse.omega_c,
            substeps: 16,
            near: no_near(),
            method: SpectralMethod::Chebyshev,
        };
        Ok(Desk {
            grid,
            array: ArrayGeometry::linear(&grid, m, sep, 8.0)?,
            pulse,
            run,
            n,
            spec: crack(lc, 2.0, 0.5),
        })
    }

    fn m(&self) -> usize {
        self.array.m()
    }
}

/// Noise-free crack data shared by criteria 2–5 and 10.
struct DeskData {
    desk: Desk,
    snaps: Vec<SnapshotField>,
    data: DataSeries,
}

fn desk_data() -> Res<DeskData> {
    let desk = Desk::new(3, 8, 0.6, 8.0)?;
    let truth = build_medium(&desk.spec, &desk.grid, 1.0)?;
    let snaps = medium_snapshots(&truth, &desk.array, &desk.pulse, &desk.run, 2 * desk.n)?;
    let data = compute_data(&snaps, &snaps[0], desk.run.tau)?;
    Ok(DeskData { desk, snaps, data })
}

fn criterion_1() -> Res<Outcome> {
    let grid = LebedevGrid::new(24, 16, 1.0)?;
    let medium = MediumField::from_fn(grid, 1.0, |x| {
        if (x.0 - 12.0).abs() < 3.0 && (x.1 - 8.0).abs() < 4.0 {
            SpeedTensor::new(1.3, 1.1, 0.15)
        } else {
            SpeedTensor::isotropic(1.0)
        }
    });
    let array = ArrayGeometry::linear(&grid, 3, 4.0, 3.0)?;
    let u0 = initial_snapshot(&medium, &array, &PulseSpec::new(0.9, 0.25), &no_near(), SpectralMethod::Dense)?;
    let (n, tau) = (5, 0.9);
    let snaps = exact_snapshots(&assemble_operator(&medium), &u0, tau, 2 * n)?;
    let data = compute_data(&snaps, &snaps[0], tau)?;
    let b = 2 * array.m();
    let w = grid.weight();
    let mut mass = DMatrix::zeros(n * b, n * b);
    let mut stiff = DMatrix::zeros(n * b, n * b);
    for j in 0..n {
        for l in 0..n {
            let half = if l == 0 { snaps[1].values.clone() } else { (&snaps[l + 1].values + &snaps[l - 1].values) * 0.5 };
            mass.view_mut((j * b, l * b), (b, b)).copy_from(&(snaps[j].values.transpose() * &snaps[l].values * w));
            stiff.view_mut((j * b, l * b), (b, b)).copy_from(&(snaps[j].values.transpose() * half * w));
        }
    }
    let em = rel(assemble_mass(&data)?.data(), &mass);
    let es = rel(assemble_stiffness(&data)?.data(), &stiff);
    outcome(em <= 1e-9 && es <= 1e-9, format!("mass {em:.2e}, stiffness {es:.2e} (bound 1e-9)"))
}

fn criterion_2(d: &DeskData) -> Res<Outcome> {
    let rom = build_rom_from_data(&d.data, &Regularization::None)?;
    let report = verify_interpolation(&rom, &d.data);
    let full = rom.order() == d.desk.n;
    outcome(
        full && report.max_residual <= 1e-8,
        format!("order {}/{}, max residual over j ≤ 2n−2 {:.2e} (bound 1e-8)", rom.order(), d.desk.n, report.max_residual),
    )
}

fn criterion_3(d: &DeskData) -> Res<Outcome> {
    let rom = build_rom_from_data(&d.data, &Regularization::None)?;
    let off = rom.p.off_tridiagonal_norm() / rom.p.frobenius_norm();
    let (ev, _) = sym_eigen_desc(rom.p.data());
    let spread = ev.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    outcome(
        off <= 1e-8 && spread <= 1.0 + 1e-8,
        format!("off-tridiagonal {off:.2e} (bound 1e-8), max |eig P| {spread:.12}"),
    )
}

fn criterion_4(d: &DeskData) -> Res<Outcome> {
    let b = 2 * d.desk.m();
    let mut indefinite = 0;
    let mut worst_min = f64::INFINITY;
    let mut worst_off = 0.0_f64;
    let mut all_ok = true;
    for seed in 1..=3u64 {
        let noisy = add_noise(&d.data, 1e-3, seed);
        let m = assemble_mass(&noisy)?;
        let (values, _) = sym_eigen_desc(m.data());
        if values[values.len() - 1] < 0.0 {
            indefinite += 1;
        }
        let rank = spectral_rank(&values, 1e-3, b);
        let reg = regularize_spectral(&m, &assemble_stiffness(&noisy)?, rank)?;
        let (ev, _) = sym_eigen_desc(reg.m_reg.data());
        worst_min = worst_min.min(ev[ev.len() - 1]);
        let off = reg.p_reg.off_tridiagonal_norm() / reg.p_reg.frobenius_norm();
        worst_off = worst_off.max(off);
        let spd = reg.m_reg.data().clone().cholesky().is_some();
        // rest of the pipeline: ROM, internal-wave basis, image
        let rom = build_rom_from_data(&noisy, &Regularization::Spectral { threshold: 1e-3, rank: None })?;
        let homog = MediumField::homogeneous(d.desk.grid, 1.0);
        let basis = ReferenceBasis::compute(
            &homog,
            &d.desk.array,
            &d.desk.pulse,
            &d.desk.run,
            d.desk.n,
            &Regularization::Spectral { threshold: 1e-9, rank: Some(rom.order() * b) },
        )?;
        let im = ImagingGrid::below(d.desk.grid, d.desk.spec.lambda_c, 1)?;
        let img = rom_image(&basis, &rom.r, 2, 2, &im)?;
        all_ok &= spd && off <= 1e-9 && img.values.iter().all(|v| v.is_finite());
    }
    outcome(
        indefinite >= 1 && all_ok,
        format!(
            "raw mass indefinite on {indefinite}/3 seeds; regularized min eig {worst_min:.2e}, P_reg off-tridiagonal {worst_off:.2e} (bound 1e-9); pipeline {}",
            if all_ok { "completed" } else { "failed" }
        ),
    )
}

fn criterion_5(d: &DeskData) -> Res<Outcome> {
    let n = d.desk.n;
    let rom = build_rom_from_data(&d.data, &Regularization::None)?;
    let truth_basis = ReferenceBasis::from_snapshots(&d.snaps[..=n], d.desk.run.tau, &Regularization::None)?;
    let mut exact = 0.0_f64;
    for j in 0..n {
        let u = estimate_internal_wave(&truth_basis, &rom.r, j)?;
        exact = exact.max((&u.values - &d.snaps[j].values).norm() / d.snaps[j].values.norm());
    }
    let homog = MediumField::homogeneous(d.desk.grid, 1.0);
    let basis =
        ReferenceBasis::compute(&homog, &d.desk.array, &d.desk.pulse, &d.desk.run, n, &Regularization::None)?;
    let u0 = estimate_internal_wave(&basis, &rom.r, 0)?;
    let mut consistency = 0.0_f64;
    let common = basis.common_order(&rom.r)?;
    for j in 0..common {
        let uj = estimate_internal_wave(&basis, &rom.r, j)?;
        consistency = consistency.max(rel(&u0.gram(&uj), &d.data.matrices[j]));
    }
    outcome(
        exact <= 1e-7 && consistency <= 1e-8 && common == n,
        format!("true medium {exact:.2e} (bound 1e-7); homogeneous reference consistency {consistency:.2e} over {common} steps (bound 1e-8)"),
    )
}

fn criterion_6() -> Res<Outcome> {
    let op: Vec<f64> = [0.5, 0.25, 0.125].iter().map(|&h| common::operator_error(h)).collect();
    let lf = common::leapfrog_errors(&[4, 8, 16, 32]);
    let op_orders = common::observed_orders(&op);
    let lf_orders = common::observed_orders(&lf);
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let (a, b) = (min(&op_orders), min(&lf_orders));
    outcome(a >= 1.8 && b >= 1.8, format!("stencil order {op_orders:.2?}, leapfrog order {lf_orders:.2?} (bound 1.8)"))
}

fn criterion_7() -> Res<Outcome> {
    let desk = Desk::new(5, 20, 0.3, 4.0)?;
    let (n, m) = (desk.n, desk.m());
    let lc = desk.spec.lambda_c;
    let truth = build_medium(&desk.spec, &desk.grid, 1.0)?;
    let homog = MediumField::homogeneous(desk.grid, 1.0);
    let im = ImagingGrid::below(desk.grid, 1.5 * lc, 1)?;
    let (greens, w_ref) = reference_greens(&homog, &desk.array, &desk.pulse, desk.run.dt(), desk.run.tau, 2 * n, &im)?;
    let (w, _) =
        simulate_response(&assemble_operator(&truth), &desk.array, &desk.pulse, 1.0, desk.run.dt(), w_ref.end(), None)?;
    let data = transform_response(&w, &desk.pulse, 1.0, desk.run.tau, 2 * n)?;
    let rom = build_rom_from_data(&data, &Regularization::default())?;
    let basis = ReferenceBasis::compute(
        &homog,
        &desk.array,
        &desk.pulse,
        &desk.run,
        n,
        &Regularization::Spectral { threshold: 1e-9, rank: Some(rom.order() * 2 * m) },
    )?;
    let img = rom_image(&basis, &rom.r, 2, 2, &im)?;
    let rtm = rtm_image(&w, &greens, 2 * n, 2, 2)?;
    let p_rom = peak_to_artifact(&img, &desk.spec)?;
    let p_rtm = peak_to_artifact(&rtm, &desk.spec)?;
    let offset = peak_offset(&range_derivative(&img), &desk.spec);
    outcome(
        p_rom > p_rtm && offset <= lc,
        format!(
            "peak-to-artifact rom {p_rom:.1} vs rtm {p_rtm:.1}; range-derivative peak {:.2}λ_c from crack (bound 1λ_c)",
            offset / lc
        ),
    )
}

/// 40×24 context for the inversion criterion.
fn small_context() -> Res<ForwardContext> {
    let grid = LebedevGrid::new(40, 24, 1.0)?;
    let pulse = PulseSpec::from_wavelength(10.0, 1.0);
    Ok(ForwardContext {
        grid,
        array: ArrayGeometry::linear(&grid, 3, 4.0, 3.0)?,
        pulse,
        run: RunSettings {
            tau: 0.6 * PI / pulse.omega_c,
            substeps: 16,
            near: no_near(),
            method: SpectralMethod::Chebyshev,
        },
        n: 8,
        regularization: Regularization::None,
    })
}

fn criterion_8() -> Res<Outcome> {
    let ctx = small_context()?;
    let grid = ctx.grid;
    let lc = ctx.pulse.lambda_c(1.0);
    let (_, l2) = grid.extent();
    let center = (14.0, 0.5 * l2);
    let sigma = (2.3 * lc / 16.0, 2.9 * lc / 16.0);
    let contrast = 1.1;
    let truth = MediumField::from_fn(grid, 1.0, |x| {
        let g = (-0.5 * (((x.0 - center.0) / (1.5 * sigma.0)).powi(2) + ((x.1 - center.1) / (1.5 * sigma.1)).powi(2)))
            .exp();
        SpeedTensor::isotropic(1.0 / (1.0 + (1.0 / contrast - 1.0) * g))
    });
    let param = Parametrization::lattice(
        (center.0 - lc / 4.0, center.0 + lc / 4.0),
        (center.1 - 5.0 * lc / 16.0, center.1 + 5.0 * lc / 16.0),
        (lc / 4.0, 5.0 * lc / 16.0),
        sigma,
        1.0,
    )?;
    let data = ctx.data(&truth)?;
    let r_data = data_factor(&data, &ctx.regularization)?;

    // gradient of the objective against central differences
    let obj = RomObjective::new(&ctx, &param, &r_data)?;
    let a0 = DVector::zeros(param.num_params());
    let residual = |a: &DVector<f64>| obj.evaluate(a).map(|(_, r)| DVector::from_column_slice(r.as_slice()));
    let r0 = residual(&a0)?;
    let j = jacobian_fd(residual, &a0, 1e-4, Some(&r0))?;
    let grad = j.transpose() * &r0 * 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut grad_err = 0.0_f64;
    let eps = 1e-3;
    for _ in 0..5 {
        let dir = DVector::from_fn(param.num_params(), |_, _| StandardNormal.sample(&mut rng)).normalize();
        let fd = (obj.evaluate(&(&a0 + &dir * eps))?.0 - obj.evaluate(&(&a0 - &dir * eps))?.0) / (2.0 * eps);
        grad_err = grad_err.max((grad.dot(&dir) - fd).abs() / fd.abs());
    }

    // homogeneous truth
    let homog_data = ctx.data(&MediumField::homogeneous(grid, 1.0))?;
    let r_homog = data_factor(&homog_data, &ctx.regularization)?;
    let obj_h = RomObjective::new(&ctx, &param, &r_homog)?;
    let rh = DVector::from_column_slice(obj_h.evaluate(&a0)?.1.as_slice());
    let jh = jacobian_fd(
        |a: &DVector<f64>| obj_h.evaluate(a).map(|(_, r)| DVector::from_column_slice(r.as_slice())),
        &a0,
        1e-4,
        Some(&rh),
    )?;
    let (step, _) = gauss_newton_step(&jh, &rh, 0.9, param.len())?;

    let cfg = InversionConfig { max_iterations: 12, ..InversionConfig::default() };
    let res = invert(&data, &ctx, &cfg, &param)?;
    let ratio = res.final_objective / res.initial_objective;
    let c11 = res.medium.tensors[grid.nearest_a(center.0, center.1)].c11;
    let contrast_err = (c11 - contrast).abs() / (contrast - 1.0);
    outcome(
        ratio <= 1e-2 && contrast_err <= 0.3 && step.norm() <= 1e-8 && grad_err <= 1e-2,
        format!(
            "objective ratio {ratio:.2e} (bound 1e-2); center c11 {c11:.4} vs {contrast}, {:.0}% of contrast (bound 30%); homogeneous first step {:.1e} (bound 1e-8); gradient rel err {grad_err:.1e} (bound 1e-2)",
            100.0 * contrast_err,
            step.norm()
        ),
    )
}

/// Depth of the strongest positive range jump under the rectangle, below
/// its top edge.
fn bottom_edge(d: &ImageField, im: &ImagingGrid, top: f64, half_width: f64, mid: f64, lc: f64) -> f64 {
    let cols: Vec<usize> = (0..im.cols).filter(|&j| (im.position(j).1 - mid).abs() <= half_width).collect();
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for i in 0..im.rows {
        let x1 = im.position(i * im.cols).0;
        if x1 < top + 0.5 * lc {
            continue;
        }
        let v: f64 = cols.iter().map(|&j| d.values[i * im.cols + j]).sum();
        if v > best.0 {
            best = (v, x1);
        }
    }
    best.1
}

fn criterion_9() -> Res<Outcome> {
    let grid = LebedevGrid::new(56, 32, 1.0)?;
    let pulse = PulseSpec::from_wavelength(10.0, 1.0);
    let lc = pulse.lambda_c(1.0);
    let (m, n) = (5, 9);
    let run = RunSettings { tau: 1.2 * PI / pulse.omega_c, substeps: 16, near: no_near(), method: SpectralMethod::Chebyshev };
    let array = ArrayGeometry::linear(&grid, m, 4.0, 3.0)?;
    let (_, l2) = grid.extent();
    let (top, bot, mid, half) = (10.0, 20.0, 0.5 * l2, 6.0);
    let spec = PhantomSpec {
        kind: PhantomKind::RectangleInclusion(Region {
            shape: Shape::Rect { x1: (top / lc, bot / lc), x2: ((mid - half) / lc, (mid + half) / lc) },
            contrast: SpeedTensor::isotropic(1.4),
        }),
        lambda_c: lc,
        collar: Collar { boundary: 2.0, array_band: 6.0 },
    };
    let truth = build_medium(&spec, &grid, 1.0)?;
    let snaps = medium_snapshots(&truth, &array, &pulse, &run, 2 * n)?;
    let data = compute_data(&snaps, &snaps[0], run.tau)?;
    let rom = build_rom_from_data(&data, &Regularization::default())?;

    let (d1, d2) = ((bot - top) / 2.0, 2.0 * half / 2.0);
    let param = Parametrization::lattice((top, bot), (mid - half, mid + half), (d1, d2), (0.7 * d1, 0.7 * d2), 1.0)?;
    let ctx = ForwardContext {
        grid,
        array: array.clone(),
        pulse,
        run,
        n,
        regularization: Regularization::Spectral { threshold: 1e-9, rank: None },
    };
    let res = invert(&data, &ctx, &InversionConfig { max_iterations: 4, ..InversionConfig::default() }, &param)?;

    let im = ImagingGrid::below(grid, 6.0, 1)?;
    let reg = Regularization::Spectral { threshold: 1e-9, rank: Some(rom.order() * 2 * m) };
    let estimate = |medium: &MediumField| -> Res<f64> {
        let basis = ReferenceBasis::compute(medium, &array, &pulse, &run, n, &reg)?;
        let d = range_derivative(&rom_image(&basis, &rom.r, 2, 2, &im)?);
        Ok(bottom_edge(&d, &im, top, half, mid, lc))
    };
    let e_homog = (estimate(&MediumField::homogeneous(grid, 1.0))? - bot).abs();
    let e_inv = (estimate(&res.medium)? - bot).abs();
    outcome(
        e_inv <= 2.0 * lc && e_homog > e_inv,
        format!(
            "bottom-edge offset with inverted kinematics {:.2}λ_c (bound 2λ_c), with c_o·I {:.2}λ_c",
            e_inv / lc,
            e_homog / lc
        ),
    )
}

fn criterion_10(d: &DeskData) -> Res<Outcome> {
    let m = assemble_mass(&d.data)?;
    let r = block_cholesky(&m)?;
    let chol = rel(&(r.data().transpose() * r.data()), m.data());

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let (dim, block) = (24, 4);
    let a = DMatrix::from_fn(dim, dim, |_, _| normal());
    let pi = (&a + a.transpose()) * 0.5;
    let b0 = DMatrix::from_fn(dim, block, |_, _| normal()).qr().q();
    let (_, t) = block_lanczos(&pi, block, &b0)?;
    let (ev_pi, _) = sym_eigen_desc(&pi);
    let (ev_t, _) = sym_eigen_desc(t.data());
    let scale = ev_pi.amax();
    let lanczos = if ev_t.len() == ev_pi.len() { (&ev_t - &ev_pi).amax() / scale } else { f64::INFINITY };

    let s_in = DMatrix::from_fn(12, 12, |_, _| normal());
    let spd = s_in.transpose() * &s_in + DMatrix::identity(12, 12);
    let root = spd_sqrt(&spd)?;
    let sqrt_err = rel(&(&root * &root), &spd);
    outcome(
        chol <= 1e-11 && lanczos <= 1e-9 && sqrt_err <= 1e-12,
        format!("RᵀR = M {chol:.1e} (bound 1e-11); Lanczos eigenvalues {lanczos:.1e} (bound 1e-9); spd_sqrt {sqrt_err:.1e} (bound 1e-12)"),
    )
}

const TITLES: [&str; 10] = [
    "mass and stiffness from data",
    "ROM data interpolation",
    "block tridiagonal propagator",
    "regularization under noise",
    "internal wave exactness",
    "solver convergence",
    "crack imaging",
    "inversion",
    "imaging with inverted kinematics",
    "linear-algebra kernels",
];

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let desk = OnceCell::new();
    let shared = || desk.get_or_init(|| desk_data().map_err(|e| e.to_string()));
    let with_desk = |f: fn(&DeskData) -> Res<Outcome>| -> Res<Outcome> {
        match shared() {
            Ok(d) => f(d),
            Err(e) => Err(e.clone().into()),
        }
    };
    let mut failures = 0;
    for (i, title) in TITLES.iter().enumerate() {
        let k = i + 1;
        if !selected.is_empty() && !selected.contains(&k) {
            continue;
        }
        let start = Instant::now();
        let result = match k {
            1 => criterion_1(),
            2 => with_desk(criterion_2),
            3 => with_desk(criterion_3),
            4 => with_desk(criterion_4),
            5 => with_desk(criterion_5),
            6 => criterion_6(),
            7 => criterion_7(),
            8 => criterion_8(),
            9 => criterion_9(),
            _ => with_desk(criterion_10),
        };
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match result {
            Ok(o) => (if o.passed { "PASS" } else { "FAIL" }, o.detail),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if status == "FAIL" {
            failures += 1;
        }
        println!("criterion {k:>2} {title}: {status}  {detail}  [{secs:.1}s]");
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criterion(s) failed");
        ExitCode::FAILURE
    }
}
