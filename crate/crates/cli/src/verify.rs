//! Fast invariant suite behind `emrom verify`.

use nalgebra::DMatrix;

use emrom::forward::{
    add_noise, compute_data, exact_snapshots, initial_snapshot, ArrayGeometry, DataSeries, NearDomain, PulseSpec,
    SnapshotField, SpectralMethod,
};
use emrom::grid::{assemble_operator, LebedevGrid, MediumField, SpeedTensor};
use emrom::internal_wave::{estimate_internal_wave, ReferenceBasis};
use emrom::linalg::{block_cholesky, spd_sqrt, BlockMatrix};
use emrom::rom::{assemble_mass, assemble_stiffness, build_rom, verify_interpolation, Regularization, Rom};

/// One suite item: name, measured value, bound, outcome.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub bound: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(name: &'static str, value: f64, bound: f64) -> Self {
        Check { name, value, bound, passed: value.is_finite() && value <= bound }
    }

    fn flag(name: &'static str, ok: bool) -> Self {
        Check { name, value: if ok { 0.0 } else { 1.0 }, bound: 0.0, passed: ok }
    }

    fn failed(name: &'static str, message: &str) -> Self {
        eprintln!("{name}: {message}");
        Check { name, value: f64::NAN, bound: 0.0, passed: false }
    }
}

struct Fixture {
    truth: Vec<SnapshotField>,
    reference: Vec<SnapshotField>,
    data: DataSeries,
    tau: f64,
}

fn fixture() -> Result<Fixture, String> {
    let grid = LebedevGrid::new(18, 12, 1.0).map_err(|e| e.to_string())?;
    let pulse = PulseSpec::new(0.9, 0.25);
    let array = ArrayGeometry::linear(&grid, 2, 4.0, 3.0).map_err(|e| e.to_string())?;
    let near = NearDomain { depth: f64::INFINITY, min_margin: 0.0 };
    let homog = MediumField::homogeneous(grid, 1.0);
    let u0 = initial_snapshot(&homog, &array, &pulse, &near, SpectralMethod::Dense).map_err(|e| e.to_string())?;
    let truth = MediumField::from_fn(grid, 1.0, |x| {
        if (x.0 - 10.0).abs() < 2.5 && (x.1 - 6.0).abs() < 3.0 {
            SpeedTensor::new(1.4, 1.1, 0.1)
        } else {
            SpeedTensor::isotropic(1.0)
        }
    });
    let tau = 0.9;
    let truth = exact_snapshots(&assemble_operator(&truth), &u0, tau, 8).map_err(|e| e.to_string())?;
    let reference = exact_snapshots(&assemble_operator(&homog), &u0, tau, 5).map_err(|e| e.to_string())?;
    let data = compute_data(&truth, &truth[0], tau).map_err(|e| e.to_string())?;
    Ok(Fixture { truth, reference, data, tau })
}

fn test_spd(dim: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(dim, dim, |i, j| ((i * 31 + j * 17) as f64 * 0.37).sin());
    a.transpose() * &a + DMatrix::identity(dim, dim)
}

fn linalg_checks(out: &mut Vec<Check>) {
    let m = test_spd(12);
    match BlockMatrix::new(m.clone(), 4).map_err(|e| e.to_string()).and_then(|b| block_cholesky(&b).map_err(|e| e.to_string())) {
        Ok(r) => {
            let err = (r.data().transpose() * r.data() - &m).norm() / m.norm();
            out.push(Check::at_most("block Cholesky RᵀR = M", err, 1e-11));
        }
        Err(e) => out.push(Check::failed("block Cholesky RᵀR = M", &e)),
    }
    match spd_sqrt(&m) {
        Ok(s) => out.push(Check::at_most("spd_sqrt multiply-back", (&s * &s - &m).norm() / m.norm(), 1e-12)),
        Err(e) => out.push(Check::failed("spd_sqrt multiply-back", &e.to_string())),
    }
}

fn operator_check(out: &mut Vec<Check>) {
    match LebedevGrid::new(20, 14, 1.0) {
        Ok(grid) => {
            let medium = MediumField::from_fn(grid, 1.0, |x| SpeedTensor::new(1.0 + 0.02 * x.0, 1.2, 0.05 * (0.3 * x.1).sin()));
            out.push(Check::flag("operator exactly symmetric", assemble_operator(&medium).matrix.is_exactly_symmetric()));
        }
        Err(e) => out.push(Check::failed("operator exactly symmetric", &e.to_string())),
    }
}

fn data_checks(f: &Fixture, out: &mut Vec<Check>) {
    let asym = f
        .data
        .matrices
        .iter()
        .map(|d| (d - d.transpose()).norm() / d.norm())
        .fold(0.0, f64::max);
    out.push(Check::at_most("data reciprocity", asym, 1e-10));
    out.push(Check::flag("D(0) positive definite", f.data.matrices[0].clone().cholesky().is_some()));
}

fn rom_checks(f: &Fixture, out: &mut Vec<Check>) {
    let built = assemble_mass(&f.data)
        .and_then(|m| assemble_stiffness(&f.data).map(|s| (m, s)))
        .and_then(|(m, s)| build_rom(&m, &s, f.tau));
    match built {
        Ok(rom) => {
            let report = verify_interpolation(&rom, &f.data);
            out.push(Check::at_most("ROM data interpolation", report.max_residual, 1e-8));
            out.push(Check::at_most("ROM block tridiagonal", report.off_tridiagonal / report.p_norm, 1e-8));
            let mut buf = Vec::new();
            let same = rom.write_to(&mut buf).is_ok()
                && Rom::read_from(&mut buf.as_slice()).is_ok_and(|back| back.r == rom.r && back.p == rom.p);
            out.push(Check::flag("ROM file round trip", same));
        }
        Err(e) => out.push(Check::failed("ROM data interpolation", &e.to_string())),
    }
    let mut buf = Vec::new();
    let same = f.data.write_to(&mut buf).is_ok() && DataSeries::read_from(&mut buf.as_slice()).is_ok_and(|d| d == f.data);
    out.push(Check::flag("data file round trip", same));
    out.push(Check::flag("seeded noise reproducible", add_noise(&f.data, 0.01, 7) == add_noise(&f.data, 0.01, 7)));
}

fn wave_checks(f: &Fixture, out: &mut Vec<Check>) {
    let n = f.data.n();
    let result = ReferenceBasis::from_snapshots(&f.truth[..=n], f.tau, &Regularization::None).and_then(|truth_basis| {
        let r = truth_basis.r_ref().clone();
        let mut exact = 0.0_f64;
        for j in 0..n {
            let u = estimate_internal_wave(&truth_basis, &r, j)?;
            exact = exact.max((&u.values - &f.truth[j].values).norm() / f.truth[j].values.norm());
        }
        let basis = ReferenceBasis::from_snapshots(&f.reference, f.tau, &Regularization::None)?;
        let u0 = estimate_internal_wave(&basis, &r, 0)?;
        let mut consistency = 0.0_f64;
        for j in 0..basis.common_order(&r)? {
            let uj = estimate_internal_wave(&basis, &r, j)?;
            let d = f.truth[0].gram(&f.truth[j]);
            consistency = consistency.max((u0.gram(&uj) - &d).norm() / d.norm());
        }
        Ok((exact, consistency))
    });
    match result {
        Ok((exact, consistency)) => {
            out.push(Check::at_most("internal wave exact for true medium", exact, 1e-7));
            out.push(Check::at_most("internal wave data consistent", consistency, 1e-8));
        }
        Err(e) => out.push(Check::failed("internal wave exact for true medium", &e.to_string())),
    }
}

pub fn run_suite() -> Vec<Check> {
    let mut out = Vec::new();
    linalg_checks(&mut out);
    operator_check(&mut out);
    match fixture() {
        Ok(f) => {
            data_checks(&f, &mut out);
            rom_checks(&f, &mut out);
            wave_checks(&f, &mut out);
        }
        Err(e) => out.push(Check::failed("forward fixture", &e)),
    }
    out
}

pub fn table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.chars().count()).max().unwrap_or(0);
    let mut s = String::new();
    for c in checks {
        let pad = width - c.name.chars().count();
        let status = if c.passed { "PASS" } else { "FAIL" };
        s.push_str(&format!("{status}  {}{}  {:.3e} (bound {:.1e})\n", c.name, " ".repeat(pad), c.value, c.bound));
    }
    s
}
