use nalgebra::{DMatrix, DVector, Matrix2};
use proptest::prelude::*;

use emrom::forward::DataSeries;
use emrom::grid::SpeedTensor;
use emrom::inversion::{speed_from_gamma, tikhonov_step};
use emrom::linalg::{block_cholesky, block_tri_inverse, spd_sqrt, BlockMatrix};
use emrom::rom::{assemble_mass, assemble_stiffness};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn spd(dim: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (matrix(dim, dim), 0.05..2.0f64).prop_map(move |(a, shift)| a.transpose() * &a + DMatrix::identity(dim, dim) * shift)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn speed_from_gamma_inverts_the_metric(g11 in 0.3..3.0f64, g22 in 0.3..3.0f64, g12 in -1.0..1.0f64, c_o in 0.5..2.0f64) {
        let gamma = Matrix2::new(g11, g12, 0.0, g22);
        let c = speed_from_gamma(&gamma, c_o).unwrap();
        prop_assert!(c.is_spd());
        let cm = c.matrix();
        let product = gamma.transpose() * gamma * cm * cm;
        prop_assert!((product - Matrix2::identity()).amax() < 1e-10);
    }

    #[test]
    fn isotropic_gamma_gives_isotropic_speed(c in 0.2..5.0f64) {
        let gamma = Matrix2::new(1.0 / c, 0.0, 0.0, 1.0 / c);
        let t = speed_from_gamma(&gamma, 1.0).unwrap();
        let iso = SpeedTensor::isotropic(c);
        prop_assert!((t.c11 - iso.c11).abs() < 1e-12 * c);
        prop_assert!((t.c22 - iso.c22).abs() < 1e-12 * c);
        prop_assert!(t.c12.abs() < 1e-12 * c);
    }

    #[test]
    fn tikhonov_step_shrinks_as_nu_grows(j in matrix(12, 5), r in prop::collection::vec(-1.0..1.0f64, 12), nu in 1e-3..10.0f64) {
        let r = DVector::from_vec(r);
        let a = tikhonov_step(&j, &r, nu).unwrap();
        let b = tikhonov_step(&j, &r, 2.0 * nu).unwrap();
        prop_assert!(b.norm() <= a.norm() * (1.0 + 1e-12));
        // a descent direction for ‖r + JΔα‖²
        prop_assert!((j.transpose() * &r).dot(&a) <= 1e-14);
    }

    #[test]
    fn block_cholesky_multiplies_back(m in spd(12)) {
        let bm = BlockMatrix::new(m.clone(), 3).unwrap();
        let r = block_cholesky(&bm).unwrap();
        let rd = r.data();
        prop_assert!((rd.transpose() * rd - &m).norm() <= 1e-11 * m.norm());
        for i in 0..4 {
            for jb in 0..i {
                prop_assert!(rd.view((3 * i, 3 * jb), (3, 3)).amax() == 0.0);
            }
        }
        let inv = block_tri_inverse(&r).unwrap();
        prop_assert!((rd * &inv - DMatrix::identity(12, 12)).amax() < 1e-8);
    }

    #[test]
    fn spd_sqrt_is_spd_and_multiplies_back(m in spd(6)) {
        let s = spd_sqrt(&m).unwrap();
        prop_assert!((&s - s.transpose()).amax() == 0.0);
        prop_assert!(s.clone().cholesky().is_some());
        prop_assert!((&s * &s - &m).norm() <= 1e-12 * m.norm());
    }

    #[test]
    fn mass_and_stiffness_are_symmetric_and_linear(mats in prop::collection::vec(matrix(2, 2), 6), scale in -3.0..3.0f64) {
        let sym: Vec<DMatrix<f64>> = mats.iter().map(|a| a + a.transpose()).collect();
        let d = DataSeries::new(1.0, 1, sym.clone());
        let scaled = DataSeries::new(1.0, 1, sym.iter().map(|a| a * scale).collect());
        let (m, s) = (assemble_mass(&d).unwrap(), assemble_stiffness(&d).unwrap());
        prop_assert!(m.asymmetry() == 0.0 && s.asymmetry() == 0.0);
        let m2 = assemble_mass(&scaled).unwrap();
        prop_assert!((m2.data() - m.data() * scale).amax() <= 1e-12 * (1.0 + m.data().amax()));
    }
}
