use std::f64::consts::FRAC_1_SQRT_2;
use std::sync::Arc;

use kamtor_core::config::{dump_config, parse_config, SweepSpec};
use kamtor_core::hamiltonian::{
    kolmogorov_det, tangential_frequencies, xi_of_omega, ActionVector, Correction, FrequencyModel,
};
use kamtor_core::kam::{
    fit_eigenvalues, homological_residual, homological_solve, melnikov_screen, synthetic_normal_form, synthetic_remainder,
    MelnikovParams,
};
use kamtor_core::lattice::{AngleLattice, Grid};
use kamtor_core::linalg::herm2_eig;
use kamtor_core::nash_moser::loglog_slope;
use kamtor_core::C64;
use proptest::collection::{btree_set, vec};
use proptest::prelude::{prop_assert, prop_assert_eq, prop_assume, proptest, ProptestConfig};
use rand::SeedableRng;

const FOUR_PI2: f64 = 4.0 * std::f64::consts::PI * std::f64::consts::PI;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kolmogorov_det_closed_form(sites in btree_set(-12i64..12, 1..6)) {
        let s: Vec<i64> = sites.into_iter().collect();
        let n = s.len() as i32;
        let det = kolmogorov_det(&s, &ActionVector::tangential(vec![], 0), &FrequencyModel::quartic());
        let want = -(-2f64).powi(n) * (2 * n - 1) as f64;
        prop_assert!((det - want).abs() <= 1e-9 * want.abs());
    }

    #[test]
    fn actions_round_trip(xi in vec(0.05f64..2.0, 3), c in -0.3f64..0.3) {
        let s = [-1i64, 0, 1];
        let model = FrequencyModel { correction: Correction::LinearSum { c } };
        let om = tangential_frequencies(&s, &xi, &model);
        let back = xi_of_omega(&om, &s, &model).unwrap();
        for (a, b) in back.iter().zip(&xi) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn herm2_reconstructs_and_sorts(a in -50.0f64..50.0, d in -50.0f64..50.0, re in -5.0f64..5.0, im in -5.0f64..5.0) {
        let b = C64::new(re, im);
        let m = [[C64::new(a, 0.0), b], [b.conj(), C64::new(d, 0.0)]];
        let (lam, u) = herm2_eig(m);
        prop_assert!(lam[0] <= lam[1]);
        prop_assert!((lam[0] + lam[1] - a - d).abs() < 1e-10 * (1.0 + a.abs() + d.abs()));
        for r in 0..2 {
            for c in 0..2 {
                let rec: C64 = (0..2).map(|k| u[r][k] * lam[k] * u[c][k].conj()).sum();
                prop_assert!((rec - m[r][c]).norm() < 1e-10 * (1.0 + a.abs() + d.abs() + b.norm()));
            }
        }
    }

    #[test]
    fn grid_round_trip(seed in 0u64..1000) {
        let lat = Arc::new(AngleLattice::new(2, 3));
        let g = Grid::for_products(lat.clone());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<C64> = (0..2 * lat.len()).map(|_| C64::new(rand::Rng::gen_range(&mut rng, -1.0..1.0), rand::Rng::gen_range(&mut rng, -1.0..1.0))).collect();
        let back = g.from_grid(g.to_grid(&a, 2), 2);
        for (x, y) in a.iter().zip(&back) {
            prop_assert!((x - y).norm() < 1e-13);
        }
    }

    #[test]
    fn eigen_fit_is_exact_on_model_data(c in -2.0f64..2.0, rho in -1.0f64..1.0, split in 0.0f64..0.5) {
        let sites = [2i64, 3, 5, 7, 11];
        let eig: Vec<[f64; 2]> = sites
            .iter()
            .map(|&k| {
                let b = FOUR_PI2 * (k * k) as f64 + c + rho / k as f64;
                [b - split / k as f64, b + split / k as f64]
            })
            .collect();
        let f = fit_eigenvalues(&sites, &eig);
        prop_assert!((f.c - c).abs() < 1e-8);
        prop_assert!((f.slope - rho).abs() < 1e-7);
        prop_assert!((f.c_bound - rho.abs() - split).abs() < 1e-7);
    }

    #[test]
    fn loglog_slope_of_power_law(p in -3.0f64..3.0, a in 0.1f64..10.0) {
        let x = [1e-3f64, 1e-2, 1e-1, 1.0];
        let y: Vec<f64> = x.iter().map(|v| a * v.powf(p)).collect();
        prop_assert!((loglog_slope(&x, &y).unwrap() - p).abs() < 1e-10);
    }

    #[test]
    fn sweep_values_are_log_spaced(lo_exp in -8.0f64..-1.0, span in 0.5f64..4.0, n in 2usize..12) {
        let lo = 10f64.powf(lo_exp);
        let hi = lo * 10f64.powf(span);
        let spec = SweepSpec::parse(&format!("eps={lo:e}:{hi:e}:{n}")).unwrap();
        let v = spec.values();
        prop_assert_eq!(v.len(), n);
        prop_assert_eq!(v[0], spec.lo);
        prop_assert_eq!(v[n - 1], spec.hi);
        let r0 = v[1] / v[0];
        for w in v.windows(2) {
            prop_assert!(w[1] > w[0] && ((w[1] / w[0]) / r0 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn config_dump_round_trip(eps in 0.0f64..1e-3, gamma in 1e-4f64..0.5, seed in 0u64..u64::MAX) {
        let src = format!("S = [-1, 0, 1]\nK_normal = 8\nL_angle = 6\neps = {eps:e}\ngamma = {gamma:e}\nseed = {seed}\n");
        let c = parse_config(&src).unwrap();
        prop_assert_eq!(parse_config(&dump_config(&c)).unwrap(), c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn homological_equation_holds_on_screened_draws(seed in 0u64..10_000) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let lat = Arc::new(AngleLattice::new(2, 3));
        let grid = Grid::for_products(lat.clone());
        let sites = [2i64, 3, 5];
        let params = MelnikovParams::new(1e-3, 3.0);
        let nf = synthetic_normal_form(&mut rng, &sites, &[FRAC_1_SQRT_2, 1.3247]);
        prop_assume!(melnikov_screen(&nf, &lat, 3, &params, None).is_ok());
        let r = synthetic_remainder(&mut rng, &lat, &sites, 1e-3, 2.0);
        let n_op = nf.to_operator(lat.clone(), r.row_sites.clone());
        let sol = homological_solve(&r, &nf, 3, &params).unwrap();
        let (res, rn) = homological_residual(&sol.psi, &n_op, &r, &sol.rnf, 3, &grid);
        prop_assert!(res <= 1e-10 * rn);
    }
}
