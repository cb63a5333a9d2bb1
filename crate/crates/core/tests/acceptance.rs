//! Acceptance suite: one PASS/FAIL line per criterion; exits nonzero on any failure.
//!
//! Run with `cargo test -p kamtor-core --test acceptance`.

use std::f64::consts::FRAC_1_SQRT_2;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use kamtor_core::hamiltonian::{
    kolmogorov_det, residual_f, tangential_frequencies, xi_of_omega, zeta_compatibility, ActionVector, Correction, EvalOpts,
    FrequencyModel, Model, Perturbation, ResidualTriple, TorusEmbedding,
};
use kamtor_core::kam::{
    fit_eigenvalues, homological_residual, homological_solve, melnikov_screen, reduce_to_limit, remainder_norms,
    synthetic_normal_form, synthetic_remainder, KamConfig, MelnikovParams,
};
use kamtor_core::lattice::{AngleLattice, Discretization, Grid, IndexSets, SequenceField, SiteKind};
use kamtor_core::linearization::LinHamOperator;
use kamtor_core::measure::{measure_estimate, ConditionSuite, FrequencyBox, MeasureParams};
use kamtor_core::nash_moser::{
    build_stack, loglog_slope, nash_moser_solve, stability_check, torus_size, IterateStack, NashMoserConfig,
};
use kamtor_core::right_inverse::inverse_defect;
use kamtor_core::tolerances::{S0, SIGMA};
use kamtor_core::C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);
type Criterion = (&'static str, fn() -> Outcome);

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.2e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect()
}

// S = {0}, K = 8, L = 6, omega = 0.6
fn nm_instance(eps: f64) -> (Model, Discretization, Vec<f64>) {
    let ix = IndexSets::new(&[0], 8, 6).unwrap();
    let freq = FrequencyModel::quartic();
    let omega = vec![0.6];
    let xi = xi_of_omega(&omega, &ix.s, &freq).unwrap();
    let m = Model::new(ix.clone(), xi, freq, Perturbation::reference(8, eps)).unwrap();
    (m, Discretization::new(ix), omega)
}

fn nm_config() -> NashMoserConfig {
    let mut cfg = NashMoserConfig::new(0.1, 1);
    cfg.delta2 = 2.0;
    cfg
}

// S = {-1, 0, 1}, K = 8, L = 4
fn three_site_model(eps: f64) -> (Model, Discretization) {
    let ix = IndexSets::new(&[-1, 0, 1], 8, 4).unwrap();
    let m = Model::new(ix.clone(), vec![1.0, 1.1, 1.2], FrequencyModel::quartic(), Perturbation::reference(8, eps)).unwrap();
    (m, Discretization::new(ix))
}

fn random_embedding(m: &Model, disc: &Discretization, amp: f64, seed: u64) -> TorusEmbedding {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lat = disc.lattice().clone();
    let mut f = |sites: Vec<i64>, kind| {
        let mut v = SequenceField::random_decaying(&mut rng, lat.clone(), sites, kind, amp, 0.05);
        for c in 0..v.ncomp() {
            v.set(0, c, C64::new(0.0, 0.0));
        }
        v
    };
    let mut iota = TorusEmbedding::zeros(&m.ix);
    iota.theta = f(m.ix.s.clone(), SiteKind::TangentialReal).real_part();
    iota.y = f(m.ix.s.clone(), SiteKind::TangentialReal).real_part();
    iota.z = f(m.ix.s_perp.clone(), SiteKind::NormalComplex);
    iota
}

fn three_site_stack() -> (Model, Discretization, IterateStack) {
    let (m, disc) = three_site_model(1e-4);
    let iota = random_embedding(&m, &disc, 1e-4, 7);
    let om = m.omega0();
    let st = build_stack(&m, &iota, &[0.0; 3], &om, 0.01, 7.0, &KamConfig::default(), &disc).unwrap();
    (m, disc, st)
}

fn kolmogorov_determinant() -> Outcome {
    let m = FrequencyModel::quartic();
    let a = ActionVector::tangential(vec![], 0);
    let dets = [kolmogorov_det(&[0], &a, &m), kolmogorov_det(&[-1, 1], &a, &m), kolmogorov_det(&[-1, 0, 1], &a, &m)];
    let exact = dets.iter().zip([2.0, -12.0, 40.0]).all(|(d, w)| (d - w).abs() < 1e-12);
    let s = [-1i64, 0, 1];
    let xi = [0.4, 0.5, 0.6];
    let h = 1e-4;
    let mut err = 0.0f64;
    for k in 0..3 {
        let (mut p, mut q) = (xi, xi);
        p[k] += h;
        q[k] -= h;
        let fp = tangential_frequencies(&s, &p, &m);
        let fq = tangential_frequencies(&s, &q, &m);
        for n in 0..3 {
            let fd = (fp[n] - fq[n]) / (2.0 * h);
            let want = if n == k { 2.0 } else { 4.0 };
            err = err.max((fd - want).abs());
        }
    }
    (exact && err <= 1e-8, format!("dets {dets:?} jacobian_err {err:.1e}"))
}

fn unperturbed_exactness() -> Outcome {
    let (m, disc) = three_site_model(0.0);
    let om = m.omega0();
    let f = residual_f(&m, &TorusEmbedding::zeros(&m.ix), &[0.0; 3], &om, &disc.grid).unwrap();
    let r = f.norm(S0, SIGMA);
    let scale = om.iter().fold(1.0f64, |a, w| a.max(w.abs()));
    (r <= 1e-14 * scale, format!("||F|| {r:.1e} (|omega| {scale:.1})"))
}

fn gradient_consistency() -> Outcome {
    let (m, _) = three_site_model(1e-2);
    let (d, n) = (m.d(), m.n());
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let th: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        let y: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let z: Vec<C64> = (0..n).map(|_| C64::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05))).collect();
        let dth: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dy: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dz: Vec<C64> = (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let at = |t: f64| {
            let a: Vec<f64> = th.iter().zip(&dth).map(|(x, v)| x + t * v).collect();
            let b: Vec<f64> = y.iter().zip(&dy).map(|(x, v)| x + t * v).collect();
            let c: Vec<C64> = z.iter().zip(&dz).map(|(x, v)| x + v * t).collect();
            m.eval_point(&a, &b, &c, EvalOpts::default()).unwrap()
        };
        let e = at(0.0);
        let mut an: f64 = e.grad_theta.iter().zip(&dth).map(|(g, v)| g * v).sum::<f64>();
        an += e.grad_y.iter().zip(&dy).map(|(g, v)| g * v).sum::<f64>();
        an += 2.0 * e.grad_zbar.iter().zip(&dz).map(|(g, v)| (g * v.conj()).re).sum::<f64>();
        let fd = (at(h).value - at(-h).value) / (2.0 * h);
        worst = worst.max((fd - an).abs() / an.abs());
    }
    (worst <= 1e-6, format!("max_rel_err {worst:.1e} over 50 probes"))
}

fn symplecticity_suite() -> Outcome {
    let (_, disc, st) = three_site_stack();
    let phi = st.linearization.report.symplectic_residuals.clone();
    let kam: Vec<f64> = st.kam.chain.steps.iter().map(|t| t.symplectic_residual(&disc.grid, 64)).collect();
    let chart = st.chart().symplectic_residual(&disc.grid);
    let worst = phi.iter().chain(&kam).fold(chart, |a, b| a.max(*b));
    let ok = phi.len() == 3 && !kam.is_empty() && worst <= 1e-9;
    (ok, format!("phi123 {} kam_steps {} dGamma {chart:.1e} max {worst:.1e}", sci(&phi), kam.len()))
}

fn homological_residual_check() -> Outcome {
    let lat = Arc::new(AngleLattice::new(2, 3));
    let grid = Grid::for_products(lat.clone());
    let sites = [2i64, 3, 5];
    let omega = [FRAC_1_SQRT_2, 1.3247];
    let params = MelnikovParams::new(1e-3, 3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (mut draws, mut tries, mut worst) = (0, 0, 0.0f64);
    while draws < 20 && tries < 400 {
        tries += 1;
        let nf = synthetic_normal_form(&mut rng, &sites, &omega);
        if melnikov_screen(&nf, &lat, 3, &params, None).is_err() {
            continue;
        }
        let r = synthetic_remainder(&mut rng, &lat, &sites, 1e-3, 2.0);
        let n_op = nf.to_operator(lat.clone(), r.row_sites.clone());
        let sol = homological_solve(&r, &nf, 3, &params).unwrap();
        let (res, rn) = homological_residual(&sol.psi, &n_op, &r, &sol.rnf, 3, &grid);
        worst = worst.max(res / rn);
        draws += 1;
    }
    (draws == 20 && worst <= 1e-10, format!("draws {draws}/{tries} max_rel_residual {worst:.1e}"))
}

fn kam_contraction_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tau = 1.0;
    let params = MelnikovParams::new(0.01, tau);
    let lat = Arc::new(AngleLattice::new(1, 128));
    let grid = Grid::for_products(lat.clone());
    let sites = [2i64, 3];
    let nf = synthetic_normal_form(&mut rng, &sites, &[FRAC_1_SQRT_2]);
    let r = synthetic_remainder(&mut rng, &lat, &sites, 1.0, params.alpha + S0 + 0.5);
    let amp = 1e-2 * params.gamma * 4f64.powf(-params.c0) / remainder_norms(&r, &params)[1];
    let r = r.scale(C64::new(amp, 0.0));
    let n_op = nf.to_operator(lat.clone(), r.row_sites.clone());
    let l0 = LinHamOperator { omega: nf.omega.clone(), n_part: n_op, r_part: r };
    let cfg = KamConfig { n0: 4.0, max_steps: 5, target_rel: 1e-30, ..KamConfig::default() };
    let res = reduce_to_limit(&l0, &params, &cfg, &grid).unwrap();
    let alpha = 6.0 * tau + 4.0;
    let fitted = res.state.cuts.iter().filter(|c| c.is_some_and(|c| c < lat.cutoff())).count();
    let ok = res.gate_value <= 1.0
        && fitted >= 4
        && res.decay_exponent.is_some_and(|e| e >= 0.8 * alpha && e <= 1.2 * alpha);
    (ok, format!("gate {:.1e} cuts {:?} exponent {:?} alpha {alpha}", res.gate_value, res.state.cuts, res.decay_exponent))
}

fn eigen_stack(k: i64, c: f64) -> IterateStack {
    let ix = IndexSets::new(&[0], k, 6).unwrap();
    let freq = FrequencyModel { correction: Correction::LinearSum { c } };
    let om = vec![0.6];
    let xi = xi_of_omega(&om, &ix.s, &freq).unwrap();
    let m = Model::new(ix.clone(), xi, freq, Perturbation::reference(k, 1e-4)).unwrap();
    let disc = Discretization::new(ix.clone());
    build_stack(&m, &TorusEmbedding::zeros(&ix), &[0.0], &om, 0.1, 3.0, &KamConfig::default(), &disc).unwrap()
}

fn block_selfadjointness() -> Outcome {
    let (_, _, a) = three_site_stack();
    let b = eigen_stack(8, 0.25);
    let mut defect = 0.0f64;
    let mut imag = 0.0f64;
    let mut sorted = true;
    for st in [&a, &b] {
        defect = defect.max(st.kam.n_inf.selfadjoint_defect());
        imag = imag.max(st.kam.n_inf.eigenvalue_imag_max());
        sorted &= st.kam.eigenvalues.iter().all(|e| e[0] <= e[1]);
    }
    (defect <= 1e-10 && imag <= 1e-10 && sorted, format!("selfadjoint_defect {defect:.1e} imag_max {imag:.1e} sorted {sorted}"))
}

fn eigenvalue_asymptotics() -> Outcome {
    let c = 0.25;
    let fits: Vec<_> = [8, 16]
        .iter()
        .map(|&k| {
            let st = eigen_stack(k, c);
            fit_eigenvalues(&st.kam.n_inf.sites, &st.kam.eigenvalues)
        })
        .collect();
    let ratio = fits[1].c_bound / fits[0].c_bound;
    let ok = fits[0].c_bound > 0.0 && (ratio - 1.0).abs() <= 0.25;
    (ok, format!("C(8) {:.4e} C(16) {:.4e} ratio {ratio:.4} c {:.6}", fits[0].c_bound, fits[1].c_bound, fits[1].c))
}

fn nash_moser_convergence() -> Outcome {
    let (m, disc, om) = nm_instance(1e-4);
    let out = nash_moser_solve(&m, &om, &nm_config(), &disc).unwrap();
    let r = &out.report;
    let res: Vec<f64> = r.iterations.iter().map(|i| i.residual).collect();
    let zr: Vec<f64> = r.iterations.iter().map(|i| i.zeta_ratio).collect();
    let zr_max = zr.iter().cloned().fold(0.0, f64::max);
    let ok = r.converged
        && r.final_residual <= 1e-10
        && r.iterations.len() <= 8
        && !r.log_ratios.is_empty()
        && r.log_ratios.iter().all(|x| *x >= 1.3)
        && zr.iter().all(|z| z.is_finite())
        && zr_max <= 1e2;
    (ok, format!("residuals {} log_ratios {:.2?} zeta_ratio_max {zr_max:.2e}", sci(&res), r.log_ratios))
}

fn zeta_vanishing() -> Outcome {
    let (m, disc, om) = nm_instance(1e-4);
    let cfg = nm_config();
    let out = nash_moser_solve(&m, &om, &cfg, &disc).unwrap();
    let f = residual_f(&m, &out.torus, &out.zeta, &om, &disc.grid).unwrap();
    let zc = zeta_compatibility(&out.torus, &f);
    let worst = zc.iter().fold(0.0f64, |a, z| a.max(z.abs()));
    (worst <= 10.0 * cfg.tol_nm, format!("|zeta_compat| {worst:.1e} bound {:.1e}", 10.0 * cfg.tol_nm))
}

fn torus_size_scaling() -> Outcome {
    let epss = log_spaced(1e-6, 1e-4, 5);
    let (mut ys, mut zs) = (vec![], vec![]);
    for &e in &epss {
        let (m, disc, om) = nm_instance(e);
        let out = nash_moser_solve(&m, &om, &nm_config(), &disc).unwrap();
        let (y, z) = torus_size(&out.torus);
        ys.push(y);
        zs.push(z);
    }
    let sy = loglog_slope(&epss, &ys).unwrap_or(f64::NAN);
    let sz = loglog_slope(&epss, &zs).unwrap_or(f64::NAN);
    ((sy - 1.0).abs() <= 0.2 && (sz - 1.0).abs() <= 0.2, format!("y_slope {sy:.4} z_slope {sz:.4}"))
}

fn linear_stability() -> Outcome {
    let (m, disc, om) = nm_instance(1e-4);
    let out = nash_moser_solve(&m, &om, &nm_config(), &disc).unwrap();
    let st = out.stack.unwrap();
    let a = stability_check(&st, &disc.grid, 100.0, 4, 4000, 5).unwrap();
    let b = stability_check(&st, &disc.grid, 1000.0, 4, 4000, 5).unwrap();
    let drift = a.upsilon_drift.max(b.upsilon_drift);
    let rel = (b.sup_ratio - a.sup_ratio).abs() / a.sup_ratio;
    let ok = drift == 0.0
        && a.sup_ratio.is_finite()
        && b.sup_ratio.is_finite()
        && a.sup_ratio <= a.frame_bound
        && b.sup_ratio <= b.frame_bound
        && rel <= 0.05;
    (ok, format!("drift {drift:e} sup {:.5}/{:.5} bound {:.7} horizon_rel {rel:.1e}", a.sup_ratio, b.sup_ratio, b.frame_bound))
}

fn measure_scaling() -> Outcome {
    let s = vec![-1i64, 0, 1];
    let model = FrequencyModel::quartic();
    let fbox = FrequencyBox::around_actions(&[1.0; 3], 0.5, 4096, 1, &s, &model).unwrap();
    let params = MeasureParams { s, k_normal: 8, model, l_max: 4, tau: 7.0, shift: 0.0, gammas: log_spaced(1e-2, 1e-1, 5) };
    let rep = measure_estimate(&fbox, ConditionSuite::default(), &params).unwrap();
    let slope = rep.scaling_fits.get("diophantine").copied().unwrap_or(f64::NAN);
    let mel: Vec<_> = rep.sweep.iter().map(|p| p.fractions["melnikov"]).collect();
    let monotone = mel.windows(2).all(|w| w[0].fraction <= w[1].fraction);
    let smallest = mel[0];
    let ok = (slope - 1.0).abs() <= 0.3 && monotone && smallest.ci_lo == 0.0;
    let counts: Vec<usize> = rep.sweep.iter().map(|p| p.fractions["diophantine"].count).collect();
    (
        ok,
        format!(
            "diophantine_counts {counts:?} slope {slope:.3} melnikov_counts {:?} ci_smallest [{:.1e}, {:.1e}]",
            mel.iter().map(|f| f.count).collect::<Vec<_>>(),
            smallest.ci_lo,
            smallest.ci_hi
        ),
    )
}

fn inverse_defect_scaling() -> Outcome {
    let (m, disc, om) = nm_instance(1e-4);
    let cfg = nm_config();
    let out = nash_moser_solve(&m, &om, &cfg, &disc).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lat = disc.lattice().clone();
    let mut mk = |sites: Vec<i64>, kind, amp| SequenceField::random_decaying(&mut rng, lat.clone(), sites, kind, amp, 0.3);
    let mut dir = TorusEmbedding::zeros(&m.ix);
    dir.theta = mk(m.ix.s.clone(), SiteKind::TangentialReal, 1e-3).real_part();
    dir.y = mk(m.ix.s.clone(), SiteKind::TangentialReal, 1e-3).real_part();
    dir.z = mk(m.ix.s_perp.clone(), SiteKind::NormalComplex, 1e-3);
    // high normal modes alias through the quartic term
    let nc = dir.z.ncomp();
    let zs = dir.z.sites.clone();
    for (i, v) in dir.z.coeffs.iter_mut().enumerate() {
        *v *= 0.1f64.powi(zs[i % nc].unsigned_abs() as i32);
    }
    let dir = dir.smooth_project(2);
    let g = ResidualTriple {
        e_theta: mk(m.ix.s.clone(), SiteKind::TangentialReal, 1.0).real_part(),
        e_y: mk(m.ix.s.clone(), SiteKind::TangentialReal, 1.0).real_part(),
        e_z: mk(m.ix.s_perp.clone(), SiteKind::NormalComplex, 1.0),
        zeta: vec![0.0],
    };
    let (mut rs, mut ds) = (vec![], vec![]);
    for t in log_spaced(1.0, 0.1, 5) {
        let it = out.torus.add(&dir.scale(t));
        let st = build_stack(&m, &it, &out.zeta, &om, 0.1, 3.0, &cfg.kam(), &disc).unwrap();
        rs.push(residual_f(&m, &it, &out.zeta, &om, &disc.grid).unwrap().norm(S0, SIGMA));
        ds.push(inverse_defect(&m, &it, &om, &g, &st.bundle, &disc.grid).unwrap());
    }
    let slope = loglog_slope(&rs, &ds).unwrap_or(f64::NAN);
    let decade = rs[0] / rs[rs.len() - 1];
    ((slope - 1.0).abs() <= 0.3 && decade >= 9.0, format!("residual {:.2e}->{:.2e} defect {:.2e}->{:.2e} slope {slope:.4}", rs[0], rs[4], ds[0], ds[4]))
}

fn main() {
    let criteria: [Criterion; 14] = [
        ("kolmogorov_determinant", kolmogorov_determinant),
        ("unperturbed_exactness", unperturbed_exactness),
        ("gradient_consistency", gradient_consistency),
        ("symplecticity_suite", symplecticity_suite),
        ("homological_residual", homological_residual_check),
        ("kam_contraction_law", kam_contraction_law),
        ("block_selfadjointness_real_spectrum", block_selfadjointness),
        ("eigenvalue_asymptotics", eigenvalue_asymptotics),
        ("nash_moser_convergence", nash_moser_convergence),
        ("zeta_vanishing", zeta_vanishing),
        ("torus_size_scaling", torus_size_scaling),
        ("linear_stability", linear_stability),
        ("measure_scaling", measure_scaling),
        ("approximate_inverse_defect_scaling", inverse_defect_scaling),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        let t = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(e) => {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                (false, format!("panicked: {}", msg.unwrap_or_default()))
            }
        };
        println!("{} {name} {detail} ({:.2}s)", if ok { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
        if !ok {
            failed.push(name);
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed.len(), criteria.len());
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
