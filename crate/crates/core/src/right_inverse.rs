//! Approximate right inverse of the linearized torus equation: a triangular
//! solve in the symplectic chart of an isotropic embedding, with the normal
//! block inverted through the reduction frames.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::error::{KamError, Result};
use crate::geometry::{Chart, TaylorCoefficients};
use crate::hamiltonian::{residual_f, EvalOpts, GridEmbedding, Model, ResidualTriple, TorusEmbedding};
use crate::kam::{linf_inverse, BlockNormalForm, TransformChain};
use crate::lattice::{omega_dvphi_inverse, Grid, OperatorMap, SequenceField, SiteKind};
use crate::linalg::{I, ONE, ZERO};
use crate::tolerances::COND_CAP_MBAR;

/// Everything the triangular solve needs at one isotropic torus.
#[derive(Debug, Clone)]
pub struct RightInverseBundle {
    pub taylor: TaylorCoefficients,
    pub chart: Chart,
    /// Periodic part of the angle map of the isotropic torus.
    pub theta: SequenceField,
    /// `Phi_1 Phi_2 Phi_3` followed by the KAM chain.
    pub frames: TransformChain,
    pub n_inf: BlockNormalForm,
    /// `[[M]]`, the average of `K20 - K11 L^{-1} J2 K11^t`.
    pub mbar: DMatrix<f64>,
    pub mbar_cond: f64,
    pub omega: Vec<f64>,
    pub gamma: f64,
    pub tau: f64,
    k11t: OperatorMap,
}

/// `(a, b) -> (i b, -i a)` on a doubled field.
pub fn j2_field(v: &SequenceField) -> SequenceField {
    let n2 = v.ncomp();
    let n = n2 / 2;
    let mut out = v.same_shape();
    for m in 0..v.lattice.len() {
        for c in 0..n {
            out.set(m, c, I * v.get(m, n + c));
            out.set(m, n + c, -I * v.get(m, c));
        }
    }
    out
}

fn retag(mut v: SequenceField, kind: SiteKind) -> SequenceField {
    v.kind = kind;
    v
}

fn constant_field(like: &SequenceField, vals: &[C64]) -> SequenceField {
    let mut out = like.same_shape();
    for (c, v) in vals.iter().enumerate() {
        out.set(0, c, *v);
    }
    out
}

impl RightInverseBundle {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        taylor: TaylorCoefficients,
        chart: Chart,
        theta: SequenceField,
        frames: TransformChain,
        n_inf: BlockNormalForm,
        omega: &[f64],
        gamma: f64,
        tau: f64,
        grid: &Grid,
    ) -> Result<Self> {
        let d = taylor.k20.rows;
        let k11t = taylor.k11.transpose_op();
        let mut b = RightInverseBundle {
            taylor,
            chart,
            theta,
            frames,
            n_inf,
            mbar: DMatrix::zeros(d, d),
            mbar_cond: 1.0,
            omega: omega.to_vec(),
            gamma,
            tau,
            k11t,
        };
        let unit = SequenceField::zeros(b.theta.lattice.clone(), b.theta.sites.clone(), SiteKind::TangentialReal);
        for a in 0..d {
            let mut e = vec![ZERO; d];
            e[a] = ONE;
            let col = b.apply_m(&constant_field(&unit, &e), grid)?.mean();
            for r in 0..d {
                b.mbar[(r, a)] = col[r].re;
            }
        }
        let sv = b.mbar.clone().singular_values();
        let smax = sv.iter().cloned().fold(0.0, f64::max);
        let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        b.mbar_cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !b.mbar_cond.is_finite() || b.mbar_cond > COND_CAP_MBAR {
            return Err(KamError::MbarSingular { cond: b.mbar_cond });
        }
        Ok(b)
    }

    /// `L^{-1} g = W (omega.d_phi + N_inf)^{-1} W^{-1} g`.
    pub fn frak_l_inverse(&self, g: &SequenceField, grid: &Grid) -> Result<SequenceField> {
        let h = self.frames.apply(g, grid, true)?;
        let h = linf_inverse(&self.n_inf, &h, self.gamma, self.tau)?;
        self.frames.apply(&h, grid, false)
    }

    fn j2_k11t(&self, v: &SequenceField, grid: &Grid) -> SequenceField {
        j2_field(&retag(self.k11t.apply(v, grid), SiteKind::Doubled))
    }

    fn k11(&self, w: &SequenceField, grid: &Grid) -> SequenceField {
        retag(self.taylor.k11.apply(w, grid), SiteKind::TangentialReal)
    }

    /// `M v = K20 v - K11 L^{-1} J2 K11^t v`.
    pub fn apply_m(&self, v: &SequenceField, grid: &Grid) -> Result<SequenceField> {
        let h = self.frak_l_inverse(&self.j2_k11t(v, grid), grid)?;
        let mut out = self.taylor.k20.apply(v, grid);
        out.axpy(-ONE, &self.k11(&h, grid));
        Ok(out)
    }

    /// `(d_phi Theta)^t z` for a constant vector `z`.
    fn dtheta_t(&self, z: &[f64]) -> SequenceField {
        let d = z.len();
        let mut out = self.theta.same_shape();
        for k in 0..d {
            let dk = self.theta.dphi(k);
            for m in 0..out.lattice.len() {
                let s: C64 = (0..d).map(|j| dk.get(m, j) * z[j]).sum();
                out.set(m, k, s);
            }
        }
        out
    }
}

/// Unknowns of the triangular system in chart coordinates.
#[derive(Debug, Clone)]
pub struct TriangularSolution {
    pub psi: SequenceField,
    pub upsilon: SequenceField,
    pub w: SequenceField,
    pub zeta: Vec<f64>,
}

/// Solves `T[(psi, upsilon, W), zeta] = (g1, g2, g3)`.
pub fn solve_triangular(
    g1: &SequenceField,
    g2: &SequenceField,
    g3: &SequenceField,
    b: &RightInverseBundle,
    grid: &Grid,
) -> Result<TriangularSolution> {
    let d = g1.ncomp();
    let om = &b.omega;
    // second row: mean gives zeta, the rest upsilon_1
    let zeta: Vec<f64> = g2.mean().iter().map(|v| v.re).collect();
    let mut rhs2 = g2.sub(&b.dtheta_t(&zeta));
    for a in 0..d {
        rhs2.set(0, a, ZERO);
    }
    let ups1 = omega_dvphi_inverse(&rhs2, om, b.tau, b.gamma)?;
    // average condition for upsilon_0
    let lg3 = b.frak_l_inverse(g3, grid)?;
    let k11_lg3 = b.k11(&lg3, grid);
    let m_ups1 = b.apply_m(&ups1, grid)?;
    let avg = DMatrix::from_fn(d, 1, |a, _| (g1.get(0, a) + k11_lg3.get(0, a) + m_ups1.get(0, a)).re);
    let lu = b.mbar.clone().lu();
    let ups0 = lu.solve(&avg).ok_or(KamError::MbarSingular { cond: b.mbar_cond })?;
    let mut upsilon = ups1;
    for a in 0..d {
        upsilon.set(0, a, C64::new(-ups0[(a, 0)], 0.0));
    }
    let upsilon = upsilon.real_part();
    // third row
    let w = b.frak_l_inverse(&g3.sub(&b.j2_k11t(&upsilon, grid)), grid)?;
    // first row, zero mean
    let mut rhs1 = g1.add(&b.taylor.k20.apply(&upsilon, grid));
    rhs1.axpy(ONE, &b.k11(&w, grid));
    for a in 0..d {
        rhs1.set(0, a, ZERO);
    }
    let psi = omega_dvphi_inverse(&rhs1, om, b.tau, b.gamma)?.real_part();
    Ok(TriangularSolution { psi, upsilon, w, zeta })
}

/// Applies the triangular operator; returns the three rows.
pub fn apply_triangular(sol: &TriangularSolution, b: &RightInverseBundle, grid: &Grid) -> [SequenceField; 3] {
    let om = &b.omega;
    let d = sol.zeta.len();
    let mut r1 = sol.psi.omega_dphi(om);
    r1.axpy(-ONE, &b.taylor.k20.apply(&sol.upsilon, grid));
    r1.axpy(-ONE, &b.k11(&sol.w, grid));
    let mut r2 = sol.upsilon.omega_dphi(om).add(&b.dtheta_t(&sol.zeta));
    for a in 0..d {
        r2.add_at(0, a, C64::new(sol.zeta[a], 0.0));
    }
    let inner = retag(b.k11t.apply(&sol.upsilon, grid), SiteKind::Doubled).add(&b.taylor.k02.apply(&sol.w, grid));
    let r3 = sol.w.omega_dphi(om).add(&j2_field(&inner));
    [r1, r2, r3]
}

/// `||T sol - g|| / ||g||` with coefficient-vector norms.
pub fn triangular_residual(
    sol: &TriangularSolution,
    g: [&SequenceField; 3],
    b: &RightInverseBundle,
    grid: &Grid,
) -> f64 {
    let rows = apply_triangular(sol, b, grid);
    let mut num = 0.0;
    let mut den = 0.0;
    for (r, gi) in rows.iter().zip(g) {
        num += r.sub(gi).norm_l2().powi(2);
        den += gi.norm_l2().powi(2);
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

fn chart_sites(b: &RightInverseBundle) -> Vec<i64> {
    let s = &b.theta.sites;
    let dbl = &b.taylor.k02.row_sites;
    s.iter().chain(s.iter()).chain(dbl.iter()).cloned().collect()
}

/// Tangent update `(iota_hat, zeta_hat)` with `dF . (iota_hat, zeta_hat) ~ g`.
pub fn approximate_right_inverse(
    g: &ResidualTriple,
    b: &RightInverseBundle,
    grid: &Grid,
) -> Result<(TorusEmbedding, Vec<f64>)> {
    let d = g.e_theta.ncomp();
    let n = g.e_z.ncomp();
    let sites = chart_sites(b);
    let full = SequenceField::concat(&[&g.e_theta, &g.e_y, &g.e_z.doubled()], SiteKind::NormalComplex);
    let pulled = b.chart.apply(grid, &full, true, sites.clone());
    let g1 = pulled.slice_comps(0, d, SiteKind::TangentialReal).real_part();
    let g2 = pulled.slice_comps(d, d, SiteKind::TangentialReal).real_part();
    let g3 = pulled.slice_comps(2 * d, 2 * n, SiteKind::Doubled);
    let sol = solve_triangular(&g1, &g2, &g3, b, grid)?;
    let v = SequenceField::concat(&[&sol.psi, &sol.upsilon, &sol.w], SiteKind::NormalComplex);
    let u = b.chart.apply(grid, &v, false, sites);
    let emb = TorusEmbedding {
        theta: u.slice_comps(0, d, SiteKind::TangentialReal).real_part(),
        y: u.slice_comps(d, d, SiteKind::TangentialReal).real_part(),
        z: u.slice_comps(2 * d, n, SiteKind::NormalComplex),
    };
    Ok((emb, sol.zeta))
}

/// `dF(iota, zeta)[dir, zeta_dir]` from the pointwise Hessian of `H`.
pub fn df_apply(
    model: &Model,
    iota: &TorusEmbedding,
    omega: &[f64],
    dir: &TorusEmbedding,
    zeta_dir: &[f64],
    grid: &Grid,
) -> Result<ResidualTriple> {
    let (d, n) = (model.d(), model.n());
    let m = 2 * d + 2 * n;
    let np = grid.npts();
    let ge = GridEmbedding::new(iota, grid);
    let full = SequenceField::concat(&[&dir.theta, &dir.y, &dir.z.doubled()], SiteKind::NormalComplex);
    let ug = grid.field_to_grid(&full);
    let hu: Vec<Vec<C64>> = (0..np)
        .into_par_iter()
        .map(|p| -> Result<Vec<C64>> {
            let (th, y, z) = ge.point(p, d, n);
            let ev = model.eval_point(&th, &y, &z, EvalOpts { hessian: true, normal_blocks: false })?;
            let h = ev.hess.expect("requested");
            let u: Vec<C64> = (0..m).map(|c| ug[c * np + p]).collect();
            Ok(h.matvec(&u))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut vals = vec![ZERO; m * np];
    for (p, v) in hu.iter().enumerate() {
        for c in 0..m {
            vals[c * np + p] = v[c];
        }
    }
    let sites: Vec<i64> = full.sites.clone();
    let hf = grid.field_from_grid(vals, sites, SiteKind::NormalComplex);
    let h_theta = hf.slice_comps(0, d, SiteKind::TangentialReal).real_part();
    let h_y = hf.slice_comps(d, d, SiteKind::TangentialReal).real_part();
    let h_zbar = hf.slice_comps(2 * d + n, n, SiteKind::NormalComplex);
    let e_theta = dir.theta.omega_dphi(omega).sub(&h_y);
    let mut e_y = dir.y.omega_dphi(omega).add(&h_theta);
    for a in 0..d {
        e_y.add_at(0, a, C64::new(zeta_dir[a], 0.0));
    }
    let e_z = dir.z.omega_dphi(omega).add(&h_zbar.scale(I));
    Ok(ResidualTriple { e_theta, e_y, e_z, zeta: zeta_dir.to_vec() })
}

/// Central finite difference of `F` along `(dir, zeta_dir)` with step `h`.
#[allow(clippy::too_many_arguments)]
pub fn df_apply_fd(
    model: &Model,
    iota: &TorusEmbedding,
    zeta: &[f64],
    omega: &[f64],
    dir: &TorusEmbedding,
    zeta_dir: &[f64],
    h: f64,
    grid: &Grid,
) -> Result<ResidualTriple> {
    let shift = |s: f64| -> Result<ResidualTriple> {
        let it = iota.add(&dir.scale(s));
        let z: Vec<f64> = zeta.iter().zip(zeta_dir).map(|(a, b)| a + s * b).collect();
        residual_f(model, &it, &z, omega, grid)
    };
    let fp = shift(h)?;
    let fm = shift(-h)?;
    Ok(fp.sub(&fm).scale(0.5 / h))
}

/// `||dF . T g - g|| / ||g||` in the coefficient norm.
pub fn inverse_defect(
    model: &Model,
    iota: &TorusEmbedding,
    omega: &[f64],
    g: &ResidualTriple,
    b: &RightInverseBundle,
    grid: &Grid,
) -> Result<f64> {
    let (u, z) = approximate_right_inverse(g, b, grid)?;
    let dfu = df_apply(model, iota, omega, &u, &z, grid)?;
    let r = dfu.sub(g);
    let nrm = |t: &ResidualTriple| (t.e_theta.norm_l2().powi(2) + t.e_y.norm_l2().powi(2) + t.e_z.norm_l2().powi(2)).sqrt();
    Ok(nrm(&r) / nrm(g).max(f64::MIN_POSITIVE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{FrequencyModel, Perturbation};
    use crate::kam::KamConfig;
    use crate::lattice::{Discretization, IndexSets};
    use crate::nash_moser::{build_stack, IterateStack};
    use rand::{Rng, SeedableRng};

    const GAMMA: f64 = 0.01;
    const TAU: f64 = 3.0;

    fn model(eps: f64) -> (Model, Discretization) {
        let ix = IndexSets::new(&[0], 4, 4).unwrap();
        let m = Model::new(ix.clone(), vec![0.3], FrequencyModel::quartic(), Perturbation::reference(4, eps)).unwrap();
        (m, Discretization::new(ix))
    }

    fn decaying(rng: &mut impl Rng, f: &mut SequenceField, amp: f64, rate: f64) {
        let nc = f.ncomp();
        for (i, v) in f.coeffs.iter_mut().enumerate() {
            let decay = rate.powi(f.lattice.norm1(i / nc) as i32);
            *v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * amp * decay;
        }
    }

    fn embedding(m: &Model, amp: f64, seed: u64) -> TorusEmbedding {
        let mut iota = TorusEmbedding::zeros(&m.ix);
        if amp > 0.0 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for f in [&mut iota.theta, &mut iota.y, &mut iota.z] {
                decaying(&mut rng, f, amp, 0.05);
                for c in 0..f.ncomp() {
                    f.set(0, c, ZERO);
                }
            }
            iota.theta = iota.theta.real_part();
            iota.y = iota.y.real_part();
        }
        iota
    }

    fn stack(m: &Model, disc: &Discretization, iota: &TorusEmbedding) -> IterateStack {
        build_stack(m, iota, &[0.0], &m.omega0(), GAMMA, TAU, &KamConfig::default(), disc).unwrap()
    }

    fn random_g(disc: &Discretization, m: &Model, seed: u64) -> [SequenceField; 3] {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let lat = disc.lattice().clone();
        let mut g1 = SequenceField::zeros(lat.clone(), m.ix.s.clone(), SiteKind::TangentialReal);
        let mut g2 = g1.clone();
        let mut g3 = SequenceField::zeros(lat, m.ix.s_perp.clone(), SiteKind::NormalComplex);
        decaying(&mut rng, &mut g1, 1.0, 0.3);
        decaying(&mut rng, &mut g2, 1.0, 0.3);
        decaying(&mut rng, &mut g3, 1.0, 0.3);
        [g1.real_part(), g2.real_part(), g3.doubled()]
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let (m, disc) = model(1e-3);
        let s = stack(&m, &disc, &TorusEmbedding::zeros(&m.ix));
        let [g1, g2, g3] = random_g(&disc, &m, 1);
        let z = |f: &SequenceField| f.same_shape();
        let sol = solve_triangular(&z(&g1), &z(&g2), &z(&g3), &s.bundle, &disc.grid).unwrap();
        assert_eq!(sol.psi.max_abs() + sol.upsilon.max_abs() + sol.w.max_abs(), 0.0);
        assert!(sol.zeta.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unperturbed_closed_form() {
        let (m, disc) = model(0.0);
        let s = stack(&m, &disc, &TorusEmbedding::zeros(&m.ix));
        assert!((s.bundle.mbar[(0, 0)] - 2.0).abs() < 1e-8);
        let [g1, g2, g3] = random_g(&disc, &m, 2);
        let sol = solve_triangular(&g1, &g2, &g3, &s.bundle, &disc.grid).unwrap();
        let om = m.omega0();
        assert!((sol.zeta[0] - g2.get(0, 0).re).abs() < 1e-14);
        let lat = disc.lattice();
        for md in 1..lat.len() {
            let want = g2.get(md, 0) / C64::new(0.0, lat.dot(md, &om));
            assert!((sol.upsilon.get(md, 0) - want).norm() < 1e-12);
        }
        assert!((sol.upsilon.get(0, 0).re + g1.get(0, 0).re / 2.0).abs() < 1e-12);
        // chart is the identity: T is the triangular inverse itself
        let g = ResidualTriple { e_theta: g1.clone(), e_y: g2.clone(), e_z: g3.undouble(), zeta: vec![0.0] };
        let (u, z) = approximate_right_inverse(&g, &s.bundle, &disc.grid).unwrap();
        assert!(u.theta.sub(&sol.psi).max_abs() < 1e-13);
        assert!(u.y.sub(&sol.upsilon).max_abs() < 1e-13);
        assert!(u.z.sub(&sol.w.undouble()).max_abs() < 1e-13);
        assert_eq!(z, sol.zeta);
    }

    #[test]
    fn triangular_residual_oracle() {
        let (m, disc) = model(1e-3);
        let iota = embedding(&m, 1e-4, 7);
        let s = stack(&m, &disc, &iota);
        for seed in 0..3 {
            let [g1, g2, g3] = random_g(&disc, &m, 10 + seed);
            let sol = solve_triangular(&g1, &g2, &g3, &s.bundle, &disc.grid).unwrap();
            let res = triangular_residual(&sol, [&g1, &g2, &g3], &s.bundle, &disc.grid);
            assert!(res < crate::tolerances::TOL_TRI, "residual {res:e}");
            assert!(sol.psi.get(0, 0).norm() < 1e-14);
        }
    }

    #[test]
    fn hessian_derivative_matches_finite_differences() {
        let (m, disc) = model(1e-2);
        let iota = embedding(&m, 1e-3, 3);
        let dir = embedding(&m, 1.0, 4);
        let om = m.omega0();
        let a = df_apply(&m, &iota, &om, &dir, &[0.5], &disc.grid).unwrap();
        let b = df_apply_fd(&m, &iota, &[0.0], &om, &dir, &[0.5], 1e-4, &disc.grid).unwrap();
        let diff = a.sub(&b).max_abs();
        assert!(diff < 1e-7 * a.max_abs(), "{diff:e} vs {:e}", a.max_abs());
    }

    #[test]
    fn exact_inverse_at_trivial_solution() {
        let (m, disc) = model(0.0);
        let iota = TorusEmbedding::zeros(&m.ix);
        let s = stack(&m, &disc, &iota);
        let [g1, g2, g3] = random_g(&disc, &m, 5);
        let g = ResidualTriple { e_theta: g1, e_y: g2, e_z: g3.undouble(), zeta: vec![0.0] };
        let defect = inverse_defect(&m, &iota, &m.omega0(), &g, &s.bundle, &disc.grid).unwrap();
        assert!(defect < 1e-10, "{defect:e}");
    }
}
