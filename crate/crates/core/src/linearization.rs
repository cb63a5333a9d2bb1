//! The linearized operator on the normal directions and its reduction to
//! constant coefficients up to a one-smoothing remainder.
//!
//! Operators act on doubled fields `(w, wbar)` over `[-k1, k1, -k2, k2, ...]`.
//! The zeroth-order part is stored as `Z = J A` with `J = diag(i, -i)` and
//! `A = [[B, C], [conj C, conj B]]`, `B` Hermitian and `C` symmetric pointwise.

use num_complex::Complex64 as C64;

use crate::error::{KamError, Result};
use crate::geometry::{IsotropicEmbedding, TaylorCoefficients};
use crate::hamiltonian::{GridEmbedding, Model};
use crate::lattice::{bracket, dd_weight, omega_dvphi_inverse, operator_norm, Grid, OperatorMap, SequenceField, SiteKind};
use crate::linalg::{expm, CMat, I, ONE, ZERO};
use crate::tolerances::{EXP_ORDER_CAP, PRUNE_REL, S0, SIGMA, TOL_EXP, TOL_STRUCT};

/// `omega . d_phi + N + R` with `N` the constant pair-block-diagonal part.
#[derive(Debug, Clone)]
pub struct LinHamOperator {
    pub omega: Vec<f64>,
    pub n_part: OperatorMap,
    pub r_part: OperatorMap,
}

impl LinHamOperator {
    /// Splits a zeroth-order part into `N` (mode zero, 2x2 pair blocks, no
    /// `w`/`wbar` coupling) and the rest.
    pub fn from_total(omega: &[f64], z: &OperatorMap) -> Self {
        let (n_part, r_part) = split_normal(z);
        LinHamOperator { omega: omega.to_vec(), n_part, r_part }
    }

    pub fn total(&self) -> OperatorMap {
        self.n_part.add(&self.r_part)
    }

    /// Number of normal sites (half the doubled dimension).
    pub fn n(&self) -> usize {
        self.n_part.rows / 2
    }

    pub fn structure_residual(&self) -> f64 {
        hamiltonian_defect(&self.total())
    }

    /// `(omega . d_phi + Z) v`.
    pub fn apply(&self, v: &SequenceField, grid: &Grid) -> SequenceField {
        let mut out = self.total().apply(v, grid);
        out.axpy(ONE, &v.omega_dphi(&self.omega));
        out
    }
}

pub fn split_normal(z: &OperatorMap) -> (OperatorMap, OperatorMap) {
    let n2 = z.rows;
    let n = n2 / 2;
    let mut nb = CMat::zeros(n2, n2);
    let b0 = z.block(0);
    for h in [0, n] {
        for p in 0..n / 2 {
            for a in 0..2 {
                for b in 0..2 {
                    let (r, c) = (h + 2 * p + a, h + 2 * p + b);
                    nb.data[r * n2 + c] = b0[r * n2 + c];
                }
            }
        }
    }
    let mut np = z.same_shape();
    np.set_block(0, &nb);
    let mut rp = z.sub(&np);
    rp.refresh_support();
    (np, rp)
}

/// Multiplies the rows by `i` (first half) and `-i` (second half): `J A`.
pub fn j_left(a: &OperatorMap) -> OperatorMap {
    scale_rows(a, I, -I)
}

/// Inverse of [`j_left`].
pub fn j_inv_left(z: &OperatorMap) -> OperatorMap {
    scale_rows(z, -I, I)
}

fn scale_rows(a: &OperatorMap, top: C64, bottom: C64) -> OperatorMap {
    let n = a.rows / 2;
    let cols = a.cols;
    let mut out = a.clone();
    for md in a.supported_modes() {
        let b = &mut out.data[md * a.bsize()..(md + 1) * a.bsize()];
        for r in 0..a.rows {
            let f = if r < n { top } else { bottom };
            b[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v *= f);
        }
    }
    out
}

/// `J2 K` for `K` with rows `(d_w, d_wbar)`: swaps the halves with factors `i`, `-i`.
pub fn j2_times(k: &OperatorMap) -> OperatorMap {
    let n = k.rows / 2;
    let top = k.sub_block(n, n, 0, k.cols).scale(I);
    let bot = k.sub_block(0, n, 0, k.cols).scale(-I);
    let mut out = k.same_shape();
    out.row_sites = k.row_sites.clone();
    out.put_block(0, 0, &top);
    out.put_block(n, 0, &bot);
    out
}

/// Relative defect of the Hamiltonian predicate for `Z = J A`.
pub fn hamiltonian_defect(z: &OperatorMap) -> f64 {
    let n = z.rows / 2;
    let a = j_inv_left(z);
    let b = a.sub_block(0, n, 0, n);
    let c = a.sub_block(0, n, n, n);
    let cl = a.sub_block(n, n, 0, n);
    let bl = a.sub_block(n, n, n, n);
    let d1 = b.sub(&b.adjoint_op()).max_abs();
    let d2 = c.sub(&c.transpose_op()).max_abs();
    let d3 = cl.sub(&c.conj_op()).max_abs();
    let d4 = bl.sub(&b.conj_op()).max_abs();
    d1.max(d2).max(d3).max(d4) / a.max_abs().max(1.0)
}

/// `Omega_c = [[0, i], [-i, 0]]`, the form preserved by the transforms on `(w, wbar)`.
fn omega_c(n: usize) -> CMat {
    CMat::from_fn(2 * n, 2 * n, |r, c| {
        if r < n && c == r + n {
            I
        } else if r >= n && c + n == r {
            -I
        } else {
            ZERO
        }
    })
}

/// `max |Phi^t Omega_c Phi - Omega_c|` for a pointwise matrix.
pub fn symplectic_defect(phi: &CMat) -> f64 {
    let om = omega_c(phi.rows / 2);
    phi.transpose().matmul(&om).matmul(phi).sub(&om).norm_max()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    ExpOfField,
    GaugeDiag,
}

/// `Phi = exp(X(phi))`, or the diagonal gauge `diag(e^{x_r(phi)})`.
#[derive(Debug, Clone)]
pub struct SymplecticTransform {
    pub kind: TransformKind,
    pub generator: OperatorMap,
    /// Gauge phases `beta_k` over the normal sites.
    pub phases: Option<SequenceField>,
}

impl SymplecticTransform {
    pub fn identity_like(z: &OperatorMap) -> Self {
        SymplecticTransform { kind: TransformKind::ExpOfField, generator: z.same_shape(), phases: None }
    }

    pub fn is_identity(&self) -> bool {
        self.generator.max_abs() == 0.0
    }

    pub fn inverse(&self) -> Self {
        SymplecticTransform {
            kind: self.kind,
            generator: self.generator.scale(-ONE),
            phases: self.phases.as_ref().map(|b| b.scale(-ONE)),
        }
    }

    pub fn matrix_at(&self, phi: &[f64]) -> CMat {
        let x = self.generator.eval_at(phi);
        match self.kind {
            TransformKind::ExpOfField => expm(&x),
            TransformKind::GaugeDiag => {
                let d: Vec<C64> = (0..x.rows).map(|r| x.at(r, r).exp()).collect();
                CMat::from_diag(&d)
            }
        }
    }

    /// Max symplectic defect over up to `samples` grid points.
    pub fn symplectic_residual(&self, grid: &Grid, samples: usize) -> f64 {
        let np = grid.npts();
        let stride = (np / samples.max(1)).max(1);
        (0..np).step_by(stride).map(|p| symplectic_defect(&self.matrix_at(&grid.phi(p)))).fold(0.0, f64::max)
    }

    /// `Phi v`, or `Phi^{-1} v` with `inverse`.
    pub fn apply(&self, v: &SequenceField, grid: &Grid, inverse: bool) -> Result<SequenceField> {
        if self.is_identity() {
            return Ok(v.clone());
        }
        let sgn = if inverse { -ONE } else { ONE };
        match self.kind {
            TransformKind::ExpOfField => {
                let x = self.generator.scale(sgn);
                let tol = TOL_EXP * v.norm_l2();
                let mut out = v.clone();
                let mut term = v.clone();
                for k in 1..=EXP_ORDER_CAP {
                    term = x.apply(&term, grid).scale(C64::new(1.0 / k as f64, 0.0));
                    out.axpy(ONE, &term);
                    if term.norm_l2() <= tol {
                        return Ok(out);
                    }
                }
                Err(KamError::ExpDivergence { order: EXP_ORDER_CAP, tail: term.norm_l2() })
            }
            TransformKind::GaugeDiag => {
                let np = grid.npts();
                let xg = diag_grid(&self.generator, grid);
                let mut vg = grid.field_to_grid(v);
                for (r, blk) in vg.chunks_mut(np).enumerate() {
                    for (p, val) in blk.iter_mut().enumerate() {
                        *val *= (sgn * xg[r * np + p]).exp();
                    }
                }
                Ok(grid.field_from_grid(vg, v.sites.clone(), v.kind))
            }
        }
    }

    /// Zeroth-order part of `Phi^{-1} (omega . d_phi + Z) Phi`; returns the
    /// new operator and the number of series terms used.
    pub fn conjugate(&self, z: &OperatorMap, omega: &[f64], grid: &Grid) -> Result<(OperatorMap, usize)> {
        if self.is_identity() {
            return Ok((z.clone(), 0));
        }
        match self.kind {
            TransformKind::ExpOfField => conjugate_exp(z, &self.generator, omega, grid),
            TransformKind::GaugeDiag => Ok((conjugate_gauge(z, &self.generator, omega, grid), 1)),
        }
    }

    /// `Phi (omega . d_phi + Z') Phi^{-1}`.
    pub fn conjugate_back(&self, z: &OperatorMap, omega: &[f64], grid: &Grid) -> Result<OperatorMap> {
        Ok(self.inverse().conjugate(z, omega, grid)?.0)
    }
}

fn diag_grid(x: &OperatorMap, grid: &Grid) -> Vec<C64> {
    let n = x.rows;
    let mut diag = SequenceField::zeros(x.lattice.clone(), x.row_sites.clone(), SiteKind::Doubled);
    for md in x.supported_modes() {
        let b = x.block(md);
        for r in 0..n {
            diag.set(md, r, b[r * n + r]);
        }
    }
    grid.field_to_grid(&diag)
}

pub fn commutator(a: &OperatorMap, b: &OperatorMap, grid: &Grid) -> OperatorMap {
    a.mul(b, grid).sub(&b.mul(a, grid))
}

fn prune_rel(op: &mut OperatorMap) {
    let top = op.supported_modes().iter().map(|&m| op.block_fro(m)).fold(0.0, f64::max);
    op.prune(PRUNE_REL * top);
}

/// `Z' = Z + sum_k B_k / k!` with `B_1 = omega.d_phi X + [Z, X]`, `B_{k+1} = [B_k, X]`.
/// Stops once a term falls below `TOL_EXP` relative to the first-order term.
pub fn conjugate_exp(z: &OperatorMap, x: &OperatorMap, omega: &[f64], grid: &Grid) -> Result<(OperatorMap, usize)> {
    let mut term = x.omega_dphi(omega).add(&commutator(z, x, grid));
    prune_rel(&mut term);
    let base = term.wiener_fro();
    let mut out = z.add(&term);
    if base == 0.0 {
        return Ok((out, 1));
    }
    let tol = TOL_EXP * base;
    for k in 2..=EXP_ORDER_CAP {
        term = commutator(&term, x, grid).scale(C64::new(1.0 / k as f64, 0.0));
        prune_rel(&mut term);
        out.axpy(ONE, &term);
        let t = term.wiener_fro();
        if t <= tol {
            out.refresh_support();
            return Ok((out, k));
        }
        if k == EXP_ORDER_CAP {
            return Err(KamError::ExpDivergence { order: k, tail: t });
        }
    }
    unreachable!()
}

/// `Z'_rc = e^{-x_r} Z_rc e^{x_c} + delta_rc omega.d_phi x_r` for diagonal `X`.
pub fn conjugate_gauge(z: &OperatorMap, x: &OperatorMap, omega: &[f64], grid: &Grid) -> OperatorMap {
    let np = grid.npts();
    let n2 = z.rows;
    let xg = diag_grid(x, grid);
    let mut zg = z.to_grid(grid);
    for r in 0..n2 {
        for c in 0..n2 {
            let blk = &mut zg[(r * n2 + c) * np..(r * n2 + c + 1) * np];
            for (p, v) in blk.iter_mut().enumerate() {
                *v *= (xg[c * np + p] - xg[r * np + p]).exp();
            }
        }
    }
    let mut out = OperatorMap::from_grid(grid, zg, z.row_sites.clone(), z.col_sites.clone());
    let dx = x.omega_dphi(omega);
    out.axpy(ONE, &dx);
    out.refresh_support();
    out
}

/// Entrywise product of an operator with a constant real matrix `f(r, c)`.
fn hadamard(op: &OperatorMap, f: impl Fn(usize, usize) -> f64) -> OperatorMap {
    let mut out = op.clone();
    let cols = op.cols;
    let bs = op.bsize();
    let w: Vec<f64> = (0..bs).map(|i| f(i / cols, i % cols)).collect();
    for md in op.supported_modes() {
        out.data[md * bs..(md + 1) * bs].iter_mut().zip(&w).for_each(|(v, s)| *v *= s);
    }
    out.refresh_support();
    out
}

fn doubled_from_blocks(sites: &[i64], tl: &OperatorMap, tr: &OperatorMap, bl: &OperatorMap, br: &OperatorMap) -> OperatorMap {
    let n = sites.len();
    let mut ds = sites.to_vec();
    ds.extend_from_slice(sites);
    let mut out = OperatorMap::square(tl.lattice.clone(), ds);
    out.put_block(0, 0, tl);
    out.put_block(0, n, tr);
    out.put_block(n, 0, bl);
    out.put_block(n, n, br);
    out.refresh_support();
    out
}

/// Generator of the first transform: `-(eps/2) [[0, Q2/(DD DD)], [conj Q2/(DD DD), 0]]`.
/// It removes the `w`/`wbar` coupling of the perturbation up to one-smoothing terms.
pub fn phi1_generator(q2: &OperatorMap, eps: f64) -> OperatorMap {
    let sites = &q2.row_sites;
    let dd: Vec<f64> = sites.iter().map(|&k| dd_weight(k)).collect();
    let g = hadamard(q2, |r, c| -0.5 * eps / (dd[r] * dd[c]));
    let zero = q2.same_shape();
    doubled_from_blocks(sites, &zero, &g, &g.conj_op(), &zero)
}

/// Coefficients of the second generator: multiplication by `a2 = (1/4) dx^{-1}(q1 - av q1)`
/// sandwiched with `D DD^{-2}`, giving `(k_r/DD_r^2 + k_c/DD_c^2) / (4 (k_c - k_r))` off the diagonal.
pub fn phi2_weight(kr: i64, kc: i64) -> f64 {
    if kr == kc {
        return 0.0;
    }
    let a = kr as f64 / dd_weight(kr).powi(2) + kc as f64 / dd_weight(kc).powi(2);
    0.25 * a / (kc - kr) as f64
}

/// Generator of the second transform: `eps diag(M o Q1, M o conj Q1)`.
pub fn phi2_generator(q1: &OperatorMap, eps: f64) -> OperatorMap {
    let sites = &q1.row_sites;
    let g = hadamard(q1, |r, c| eps * phi2_weight(sites[r], sites[c]));
    let zero = q1.same_shape();
    doubled_from_blocks(sites, &g, &zero, &zero, &g.conj_op())
}

/// `a2 = (1/4) dx^{-1}(q1 - av q1)` on x-Fourier coefficients indexed by harmonic `m`.
pub fn a2_from_q1(q1_hat: &[(i64, C64)]) -> Vec<(i64, C64)> {
    q1_hat
        .iter()
        .map(|&(m, v)| {
            if m == 0 {
                (0, ZERO)
            } else {
                (m, v / C64::new(0.0, 8.0 * std::f64::consts::PI * m as f64))
            }
        })
        .collect()
}

/// Eigenvalue seed of the first normal form:
/// `[[omega_k]] + eps [[q1]] = omega_k(xi, 0) + c_eps + r_k / k`.
#[derive(Debug, Clone)]
pub struct BlockSeed {
    pub sites: Vec<i64>,
    pub seed: Vec<f64>,
    pub omega_unperturbed: Vec<f64>,
    pub c_eps: f64,
    pub r: Vec<f64>,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct LinearizationReport {
    /// `|R0 DD|_{s0, sigma-1}` of the remainder before the transforms.
    pub r0_norm: f64,
    /// Same norm of the final remainder.
    pub remainder_norm: f64,
    /// `w`/`wbar` coupling with weight `<k>`, before and after the first transform.
    pub offdiag_before: f64,
    pub offdiag_after_phi1: f64,
    /// Off-diagonal `w`-`w` part with weight `<k>` after the second transform.
    pub xdep_after_phi2: f64,
    pub structure_residuals: Vec<f64>,
    pub symplectic_residuals: Vec<f64>,
    pub exp_orders: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Linearization {
    /// The operator before the transforms, `omega . d_phi + J2 K02`.
    pub frak_l: LinHamOperator,
    /// After the three transforms.
    pub l0: LinHamOperator,
    /// Intermediate zeroth-order parts after each transform.
    pub stages: Vec<OperatorMap>,
    pub transforms: Vec<SymplecticTransform>,
    pub seed: BlockSeed,
    pub report: LinearizationReport,
}

/// Weighted norm of the `w`/`wbar` coupling, weight `<k>` on the columns.
pub fn offdiag_norm(z: &OperatorMap) -> f64 {
    let n = z.rows / 2;
    let blk = z.sub_block(0, n, n, n);
    let w: Vec<f64> = blk.col_sites.iter().map(|&k| bracket(k)).collect();
    operator_norm(&blk.mul_diag_right(&w), S0, 0.0)
}

/// Weighted norm of the off-diagonal `w`-`w` entries, weight `<k>` on the columns.
pub fn xdep_norm(z: &OperatorMap) -> f64 {
    let n = z.rows / 2;
    let blk = hadamard(&z.sub_block(0, n, 0, n), |r, c| if r == c { 0.0 } else { 1.0 });
    let w: Vec<f64> = blk.col_sites.iter().map(|&k| bracket(k)).collect();
    operator_norm(&blk.mul_diag_right(&w), S0, 0.0)
}

/// `|R DD|_{s0, sigma-1}`.
pub fn smoothing_norm(r: &OperatorMap) -> f64 {
    let w: Vec<f64> = r.col_sites.iter().map(|&k| dd_weight(k)).collect();
    operator_norm(&r.mul_diag_right(&w), S0, SIGMA - 1.0)
}

/// Normal frequencies `omega_k(I(phi))` along the embedding, as a field over the normal sites.
pub fn normal_frequencies(model: &Model, iso: &IsotropicEmbedding, grid: &Grid) -> SequenceField {
    let emb = iso.embedding();
    let ge = GridEmbedding::new(&emb, grid);
    let (d, n, np) = (model.d(), model.n(), grid.npts());
    let mut vals = vec![ZERO; n * np];
    for p in 0..np {
        let (_, y, z) = ge.point(p, d, n);
        let acts: Vec<f64> = (0..d).map(|a| model.xi[a] + y[a]).chain(z.iter().map(|w| w.norm_sqr())).collect();
        let om = model.omegas(&acts);
        for j in 0..n {
            vals[j * np + p] = C64::new(om[d + j], 0.0);
        }
    }
    grid.field_from_grid(vals, model.ix.s_perp.clone(), SiteKind::NormalComplex).real_part()
}

/// `omega . d_phi + J2 K02` with the remainder of the model decomposition.
pub fn assemble_frak_l(
    model: &Model,
    iso: &IsotropicEmbedding,
    taylor: &TaylorCoefficients,
    omega: &[f64],
    grid: &Grid,
) -> Result<(LinHamOperator, OperatorMap, f64)> {
    let z = j2_times(&taylor.k02);
    let defect = hamiltonian_defect(&z);
    if defect > TOL_STRUCT {
        return Err(KamError::StructureViolation { what: "J2 K02".into(), residual: defect });
    }
    let eps = model.eps();
    let sp = model.ix.s_perp.clone();
    let n = sp.len();
    let om = normal_frequencies(model, iso, grid);
    let mut diag = OperatorMap::square(grid.lattice.clone(), sp.clone());
    for md in 0..grid.lattice.len() {
        for j in 0..n {
            let v = om.get(md, j);
            if v != ZERO {
                diag.block_mut(md)[j * n + j] = v;
            }
        }
    }
    let b = diag.add(&taylor.q1.scale(C64::new(eps, 0.0)));
    let c = taylor.q2.scale(C64::new(eps, 0.0));
    let model_part = j_left(&doubled_from_blocks(&sp, &b, &c, &c.conj_op(), &b.conj_op()));
    let r0 = z.sub(&model_part);
    let r0_norm = smoothing_norm(&r0);
    Ok((LinHamOperator::from_total(omega, &z), r0, r0_norm))
}

/// First transform: removes the `w`/`wbar` coupling at leading order.
pub fn transform_phi1(z: &OperatorMap, q2: &OperatorMap, eps: f64, omega: &[f64], grid: &Grid) -> Result<(OperatorMap, SymplecticTransform, usize)> {
    let t = SymplecticTransform { kind: TransformKind::ExpOfField, generator: phi1_generator(q2, eps), phases: None };
    let (z1, order) = t.conjugate(z, omega, grid)?;
    Ok((z1, t, order))
}

/// Second transform: removes the x-dependence of the diagonal part at leading order.
pub fn transform_phi2(z1: &OperatorMap, q1: &OperatorMap, eps: f64, omega: &[f64], grid: &Grid) -> Result<(OperatorMap, SymplecticTransform, usize)> {
    let t = SymplecticTransform { kind: TransformKind::ExpOfField, generator: phi2_generator(q1, eps), phases: None };
    let (z2, order) = t.conjugate(z1, omega, grid)?;
    Ok((z2, t, order))
}

/// Gauge transform making the diagonal constant in `phi`. The phases solve
/// `omega . d_phi beta_k = d_k - [[d_k]]` where `i d_k` is the `w`-diagonal of `Z2`.
pub fn transform_phi3(z2: &OperatorMap, omega: &[f64], gamma: f64, tau: f64, grid: &Grid) -> Result<(OperatorMap, SymplecticTransform)> {
    let n = z2.rows / 2;
    let lat = z2.lattice.clone();
    let sites = z2.row_sites[..n].to_vec();
    let mut dk = SequenceField::zeros(lat.clone(), sites, SiteKind::NormalComplex);
    for md in z2.supported_modes() {
        let b = z2.block(md);
        for r in 0..n {
            dk.set(md, r, -I * b[r * 2 * n + r]);
        }
    }
    let mut dk = dk.real_part();
    for r in 0..n {
        dk.set(0, r, ZERO);
    }
    let beta = omega_dvphi_inverse(&dk, omega, tau, gamma)?;
    let mut x = z2.same_shape();
    for md in 0..lat.len() {
        for r in 0..n {
            let b = beta.get(md, r);
            if b != ZERO {
                let blk = x.block_mut(md);
                blk[r * 2 * n + r] = -I * b;
                blk[(n + r) * 2 * n + n + r] = I * b;
            }
        }
    }
    let t = SymplecticTransform { kind: TransformKind::GaugeDiag, generator: x, phases: Some(beta) };
    let (z3, _) = t.conjugate(z2, omega, grid)?;
    Ok((z3, t))
}

/// Seed decomposition from the mean normal frequencies and the mean of `q1`.
pub fn block_seed(model: &Model, iso: &IsotropicEmbedding, normal_freq: &SequenceField, q1: &OperatorMap) -> BlockSeed {
    let d = model.d();
    let n = model.n();
    let eps = model.eps();
    let sites = model.ix.s_perp.clone();
    let q1_mean = if q1.support[0] { q1.block(0)[0].re } else { 0.0 };
    let emb = iso.embedding();
    let mean_y: f64 = emb.y.mean().iter().map(|v| v.re).sum();
    let mean_z2: f64 = (0..n).map(|j| (0..emb.z.lattice.len()).map(|m| emb.z.get(m, j).norm_sqr()).sum::<f64>()).sum();
    let c_eps = 4.0 * (mean_y + mean_z2) + eps * q1_mean;
    let acts0: Vec<f64> = model.xi.iter().cloned().chain(std::iter::repeat_n(0.0, n)).collect();
    let om0 = model.omegas(&acts0);
    let omega_unperturbed: Vec<f64> = (0..n).map(|j| om0[d + j]).collect();
    let seed: Vec<f64> = (0..n).map(|j| normal_freq.get(0, j).re + eps * q1_mean).collect();
    let r = (0..n).map(|j| sites[j] as f64 * (seed[j] - omega_unperturbed[j] - c_eps)).collect();
    BlockSeed { sites, seed, omega_unperturbed, c_eps, r }
}

/// Number of grid points sampled for pointwise symplecticity checks.
pub const SYMPLECTIC_SAMPLES: usize = 64;

/// Assembles the linearized operator along an isotropic embedding and applies the three transforms.
pub fn linearize(
    model: &Model,
    iso: &IsotropicEmbedding,
    taylor: &TaylorCoefficients,
    omega: &[f64],
    gamma: f64,
    tau: f64,
    grid: &Grid,
) -> Result<Linearization> {
    let eps = model.eps();
    let (frak_l, _r0, r0_norm) = assemble_frak_l(model, iso, taylor, omega, grid)?;
    let z0 = frak_l.total();
    let (z1, t1, o1) = transform_phi1(&z0, &taylor.q2, eps, omega, grid)?;
    let (z2, t2, o2) = transform_phi2(&z1, &taylor.q1, eps, omega, grid)?;
    let (z3, t3) = transform_phi3(&z2, omega, gamma, tau, grid)?;
    let mut structure = Vec::new();
    for (what, z) in [("L", &z0), ("L1", &z1), ("L2", &z2), ("L3", &z3)] {
        let r = hamiltonian_defect(z);
        if r > TOL_STRUCT {
            return Err(KamError::StructureViolation { what: what.into(), residual: r });
        }
        structure.push(r);
    }
    let symplectic: Vec<f64> = [&t1, &t2, &t3].iter().map(|t| t.symplectic_residual(grid, SYMPLECTIC_SAMPLES)).collect();
    let l0 = LinHamOperator::from_total(omega, &z3);
    let nf = normal_frequencies(model, iso, grid);
    let seed = block_seed(model, iso, &nf, &taylor.q1);
    let report = LinearizationReport {
        r0_norm,
        remainder_norm: smoothing_norm(&l0.r_part),
        offdiag_before: offdiag_norm(&z0),
        offdiag_after_phi1: offdiag_norm(&z1),
        xdep_after_phi2: xdep_norm(&z2),
        structure_residuals: structure,
        symplectic_residuals: symplectic,
        exp_orders: vec![o1, o2],
    };
    Ok(Linearization { frak_l, l0, stages: vec![z0, z1, z2, z3], transforms: vec![t1, t2, t3], seed, report })
}

/// Relative residual of `Phi (omega.d_phi + next) Phi^{-1}` against `prev`.
pub fn conjugacy_audit(prev: &OperatorMap, next: &OperatorMap, t: &SymplecticTransform, omega: &[f64], grid: &Grid) -> Result<f64> {
    let back = t.conjugate_back(next, omega, grid)?;
    Ok(back.sub(prev).wiener_fro() / prev.wiener_fro().max(f64::MIN_POSITIVE))
}
