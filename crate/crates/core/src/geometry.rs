//! Isotropic correction of an approximate torus, the symplectic chart near it
//! and the Taylor coefficients of the Hamiltonian in chart coordinates.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::error::{KamError, Result};
use crate::hamiltonian::{EvalOpts, GridEmbedding, Model, ResidualTriple, TorusEmbedding};
use crate::lattice::{omega_dvphi_inverse, AngleLattice, Discretization, Grid, OperatorMap, SequenceField, SiteKind};
use crate::linalg::{CMat, I, ONE, ZERO};
use crate::tolerances::{COND_CAP_CHART, TOL_ISO, TOL_MEAN_REL};

/// An embedding whose `y` component has been corrected to make it isotropic.
#[derive(Debug, Clone)]
pub struct IsotropicEmbedding {
    pub base: TorusEmbedding,
    pub y_iso: SequenceField,
    /// `A_kj` on the doubled lattice, stored at `k * d + j`.
    pub a_coeffs: Vec<SequenceField>,
    /// Co-exact part `r` of the pullback one-form, on the doubled lattice.
    pub rho: SequenceField,
    pub closedness_residual: f64,
    pub identity_residual: f64,
    pub identity_tol: f64,
    /// Max deviation between `A` obtained from the transport equation and the direct one.
    pub transport_discrepancy: Option<f64>,
}

impl IsotropicEmbedding {
    pub fn embedding(&self) -> TorusEmbedding {
        TorusEmbedding { theta: self.base.theta.clone(), y: self.y_iso.clone(), z: self.base.z.clone() }
    }
}

/// Pullback `a = -(d theta)^t y + i (d zbar)^t z` of the Liouville form, computed
/// exactly on the doubled lattice.
pub fn pullback_one_form(iota: &TorusEmbedding, ext: &Arc<AngleLattice>, g: &Grid) -> SequenceField {
    let d = iota.theta.ncomp();
    let n = iota.z.ncomp();
    let np = g.npts();
    let th = iota.theta.relattice(ext.clone());
    let y = iota.y.relattice(ext.clone());
    let z = iota.z.relattice(ext.clone());
    let zb = z.conj_field();
    let yg = g.field_to_grid(&y);
    let zg = g.field_to_grid(&z);
    let mut a = vec![ZERO; d * np];
    for k in 0..d {
        let dth = g.field_to_grid(&th.dphi(k));
        let dzb = g.field_to_grid(&zb.dphi(k));
        let ak = &mut a[k * np..(k + 1) * np];
        for p in 0..np {
            let mut v = -yg[k * np + p];
            for j in 0..d {
                v -= dth[j * np + p] * yg[j * np + p];
            }
            for j in 0..n {
                v += I * dzb[j * np + p] * zg[j * np + p];
            }
            ak[p] = v;
        }
    }
    g.field_from_grid(a, iota.theta.sites.clone(), SiteKind::TangentialReal)
}

/// `A_kj = d_k a_j - d_j a_k`, stored at `k * d + j`.
pub fn exterior_derivative(a: &SequenceField) -> Vec<SequenceField> {
    let d = a.ncomp();
    let da: Vec<SequenceField> = (0..d).map(|k| a.dphi(k)).collect();
    let mut out = Vec::with_capacity(d * d);
    for k in 0..d {
        for j in 0..d {
            out.push(da[k].component(j).sub(&da[j].component(k)));
        }
    }
    out
}

/// Co-exact part `r_k = -Delta^{-1} sum_j d_j A_kj`.
pub fn coexact_part(a2: &[SequenceField], d: usize, sites: Vec<i64>) -> SequenceField {
    let lat = a2[0].lattice.clone();
    let mut r = SequenceField::zeros(lat.clone(), sites, SiteKind::TangentialReal);
    for m in 1..lat.len() {
        let l = lat.mode(m);
        let l2: f64 = l.iter().map(|&x| (x as f64) * (x as f64)).sum();
        for k in 0..d {
            let mut acc = ZERO;
            for j in 0..d {
                acc += C64::new(0.0, l[j] as f64) * a2[k * d + j].get(m, 0);
            }
            r.set(m, k, acc / l2);
        }
    }
    r
}

/// Max coefficient of the two-form of `iota` restricted to the angle lattice.
pub fn isotropy_defect(iota: &TorusEmbedding, disc: &Discretization) -> f64 {
    let a = pullback_one_form(iota, &disc.ext, &disc.ext_grid);
    let a2 = exterior_derivative(&a);
    let lat = &disc.ext;
    let mut worst = 0.0f64;
    for f in &a2 {
        for m in 0..lat.len() {
            if disc.lattice().index_of(lat.mode(m)).is_some() {
                worst = worst.max(f.get(m, 0).norm());
            }
        }
    }
    worst
}

/// `Lambda[u, v] = u_theta . v_y - u_y . v_theta + i u_z . v_zbar - i u_zbar . v_z` summed on the grid.
fn transport_source(iota: &TorusEmbedding, e: &ResidualTriple, disc: &Discretization) -> Vec<SequenceField> {
    let ext = &disc.ext;
    let g = &disc.ext_grid;
    let d = iota.theta.ncomp();
    let n = iota.z.ncomp();
    let np = g.npts();
    let parts = |t: &SequenceField, y: &SequenceField, z: &SequenceField, k: usize, with_phi: bool| {
        let t = t.relattice(ext.clone());
        let y = y.relattice(ext.clone());
        let z = z.relattice(ext.clone());
        let zb = z.conj_field();
        let mut tg = g.field_to_grid(&t.dphi(k));
        if with_phi {
            for p in 0..np {
                tg[k * np + p] += ONE;
            }
        }
        (tg, g.field_to_grid(&y.dphi(k)), g.field_to_grid(&z.dphi(k)), g.field_to_grid(&zb.dphi(k)))
    };
    let di: Vec<_> = (0..d).map(|k| parts(&iota.theta, &iota.y, &iota.z, k, true)).collect();
    let de: Vec<_> = (0..d).map(|k| parts(&e.e_theta, &e.e_y, &e.e_z, k, false)).collect();
    let lam = |u: &(Vec<C64>, Vec<C64>, Vec<C64>, Vec<C64>), v: &(Vec<C64>, Vec<C64>, Vec<C64>, Vec<C64>)| {
        let mut out = vec![ZERO; np];
        for p in 0..np {
            let mut s = ZERO;
            for a in 0..d {
                s += u.0[a * np + p] * v.1[a * np + p] - u.1[a * np + p] * v.0[a * np + p];
            }
            for j in 0..n {
                s += I * (u.2[j * np + p] * v.3[j * np + p] - u.3[j * np + p] * v.2[j * np + p]);
            }
            out[p] = s;
        }
        out
    };
    let mut out = Vec::with_capacity(d * d);
    for k in 0..d {
        for j in 0..d {
            let s1 = lam(&de[k], &di[j]);
            let s2 = lam(&di[k], &de[j]);
            let s: Vec<C64> = s1.iter().zip(&s2).map(|(a, b)| a + b).collect();
            out.push(g.field_from_grid(s, vec![0], SiteKind::TangentialReal));
        }
    }
    out
}

/// Hodge correction `y_iso = y + (d theta)^{-t} r`.
pub fn isotropize(
    iota: &TorusEmbedding,
    e: Option<&ResidualTriple>,
    omega: &[f64],
    gamma: f64,
    tau: f64,
    disc: &Discretization,
) -> Result<IsotropicEmbedding> {
    let d = iota.theta.ncomp();
    let ext = disc.ext.clone();
    let g = &disc.ext_grid;
    let np = g.npts();
    let a = pullback_one_form(iota, &ext, g);
    let a2 = exterior_derivative(&a);
    let r = coexact_part(&a2, d, iota.theta.sites.clone());

    // closedness of a - r
    let closed = exterior_derivative(&a.sub(&r)).iter().fold(0.0f64, |m, f| m.max(f.max_abs()));

    // delta = (d theta)^{-t} r on the doubled grid, projected to the angle lattice
    let th = iota.theta.relattice(ext.clone());
    let dth: Vec<Vec<C64>> = (0..d).map(|k| g.field_to_grid(&th.dphi(k))).collect();
    let rg = g.field_to_grid(&r);
    let mut delta = vec![ZERO; d * np];
    let mut m = DMatrix::<f64>::zeros(d, d);
    for p in 0..np {
        for j in 0..d {
            for k in 0..d {
                m[(j, k)] = if j == k { 1.0 } else { 0.0 } + dth[k][j * np + p].re;
            }
        }
        let inv = m.clone().try_inverse().ok_or(KamError::ChartSingular { cond: f64::INFINITY })?;
        for a_ in 0..d {
            let mut s = ZERO;
            for b in 0..d {
                s += inv[(b, a_)] * rg[b * np + p];
            }
            delta[a_ * np + p] = s;
        }
    }
    let delta = g
        .field_from_grid(delta, iota.theta.sites.clone(), SiteKind::TangentialReal)
        .relattice(disc.lattice().clone())
        .real_part();
    let y_iso = iota.y.add(&delta);

    let transport_discrepancy = match e {
        Some(e) => {
            let src = transport_source(iota, e, disc);
            let mut worst = 0.0f64;
            for (idx, s) in src.iter().enumerate() {
                let mean = s.get(0, 0).norm();
                let tol = TOL_MEAN_REL * s.norm_l2().max(1e-300) * 10.0;
                if mean > tol && mean > 1e-300 {
                    return Err(KamError::NonzeroMean { mean, tol });
                }
                let mut s0 = s.clone();
                s0.set(0, 0, ZERO);
                let at = omega_dvphi_inverse(&s0, omega, tau, gamma)?;
                worst = worst.max(at.sub(&a2[idx]).max_abs());
            }
            Some(worst)
        }
        None => None,
    };

    let out_emb = TorusEmbedding { theta: iota.theta.clone(), y: y_iso.clone(), z: iota.z.clone() };
    let identity_residual = isotropy_defect(&out_emb, disc);
    let identity_tol = TOL_ISO * (1.0 + iota.norm(1.0, 0.0));
    Ok(IsotropicEmbedding {
        base: iota.clone(),
        y_iso,
        a_coeffs: a2,
        rho: r,
        closedness_residual: closed,
        identity_residual,
        identity_tol,
        transport_discrepancy,
    })
}

/// Matrix of the symplectic form on `(theta, y, z, zbar)`.
pub fn symplectic_form(d: usize, n: usize) -> CMat {
    let m = 2 * d + 2 * n;
    let mut o = CMat::zeros(m, m);
    for a in 0..d {
        *o.at_mut(a, d + a) = ONE;
        *o.at_mut(d + a, a) = -ONE;
    }
    for j in 0..n {
        *o.at_mut(2 * d + j, 2 * d + n + j) = I;
        *o.at_mut(2 * d + n + j, 2 * d + j) = -I;
    }
    o
}

/// Differential of the chart `Gamma(psi, upsilon, w)` at `(psi, 0, 0)` sampled on the product grid.
#[derive(Debug, Clone)]
pub struct Chart {
    pub d: usize,
    pub n: usize,
    pub npts: usize,
    /// `d theta_j / d phi_k` at `p * d * d + j * d + k`.
    pub dtheta: Vec<f64>,
    pub dtheta_inv: Vec<f64>,
    pub dy: Vec<f64>,
    /// `d z_j / d phi_k` at `p * n * d + j * d + k`.
    pub dz: Vec<C64>,
    pub dzb: Vec<C64>,
    /// `Y_w = i (d theta)^{-t} (d zbar)^t` at `p * d * n + a * n + j`.
    pub yw: Vec<C64>,
    pub max_cond: f64,
}

impl Chart {
    pub fn dim(&self) -> usize {
        2 * self.d + 2 * self.n
    }

    #[inline]
    fn b(&self, p: usize, a: usize, c: usize) -> f64 {
        // B = (d theta)^{-t}
        self.dtheta_inv[p * self.d * self.d + c * self.d + a]
    }

    /// `dGamma` at grid point `p`; rows `(theta, y, z, zbar)`, columns `(psi, upsilon, w, wbar)`.
    pub fn dgamma_at(&self, p: usize) -> CMat {
        let (d, n) = (self.d, self.n);
        let mut m = CMat::zeros(self.dim(), self.dim());
        for j in 0..d {
            for k in 0..d {
                *m.at_mut(j, k) = C64::new(self.dtheta[p * d * d + j * d + k], 0.0);
                *m.at_mut(d + j, k) = C64::new(self.dy[p * d * d + j * d + k], 0.0);
                *m.at_mut(d + j, d + k) = C64::new(self.b(p, j, k), 0.0);
            }
            for q in 0..n {
                let y = self.yw[p * d * n + j * n + q];
                *m.at_mut(d + j, 2 * d + q) = y;
                *m.at_mut(d + j, 2 * d + n + q) = y.conj();
            }
        }
        for q in 0..n {
            for k in 0..d {
                *m.at_mut(2 * d + q, k) = self.dz[p * n * d + q * d + k];
                *m.at_mut(2 * d + n + q, k) = self.dzb[p * n * d + q * d + k];
            }
            *m.at_mut(2 * d + q, 2 * d + q) = ONE;
            *m.at_mut(2 * d + n + q, 2 * d + n + q) = ONE;
        }
        m
    }

    /// Explicit inverse of `dGamma` at grid point `p` applied to `v`.
    pub fn apply_inv_at(&self, p: usize, v: &[C64]) -> Vec<C64> {
        let (d, n) = (self.d, self.n);
        let dd = d * d;
        let mut out = vec![ZERO; self.dim()];
        for j in 0..d {
            let mut s = ZERO;
            for k in 0..d {
                s += self.dtheta_inv[p * dd + j * d + k] * v[k];
            }
            out[j] = s;
        }
        for q in 0..n {
            let mut s = v[2 * d + q];
            let mut sb = v[2 * d + n + q];
            for k in 0..d {
                s -= self.dz[p * n * d + q * d + k] * out[k];
                sb -= self.dzb[p * n * d + q * d + k] * out[k];
            }
            out[2 * d + q] = s;
            out[2 * d + n + q] = sb;
        }
        let mut rest = vec![ZERO; d];
        for j in 0..d {
            let mut s = v[d + j];
            for k in 0..d {
                s -= self.dy[p * dd + j * d + k] * out[k];
            }
            for q in 0..n {
                let y = self.yw[p * d * n + j * n + q];
                s -= y * out[2 * d + q] + y.conj() * out[2 * d + n + q];
            }
            rest[j] = s;
        }
        for a in 0..d {
            // (d theta)^t rest
            let mut s = ZERO;
            for j in 0..d {
                s += self.dtheta[p * dd + j * d + a] * rest[j];
            }
            out[d + a] = s;
        }
        out
    }

    pub fn dgamma_inv_at(&self, p: usize) -> CMat {
        let m = self.dim();
        let mut out = CMat::zeros(m, m);
        let mut e = vec![ZERO; m];
        for c in 0..m {
            e.iter_mut().for_each(|v| *v = ZERO);
            e[c] = ONE;
            let col = self.apply_inv_at(p, &e);
            for r in 0..m {
                *out.at_mut(r, c) = col[r];
            }
        }
        out
    }

    /// Pointwise `dGamma` (or its inverse) applied to a field with `2d + 2n` components.
    pub fn apply(&self, grid: &Grid, v: &SequenceField, inverse: bool, sites: Vec<i64>) -> SequenceField {
        let m = self.dim();
        assert_eq!(v.ncomp(), m);
        let np = grid.npts();
        let vg = grid.field_to_grid(v);
        let mut out = vec![ZERO; m * np];
        let mut buf = vec![ZERO; m];
        for p in 0..np {
            for c in 0..m {
                buf[c] = vg[c * np + p];
            }
            let r = if inverse { self.apply_inv_at(p, &buf) } else { self.dgamma_at(p).matvec(&buf) };
            for c in 0..m {
                out[c * np + p] = r[c];
            }
        }
        grid.field_from_grid(out, sites, v.kind)
    }

    /// `dGamma` as an operator on the angle lattice.
    pub fn to_operator(&self, grid: &Grid, sites: Vec<i64>, inverse: bool) -> OperatorMap {
        let m = self.dim();
        let np = grid.npts();
        let mut vals = vec![ZERO; m * m * np];
        for p in 0..np {
            let mat = if inverse { self.dgamma_inv_at(p) } else { self.dgamma_at(p) };
            for (i, v) in mat.data.iter().enumerate() {
                vals[i * np + p] = *v;
            }
        }
        OperatorMap::from_grid(grid, vals, sites.clone(), sites)
    }

    /// Max coefficient of `Pi (dGamma^t Omega dGamma) - Omega` on the angle lattice.
    pub fn symplectic_residual(&self, grid: &Grid) -> f64 {
        let m = self.dim();
        let np = grid.npts();
        let om = symplectic_form(self.d, self.n);
        let mut vals = vec![ZERO; m * m * np];
        for p in 0..np {
            let g = self.dgamma_at(p);
            let pb = g.transpose().matmul(&om).matmul(&g);
            for (i, v) in pb.data.iter().enumerate() {
                vals[i * np + p] = *v;
            }
        }
        let coeffs = grid.from_grid(vals, m * m);
        let mut worst = 0.0f64;
        for md in 0..grid.lattice.len() {
            for i in 0..m * m {
                let target = if md == 0 { om.data[i] } else { ZERO };
                worst = worst.max((coeffs[md * m * m + i] - target).norm());
            }
        }
        worst
    }
}

/// Builds the chart of an isotropic embedding on the product grid.
pub fn gamma_chart(iso: &IsotropicEmbedding, grid: &Grid) -> Result<Chart> {
    let emb = iso.embedding();
    let d = emb.theta.ncomp();
    let n = emb.z.ncomp();
    let np = grid.npts();
    let zb = emb.z.conj_field();
    let dth: Vec<Vec<C64>> = (0..d).map(|k| grid.field_to_grid(&emb.theta.dphi(k))).collect();
    let dyv: Vec<Vec<C64>> = (0..d).map(|k| grid.field_to_grid(&emb.y.dphi(k))).collect();
    let dzv: Vec<Vec<C64>> = (0..d).map(|k| grid.field_to_grid(&emb.z.dphi(k))).collect();
    let dzbv: Vec<Vec<C64>> = (0..d).map(|k| grid.field_to_grid(&zb.dphi(k))).collect();
    let mut ch = Chart {
        d,
        n,
        npts: np,
        dtheta: vec![0.0; np * d * d],
        dtheta_inv: vec![0.0; np * d * d],
        dy: vec![0.0; np * d * d],
        dz: vec![ZERO; np * n * d],
        dzb: vec![ZERO; np * n * d],
        yw: vec![ZERO; np * d * n],
        max_cond: 1.0,
    };
    let mut m = DMatrix::<f64>::zeros(d, d);
    let mut big = DMatrix::<f64>::zeros(d, d);
    for p in 0..np {
        for j in 0..d {
            for k in 0..d {
                let v = dth[k][j * np + p].re;
                big[(j, k)] = v;
                m[(j, k)] = v + if j == k { 1.0 } else { 0.0 };
                ch.dtheta[p * d * d + j * d + k] = m[(j, k)];
                ch.dy[p * d * d + j * d + k] = dyv[k][j * np + p].re;
            }
        }
        for q in 0..n {
            for k in 0..d {
                ch.dz[p * n * d + q * d + k] = dzv[k][q * np + p];
                ch.dzb[p * n * d + q * d + k] = dzbv[k][q * np + p];
            }
        }
        let nrm = big.singular_values().max();
        let sv = m.singular_values();
        let cond = sv.max() / sv.min();
        if nrm >= 1.0 || !(cond <= COND_CAP_CHART) {
            return Err(KamError::ChartSingular { cond });
        }
        ch.max_cond = ch.max_cond.max(cond);
        let inv = m.clone().try_inverse().ok_or(KamError::ChartSingular { cond: f64::INFINITY })?;
        for j in 0..d {
            for k in 0..d {
                ch.dtheta_inv[p * d * d + j * d + k] = inv[(j, k)];
            }
        }
        for a in 0..d {
            for q in 0..n {
                let mut s = ZERO;
                for b in 0..d {
                    s += inv[(b, a)] * ch.dzb[p * n * d + q * d + b];
                }
                ch.yw[p * d * n + a * n + q] = I * s;
            }
        }
    }
    Ok(ch)
}

/// Second-order Taylor data of `K = H o Gamma` at `(psi, 0, 0)`.
#[derive(Debug, Clone)]
pub struct TaylorCoefficients {
    pub k00: SequenceField,
    pub k10: SequenceField,
    /// `(d_w K, d_wbar K)`.
    pub k01: SequenceField,
    pub k20: OperatorMap,
    pub k11: OperatorMap,
    pub k02: OperatorMap,
    /// Raw perturbation blocks on the normal sites (no `eps`), for the linearization.
    pub q1: OperatorMap,
    pub q2: OperatorMap,
    /// `grad_psi K` at `(psi, 0, 0)`, zero on exact isotropic solutions.
    pub grad_psi: SequenceField,
}

struct PointTaylor {
    k00: f64,
    k10: Vec<C64>,
    k01: Vec<C64>,
    k20: CMat,
    k11: CMat,
    k02: CMat,
    q1: CMat,
    q2: CMat,
    gpsi: Vec<C64>,
}

/// Taylor coefficients through the chain rule with the explicit chart blocks.
pub fn taylor_k(model: &Model, iso: &IsotropicEmbedding, chart: &Chart, zeta: &[f64], grid: &Grid) -> Result<TaylorCoefficients> {
    let emb = iso.embedding();
    let d = model.d();
    let n = model.n();
    let n2 = 2 * n;
    let np = grid.npts();
    let ge = GridEmbedding::new(&emb, grid);
    let thg = grid.field_to_grid(&emb.theta);
    let pts: Vec<PointTaylor> = (0..np)
        .into_par_iter()
        .map(|p| -> Result<PointTaylor> {
            let (th, y, z) = ge.point(p, d, n);
            let ev = model.eval_point(&th, &y, &z, EvalOpts { hessian: true, normal_blocks: true })?;
            let h = ev.hess.as_ref().expect("requested");
            // B and [Y]
            let b = CMat::from_fn(d, d, |a, c| C64::new(chart.b(p, a, c), 0.0));
            let yy = CMat::from_fn(d, n2, |a, q| {
                let v = chart.yw[p * d * n + a * n + (q % n)];
                if q < n {
                    v
                } else {
                    v.conj()
                }
            });
            let hyy = CMat::from_fn(d, d, |a, c| h.at(d + a, d + c));
            let hyz = CMat::from_fn(d, n2, |a, q| h.at(d + a, 2 * d + q));
            let hzy = CMat::from_fn(n2, d, |q, a| h.at(2 * d + q, d + a));
            let hzz = CMat::from_fn(n2, n2, |q, r| h.at(2 * d + q, 2 * d + r));
            let bt = b.transpose();
            let yt = yy.transpose();
            let k20 = bt.matmul(&hyy).matmul(&b);
            let hyy_y = hyy.matmul(&yy);
            let k11 = bt.matmul(&hyy_y.add(&hyz));
            let k02 = yt.matmul(&hyy_y).add(&yt.matmul(&hyz)).add(&hzy.matmul(&yy)).add(&hzz);
            let gy: Vec<C64> = ev.grad_y.iter().map(|v| C64::new(*v, 0.0)).collect();
            let k10 = bt.matvec(&gy);
            let mut gz: Vec<C64> = ev.grad_zbar.iter().map(|v| v.conj()).collect();
            gz.extend(ev.grad_zbar.iter().cloned());
            let yg = yt.matvec(&gy);
            let k01: Vec<C64> = gz.iter().zip(&yg).map(|(a, b)| a + b).collect();
            // grad_psi = (dtheta)^t (grad_theta + zeta) + (dy)^t grad_y + (dz)^t d_z H + (dzbar)^t d_zbar H
            let mut gpsi = vec![ZERO; d];
            for k in 0..d {
                let mut s = ZERO;
                for j in 0..d {
                    s += chart.dtheta[p * d * d + j * d + k] * (ev.grad_theta[j] + zeta[j]);
                    s += chart.dy[p * d * d + j * d + k] * ev.grad_y[j];
                }
                for q in 0..n {
                    s += chart.dz[p * n * d + q * d + k] * gz[q] + chart.dzb[p * n * d + q * d + k] * gz[n + q];
                }
                gpsi[k] = s;
            }
            let k00 = ev.value + (0..d).map(|a| zeta[a] * thg[a * np + p].re).sum::<f64>();
            Ok(PointTaylor {
                k00,
                k10,
                k01,
                k20,
                k11,
                k02,
                q1: ev.q1.expect("requested"),
                q2: ev.q2.expect("requested"),
                gpsi,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let planar_mat = |f: &dyn Fn(&PointTaylor) -> &CMat, rows: usize, cols: usize| -> Vec<C64> {
        let mut v = vec![ZERO; rows * cols * np];
        for (p, pt) in pts.iter().enumerate() {
            for (i, x) in f(pt).data.iter().enumerate() {
                v[i * np + p] = *x;
            }
        }
        v
    };
    let planar_vec = |f: &dyn Fn(&PointTaylor) -> &[C64], m: usize| -> Vec<C64> {
        let mut v = vec![ZERO; m * np];
        for (p, pt) in pts.iter().enumerate() {
            for (i, x) in f(pt).iter().enumerate() {
                v[i * np + p] = *x;
            }
        }
        v
    };
    let s = model.ix.s.clone();
    let sp = model.ix.s_perp.clone();
    let dbl = model.ix.doubled_sites();
    let k00v: Vec<C64> = pts.iter().map(|p| C64::new(p.k00, 0.0)).collect();
    let k00 = grid.field_from_grid(k00v, vec![0], SiteKind::TangentialReal).real_part();
    let k10 = grid.field_from_grid(planar_vec(&|p| &p.k10, d), s.clone(), SiteKind::TangentialReal).real_part();
    let k01 = grid.field_from_grid(planar_vec(&|p| &p.k01, n2), dbl.clone(), SiteKind::Doubled);
    let grad_psi = grid.field_from_grid(planar_vec(&|p| &p.gpsi, d), s.clone(), SiteKind::TangentialReal).real_part();
    let k20 = OperatorMap::from_grid(grid, planar_mat(&|p| &p.k20, d, d), s.clone(), s.clone());
    let k11 = OperatorMap::from_grid(grid, planar_mat(&|p| &p.k11, d, n2), s.clone(), dbl.clone());
    let k02 = OperatorMap::from_grid(grid, planar_mat(&|p| &p.k02, n2, n2), dbl.clone(), dbl);
    let q1 = OperatorMap::from_grid(grid, planar_mat(&|p| &p.q1, n, n), sp.clone(), sp.clone());
    let q2 = OperatorMap::from_grid(grid, planar_mat(&|p| &p.q2, n, n), sp.clone(), sp);
    Ok(TaylorCoefficients { k00, k10, k01, k20, k11, k02, q1, q2, grad_psi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{residual_f, FrequencyModel, Perturbation};
    use crate::lattice::IndexSets;
    use rand::{Rng, SeedableRng};

    fn setup(eps: f64) -> (Model, Discretization) {
        let ix = IndexSets::new(&[-1, 0, 1], 3, 2).unwrap();
        let m = Model::new(ix.clone(), vec![0.04, 0.05, 0.06], FrequencyModel::quartic(), Perturbation::reference(3, eps)).unwrap();
        (m, Discretization::new(ix))
    }

    fn random_embedding(ix: &IndexSets, amp: f64, seed: u64) -> TorusEmbedding {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut e = TorusEmbedding::zeros(ix);
        for f in [&mut e.theta, &mut e.y, &mut e.z] {
            for v in f.coeffs.iter_mut() {
                *v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * amp;
            }
        }
        e.theta = e.theta.real_part();
        e.y = e.y.real_part();
        for f in [&mut e.theta, &mut e.y, &mut e.z] {
            for c in 0..f.ncomp() {
                f.set(0, c, ZERO);
            }
        }
        e
    }

    #[test]
    fn trivial_embedding_is_isotropic_and_chart_is_identity() {
        let (m, disc) = setup(0.0);
        let iota = TorusEmbedding::zeros(&m.ix);
        let iso = isotropize(&iota, None, &m.omega0(), 0.01, 7.0, &disc).unwrap();
        assert!(iso.y_iso.max_abs() == 0.0 && iso.rho.max_abs() == 0.0);
        let ch = gamma_chart(&iso, &disc.grid).unwrap();
        let id = CMat::identity(ch.dim());
        for p in [0, 5, 17] {
            assert!(ch.dgamma_at(p).sub(&id).norm_max() < 1e-15);
        }
    }

    #[test]
    fn isotropize_random_embedding() {
        let (m, disc) = setup(0.01);
        let iota = random_embedding(&m.ix, 1e-4, 3);
        let f = residual_f(&m, &iota, &[0.0; 3], &m.omega0(), &disc.grid).unwrap();
        let iso = isotropize(&iota, Some(&f), &m.omega0(), 0.01, 7.0, &disc).unwrap();
        assert!(iso.closedness_residual < 1e-15, "{}", iso.closedness_residual);
        assert!(iso.identity_residual < iso.identity_tol, "{} vs {}", iso.identity_residual, iso.identity_tol);
        let ch = gamma_chart(&iso, &disc.grid).unwrap();
        for p in [0, 7, 100] {
            let prod = ch.dgamma_at(p).matmul(&ch.dgamma_inv_at(p));
            assert!(prod.sub(&CMat::identity(ch.dim())).norm_max() < 1e-12);
        }
        assert!(ch.symplectic_residual(&disc.grid) < 1e-9);
    }

    #[test]
    fn taylor_unperturbed_trivial() {
        let (m, disc) = setup(0.0);
        let iota = TorusEmbedding::zeros(&m.ix);
        let iso = isotropize(&iota, None, &m.omega0(), 0.01, 7.0, &disc).unwrap();
        let ch = gamma_chart(&iso, &disc.grid).unwrap();
        let k = taylor_k(&m, &iso, &ch, &[0.0; 3], &disc.grid).unwrap();
        let om = m.omega0();
        for a in 0..3 {
            assert!((k.k10.get(0, a).re - om[a]).abs() < 1e-12);
            for b in 0..3 {
                let want = if a == b { 2.0 } else { 4.0 };
                assert!((k.k20.block(0)[a * 3 + b].re - want).abs() < 1e-12);
            }
        }
        assert!(k.k11.max_abs() < 1e-14);
        let acts: Vec<f64> = m.xi.iter().cloned().chain(std::iter::repeat_n(0.0, m.n())).collect();
        let all = m.omegas(&acts);
        let n = m.n();
        let b = k.k02.get_block(0);
        for j in 0..n {
            assert!((b.at(n + j, j).re - all[3 + j]).abs() < 1e-12);
            assert!((b.at(j, n + j).re - all[3 + j]).abs() < 1e-12);
        }
        assert!(k.grad_psi.max_abs() < 1e-13);
    }

    #[test]
    fn transport_equation_matches_direct_two_form() {
        let (m, disc) = setup(0.0);
        let iota = random_embedding(&m.ix, 1e-5, 11);
        let om = m.omega0();
        let f = residual_f(&m, &iota, &[0.0; 3], &om, &disc.grid).unwrap();
        let iso = isotropize(&iota, Some(&f), &om, 1e-3, 7.0, &disc).unwrap();
        let amax = iso.a_coeffs.iter().fold(0.0f64, |x, a| x.max(a.max_abs()));
        assert!(iso.transport_discrepancy.unwrap() < 1e-5 * amax);
    }
}
