//! Quartic normal-form frequencies, the semilinear perturbation, pointwise
//! derivatives of `H_eps = H_nls + eps P` and the residual operator.

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{KamError, Result};
use crate::lattice::{Grid, IndexSets, SiteKind, SequenceField, SmoothProject};
use crate::linalg::{CMat, I, ZERO};
use crate::tolerances::{MAX_NEWTON, NEWTON_TOL, TOL_ALIAS};

pub const FOUR_PI2: f64 = 4.0 * PI * PI;

/// Optional higher-order frequency correction `r_k(I)/k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Correction {
    #[default]
    None,
    /// `r_k(I) = c * sum_j I_j`.
    LinearSum { c: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FrequencyModel {
    #[serde(default)]
    pub correction: Correction,
}

impl FrequencyModel {
    pub fn quartic() -> Self {
        FrequencyModel { correction: Correction::None }
    }

    /// `omega_k(I)` given `I_k` and `sum_j I_j`.
    #[inline]
    pub fn omega(&self, k: i64, i_k: f64, i_sum: f64) -> f64 {
        let base = FOUR_PI2 * (k * k) as f64 + 4.0 * i_sum - 2.0 * i_k;
        match self.correction {
            Correction::None => base,
            Correction::LinearSum { c } if k != 0 => base + c * i_sum / k as f64,
            Correction::LinearSum { .. } => base,
        }
    }

    /// `d omega_k / d I_j`.
    #[inline]
    pub fn domega(&self, k: i64, j: i64) -> f64 {
        let base = if k == j { 2.0 } else { 4.0 };
        match self.correction {
            Correction::LinearSum { c } if k != 0 => base + c / k as f64,
            _ => base,
        }
    }

    pub fn is_hamiltonian(&self) -> bool {
        matches!(self.correction, Correction::None)
    }
}

/// Tangential actions `xi` (over `S`) and normal actions (over `S_perp`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionVector {
    pub xi: Vec<f64>,
    pub i_normal: Vec<f64>,
}

impl ActionVector {
    pub fn tangential(xi: Vec<f64>, n: usize) -> Self {
        ActionVector { xi, i_normal: vec![0.0; n] }
    }
}

/// Frequencies at every site, tangential sites first.
pub fn frequencies(ix: &IndexSets, act: &ActionVector, model: &FrequencyModel) -> Vec<f64> {
    let sum: f64 = act.xi.iter().sum::<f64>() + act.i_normal.iter().sum::<f64>();
    let acts = act.xi.iter().chain(act.i_normal.iter());
    ix.all_sites().iter().zip(acts).map(|(&k, &ik)| model.omega(k, ik, sum)).collect()
}

/// `(d omega_n / d I_k)_{n,k in S}` (rows: frequency index).
pub fn tangential_jacobian(s: &[i64], model: &FrequencyModel) -> DMatrix<f64> {
    DMatrix::from_fn(s.len(), s.len(), |r, c| model.domega(s[r], s[c]))
}

/// Determinant of the tangential frequency Jacobian. The quartic map is affine
/// in the actions, so the value does not depend on `I`.
pub fn kolmogorov_det(s: &[i64], _act: &ActionVector, model: &FrequencyModel) -> f64 {
    tangential_jacobian(s, model).determinant()
}

/// Tangential frequency map `xi -> (omega_k(xi, 0))_{k in S}`.
pub fn tangential_frequencies(s: &[i64], xi: &[f64], model: &FrequencyModel) -> Vec<f64> {
    let sum: f64 = xi.iter().sum();
    s.iter().zip(xi).map(|(&k, &x)| model.omega(k, x, sum)).collect()
}

/// Newton inversion of the tangential frequency map.
pub fn xi_of_omega(omega: &[f64], s: &[i64], model: &FrequencyModel) -> Result<Vec<f64>> {
    if omega.len() != s.len() {
        return Err(KamError::Dimension(format!("omega has {} entries, S has {}", omega.len(), s.len())));
    }
    let jac = tangential_jacobian(s, model);
    let lu = jac.lu();
    let mut xi = vec![0.0; s.len()];
    let mut res = f64::INFINITY;
    for _ in 0..MAX_NEWTON {
        let f = tangential_frequencies(s, &xi, model);
        let r: Vec<f64> = f.iter().zip(omega).map(|(a, b)| a - b).collect();
        res = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if res <= NEWTON_TOL {
            break;
        }
        let step = lu
            .solve(&nalgebra::DVector::from_vec(r))
            .ok_or_else(|| KamError::OutOfRange("singular frequency Jacobian".into()))?;
        for (x, d) in xi.iter_mut().zip(step.iter()) {
            *x -= d;
        }
        if xi.iter().any(|v| !v.is_finite()) {
            return Err(KamError::OutOfRange("Newton iterate is not finite".into()));
        }
    }
    if res > NEWTON_TOL {
        let f = tangential_frequencies(s, &xi, model);
        res = f.iter().zip(omega).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if res > NEWTON_TOL {
            return Err(KamError::NoConvergence { iterations: MAX_NEWTON, residual: res });
        }
    }
    if let Some((k, v)) = s.iter().zip(&xi).find(|(_, v)| **v <= 0.0) {
        return Err(KamError::OutOfRange(format!("action xi_{k} = {v:e} is not positive")));
    }
    Ok(xi)
}

/// One term `coeff * h(x) * zeta1^pow1 * zeta2^pow2` of the density `p`, with
/// `h(x) = cos(2 pi harmonic x)` for `harmonic >= 0` and `sin(2 pi |harmonic| x)` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationTerm {
    pub coeff: f64,
    #[serde(default)]
    pub harmonic: i64,
    pub pow1: u32,
    pub pow2: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub terms: Vec<PerturbationTerm>,
    pub grid_size: usize,
    pub eps: f64,
}

impl Perturbation {
    pub fn default_grid(k_normal: i64) -> usize {
        4 * (k_normal as usize + 1)
    }

    /// `|zeta|^4 / 4 + cos(2 pi x) zeta1^2 / 2 + sin(4 pi x) zeta1 zeta2 / 4`.
    pub fn reference(k_normal: i64, eps: f64) -> Self {
        let t = |coeff, harmonic, pow1, pow2| PerturbationTerm { coeff, harmonic, pow1, pow2 };
        Perturbation {
            terms: vec![
                t(0.25, 0, 4, 0),
                t(0.5, 0, 2, 2),
                t(0.25, 0, 0, 4),
                t(0.5, 1, 2, 0),
                t(0.25, -2, 1, 1),
            ],
            grid_size: Self::default_grid(k_normal),
            eps,
        }
    }

    pub fn validate(&self, k_normal: i64) -> Result<()> {
        let min = Self::default_grid(k_normal);
        if self.grid_size < min {
            return Err(KamError::Validation(vec![format!(
                "perturbation grid_size = {} is below 4 (K_normal + 1) = {min}",
                self.grid_size
            )]));
        }
        if self.terms.iter().any(|t| !t.coeff.is_finite()) || !self.eps.is_finite() {
            return Err(KamError::Validation(vec!["perturbation coefficients must be finite".into()]));
        }
        Ok(())
    }

    fn harmonic_value(h: i64, x: f64) -> f64 {
        if h >= 0 {
            (2.0 * PI * h as f64 * x).cos()
        } else {
            (2.0 * PI * (-h) as f64 * x).sin()
        }
    }

    /// `p, p_1, p_2, p_11, p_12, p_22` at one collocation point.
    fn jet(&self, hx: &[f64], z1: f64, z2: f64) -> [f64; 6] {
        fn pw(x: f64, n: i64) -> f64 {
            if n < 0 {
                0.0
            } else {
                x.powi(n as i32)
            }
        }
        let mut out = [0.0; 6];
        for (t, &h) in self.terms.iter().zip(hx) {
            let c = t.coeff * h;
            let (a, b) = (t.pow1 as i64, t.pow2 as i64);
            let (af, bf) = (a as f64, b as f64);
            out[0] += c * pw(z1, a) * pw(z2, b);
            out[1] += c * af * pw(z1, a - 1) * pw(z2, b);
            out[2] += c * bf * pw(z1, a) * pw(z2, b - 1);
            out[3] += c * af * (af - 1.0) * pw(z1, a - 2) * pw(z2, b);
            out[4] += c * af * bf * pw(z1, a - 1) * pw(z2, b - 1);
            out[5] += c * bf * (bf - 1.0) * pw(z1, a) * pw(z2, b - 2);
        }
        out
    }
}

/// Derivatives of `H_eps` at one phase-space point.
#[derive(Debug, Clone)]
pub struct PointEval {
    pub value: f64,
    pub grad_theta: Vec<f64>,
    pub grad_y: Vec<f64>,
    /// `dH / d zbar_j`; `dH / d z_j` is its conjugate.
    pub grad_zbar: Vec<C64>,
    /// Hessian over `v = (theta, y, z, zbar)`, rows indexed by gradient component.
    pub hess: Option<CMat>,
    /// `q1^(k_n - k_m)` over normal sites (perturbation only, no `eps`).
    pub q1: Option<CMat>,
    /// `q2^(-k_m - k_n)` over normal sites.
    pub q2: Option<CMat>,
    pub alias_ratio: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOpts {
    pub hessian: bool,
    pub normal_blocks: bool,
}

/// Truncated model: index sets, base actions, frequency model and perturbation.
pub struct Model {
    pub ix: IndexSets,
    pub xi: Vec<f64>,
    pub freq: FrequencyModel,
    pub pert: Perturbation,
    sites: Vec<i64>,
    fft: Arc<dyn Fft<f64>>,
    harm: Vec<Vec<f64>>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("xi", &self.xi).field("eps", &self.pert.eps).finish()
    }
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model::new(self.ix.clone(), self.xi.clone(), self.freq.clone(), self.pert.clone()).expect("validated")
    }
}

impl Model {
    pub fn new(ix: IndexSets, xi: Vec<f64>, freq: FrequencyModel, pert: Perturbation) -> Result<Self> {
        pert.validate(ix.k_normal)?;
        if xi.len() != ix.d() {
            return Err(KamError::Dimension(format!("xi has {} entries, S has {}", xi.len(), ix.d())));
        }
        if let Some((k, v)) = ix.s.iter().zip(&xi).find(|(_, v)| **v <= 0.0) {
            return Err(KamError::OutOfRange(format!("action xi_{k} = {v:e} is not positive")));
        }
        let g = pert.grid_size;
        let fft = FftPlanner::new().plan_fft_forward(g);
        let harm = pert
            .terms
            .iter()
            .map(|t| (0..g).map(|i| Perturbation::harmonic_value(t.harmonic, i as f64 / g as f64)).collect())
            .collect();
        Ok(Model { sites: ix.all_sites(), ix, xi, freq, pert, fft, harm })
    }

    pub fn d(&self) -> usize {
        self.ix.d()
    }
    pub fn n(&self) -> usize {
        self.ix.n()
    }
    pub fn eps(&self) -> f64 {
        self.pert.eps
    }

    /// Same model with another perturbation strength.
    pub fn with_eps(&self, eps: f64) -> Model {
        let mut p = self.pert.clone();
        p.eps = eps;
        Model::new(self.ix.clone(), self.xi.clone(), self.freq.clone(), p).expect("validated")
    }

    /// Tangential frequencies of the unperturbed torus.
    pub fn omega0(&self) -> Vec<f64> {
        tangential_frequencies(&self.ix.s, &self.xi, &self.freq)
    }

    /// Frequencies at the given actions over all sites.
    pub fn omegas(&self, acts: &[f64]) -> Vec<f64> {
        let sum: f64 = acts.iter().sum();
        self.sites.iter().zip(acts).map(|(&k, &a)| self.freq.omega(k, a, sum)).collect()
    }

    /// `H_nls(I) = sum 4 pi^2 k^2 I_k + 2 (sum I)^2 - sum I_k^2` (quartic part only).
    pub fn h_nls(&self, acts: &[f64]) -> f64 {
        let sum: f64 = acts.iter().sum();
        let lin: f64 = self.sites.iter().zip(acts).map(|(&k, &a)| FOUR_PI2 * (k * k) as f64 * a).sum();
        lin + 2.0 * sum * sum - acts.iter().map(|a| a * a).sum::<f64>()
    }

    /// Complex amplitudes `w_k` over all sites.
    pub fn amplitudes(&self, theta: &[f64], y: &[f64], z: &[C64]) -> Result<(Vec<C64>, Vec<f64>)> {
        let d = self.d();
        let mut w = Vec::with_capacity(d + z.len());
        let mut acts = Vec::with_capacity(d + z.len());
        for a in 0..d {
            let ia = self.xi[a] + y[a];
            if !(ia > 0.0) {
                return Err(KamError::SqrtDomain { site: self.ix.s[a], value: ia });
            }
            w.push(C64::from_polar(ia.sqrt(), -theta[a]));
            acts.push(ia);
        }
        for zj in z {
            w.push(*zj);
            acts.push(zj.norm_sqr());
        }
        Ok((w, acts))
    }

    /// Discrete x-transform `c(m) = G^{-1} sum_g v_g e^{-2 pi i m g / G}` in place (unnormalized input).
    fn x_forward(&self, buf: &mut [C64]) {
        self.fft.process(buf);
        let s = 1.0 / buf.len() as f64;
        buf.iter_mut().for_each(|v| *v *= s);
    }

    #[inline]
    fn x_index(&self, m: i64) -> usize {
        m.rem_euclid(self.pert.grid_size as i64) as usize
    }

    /// Value, gradient and optionally Hessian of `H_eps` at `(theta, y, z)`.
    pub fn eval_point(&self, theta: &[f64], y: &[f64], z: &[C64], opts: EvalOpts) -> Result<PointEval> {
        let d = self.d();
        let n = self.n();
        let t = d + n;
        let (w, acts) = self.amplitudes(theta, y, z)?;
        let om = self.omegas(&acts);
        let eps = self.pert.eps;

        let mut grad_theta = vec![0.0; d];
        let mut grad_y: Vec<f64> = om[..d].to_vec();
        let mut grad_zbar: Vec<C64> = (0..n).map(|j| om[d + j] * z[j]).collect();
        let mut value = self.h_nls(&acts);
        let mut alias_ratio = 0.0;
        let nv = 2 * d + 2 * n;
        let mut hess = if opts.hessian { Some(CMat::zeros(nv, nv)) } else { None };
        let mut q1m = None;
        let mut q2m = None;

        let active = eps != 0.0 || opts.normal_blocks;
        if active && !self.pert.terms.is_empty() {
            let g = self.pert.grid_size;
            // u(x_g) = -sum_k w_k e^{-2 pi i k x_g}
            let mut u = vec![ZERO; g];
            for (r, &k) in self.sites.iter().enumerate() {
                u[self.x_index(k)] += w[r];
            }
            self.fft.process(&mut u);
            let mut f = vec![ZERO; g];
            let mut q1 = vec![ZERO; g];
            let mut q2 = vec![ZERO; g];
            let mut pval = 0.0;
            for gi in 0..g {
                let ug = -u[gi];
                let z1 = SQRT_2 * ug.re;
                let z2 = -SQRT_2 * ug.im;
                let hx: Vec<f64> = self.harm.iter().map(|h| h[gi]).collect();
                let j = self.pert.jet(&hx, z1, z2);
                pval += j[0];
                f[gi] = C64::new(j[1], -j[2]) / SQRT_2;
                q1[gi] = C64::new(0.5 * (j[3] + j[5]), 0.0);
                q2[gi] = C64::new(0.5 * (j[3] - j[5]), -j[4]);
            }
            pval /= g as f64;
            self.x_forward(&mut f);
            let tot: f64 = f.iter().map(|v| v.norm_sqr()).sum();
            if tot > 0.0 {
                let cut = g as i64 / 3;
                let hi: f64 = (0..g)
                    .filter(|&i| {
                        let m = if i <= g / 2 { i as i64 } else { i as i64 - g as i64 };
                        m.abs() > cut
                    })
                    .map(|i| f[i].norm_sqr())
                    .sum();
                alias_ratio = hi / tot;
            }
            // g_k = dP/d wbar_k = -f^(-k)
            let gk: Vec<C64> = self.sites.iter().map(|&k| -f[self.x_index(-k)]).collect();
            if opts.hessian || opts.normal_blocks {
                self.x_forward(&mut q1);
                self.x_forward(&mut q2);
            }
            if opts.normal_blocks {
                let sp = &self.ix.s_perp;
                q1m = Some(CMat::from_fn(n, n, |a, b| q1[self.x_index(sp[b] - sp[a])]));
                q2m = Some(CMat::from_fn(n, n, |a, b| q2[self.x_index(-sp[a] - sp[b])]));
            }
            if eps != 0.0 {
                value += eps * pval;
                for a in 0..d {
                    let wg = w[a].conj() * gk[a];
                    grad_theta[a] += eps * (-2.0 * wg.im);
                    grad_y[a] += eps * wg.re / acts[a];
                }
                for j in 0..n {
                    grad_zbar[j] += eps * gk[d + j];
                }
                if let Some(h) = hess.as_mut() {
                    // Wirtinger Hessian over W = (w, wbar) on all sites.
                    let sites = &self.sites;
                    let hw = |ra: usize, rb: usize| -> C64 {
                        let (ia, ca) = (ra % t, ra >= t);
                        let (ib, cb) = (rb % t, rb >= t);
                        let (ka, kb) = (sites[ia], sites[ib]);
                        match (ca, cb) {
                            (false, false) => q2[self.x_index(-ka - kb)].conj(),
                            (false, true) => q1[self.x_index(ka - kb)],
                            (true, false) => q1[self.x_index(kb - ka)],
                            (true, true) => q2[self.x_index(-ka - kb)],
                        }
                    };
                    // dW/dv as sparse columns.
                    let mut cols: Vec<Vec<(usize, C64)>> = Vec::with_capacity(nv);
                    for a in 0..d {
                        cols.push(vec![(a, -I * w[a]), (t + a, I * w[a].conj())]);
                    }
                    for a in 0..d {
                        let s = 0.5 / acts[a];
                        cols.push(vec![(a, w[a] * s), (t + a, w[a].conj() * s)]);
                    }
                    for j in 0..n {
                        cols.push(vec![(d + j, C64::new(1.0, 0.0))]);
                    }
                    for j in 0..n {
                        cols.push(vec![(t + d + j, C64::new(1.0, 0.0))]);
                    }
                    for p in 0..nv {
                        for q in 0..nv {
                            let mut acc = ZERO;
                            for &(ra, ca) in &cols[p] {
                                for &(rb, cb) in &cols[q] {
                                    acc += ca * cb * hw(ra, rb);
                                }
                            }
                            *h.at_mut(p, q) += eps * acc;
                        }
                    }
                    // second derivatives of the polar amplitudes
                    for a in 0..d {
                        let wb = w[a].conj();
                        let ia = acts[a];
                        let gw = gk[a];
                        let tt = 2.0 * (gw * (-wb)).re;
                        let ty = 2.0 * (gw * (I * wb / (2.0 * ia))).re;
                        let yy = 2.0 * (gw * (-wb / (4.0 * ia * ia))).re;
                        *h.at_mut(a, a) += eps * tt;
                        *h.at_mut(a, d + a) += eps * ty;
                        *h.at_mut(d + a, a) += eps * ty;
                        *h.at_mut(d + a, d + a) += eps * yy;
                    }
                }
            }
        }

        if let Some(h) = hess.as_mut() {
            let zb: Vec<C64> = z.iter().map(|v| v.conj()).collect();
            let (oz, ozb) = (2 * d, 2 * d + n);
            for a in 0..d {
                let ka = self.sites[a];
                for b in 0..d {
                    *h.at_mut(d + a, d + b) += self.freq.domega(ka, self.sites[b]);
                }
                for j in 0..n {
                    let dk = self.freq.domega(ka, self.sites[d + j]);
                    *h.at_mut(d + a, oz + j) += dk * zb[j];
                    *h.at_mut(d + a, ozb + j) += dk * z[j];
                }
            }
            for j in 0..n {
                let kj = self.sites[d + j];
                // rows dH/dz_j = omega_j zbar_j and dH/dzbar_j = omega_j z_j
                for b in 0..d {
                    let dk = self.freq.domega(kj, self.sites[b]);
                    *h.at_mut(oz + j, d + b) += dk * zb[j];
                    *h.at_mut(ozb + j, d + b) += dk * z[j];
                }
                for k in 0..n {
                    let dk = self.freq.domega(kj, self.sites[d + k]);
                    *h.at_mut(ozb + j, oz + k) += dk * zb[k] * z[j];
                    *h.at_mut(ozb + j, ozb + k) += dk * z[k] * z[j];
                    *h.at_mut(oz + j, oz + k) += dk * zb[k] * zb[j];
                    *h.at_mut(oz + j, ozb + k) += dk * z[k] * zb[j];
                }
                *h.at_mut(ozb + j, oz + j) += om[d + j];
                *h.at_mut(oz + j, ozb + j) += om[d + j];
            }
        }

        Ok(PointEval { value, grad_theta, grad_y, grad_zbar, hess, q1: q1m, q2: q2m, alias_ratio })
    }
}

/// Periodic parts of an embedding `phi -> (phi + Theta(phi), y(phi), z(phi))`.
#[derive(Debug, Clone)]
pub struct TorusEmbedding {
    pub theta: SequenceField,
    pub y: SequenceField,
    pub z: SequenceField,
}

impl TorusEmbedding {
    pub fn zeros(ix: &IndexSets) -> Self {
        let lat = ix.lattice.clone();
        TorusEmbedding {
            theta: SequenceField::zeros(lat.clone(), ix.s.clone(), SiteKind::TangentialReal),
            y: SequenceField::zeros(lat.clone(), ix.s.clone(), SiteKind::TangentialReal),
            z: SequenceField::zeros(lat, ix.s_perp.clone(), SiteKind::NormalComplex),
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        TorusEmbedding { theta: self.theta.add(&o.theta), y: self.y.add(&o.y), z: self.z.add(&o.z) }
    }

    pub fn sub(&self, o: &Self) -> Self {
        TorusEmbedding { theta: self.theta.sub(&o.theta), y: self.y.sub(&o.y), z: self.z.sub(&o.z) }
    }

    pub fn scale(&self, c: f64) -> Self {
        let c = C64::new(c, 0.0);
        TorusEmbedding { theta: self.theta.scale(c), y: self.y.scale(c), z: self.z.scale(c) }
    }

    pub fn smooth_project(&self, n: usize) -> Self {
        TorusEmbedding {
            theta: self.theta.smooth_project(n),
            y: self.y.smooth_project(n),
            z: self.z.smooth_project(n),
        }
    }

    /// `(||Theta||^2 + ||y||^2 + ||z||_{s,sigma}^2)^{1/2}`.
    pub fn norm(&self, s: f64, sigma: f64) -> f64 {
        use crate::lattice::sobolev_norm;
        (sobolev_norm(&self.theta, s, 0.0).powi(2)
            + sobolev_norm(&self.y, s, 0.0).powi(2)
            + sobolev_norm(&self.z, s, sigma).powi(2))
        .sqrt()
    }
}

/// `F_omega(iota, zeta)` split into components.
#[derive(Debug, Clone)]
pub struct ResidualTriple {
    pub e_theta: SequenceField,
    pub e_y: SequenceField,
    pub e_z: SequenceField,
    pub zeta: Vec<f64>,
}

impl ResidualTriple {
    pub fn norm(&self, s: f64, sigma: f64) -> f64 {
        use crate::lattice::sobolev_norm;
        (sobolev_norm(&self.e_theta, s, 0.0).powi(2)
            + sobolev_norm(&self.e_y, s, 0.0).powi(2)
            + sobolev_norm(&self.e_z, s, sigma).powi(2))
        .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.e_theta.max_abs().max(self.e_y.max_abs()).max(self.e_z.max_abs())
    }

    pub fn sub(&self, o: &Self) -> Self {
        ResidualTriple {
            e_theta: self.e_theta.sub(&o.e_theta),
            e_y: self.e_y.sub(&o.e_y),
            e_z: self.e_z.sub(&o.e_z),
            zeta: self.zeta.iter().zip(&o.zeta).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        let cc = C64::new(c, 0.0);
        ResidualTriple {
            e_theta: self.e_theta.scale(cc),
            e_y: self.e_y.scale(cc),
            e_z: self.e_z.scale(cc),
            zeta: self.zeta.iter().map(|v| v * c).collect(),
        }
    }
}

/// Grid values of an embedding: tangential planes are real, `theta` includes `phi`.
pub struct GridEmbedding {
    pub theta: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<C64>,
    pub npts: usize,
}

impl GridEmbedding {
    pub fn new(iota: &TorusEmbedding, grid: &Grid) -> Self {
        let np = grid.npts();
        let d = iota.theta.ncomp();
        let th = grid.field_to_grid(&iota.theta);
        let yg = grid.field_to_grid(&iota.y);
        let mut theta = vec![0.0; d * np];
        for p in 0..np {
            let phi = grid.phi(p);
            for a in 0..d {
                theta[a * np + p] = phi[a] + th[a * np + p].re;
            }
        }
        GridEmbedding { theta, y: yg.iter().map(|v| v.re).collect(), z: grid.field_to_grid(&iota.z), npts: np }
    }

    /// State `(theta, y, z)` at one grid point.
    pub fn point(&self, p: usize, d: usize, n: usize) -> (Vec<f64>, Vec<f64>, Vec<C64>) {
        let np = self.npts;
        (
            (0..d).map(|a| self.theta[a * np + p]).collect(),
            (0..d).map(|a| self.y[a * np + p]).collect(),
            (0..n).map(|j| self.z[j * np + p]).collect(),
        )
    }
}

/// Gradients of `H_eps` along an embedding, as lattice fields.
pub struct GradientFields {
    pub grad_theta: SequenceField,
    pub grad_y: SequenceField,
    pub grad_zbar: SequenceField,
    pub max_alias: f64,
}

pub fn gradient_fields(model: &Model, iota: &TorusEmbedding, grid: &Grid) -> Result<GradientFields> {
    let d = model.d();
    let n = model.n();
    let ge = GridEmbedding::new(iota, grid);
    let np = grid.npts();
    let evals: Vec<PointEval> = (0..np)
        .into_par_iter()
        .map(|p| {
            let (th, y, z) = ge.point(p, d, n);
            model.eval_point(&th, &y, &z, EvalOpts::default())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut gt = vec![ZERO; d * np];
    let mut gy = vec![ZERO; d * np];
    let mut gz = vec![ZERO; n * np];
    let mut max_alias = 0.0f64;
    for (p, e) in evals.iter().enumerate() {
        for a in 0..d {
            gt[a * np + p] = C64::new(e.grad_theta[a], 0.0);
            gy[a * np + p] = C64::new(e.grad_y[a], 0.0);
        }
        for j in 0..n {
            gz[j * np + p] = e.grad_zbar[j];
        }
        max_alias = max_alias.max(e.alias_ratio);
    }
    let s = model.ix.s.clone();
    Ok(GradientFields {
        grad_theta: grid.field_from_grid(gt, s.clone(), SiteKind::TangentialReal).real_part(),
        grad_y: grid.field_from_grid(gy, s, SiteKind::TangentialReal).real_part(),
        grad_zbar: grid.field_from_grid(gz, model.ix.s_perp.clone(), SiteKind::NormalComplex),
        max_alias,
    })
}

/// `F_omega(iota, zeta) = (omega.d theta - grad_y H, omega.d y + grad_theta H + zeta, omega.d z + i grad_zbar H)`.
pub fn residual_f(model: &Model, iota: &TorusEmbedding, zeta: &[f64], omega: &[f64], grid: &Grid) -> Result<ResidualTriple> {
    let g = gradient_fields(model, iota, grid)?;
    if g.max_alias > TOL_ALIAS {
        return Err(KamError::AliasOverflow { ratio: g.max_alias });
    }
    let d = model.d();
    let mut e_theta = iota.theta.omega_dphi(omega).sub(&g.grad_y);
    for a in 0..d {
        e_theta.add_at(0, a, C64::new(omega[a], 0.0));
    }
    let mut e_y = iota.y.omega_dphi(omega).add(&g.grad_theta);
    for a in 0..d {
        e_y.add_at(0, a, C64::new(zeta[a], 0.0));
    }
    let e_z = iota.z.omega_dphi(omega).add(&g.grad_zbar.scale(I));
    Ok(ResidualTriple { e_theta, e_y, e_z, zeta: zeta.to_vec() })
}

/// Mean of the pointwise product `f(phi) g(phi)` of two lattice functions.
pub fn mean_product(f: &SequenceField, fc: usize, g: &SequenceField, gc: usize) -> C64 {
    let lat = &f.lattice;
    (0..lat.len()).map(|m| f.get(m, fc) * g.get(lat.neg(m), gc)).sum()
}

/// `zeta = mean(-(d theta)^t E_y + (d y)^t E_theta - i (d z)^t conj(E_z) + i (d zbar)^t E_z)`.
pub fn zeta_compatibility(iota: &TorusEmbedding, e: &ResidualTriple) -> Vec<f64> {
    let d = iota.theta.ncomp();
    let n = iota.z.ncomp();
    let ez_bar = e.e_z.conj_field();
    let z_bar = iota.z.conj_field();
    (0..d)
        .map(|k| {
            let dth = iota.theta.dphi(k);
            let dy = iota.y.dphi(k);
            let dz = iota.z.dphi(k);
            let dzb = z_bar.dphi(k);
            let mut acc = -e.e_y.get(0, k);
            for j in 0..d {
                acc -= mean_product(&dth, j, &e.e_y, j);
                acc += mean_product(&dy, j, &e.e_theta, j);
            }
            for j in 0..n {
                acc += -I * mean_product(&dz, j, &ez_bar, j) + I * mean_product(&dzb, j, &e.e_z, j);
            }
            acc.re
        })
        .collect()
}
