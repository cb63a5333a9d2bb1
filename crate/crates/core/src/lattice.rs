//! Index sets, Fourier fields over the angle lattice, operator-valued maps,
//! weighted norms, cutoff projectors and the collocation grid.

use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64 as C64;
use rustfft::{Fft, FftPlanner};

use crate::error::{KamError, Result};
use crate::linalg::{gemm, spectral_norm_slice, CMat, ONE, ZERO};
use crate::tolerances::TOL_MEAN_REL;

/// `<n> = max(1, |n|)`.
#[inline]
pub fn bracket(n: i64) -> f64 {
    (n.unsigned_abs().max(1)) as f64
}

/// `<<j>> = (1 + (2 pi j)^2)^{1/2}`.
#[inline]
pub fn dd_weight(j: i64) -> f64 {
    let t = 2.0 * std::f64::consts::PI * j as f64;
    (1.0 + t * t).sqrt()
}

/// Lattice points `l in Z^d` with `|l|_1 <= cutoff`, sorted by `|l|_1` so that
/// every cutoff projector keeps a prefix. Index 0 is the zero mode.
#[derive(Debug, Clone)]
pub struct AngleLattice {
    dim: usize,
    cutoff: usize,
    modes: Vec<i32>,
    norm1: Vec<usize>,
    prefix: Vec<usize>,
    neg: Vec<usize>,
    box_index: Vec<u32>,
}

impl AngleLattice {
    pub fn new(dim: usize, cutoff: usize) -> Self {
        assert!(dim >= 1);
        let side = 2 * cutoff + 1;
        let total = side.pow(dim as u32);
        let mut pts: Vec<(usize, Vec<i32>)> = Vec::new();
        for flat in 0..total {
            let mut rem = flat;
            let mut v = vec![0i32; dim];
            for a in (0..dim).rev() {
                v[a] = (rem % side) as i32 - cutoff as i32;
                rem /= side;
            }
            let n1: usize = v.iter().map(|x| x.unsigned_abs() as usize).sum();
            if n1 <= cutoff {
                pts.push((n1, v));
            }
        }
        pts.sort();
        let mut modes = Vec::with_capacity(pts.len() * dim);
        let mut norm1 = Vec::with_capacity(pts.len());
        for (n1, v) in &pts {
            modes.extend_from_slice(v);
            norm1.push(*n1);
        }
        let mut prefix = vec![0usize; cutoff + 1];
        for t in 0..=cutoff {
            prefix[t] = norm1.partition_point(|&n| n <= t);
        }
        let mut box_index = vec![u32::MAX; total];
        for (i, (_, v)) in pts.iter().enumerate() {
            box_index[Self::box_flat(v, cutoff)] = i as u32;
        }
        let mut lat = AngleLattice { dim, cutoff, modes, norm1, prefix, neg: Vec::new(), box_index };
        lat.neg = (0..lat.len())
            .map(|i| {
                let m: Vec<i32> = lat.mode(i).iter().map(|x| -x).collect();
                lat.index_of(&m).expect("lattice is symmetric")
            })
            .collect();
        lat
    }

    fn box_flat(v: &[i32], cutoff: usize) -> usize {
        let side = 2 * cutoff + 1;
        v.iter().fold(0usize, |acc, &x| acc * side + (x + cutoff as i32) as usize)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn cutoff(&self) -> usize {
        self.cutoff
    }
    pub fn len(&self) -> usize {
        self.norm1.len()
    }
    pub fn is_empty(&self) -> bool {
        self.norm1.is_empty()
    }
    #[inline]
    pub fn mode(&self, i: usize) -> &[i32] {
        &self.modes[i * self.dim..(i + 1) * self.dim]
    }
    #[inline]
    pub fn norm1(&self, i: usize) -> usize {
        self.norm1[i]
    }
    /// `<l> = max(1, |l|_1)`.
    #[inline]
    pub fn bracket(&self, i: usize) -> f64 {
        self.norm1[i].max(1) as f64
    }
    #[inline]
    pub fn neg(&self, i: usize) -> usize {
        self.neg[i]
    }
    /// Number of modes with `|l|_1 <= t`.
    pub fn count_within(&self, t: usize) -> usize {
        if t >= self.cutoff {
            self.len()
        } else {
            self.prefix[t]
        }
    }
    pub fn index_of(&self, v: &[i32]) -> Option<usize> {
        if v.len() != self.dim || v.iter().any(|x| x.unsigned_abs() as usize > self.cutoff) {
            return None;
        }
        let i = self.box_index[Self::box_flat(v, self.cutoff)];
        (i != u32::MAX).then_some(i as usize)
    }
    /// Index of `mode(a) + mode(b)` when it lies in the lattice.
    #[inline]
    pub fn sum_index(&self, a: usize, b: usize) -> Option<usize> {
        if self.norm1[a] + self.norm1[b] <= self.cutoff {
            let mut buf = [0i32; 8];
            if self.dim <= 8 {
                for k in 0..self.dim {
                    buf[k] = self.modes[a * self.dim + k] + self.modes[b * self.dim + k];
                }
                return self.index_of(&buf[..self.dim]);
            }
        }
        let v: Vec<i32> = (0..self.dim).map(|k| self.modes[a * self.dim + k] + self.modes[b * self.dim + k]).collect();
        self.index_of(&v)
    }
    #[inline]
    pub fn dot(&self, i: usize, omega: &[f64]) -> f64 {
        self.mode(i).iter().zip(omega).map(|(&l, w)| l as f64 * w).sum()
    }
}

/// Tangential sites, truncated normal sites and the angle lattice.
#[derive(Debug, Clone)]
pub struct IndexSets {
    pub s: Vec<i64>,
    pub k_normal: i64,
    /// Normal sites ordered in pairs `[-k1, k1, -k2, k2, ...]` with `k1 < k2 < ...`.
    pub s_perp: Vec<i64>,
    pub s_perp_plus: Vec<i64>,
    pub l_angle: usize,
    pub lattice: Arc<AngleLattice>,
}

impl IndexSets {
    pub fn new(s: &[i64], k_normal: i64, l_angle: usize) -> Result<Self> {
        let mut errs = Vec::new();
        let mut s_sorted = s.to_vec();
        s_sorted.sort();
        s_sorted.dedup();
        if s_sorted.len() != s.len() {
            errs.push("S has repeated sites".to_string());
        }
        if s_sorted.is_empty() {
            errs.push("S must be nonempty".to_string());
        }
        if !s_sorted.contains(&0) {
            errs.push("S must contain 0".to_string());
        }
        if s_sorted.iter().any(|k| !s_sorted.contains(&-k)) {
            errs.push("S must satisfy S = -S".to_string());
        }
        let max_s = s_sorted.iter().map(|k| k.abs()).max().unwrap_or(0);
        if k_normal <= max_s {
            errs.push(format!("K_normal = {k_normal} must exceed max |k| over S = {max_s}"));
        }
        if l_angle < 1 {
            errs.push("L_angle must be at least 1".to_string());
        }
        if !errs.is_empty() {
            return Err(KamError::Validation(errs));
        }
        let s_perp_plus: Vec<i64> = (1..=k_normal).filter(|k| !s_sorted.contains(k)).collect();
        let s_perp: Vec<i64> = s_perp_plus.iter().flat_map(|&k| [-k, k]).collect();
        Ok(IndexSets {
            lattice: Arc::new(AngleLattice::new(s_sorted.len(), l_angle)),
            s: s_sorted,
            k_normal,
            s_perp,
            s_perp_plus,
            l_angle,
        })
    }

    pub fn d(&self) -> usize {
        self.s.len()
    }
    /// Number of normal sites.
    pub fn n(&self) -> usize {
        self.s_perp.len()
    }
    /// All sites, tangential first.
    pub fn all_sites(&self) -> Vec<i64> {
        self.s.iter().chain(self.s_perp.iter()).cloned().collect()
    }
    /// Site labels of a doubled normal vector `(w, wbar)`.
    pub fn doubled_sites(&self) -> Vec<i64> {
        self.s_perp.iter().chain(self.s_perp.iter()).cloned().collect()
    }
    pub fn perp_position(&self, site: i64) -> Option<usize> {
        self.s_perp.iter().position(|&k| k == site)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SiteKind {
    TangentialReal,
    NormalComplex,
    /// `(w, wbar)` stacked; the second half is the pointwise conjugate of the first.
    Doubled,
}

/// Fourier coefficients `coeffs[mode * ncomp + comp]` over the angle lattice.
#[derive(Debug, Clone)]
pub struct SequenceField {
    pub lattice: Arc<AngleLattice>,
    pub sites: Vec<i64>,
    pub kind: SiteKind,
    pub coeffs: Vec<C64>,
}

impl SequenceField {
    pub fn zeros(lattice: Arc<AngleLattice>, sites: Vec<i64>, kind: SiteKind) -> Self {
        let n = lattice.len() * sites.len();
        SequenceField { lattice, sites, kind, coeffs: vec![ZERO; n] }
    }

    pub fn scalar(lattice: Arc<AngleLattice>) -> Self {
        Self::zeros(lattice, vec![0], SiteKind::TangentialReal)
    }

    pub fn with_coeffs(lattice: Arc<AngleLattice>, sites: Vec<i64>, kind: SiteKind, coeffs: Vec<C64>) -> Self {
        assert_eq!(coeffs.len(), lattice.len() * sites.len());
        SequenceField { lattice, sites, kind, coeffs }
    }

    /// Random coefficients of size `amp * rate^{|l|_1}`.
    pub fn random_decaying(
        rng: &mut impl rand::Rng,
        lattice: Arc<AngleLattice>,
        sites: Vec<i64>,
        kind: SiteKind,
        amp: f64,
        rate: f64,
    ) -> Self {
        let mut f = Self::zeros(lattice, sites, kind);
        let nc = f.ncomp();
        for (i, v) in f.coeffs.iter_mut().enumerate() {
            let decay = rate.powi(f.lattice.norm1(i / nc) as i32);
            *v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * amp * decay;
        }
        f
    }

    #[inline]
    pub fn ncomp(&self) -> usize {
        self.sites.len()
    }
    #[inline]
    pub fn get(&self, mode: usize, comp: usize) -> C64 {
        self.coeffs[mode * self.sites.len() + comp]
    }
    #[inline]
    pub fn set(&mut self, mode: usize, comp: usize, v: C64) {
        let n = self.sites.len();
        self.coeffs[mode * n + comp] = v;
    }
    #[inline]
    pub fn add_at(&mut self, mode: usize, comp: usize, v: C64) {
        let n = self.sites.len();
        self.coeffs[mode * n + comp] += v;
    }

    pub fn same_shape(&self) -> Self {
        Self::zeros(self.lattice.clone(), self.sites.clone(), self.kind)
    }

    pub fn scale(&self, c: C64) -> Self {
        let mut out = self.clone();
        out.coeffs.iter_mut().for_each(|v| *v *= c);
        out
    }

    pub fn add(&self, o: &Self) -> Self {
        assert_eq!(self.coeffs.len(), o.coeffs.len());
        let mut out = self.clone();
        out.coeffs.iter_mut().zip(&o.coeffs).for_each(|(a, b)| *a += b);
        out
    }

    pub fn sub(&self, o: &Self) -> Self {
        assert_eq!(self.coeffs.len(), o.coeffs.len());
        let mut out = self.clone();
        out.coeffs.iter_mut().zip(&o.coeffs).for_each(|(a, b)| *a -= b);
        out
    }

    pub fn axpy(&mut self, a: C64, x: &Self) {
        assert_eq!(self.coeffs.len(), x.coeffs.len());
        self.coeffs.iter_mut().zip(&x.coeffs).for_each(|(y, v)| *y += a * v);
    }

    /// Euclidean norm of the coefficient vector.
    pub fn norm_l2(&self) -> f64 {
        self.coeffs.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, v| m.max(v.norm()))
    }

    /// The `l = 0` coefficients.
    pub fn mean(&self) -> Vec<C64> {
        self.coeffs[..self.ncomp()].to_vec()
    }

    pub fn component(&self, comp: usize) -> SequenceField {
        let c: Vec<C64> = (0..self.lattice.len()).map(|m| self.get(m, comp)).collect();
        SequenceField::with_coeffs(self.lattice.clone(), vec![self.sites[comp]], self.kind, c)
    }

    /// Coefficients of `d/dphi_axis`.
    pub fn dphi(&self, axis: usize) -> Self {
        let mut out = self.clone();
        let n = self.ncomp();
        for m in 0..self.lattice.len() {
            let f = C64::new(0.0, self.lattice.mode(m)[axis] as f64);
            for c in 0..n {
                out.coeffs[m * n + c] *= f;
            }
        }
        out
    }

    /// Coefficients of `omega . d_phi`.
    pub fn omega_dphi(&self, omega: &[f64]) -> Self {
        let mut out = self.clone();
        let n = self.ncomp();
        for m in 0..self.lattice.len() {
            let f = C64::new(0.0, self.lattice.dot(m, omega));
            for c in 0..n {
                out.coeffs[m * n + c] *= f;
            }
        }
        out
    }

    /// Pointwise complex conjugate: `c(l) -> conj(c(-l))`.
    pub fn conj_field(&self) -> Self {
        let mut out = self.clone();
        let n = self.ncomp();
        for m in 0..self.lattice.len() {
            let mn = self.lattice.neg(m);
            for c in 0..n {
                out.coeffs[m * n + c] = self.coeffs[mn * n + c].conj();
            }
        }
        out
    }

    /// Max deviation from the real-valuedness symmetry `c(-l) = conj c(l)`.
    pub fn reality_defect(&self) -> f64 {
        self.sub(&self.conj_field()).max_abs()
    }

    /// Pointwise real part.
    pub fn real_part(&self) -> Self {
        let mut out = self.add(&self.conj_field());
        out.coeffs.iter_mut().for_each(|v| *v *= 0.5);
        out
    }

    /// Stack `(h, conj h)` into a doubled field.
    pub fn doubled(&self) -> Self {
        let cj = self.conj_field();
        let n = self.ncomp();
        let mut sites = self.sites.clone();
        sites.extend_from_slice(&self.sites);
        let mut out = SequenceField::zeros(self.lattice.clone(), sites, SiteKind::Doubled);
        for m in 0..self.lattice.len() {
            for c in 0..n {
                out.set(m, c, self.get(m, c));
                out.set(m, n + c, cj.get(m, c));
            }
        }
        out
    }

    /// First half of a doubled field.
    pub fn undouble(&self) -> Self {
        let n = self.ncomp() / 2;
        let mut out = SequenceField::zeros(self.lattice.clone(), self.sites[..n].to_vec(), SiteKind::NormalComplex);
        for m in 0..self.lattice.len() {
            for c in 0..n {
                out.set(m, c, self.get(m, c));
            }
        }
        out
    }

    /// Same coefficients on another lattice, padding with zeros or truncating.
    pub fn relattice(&self, target: Arc<AngleLattice>) -> Self {
        let n = self.ncomp();
        let mut out = SequenceField::zeros(target.clone(), self.sites.clone(), self.kind);
        for m in 0..target.len() {
            if let Some(src) = self.lattice.index_of(target.mode(m)) {
                for c in 0..n {
                    out.set(m, c, self.get(src, c));
                }
            }
        }
        out
    }

    pub fn concat(parts: &[&SequenceField], kind: SiteKind) -> SequenceField {
        let lat = parts[0].lattice.clone();
        let sites: Vec<i64> = parts.iter().flat_map(|p| p.sites.iter().cloned()).collect();
        let mut out = SequenceField::zeros(lat.clone(), sites, kind);
        let ntot = out.ncomp();
        for m in 0..lat.len() {
            let mut off = 0;
            for p in parts {
                let n = p.ncomp();
                out.coeffs[m * ntot + off..m * ntot + off + n].copy_from_slice(&p.coeffs[m * n..(m + 1) * n]);
                off += n;
            }
        }
        out
    }

    pub fn slice_comps(&self, start: usize, len: usize, kind: SiteKind) -> SequenceField {
        let n = self.ncomp();
        let mut out = SequenceField::zeros(self.lattice.clone(), self.sites[start..start + len].to_vec(), kind);
        for m in 0..self.lattice.len() {
            out.coeffs[m * len..(m + 1) * len].copy_from_slice(&self.coeffs[m * n + start..m * n + start + len]);
        }
        out
    }

    /// Point evaluation `sum_l c(l) e^{i l.phi}`.
    pub fn eval_at(&self, phi: &[f64]) -> Vec<C64> {
        let n = self.ncomp();
        let mut out = vec![ZERO; n];
        for m in 0..self.lattice.len() {
            let e = C64::from_polar(1.0, self.lattice.dot(m, phi));
            for c in 0..n {
                out[c] += self.coeffs[m * n + c] * e;
            }
        }
        out
    }
}

/// `||u||_{s,sigma}^2 = sum |u_n(l)|^2 <n>^{2 sigma} <l>^{2s}`.
pub fn sobolev_norm(u: &SequenceField, s: f64, sigma: f64) -> f64 {
    let n = u.ncomp();
    let w: Vec<f64> = u.sites.iter().map(|&k| bracket(k).powf(2.0 * sigma)).collect();
    let mut acc = 0.0;
    for m in 0..u.lattice.len() {
        let lw = u.lattice.bracket(m).powf(2.0 * s);
        for c in 0..n {
            acc += u.coeffs[m * n + c].norm_sqr() * w[c] * lw;
        }
    }
    acc.sqrt()
}

/// Fourier cutoff `Pi_N` and its complement.
pub trait SmoothProject: Sized {
    fn smooth_project(&self, n: usize) -> Self;
    fn smooth_project_perp(&self, n: usize) -> Self;
}

impl SmoothProject for SequenceField {
    fn smooth_project(&self, n: usize) -> Self {
        let keep = self.lattice.count_within(n) * self.ncomp();
        let mut out = self.clone();
        out.coeffs[keep..].iter_mut().for_each(|v| *v = ZERO);
        out
    }
    fn smooth_project_perp(&self, n: usize) -> Self {
        let keep = self.lattice.count_within(n) * self.ncomp();
        let mut out = self.clone();
        out.coeffs[..keep].iter_mut().for_each(|v| *v = ZERO);
        out
    }
}

/// Solve `omega . d_phi f = g` on the lattice with `f(0) = 0`.
pub fn omega_dvphi_inverse(g: &SequenceField, omega: &[f64], tau: f64, gamma: f64) -> Result<SequenceField> {
    let lat = &g.lattice;
    let n = g.ncomp();
    let tol = TOL_MEAN_REL * g.norm_l2();
    let mean = g.coeffs[..n].iter().fold(0.0f64, |m, v| m.max(v.norm()));
    if mean > tol {
        return Err(KamError::NonzeroMean { mean, tol });
    }
    let mut out = g.same_shape();
    for m in 1..lat.len() {
        let wl = lat.dot(m, omega);
        let thr = gamma / (lat.norm1(m) as f64).powf(tau);
        if wl.abs() < thr {
            return Err(KamError::DiophantineViolation { ell: lat.mode(m).to_vec(), value: wl.abs() });
        }
        let inv = C64::new(0.0, -1.0 / wl);
        for c in 0..n {
            out.coeffs[m * n + c] = g.coeffs[m * n + c] * inv;
        }
    }
    Ok(out)
}

/// Diophantine check on the stored lattice; returns the smallest ratio `|omega.l| <l>^tau`.
pub fn diophantine_margin(lat: &AngleLattice, omega: &[f64], tau: f64) -> (f64, Option<usize>) {
    let mut best = f64::INFINITY;
    let mut arg = None;
    for m in 1..lat.len() {
        let r = lat.dot(m, omega).abs() * (lat.norm1(m) as f64).powf(tau);
        if r < best {
            best = r;
            arg = Some(m);
        }
    }
    (best, arg)
}

/// Smallest 5-smooth integer `>= x`.
pub fn nice_size(x: usize) -> usize {
    let mut n = x.max(1);
    loop {
        let mut r = n;
        for p in [2, 3, 5] {
            while r.is_multiple_of(p) {
                r /= p;
            }
        }
        if r == 1 {
            return n;
        }
        n += 1;
    }
}

/// Uniform collocation grid on the torus with `m` points per axis.
/// Grid values are stored planar: `values[comp * npts + point]`.
#[derive(Clone)]
pub struct Grid {
    pub lattice: Arc<AngleLattice>,
    pub m: usize,
    npts: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    mode_pt: Vec<usize>,
}

impl std::fmt::Debug for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Grid").field("m", &self.m).field("npts", &self.npts).finish()
    }
}

impl Grid {
    pub fn new(lattice: Arc<AngleLattice>, m: usize) -> Self {
        assert!(m > 2 * lattice.cutoff(), "grid too coarse for the lattice");
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(m);
        let inv = planner.plan_fft_inverse(m);
        let d = lattice.dim();
        let npts = m.pow(d as u32);
        let mode_pt = (0..lattice.len())
            .map(|i| {
                lattice
                    .mode(i)
                    .iter()
                    .fold(0usize, |acc, &l| acc * m + (l.rem_euclid(m as i32)) as usize)
            })
            .collect();
        Grid { lattice, m, npts, fwd, inv, mode_pt }
    }

    /// Grid on which projected products of two lattice functions are exact.
    pub fn for_products(lattice: Arc<AngleLattice>) -> Self {
        let m = nice_size(3 * lattice.cutoff() + 1);
        Self::new(lattice, m)
    }

    pub fn npts(&self) -> usize {
        self.npts
    }

    pub fn dim(&self) -> usize {
        self.lattice.dim()
    }

    /// Angle coordinates of a grid point.
    pub fn phi(&self, pt: usize) -> Vec<f64> {
        let d = self.dim();
        let mut v = vec![0.0; d];
        let mut rem = pt;
        for a in (0..d).rev() {
            v[a] = 2.0 * std::f64::consts::PI * (rem % self.m) as f64 / self.m as f64;
            rem /= self.m;
        }
        v
    }

    fn transform_block(&self, buf: &mut [C64], inverse: bool, scratch: &mut Vec<C64>) {
        let d = self.dim();
        let m = self.m;
        let plan = if inverse { &self.inv } else { &self.fwd };
        for axis in 0..d {
            let stride = m.pow((d - 1 - axis) as u32);
            if stride == 1 {
                plan.process(buf);
                continue;
            }
            let outer = self.npts / (stride * m);
            scratch.resize(self.npts, ZERO);
            let mut li = 0;
            for o in 0..outer {
                for s in 0..stride {
                    let base = o * stride * m + s;
                    for t in 0..m {
                        scratch[li * m + t] = buf[base + t * stride];
                    }
                    li += 1;
                }
            }
            plan.process(&mut scratch[..self.npts]);
            li = 0;
            for o in 0..outer {
                for s in 0..stride {
                    let base = o * stride * m + s;
                    for t in 0..m {
                        buf[base + t * stride] = scratch[li * m + t];
                    }
                    li += 1;
                }
            }
        }
    }

    /// Values on the grid of `coeffs[mode * ncomp + comp]`.
    pub fn to_grid(&self, coeffs: &[C64], ncomp: usize) -> Vec<C64> {
        let nm = self.lattice.len();
        assert_eq!(coeffs.len(), nm * ncomp);
        let mut out = vec![ZERO; ncomp * self.npts];
        let mut scratch = Vec::new();
        for c in 0..ncomp {
            let mut any = false;
            let blk = &mut out[c * self.npts..(c + 1) * self.npts];
            for md in 0..nm {
                let v = coeffs[md * ncomp + c];
                if v != ZERO {
                    blk[self.mode_pt[md]] = v;
                    any = true;
                }
            }
            if any {
                self.transform_block(blk, true, &mut scratch);
            }
        }
        out
    }

    /// Lattice coefficients of planar grid values (projection onto the lattice).
    pub fn from_grid(&self, mut values: Vec<C64>, ncomp: usize) -> Vec<C64> {
        assert_eq!(values.len(), ncomp * self.npts);
        let nm = self.lattice.len();
        let mut out = vec![ZERO; nm * ncomp];
        let scale = 1.0 / self.npts as f64;
        let mut scratch = Vec::new();
        for c in 0..ncomp {
            let blk = &mut values[c * self.npts..(c + 1) * self.npts];
            if blk.iter().all(|v| *v == ZERO) {
                continue;
            }
            self.transform_block(blk, false, &mut scratch);
            for md in 0..nm {
                out[md * ncomp + c] = blk[self.mode_pt[md]] * scale;
            }
        }
        out
    }

    pub fn field_to_grid(&self, f: &SequenceField) -> Vec<C64> {
        assert!(Arc::ptr_eq(&f.lattice, &self.lattice) || f.lattice.len() == self.lattice.len());
        self.to_grid(&f.coeffs, f.ncomp())
    }

    pub fn field_from_grid(&self, values: Vec<C64>, sites: Vec<i64>, kind: SiteKind) -> SequenceField {
        let n = sites.len();
        let coeffs = self.from_grid(values, n);
        SequenceField::with_coeffs(self.lattice.clone(), sites, kind, coeffs)
    }
}

/// A phi-dependent linear map stored through its matrix-valued Fourier
/// coefficients, `data[mode * rows * cols + r * cols + c]`.
#[derive(Debug, Clone)]
pub struct OperatorMap {
    pub lattice: Arc<AngleLattice>,
    pub rows: usize,
    pub cols: usize,
    pub row_sites: Vec<i64>,
    pub col_sites: Vec<i64>,
    pub weight_sigma: f64,
    pub data: Vec<C64>,
    pub support: Vec<bool>,
}

impl OperatorMap {
    pub fn zeros(lattice: Arc<AngleLattice>, row_sites: Vec<i64>, col_sites: Vec<i64>) -> Self {
        let rows = row_sites.len();
        let cols = col_sites.len();
        let n = lattice.len();
        OperatorMap {
            lattice,
            rows,
            cols,
            row_sites,
            col_sites,
            weight_sigma: 0.0,
            data: vec![ZERO; n * rows * cols],
            support: vec![false; n],
        }
    }

    pub fn square(lattice: Arc<AngleLattice>, sites: Vec<i64>) -> Self {
        Self::zeros(lattice, sites.clone(), sites)
    }

    pub fn identity(lattice: Arc<AngleLattice>, sites: Vec<i64>) -> Self {
        let mut op = Self::square(lattice, sites);
        op.set_block(0, &CMat::identity(op.rows));
        op
    }

    pub fn same_shape(&self) -> Self {
        let mut z = Self::zeros(self.lattice.clone(), self.row_sites.clone(), self.col_sites.clone());
        z.weight_sigma = self.weight_sigma;
        z
    }

    #[inline]
    pub fn bsize(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn block(&self, mode: usize) -> &[C64] {
        let b = self.bsize();
        &self.data[mode * b..(mode + 1) * b]
    }

    /// Mutable block; marks the mode as supported.
    #[inline]
    pub fn block_mut(&mut self, mode: usize) -> &mut [C64] {
        let b = self.bsize();
        self.support[mode] = true;
        &mut self.data[mode * b..(mode + 1) * b]
    }

    pub fn get_block(&self, mode: usize) -> CMat {
        CMat { rows: self.rows, cols: self.cols, data: self.block(mode).to_vec() }
    }

    pub fn set_block(&mut self, mode: usize, m: &CMat) {
        assert_eq!((m.rows, m.cols), (self.rows, self.cols));
        self.block_mut(mode).copy_from_slice(&m.data);
    }

    pub fn constant(lattice: Arc<AngleLattice>, row_sites: Vec<i64>, col_sites: Vec<i64>, m: &CMat) -> Self {
        let mut op = Self::zeros(lattice, row_sites, col_sites);
        op.set_block(0, m);
        op
    }

    pub fn supported_modes(&self) -> Vec<usize> {
        (0..self.lattice.len()).filter(|&i| self.support[i]).collect()
    }

    pub fn block_fro(&self, mode: usize) -> f64 {
        self.block(mode).iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.norm()))
    }

    /// Sum of block Frobenius norms; an upper bound for the algebra norm of products.
    pub fn wiener_fro(&self) -> f64 {
        self.supported_modes().iter().map(|&m| self.block_fro(m)).sum()
    }

    /// Drops blocks whose Frobenius norm is below `abs_tol`.
    pub fn prune(&mut self, abs_tol: f64) {
        let b = self.bsize();
        for m in 0..self.lattice.len() {
            if self.support[m] && self.block_fro(m) <= abs_tol {
                self.support[m] = false;
                self.data[m * b..(m + 1) * b].iter_mut().for_each(|v| *v = ZERO);
            }
        }
    }

    /// Recomputes the support from exact zeros.
    pub fn refresh_support(&mut self) {
        for m in 0..self.lattice.len() {
            self.support[m] = self.block(m).iter().any(|v| *v != ZERO);
        }
    }

    fn zip_with(&self, o: &Self, f: impl Fn(C64, C64) -> C64) -> Self {
        assert_eq!((self.rows, self.cols, self.lattice.len()), (o.rows, o.cols, o.lattice.len()));
        let mut out = self.clone();
        out.data.iter_mut().zip(&o.data).for_each(|(a, b)| *a = f(*a, *b));
        out.support.iter_mut().zip(&o.support).for_each(|(a, b)| *a = *a || *b);
        out
    }

    pub fn add(&self, o: &Self) -> Self {
        self.zip_with(o, |a, b| a + b)
    }
    pub fn sub(&self, o: &Self) -> Self {
        self.zip_with(o, |a, b| a - b)
    }
    pub fn axpy(&mut self, a: C64, x: &Self) {
        assert_eq!(self.data.len(), x.data.len());
        self.data.iter_mut().zip(&x.data).for_each(|(y, v)| *y += a * v);
        self.support.iter_mut().zip(&x.support).for_each(|(s, t)| *s = *s || *t);
    }
    pub fn scale(&self, c: C64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= c);
        out
    }

    /// Pointwise complex conjugate of the matrix entries.
    pub fn conj_op(&self) -> Self {
        let mut out = self.same_shape();
        for m in 0..self.lattice.len() {
            let mn = self.lattice.neg(m);
            if self.support[mn] {
                let src: Vec<C64> = self.block(mn).iter().map(|v| v.conj()).collect();
                out.block_mut(m).copy_from_slice(&src);
            }
        }
        out
    }

    /// Pointwise transpose.
    pub fn transpose_op(&self) -> Self {
        let mut out = OperatorMap::zeros(self.lattice.clone(), self.col_sites.clone(), self.row_sites.clone());
        out.weight_sigma = self.weight_sigma;
        for m in self.supported_modes() {
            let b = self.get_block(m).transpose();
            out.set_block(m, &b);
        }
        out
    }

    /// Pointwise adjoint.
    pub fn adjoint_op(&self) -> Self {
        self.transpose_op().conj_op()
    }

    /// Multiplies block `l` by `i omega.l` (the phi-derivative of the operator).
    pub fn omega_dphi(&self, omega: &[f64]) -> Self {
        let mut out = self.clone();
        let b = self.bsize();
        for m in 0..self.lattice.len() {
            let f = C64::new(0.0, self.lattice.dot(m, omega));
            out.data[m * b..(m + 1) * b].iter_mut().for_each(|v| *v *= f);
        }
        out.support[0] = false;
        out
    }

    pub fn eval_at(&self, phi: &[f64]) -> CMat {
        let mut out = CMat::zeros(self.rows, self.cols);
        for m in self.supported_modes() {
            let e = C64::from_polar(1.0, self.lattice.dot(m, phi));
            for (o, v) in out.data.iter_mut().zip(self.block(m)) {
                *o += v * e;
            }
        }
        out
    }

    pub fn to_grid(&self, grid: &Grid) -> Vec<C64> {
        grid.to_grid(&self.data, self.bsize())
    }

    pub fn from_grid(grid: &Grid, values: Vec<C64>, row_sites: Vec<i64>, col_sites: Vec<i64>) -> Self {
        let mut op = OperatorMap::zeros(grid.lattice.clone(), row_sites, col_sites);
        op.data = grid.from_grid(values, op.bsize());
        op.refresh_support();
        op
    }

    fn pair_count(&self, other_support: &[usize]) -> usize {
        let mine = self.supported_modes();
        let mut n = 0;
        for &a in &mine {
            for &b in other_support {
                if self.lattice.sum_index(a, b).is_some() {
                    n += 1;
                }
            }
        }
        n
    }

    fn use_grid(&self, pairs: usize, k: usize, n: usize, grid: &Grid, ncomp_fft: usize) -> bool {
        let mkn = (self.rows * k * n) as f64;
        let npts = grid.npts() as f64;
        let fft = ncomp_fft as f64 * npts * (npts.log2() * 0.35 + 1.0);
        let grid_cost = npts * mkn + fft;
        let sparse_cost = pairs as f64 * mkn;
        sparse_cost > grid_cost
    }

    /// Projected pointwise product `Pi_Lambda (self(phi) * other(phi))`.
    pub fn mul(&self, other: &OperatorMap, grid: &Grid) -> OperatorMap {
        assert_eq!(self.cols, other.rows, "operator product shape");
        let mut out = OperatorMap::zeros(self.lattice.clone(), self.row_sites.clone(), other.col_sites.clone());
        out.weight_sigma = self.weight_sigma;
        let osupp = other.supported_modes();
        let pairs = self.pair_count(&osupp);
        if pairs == 0 {
            return out;
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let ncomp_fft = self.support.iter().filter(|s| **s).count().min(1) * (m * k + k * n + m * n);
        if self.use_grid(pairs, k, n, grid, ncomp_fft) {
            let ag = self.to_grid(grid);
            let bg = other.to_grid(grid);
            let np = grid.npts();
            let mut cg = vec![ZERO; m * n * np];
            for p in 0..np {
                unsafe {
                    matrixmultiply::zgemm(
                        matrixmultiply::CGemmOption::Standard,
                        matrixmultiply::CGemmOption::Standard,
                        m,
                        k,
                        n,
                        [1.0, 0.0],
                        ag.as_ptr().add(p) as *const [f64; 2],
                        (k * np) as isize,
                        np as isize,
                        bg.as_ptr().add(p) as *const [f64; 2],
                        (n * np) as isize,
                        np as isize,
                        [0.0, 0.0],
                        cg.as_mut_ptr().add(p) as *mut [f64; 2],
                        (n * np) as isize,
                        np as isize,
                    );
                }
            }
            out.data = grid.from_grid(cg, m * n);
            out.refresh_support();
        } else {
            let mine = self.supported_modes();
            let ob = out.bsize();
            for &a in &mine {
                for &b in &osupp {
                    if let Some(c) = self.lattice.sum_index(a, b) {
                        out.support[c] = true;
                        gemm(m, k, n, ONE, self.block(a), other.block(b), ONE, &mut out.data[c * ob..(c + 1) * ob]);
                    }
                }
            }
        }
        out
    }

    /// Projected action on a vector field with `cols` components.
    pub fn apply(&self, v: &SequenceField, grid: &Grid) -> SequenceField {
        assert_eq!(self.cols, v.ncomp(), "operator/vector shape");
        let mut out = SequenceField::zeros(self.lattice.clone(), self.row_sites.clone(), v.kind);
        let nm = self.lattice.len();
        let vsupp: Vec<usize> = (0..nm).filter(|&i| v.coeffs[i * self.cols..(i + 1) * self.cols].iter().any(|c| *c != ZERO)).collect();
        let pairs = self.pair_count(&vsupp);
        if pairs == 0 {
            return out;
        }
        let (m, k) = (self.rows, self.cols);
        let ncomp_fft = m * k + k + m;
        if self.use_grid(pairs, k, 1, grid, ncomp_fft) {
            let ag = self.to_grid(grid);
            let vg = grid.to_grid(&v.coeffs, k);
            let np = grid.npts();
            let mut cg = vec![ZERO; m * np];
            for r in 0..m {
                for c in 0..k {
                    let a = &ag[(r * k + c) * np..(r * k + c + 1) * np];
                    let x = &vg[c * np..(c + 1) * np];
                    let y = &mut cg[r * np..(r + 1) * np];
                    for p in 0..np {
                        y[p] += a[p] * x[p];
                    }
                }
            }
            out.coeffs = grid.from_grid(cg, m);
        } else {
            for a in self.supported_modes() {
                let blk = self.block(a);
                for &b in &vsupp {
                    if let Some(c) = self.lattice.sum_index(a, b) {
                        let x = &v.coeffs[b * k..(b + 1) * k];
                        let y = &mut out.coeffs[c * m..(c + 1) * m];
                        for r in 0..m {
                            let row = &blk[r * k..(r + 1) * k];
                            let mut acc = ZERO;
                            for t in 0..k {
                                acc += row[t] * x[t];
                            }
                            y[r] += acc;
                        }
                    }
                }
            }
        }
        out
    }

    /// Block `(r0.., c0..)` of size `nr x nc` as an operator.
    pub fn sub_block(&self, r0: usize, nr: usize, c0: usize, nc: usize) -> OperatorMap {
        let mut out = OperatorMap::zeros(
            self.lattice.clone(),
            self.row_sites[r0..r0 + nr].to_vec(),
            self.col_sites[c0..c0 + nc].to_vec(),
        );
        for md in self.supported_modes() {
            let src = self.block(md);
            let cols = self.cols;
            let dst = out.block_mut(md);
            for r in 0..nr {
                dst[r * nc..(r + 1) * nc].copy_from_slice(&src[(r0 + r) * cols + c0..(r0 + r) * cols + c0 + nc]);
            }
        }
        out
    }

    /// Writes `b` into the block starting at `(r0, c0)`.
    pub fn put_block(&mut self, r0: usize, c0: usize, b: &OperatorMap) {
        let cols = self.cols;
        for md in b.supported_modes() {
            let src = b.block(md).to_vec();
            let dst = self.block_mut(md);
            for r in 0..b.rows {
                dst[(r0 + r) * cols + c0..(r0 + r) * cols + c0 + b.cols].copy_from_slice(&src[r * b.cols..(r + 1) * b.cols]);
            }
        }
    }

    /// Right multiplication by a constant diagonal matrix.
    pub fn mul_diag_right(&self, d: &[f64]) -> OperatorMap {
        assert_eq!(d.len(), self.cols);
        let mut out = self.clone();
        let cols = self.cols;
        for md in self.supported_modes() {
            let b = &mut out.data[md * self.bsize()..(md + 1) * self.bsize()];
            for (i, v) in b.iter_mut().enumerate() {
                *v *= d[i % cols];
            }
        }
        out
    }
}

impl SmoothProject for OperatorMap {
    fn smooth_project(&self, n: usize) -> Self {
        let keep = self.lattice.count_within(n);
        let mut out = self.clone();
        let b = self.bsize();
        out.data[keep * b..].iter_mut().for_each(|v| *v = ZERO);
        out.support[keep..].iter_mut().for_each(|s| *s = false);
        out
    }
    fn smooth_project_perp(&self, n: usize) -> Self {
        let keep = self.lattice.count_within(n);
        let mut out = self.clone();
        let b = self.bsize();
        out.data[..keep * b].iter_mut().for_each(|v| *v = ZERO);
        out.support[..keep].iter_mut().for_each(|s| *s = false);
        out
    }
}

/// `|A|_{s,sigma} = (sum_l ||W A(l) W^{-1}||^2 <l>^{2s})^{1/2}` with `W = diag <n>^sigma`.
pub fn operator_norm(a: &OperatorMap, s: f64, sigma: f64) -> f64 {
    let wr: Vec<f64> = a.row_sites.iter().map(|&k| bracket(k).powf(sigma)).collect();
    let wc: Vec<f64> = a.col_sites.iter().map(|&k| bracket(k).powf(-sigma)).collect();
    let mut acc = 0.0;
    let mut buf = vec![ZERO; a.bsize()];
    for m in a.supported_modes() {
        let blk = a.block(m);
        for r in 0..a.rows {
            for c in 0..a.cols {
                buf[r * a.cols + c] = blk[r * a.cols + c] * (wr[r] * wc[c]);
            }
        }
        let nrm = spectral_norm_slice(a.rows, a.cols, &buf);
        acc += nrm * nrm * a.lattice.bracket(m).powf(2.0 * s);
    }
    acc.sqrt()
}

/// Pairs of sorted norms at several Sobolev indices computed in one pass.
pub fn operator_norms(a: &OperatorMap, s_list: &[f64], sigma: f64) -> Vec<f64> {
    let wr: Vec<f64> = a.row_sites.iter().map(|&k| bracket(k).powf(sigma)).collect();
    let wc: Vec<f64> = a.col_sites.iter().map(|&k| bracket(k).powf(-sigma)).collect();
    let mut acc = vec![0.0; s_list.len()];
    let mut buf = vec![ZERO; a.bsize()];
    for m in a.supported_modes() {
        let blk = a.block(m);
        for r in 0..a.rows {
            for c in 0..a.cols {
                buf[r * a.cols + c] = blk[r * a.cols + c] * (wr[r] * wc[c]);
            }
        }
        let nrm = spectral_norm_slice(a.rows, a.cols, &buf);
        for (i, s) in s_list.iter().enumerate() {
            acc[i] += nrm * nrm * a.lattice.bracket(m).powf(2.0 * s);
        }
    }
    acc.into_iter().map(f64::sqrt).collect()
}

/// The angle lattice with its product grid, plus the doubled-cutoff lattice
/// and grid used for exact quadratic expressions.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub ix: IndexSets,
    pub grid: Grid,
    pub ext: Arc<AngleLattice>,
    pub ext_grid: Grid,
}

impl Discretization {
    pub fn new(ix: IndexSets) -> Self {
        let grid = Grid::for_products(ix.lattice.clone());
        let ext = Arc::new(AngleLattice::new(ix.d(), 2 * ix.l_angle));
        let ext_grid = Grid::new(ext.clone(), nice_size(4 * ix.l_angle + 1));
        Discretization { ix, grid, ext, ext_grid }
    }

    pub fn lattice(&self) -> &Arc<AngleLattice> {
        &self.ix.lattice
    }
}

/// Cache of lattices keyed by `(dim, cutoff)`.
#[derive(Default)]
pub struct LatticeCache {
    map: HashMap<(usize, usize), Arc<AngleLattice>>,
}

impl LatticeCache {
    pub fn get(&mut self, dim: usize, cutoff: usize) -> Arc<AngleLattice> {
        self.map.entry((dim, cutoff)).or_insert_with(|| Arc::new(AngleLattice::new(dim, cutoff))).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lat(d: usize, l: usize) -> Arc<AngleLattice> {
        Arc::new(AngleLattice::new(d, l))
    }

    #[test]
    fn lattice_counts_and_order() {
        let l = lat(3, 6);
        assert_eq!(l.len(), 377);
        assert_eq!(lat(3, 8).len(), 833);
        assert_eq!(l.mode(0), &[0, 0, 0]);
        for i in 1..l.len() {
            assert!(l.norm1(i - 1) <= l.norm1(i));
        }
        for i in 0..l.len() {
            let n: Vec<i32> = l.mode(i).iter().map(|x| -x).collect();
            assert_eq!(l.mode(l.neg(i)), &n[..]);
        }
        assert_eq!(l.count_within(0), 1);
        assert_eq!(l.count_within(1), 7);
    }

    #[test]
    fn index_sets_pairing() {
        let ix = IndexSets::new(&[-1, 0, 1], 4, 2).unwrap();
        assert_eq!(ix.s_perp_plus, vec![2, 3, 4]);
        assert_eq!(ix.s_perp, vec![-2, 2, -3, 3, -4, 4]);
        assert!(IndexSets::new(&[0, 1], 4, 2).is_err());
        assert!(IndexSets::new(&[-1, 1], 4, 2).is_err());
        assert!(IndexSets::new(&[-1, 0, 1], 1, 2).is_err());
    }

    #[test]
    fn grid_round_trip_and_product_exactness() {
        let l = lat(2, 3);
        let g = Grid::for_products(l.clone());
        let n = l.len();
        let a: Vec<C64> = (0..n).map(|i| C64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos())).collect();
        let back = g.from_grid(g.to_grid(&a, 1), 1);
        for i in 0..n {
            assert!((a[i] - back[i]).norm() < 1e-13);
        }
        // product through the grid equals the direct convolution restricted to the lattice
        let b: Vec<C64> = (0..n).map(|i| C64::new((i as f64 * 0.71).cos(), 0.2)).collect();
        let ag = g.to_grid(&a, 1);
        let bg = g.to_grid(&b, 1);
        let pg: Vec<C64> = ag.iter().zip(&bg).map(|(x, y)| x * y).collect();
        let p = g.from_grid(pg, 1);
        let mut direct = vec![ZERO; n];
        for i in 0..n {
            for j in 0..n {
                if let Some(k) = l.sum_index(i, j) {
                    direct[k] += a[i] * b[j];
                }
            }
        }
        for i in 0..n {
            assert!((direct[i] - p[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn operator_mul_paths_agree() {
        let l = lat(2, 3);
        let g = Grid::for_products(l.clone());
        let sites = vec![-2, 2, -3];
        let mut a = OperatorMap::square(l.clone(), sites.clone());
        let mut b = OperatorMap::square(l.clone(), sites.clone());
        for md in 0..l.len() {
            let x = md as f64;
            a.set_block(md, &CMat::from_fn(3, 3, |r, c| C64::new((x + r as f64).sin(), (c as f64 - x).cos() * 0.1)));
            b.set_block(md, &CMat::from_fn(3, 3, |r, c| C64::new((x * 0.3 + c as f64).cos(), (r as f64 + x).sin())));
        }
        let c1 = a.mul(&b, &g);
        // force the sparse path on a two-mode support
        let mut a2 = a.smooth_project(0);
        a2.support[0] = true;
        let c2 = a2.mul(&b, &g);
        let mut c2_ref = OperatorMap::square(l.clone(), sites.clone());
        for md in b.supported_modes() {
            let blk = a.get_block(0).matmul(&b.get_block(md));
            c2_ref.set_block(md, &blk);
        }
        assert!(c2.sub(&c2_ref).max_abs() < 1e-12);
        // full product against direct convolution
        let mut direct = OperatorMap::square(l.clone(), sites);
        for i in 0..l.len() {
            for j in 0..l.len() {
                if let Some(k) = l.sum_index(i, j) {
                    let blk = a.get_block(i).matmul(&b.get_block(j));
                    let cur = direct.get_block(k).add(&blk);
                    direct.set_block(k, &cur);
                }
            }
        }
        assert!(c1.sub(&direct).max_abs() < 1e-11);
    }

    #[test]
    fn omega_dvphi_inverse_examples() {
        let l = lat(1, 3);
        let mut g = SequenceField::scalar(l.clone());
        let i2 = l.index_of(&[2]).unwrap();
        g.set(i2, 0, C64::new(1.0, 0.0));
        let f = omega_dvphi_inverse(&g, &[1.0], 2.0, 0.1).unwrap();
        assert!((f.get(i2, 0) - C64::new(0.0, -0.5)).norm() < 1e-15);
        g.set(0, 0, C64::new(1.0, 0.0));
        assert!(matches!(omega_dvphi_inverse(&g, &[1.0], 2.0, 0.1), Err(KamError::NonzeroMean { .. })));
        let mut h = SequenceField::scalar(lat(2, 2));
        h.set(3, 0, C64::new(1.0, 0.0));
        assert!(matches!(
            omega_dvphi_inverse(&h, &[1.0, 1.0], 2.0, 0.1),
            Err(KamError::DiophantineViolation { .. })
        ));
    }

    #[test]
    fn norms_examples() {
        let l = lat(2, 4);
        let mut u = SequenceField::zeros(l.clone(), vec![2], SiteKind::NormalComplex);
        let m = l.index_of(&[1, -2]).unwrap();
        u.set(m, 0, ONE);
        assert!((sobolev_norm(&u, 1.0, 4.0) - 48.0).abs() < 1e-12);
        let mut a = OperatorMap::square(l.clone(), vec![-2, 2]);
        a.set_block(l.index_of(&[2, 0]).unwrap(), &CMat::identity(2).scale(C64::new(3.0, 0.0)));
        assert!((operator_norm(&a, 2.0, 1.0) - 12.0).abs() < 1e-12);
        let id = OperatorMap::identity(l.clone(), vec![-3, 3, -4]);
        assert!((operator_norm(&id, 3.0, 2.0) - 1.0).abs() < 1e-12);
    }
}
