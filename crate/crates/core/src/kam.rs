//! Reducibility ladder: conjugations by `exp(-Psi)` with 2x2-block small
//! divisors until the remainder is below target, and the inverse of the
//! limit operator.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{KamError, MelnikovSign, MelnikovWitness, Result};
use crate::lattice::{operator_norm, AngleLattice, Grid, OperatorMap, SequenceField, SmoothProject};
use crate::linalg::{herm2_eig, CMat, I, ONE, ZERO};
use crate::linearization::{commutator, smoothing_norm, LinHamOperator, SymplecticTransform, TransformKind};
use crate::tolerances::{EXP_ORDER_CAP, PRUNE_REL, S0, SIGMA, SLACK_KAM, TARGET_REM_REL, TOL_EXP, TOL_HOM, TOL_STRUCT};

pub type Block2 = [[C64; 2]; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelnikovParams {
    pub gamma: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub c0: f64,
}

impl MelnikovParams {
    pub fn new(gamma: f64, tau: f64) -> Self {
        let alpha = 6.0 * tau + 4.0;
        MelnikovParams { gamma, tau, alpha, beta: alpha + 1.0, c0: 2.0 * tau + 2.0 + alpha }
    }
}

/// `<n> = max(1, |n|)` on integers, as a float.
fn br(n: i64) -> f64 {
    n.unsigned_abs().max(1) as f64
}

/// `gamma <j^2 -+ k^2> / <l>^tau`.
pub fn second_threshold(gamma: f64, tau: f64, j: i64, k: i64, sign: MelnikovSign, ell_bracket: f64) -> f64 {
    let w = match sign {
        MelnikovSign::Minus => br(j * j - k * k),
        MelnikovSign::Plus => br(j * j + k * k),
    };
    gamma * w / ell_bracket.powf(tau)
}

/// `2 gamma j^2 / <l>^tau`.
pub fn first_threshold(gamma: f64, tau: f64, j: i64, ell_bracket: f64) -> f64 {
    2.0 * gamma * (j * j) as f64 / ell_bracket.powf(tau)
}

/// `N^(1)` blocks `[N]_k^k` over the positive normal sites, with
/// `N = J diag(N^(1), conj N^(1))`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockNormalForm {
    pub sites: Vec<i64>,
    pub blocks: Vec<Block2>,
    pub omega: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockEigen {
    lam: [f64; 2],
    u: Block2,
}

impl BlockNormalForm {
    /// Reads the `w`-`w` pair blocks of the mode-zero part of `N = J A`.
    pub fn from_operator(n_part: &OperatorMap, omega: &[f64]) -> Self {
        let n2 = n_part.rows;
        let n = n2 / 2;
        let b = n_part.block(0);
        let mut blocks = Vec::with_capacity(n / 2);
        let mut sites = Vec::with_capacity(n / 2);
        for p in 0..n / 2 {
            let mut m = [[ZERO; 2]; 2];
            for a in 0..2 {
                for c in 0..2 {
                    m[a][c] = -I * b[(2 * p + a) * n2 + 2 * p + c];
                }
            }
            blocks.push(m);
            sites.push(n_part.row_sites[2 * p + 1].abs());
        }
        BlockNormalForm { sites, blocks, omega: omega.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// `J diag(N1, conj N1)` as a constant operator on the doubled sites.
    pub fn to_operator(&self, lattice: Arc<AngleLattice>, doubled_sites: Vec<i64>) -> OperatorMap {
        let n = 2 * self.len();
        let n2 = 2 * n;
        let mut m = CMat::zeros(n2, n2);
        for (p, b) in self.blocks.iter().enumerate() {
            for a in 0..2 {
                for c in 0..2 {
                    m.data[(2 * p + a) * n2 + 2 * p + c] = I * b[a][c];
                    m.data[(n + 2 * p + a) * n2 + n + 2 * p + c] = -I * b[a][c].conj();
                }
            }
        }
        OperatorMap::constant(lattice, doubled_sites.clone(), doubled_sites, &m)
    }

    /// Largest `|m - m^*|` over the blocks.
    pub fn selfadjoint_defect(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                let mut d = 0.0f64;
                for a in 0..2 {
                    for c in 0..2 {
                        d = d.max((b[a][c] - b[c][a].conj()).norm());
                    }
                }
                d
            })
            .fold(0.0, f64::max)
    }

    /// Sorted eigenvalues `(lambda^-, lambda^+)` of each block.
    pub fn eigenvalues(&self) -> Vec<[f64; 2]> {
        self.eig().into_iter().map(|e| e.lam).collect()
    }

    /// Largest imaginary part among the eigenvalues computed by a general solver.
    pub fn eigenvalue_imag_max(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                let m = DMatrix::from_row_slice(2, 2, &[b[0][0], b[0][1], b[1][0], b[1][1]]);
                m.eigenvalues().map(|ev| ev.iter().map(|z| z.im.abs()).fold(0.0, f64::max)).unwrap_or_else(|| {
                    // complex Schur fallback through the characteristic polynomial
                    let tr = b[0][0] + b[1][1];
                    let det = b[0][0] * b[1][1] - b[0][1] * b[1][0];
                    let disc = (tr * tr - 4.0 * det).sqrt();
                    ((tr + disc) * 0.5).im.abs().max(((tr - disc) * 0.5).im.abs())
                })
            })
            .fold(0.0, f64::max)
    }

    fn eig(&self) -> Vec<BlockEigen> {
        self.blocks.iter().map(|b| {
            let (lam, u) = herm2_eig(*b);
            BlockEigen { lam, u }
        }).collect()
    }
}

/// Verdict of one second-order Melnikov check.
#[derive(Debug, Clone, PartialEq)]
pub enum MelnikovVerdict {
    Ok { inverse_norm: f64, threshold: f64 },
    Violated(Box<MelnikovWitness>),
}

fn kron_op(a: &Block2, b: &Block2, wl: f64, sign: MelnikovSign) -> CMat {
    // vec(X) row-major: (A X)_{ac} = sum A_{ae} X_{ec}; (X B)_{ac} = sum X_{ae} B_{ec}
    let s = if sign == MelnikovSign::Plus { 1.0 } else { -1.0 };
    CMat::from_fn(4, 4, |r, c| {
        let (ra, rc) = (r / 2, r % 2);
        let (ca, cc) = (c / 2, c % 2);
        let mut v = ZERO;
        if r == c {
            v += C64::new(wl, 0.0);
        }
        if rc == cc {
            v += a[ra][ca];
        }
        if ra == ca {
            v += s * b[cc][rc];
        }
        v
    })
}

/// Second-order Melnikov check through the explicit 4x4 operator
/// `X -> omega.l X + N_j X -+ X M_k`, with `M_k = N_k` for the minus family
/// and `conj N_k` for the plus family.
pub fn melnikov_check(
    nf: &BlockNormalForm,
    ell: &[i32],
    j: usize,
    k: usize,
    sign: MelnikovSign,
    gamma: f64,
    tau: f64,
) -> Result<MelnikovVerdict> {
    if sign == MelnikovSign::Minus && j == k && ell.iter().all(|&l| l == 0) {
        return Err(KamError::OutOfRange("L^-(0, j, j) has a zero eigenvalue".into()));
    }
    let wl: f64 = ell.iter().zip(&nf.omega).map(|(l, w)| *l as f64 * w).sum();
    let ellb = ell.iter().map(|l| l.unsigned_abs() as usize).sum::<usize>().max(1) as f64;
    let bk = match sign {
        MelnikovSign::Minus => nf.blocks[k],
        MelnikovSign::Plus => {
            let b = nf.blocks[k];
            [[b[0][0].conj(), b[0][1].conj()], [b[1][0].conj(), b[1][1].conj()]]
        }
    };
    let op = kron_op(&nf.blocks[j], &bk, wl, sign);
    let herm = DMatrix::from_row_slice(4, 4, &op.data);
    let ev = herm.symmetric_eigenvalues();
    let min = ev.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let threshold = second_threshold(gamma, tau, nf.sites[j], nf.sites[k], sign, ellb);
    if min >= threshold {
        Ok(MelnikovVerdict::Ok { inverse_norm: 1.0 / min, threshold })
    } else {
        Ok(MelnikovVerdict::Violated(Box::new(MelnikovWitness {
            ell: ell.to_vec(),
            j: nf.sites[j],
            k: nf.sites[k],
            sign: Some(sign),
            divisor: min,
            threshold,
            level: None,
        })))
    }
}

/// Screens all second-order divisors `omega.l + lambda_a(j) -+ lambda_b(k)` for
/// `|l| <= ncut`; returns the smallest ratio divisor/threshold on success.
pub fn melnikov_screen(
    nf: &BlockNormalForm,
    lattice: &AngleLattice,
    ncut: usize,
    params: &MelnikovParams,
    level: Option<usize>,
) -> Result<f64> {
    let eig = nf.eig();
    let p = nf.len();
    let mut worst = f64::INFINITY;
    for m in 0..lattice.count_within(ncut) {
        let wl = lattice.dot(m, &nf.omega);
        let ellb = lattice.bracket(m);
        for j in 0..p {
            for k in 0..p {
                for sign in [MelnikovSign::Minus, MelnikovSign::Plus] {
                    if sign == MelnikovSign::Minus && j == k && m == 0 {
                        continue;
                    }
                    let thr = second_threshold(params.gamma, params.tau, nf.sites[j], nf.sites[k], sign, ellb);
                    for a in 0..2 {
                        for b in 0..2 {
                            let div = match sign {
                                MelnikovSign::Minus => wl + eig[j].lam[a] - eig[k].lam[b],
                                MelnikovSign::Plus => wl + eig[j].lam[a] + eig[k].lam[b],
                            };
                            if div.abs() < thr {
                                return Err(KamError::MelnikovViolation(Box::new(MelnikovWitness {
                                    ell: lattice.mode(m).to_vec(),
                                    j: nf.sites[j],
                                    k: nf.sites[k],
                                    sign: Some(sign),
                                    divisor: div.abs(),
                                    threshold: thr,
                                    level,
                                })));
                            }
                            worst = worst.min(div.abs() / thr);
                        }
                    }
                }
            }
        }
    }
    Ok(worst)
}

/// First-order divisors `omega.l + lambda_a(j)` for all stored `l`.
pub fn first_melnikov_screen(nf: &BlockNormalForm, lattice: &AngleLattice, gamma: f64, tau: f64) -> Result<f64> {
    let eig = nf.eig();
    let mut worst = f64::INFINITY;
    for m in 0..lattice.len() {
        let wl = lattice.dot(m, &nf.omega);
        let ellb = lattice.bracket(m);
        for (j, e) in eig.iter().enumerate() {
            let thr = first_threshold(gamma, tau, nf.sites[j], ellb);
            for a in 0..2 {
                let div = (wl + e.lam[a]).abs();
                if div < thr {
                    return Err(KamError::FirstMelnikovViolation(Box::new(MelnikovWitness {
                        ell: lattice.mode(m).to_vec(),
                        j: nf.sites[j],
                        k: nf.sites[j],
                        sign: None,
                        divisor: div,
                        threshold: thr,
                        level: None,
                    })));
                }
                worst = worst.min(div / thr);
            }
        }
    }
    Ok(worst)
}

fn mat2(a: &Block2, b: &Block2) -> Block2 {
    let mut o = [[ZERO; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            o[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
        }
    }
    o
}

fn adj2(a: &Block2) -> Block2 {
    [[a[0][0].conj(), a[1][0].conj()], [a[0][1].conj(), a[1][1].conj()]]
}

fn tr2(a: &Block2) -> Block2 {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

fn conj2(a: &Block2) -> Block2 {
    [[a[0][0].conj(), a[0][1].conj()], [a[1][0].conj(), a[1][1].conj()]]
}

/// Solution of the homological equation and the normal-form increment.
#[derive(Debug, Clone)]
pub struct HomologicalSolution {
    pub psi: OperatorMap,
    pub rnf: BlockNormalForm,
}

/// Solves `-(omega.d_phi) Psi - [N, Psi] + Pi_ncut R = R^nf` block by block.
/// Quadrant divisors: `(w,w)`: `omega.l + lambda_a - lambda_b`; `(w,wbar)`: `omega.l + lambda_a + lambda_b`;
/// `(wbar,w)`: `omega.l - lambda_a - lambda_b`; `(wbar,wbar)`: `omega.l - lambda_a + lambda_b`.
pub fn homological_solve(r: &OperatorMap, nf: &BlockNormalForm, ncut: usize, params: &MelnikovParams) -> Result<HomologicalSolution> {
    let lat = r.lattice.clone();
    let n2 = r.rows;
    let n = n2 / 2;
    let p = n / 2;
    let eig = nf.eig();
    let mut psi = r.same_shape();
    let mut rnf = BlockNormalForm { sites: nf.sites.clone(), blocks: vec![[[ZERO; 2]; 2]; p], omega: nf.omega.clone() };
    let keep = lat.count_within(ncut);
    for md in r.supported_modes().into_iter().filter(|&m| m < keep) {
        let wl = lat.dot(md, &nf.omega);
        let ellb = lat.bracket(md);
        let src = r.block(md).to_vec();
        let mut out = vec![ZERO; n2 * n2];
        for qr in 0..2 {
            for qc in 0..2 {
                for j in 0..p {
                    for k in 0..p {
                        let r0 = qr * n + 2 * j;
                        let c0 = qc * n + 2 * k;
                        let mut y = [[ZERO; 2]; 2];
                        let mut any = false;
                        for a in 0..2 {
                            for b in 0..2 {
                                y[a][b] = src[(r0 + a) * n2 + c0 + b];
                                any |= y[a][b] != ZERO;
                            }
                        }
                        if !any {
                            continue;
                        }
                        if md == 0 && qr == qc && j == k {
                            // normal-form part, Psi stays zero here
                            if qr == 0 {
                                for a in 0..2 {
                                    for b in 0..2 {
                                        rnf.blocks[j][a][b] = -I * y[a][b];
                                    }
                                }
                            }
                            continue;
                        }
                        let (uj, uk) = (&eig[j].u, &eig[k].u);
                        let (lj, lk) = (&eig[j].lam, &eig[k].lam);
                        // left/right bases and signs of the eigenvalues in the divisor
                        let (left, right, sj, sk, back_l, back_r) = match (qr, qc) {
                            (0, 0) => (adj2(uj), *uk, 1.0, -1.0, *uj, adj2(uk)),
                            (0, 1) => (adj2(uj), conj2(uk), 1.0, 1.0, *uj, tr2(uk)),
                            (1, 0) => (tr2(uj), *uk, -1.0, -1.0, conj2(uj), adj2(uk)),
                            _ => (tr2(uj), conj2(uk), -1.0, 1.0, conj2(uj), tr2(uk)),
                        };
                        let sign = if sj * sk < 0.0 { MelnikovSign::Minus } else { MelnikovSign::Plus };
                        let thr = second_threshold(params.gamma, params.tau, nf.sites[j], nf.sites[k], sign, ellb);
                        let yt = mat2(&mat2(&left, &y), &right);
                        let mut xt = [[ZERO; 2]; 2];
                        for a in 0..2 {
                            for b in 0..2 {
                                let div = wl + sj * lj[a] + sk * lk[b];
                                if div.abs() < thr {
                                    return Err(KamError::MelnikovViolation(Box::new(MelnikovWitness {
                                        ell: lat.mode(md).to_vec(),
                                        j: nf.sites[j],
                                        k: nf.sites[k],
                                        sign: Some(sign),
                                        divisor: div.abs(),
                                        threshold: thr,
                                        level: None,
                                    })));
                                }
                                xt[a][b] = -I * yt[a][b] / div;
                            }
                        }
                        let x = mat2(&mat2(&back_l, &xt), &back_r);
                        for a in 0..2 {
                            for b in 0..2 {
                                out[(r0 + a) * n2 + c0 + b] = x[a][b];
                            }
                        }
                    }
                }
            }
        }
        psi.block_mut(md).copy_from_slice(&out);
    }
    psi.refresh_support();
    Ok(HomologicalSolution { psi, rnf })
}

/// `-(omega.d_phi) Psi - [N, Psi] + Pi_ncut R - R^nf`, returned with `|R|` for scaling.
pub fn homological_residual(
    psi: &OperatorMap,
    n_op: &OperatorMap,
    r: &OperatorMap,
    rnf: &BlockNormalForm,
    ncut: usize,
    grid: &Grid,
) -> (f64, f64) {
    let mut res = r.smooth_project(ncut);
    res.axpy(-ONE, &psi.omega_dphi(&rnf.omega));
    res.axpy(-ONE, &commutator(n_op, psi, grid));
    let nf_op = rnf.to_operator(r.lattice.clone(), r.row_sites.clone());
    res.axpy(-ONE, &nf_op);
    (operator_norm(&res, S0, 0.0), operator_norm(r, S0, 0.0))
}

/// Composition `Phi_0 o Phi_1 o ... o Phi_nu`.
#[derive(Debug, Clone, Default)]
pub struct TransformChain {
    pub steps: Vec<SymplecticTransform>,
}

impl TransformChain {
    pub fn is_identity(&self) -> bool {
        self.steps.iter().all(|t| t.is_identity())
    }

    pub fn matrix_at(&self, phi: &[f64], dim: usize) -> CMat {
        self.steps.iter().fold(CMat::identity(dim), |acc, t| acc.matmul(&t.matrix_at(phi)))
    }

    /// `Phi v` or `Phi^{-1} v`.
    pub fn apply(&self, v: &SequenceField, grid: &Grid, inverse: bool) -> Result<SequenceField> {
        let mut out = v.clone();
        if inverse {
            for t in &self.steps {
                out = t.apply(&out, grid, true)?;
            }
        } else {
            for t in self.steps.iter().rev() {
                out = t.apply(&out, grid, false)?;
            }
        }
        Ok(out)
    }

    pub fn symplectic_residual(&self, grid: &Grid, samples: usize) -> f64 {
        self.steps.iter().map(|t| t.symplectic_residual(grid, samples)).fold(0.0, f64::max)
    }
}

/// State of the ladder after `nu` steps.
#[derive(Debug, Clone)]
pub struct KamLadderState {
    pub nu: usize,
    pub op: LinHamOperator,
    pub n_scale: f64,
    /// `|R_nu DD|_{s, sigma-1}` at `s0` and `s0 + beta`.
    pub norms_log: Vec<[f64; 2]>,
    /// Truncation `N_{nu-1}` used to produce each logged remainder (none for `nu = 0`).
    pub cuts: Vec<Option<usize>>,
    pub chain: TransformChain,
    pub hom_residuals: Vec<f64>,
    pub exp_orders: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct KamConfig {
    pub n0: f64,
    pub max_steps: usize,
    pub target_rel: f64,
    pub slack: f64,
}

impl Default for KamConfig {
    fn default() -> Self {
        KamConfig { n0: 4.0, max_steps: 12, target_rel: TARGET_REM_REL, slack: SLACK_KAM }
    }
}

/// Smoothing norm of `R` and `|R DD|_{s0+beta, sigma-1}`.
pub fn remainder_norms(r: &OperatorMap, params: &MelnikovParams) -> [f64; 2] {
    [smoothing_norm(r), {
        let w: Vec<f64> = r.col_sites.iter().map(|&k| crate::lattice::dd_weight(k)).collect();
        operator_norm(&r.mul_diag_right(&w), S0 + params.beta, SIGMA - 1.0)
    }]
}

impl KamLadderState {
    pub fn new(l0: &LinHamOperator, params: &MelnikovParams, n0: f64) -> Self {
        KamLadderState {
            nu: 0,
            op: l0.clone(),
            n_scale: n0,
            norms_log: vec![remainder_norms(&l0.r_part, params)],
            cuts: vec![None],
            chain: TransformChain::default(),
            hom_residuals: Vec::new(),
            exp_orders: Vec::new(),
        }
    }

    pub fn ncut(&self) -> usize {
        (self.n_scale.floor() as usize).min(self.op.r_part.lattice.cutoff())
    }

    pub fn normal_form(&self) -> BlockNormalForm {
        BlockNormalForm::from_operator(&self.op.n_part, &self.op.omega)
    }
}

/// Conjugation of `omega.d_phi + N + R` by `exp(X)`, keeping `N` out of the grid products.
fn conjugate_split(n_op: &OperatorMap, r: &OperatorMap, x: &OperatorMap, omega: &[f64], grid: &Grid) -> Result<(OperatorMap, usize)> {
    let mut term = x.omega_dphi(omega);
    term.axpy(ONE, &commutator(n_op, x, grid));
    term.axpy(ONE, &commutator(r, x, grid));
    let base = term.wiener_fro();
    let mut out = n_op.add(r);
    out.axpy(ONE, &term);
    if base == 0.0 {
        return Ok((out, 1));
    }
    for k in 2..=EXP_ORDER_CAP {
        term = commutator(&term, x, grid).scale(C64::new(1.0 / k as f64, 0.0));
        let top = term.supported_modes().iter().map(|&m| term.block_fro(m)).fold(0.0, f64::max);
        term.prune(PRUNE_REL * top);
        out.axpy(ONE, &term);
        let t = term.wiener_fro();
        if t <= TOL_EXP * base {
            out.refresh_support();
            return Ok((out, k));
        }
        if k == EXP_ORDER_CAP {
            return Err(KamError::ExpDivergence { order: k, tail: t });
        }
    }
    unreachable!()
}

/// One ladder step: solve the homological equation at truncation `N_nu`,
/// conjugate by `exp(-Psi)`, split again.
pub fn kam_step(state: &KamLadderState, params: &MelnikovParams, grid: &Grid) -> Result<KamLadderState> {
    let ncut = state.ncut();
    let nf = state.normal_form();
    let rp = state.op.r_part.smooth_project(ncut);
    let sol = homological_solve(&rp, &nf, ncut, params)?;
    let (res, rn) = homological_residual(&sol.psi, &state.op.n_part, &rp, &sol.rnf, ncut, grid);
    if rn > 0.0 && res > TOL_HOM * rn {
        return Err(KamError::StructureViolation { what: "homological residual".into(), residual: res / rn });
    }
    let x = sol.psi.scale(-ONE);
    let (z, order) = conjugate_split(&state.op.n_part, &state.op.r_part, &x, &state.op.omega, grid)?;
    let op = LinHamOperator::from_total(&state.op.omega, &z);
    let mut next = state.clone();
    next.nu += 1;
    next.n_scale = state.n_scale.powf(1.5);
    next.norms_log.push(remainder_norms(&op.r_part, params));
    next.cuts.push(Some(ncut));
    next.chain.steps.push(SymplecticTransform { kind: TransformKind::ExpOfField, generator: x, phases: None });
    next.hom_residuals.push(if rn > 0.0 { res / rn } else { 0.0 });
    next.exp_orders.push(order);
    next.op = op;
    Ok(next)
}

/// Fit of `lambda_k^+- - 4 pi^2 k^2 = c + rho / k`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigenFit {
    pub c: f64,
    pub slope: f64,
    /// `max_k |k (lambda_k - 4 pi^2 k^2 - c)|`.
    pub c_bound: f64,
}

pub fn fit_eigenvalues(sites: &[i64], eig: &[[f64; 2]]) -> EigenFit {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (k, l) in sites.iter().zip(eig) {
        let base = crate::hamiltonian::FOUR_PI2 * (k * k) as f64;
        for v in l {
            xs.push(1.0 / *k as f64);
            ys.push(v - base);
        }
    }
    let nx = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / nx;
    let my = ys.iter().sum::<f64>() / nx;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let c = my - slope * mx;
    let c_bound = xs.iter().zip(&ys).map(|(x, y)| ((y - c) / x).abs()).fold(0.0, f64::max);
    EigenFit { c, slope, c_bound }
}

#[derive(Debug, Clone)]
pub struct KamResult {
    pub n_inf: BlockNormalForm,
    pub chain: TransformChain,
    pub state: KamLadderState,
    pub eigenvalues: Vec<[f64; 2]>,
    pub fit: EigenFit,
    pub target: f64,
    /// `gamma^{-1} N0^{C0} |R0 DD|_{s0+beta, sigma-1}`; the contraction law is enforced when it is `<= 1`.
    pub gate_value: f64,
    /// Per step: measured remainder over `|R0|_{+beta} N^{-alpha}`.
    pub contraction_ratios: Vec<f64>,
    /// Fitted decay exponent of the remainder against the truncations, when at least two steps ran.
    pub decay_exponent: Option<f64>,
}

/// Least-squares slope of `log |R_nu|` against `log N_{nu-1}` (sign flipped).
/// Steps whose truncation reached the lattice cutoff leave no tail and are skipped.
pub fn decay_exponent(norms: &[[f64; 2]], cuts: &[Option<usize>], cutoff: usize) -> Option<f64> {
    let pts: Vec<(f64, f64)> = norms
        .iter()
        .zip(cuts)
        .filter_map(|(nrm, c)| c.filter(|&c| nrm[0] > 0.0 && c < cutoff).map(|c| ((c as f64).ln(), nrm[0].ln())))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(-sxy / sxx)
}

/// Iterates the ladder until `|R DD|_{s0,sigma-1} <= target`.
pub fn reduce_to_limit(l0: &LinHamOperator, params: &MelnikovParams, cfg: &KamConfig, grid: &Grid) -> Result<KamResult> {
    let mut state = KamLadderState::new(l0, params, cfg.n0);
    let [r0, r0b] = state.norms_log[0];
    let target = cfg.target_rel * r0;
    let gate_value = cfg.n0.powf(params.c0) * r0b / params.gamma;
    let gated = gate_value <= 1.0;
    let mut ratios = Vec::new();
    let lat = l0.r_part.lattice.clone();
    while state.norms_log.last().expect("nonempty")[0] > target {
        if state.nu >= cfg.max_steps {
            return Err(KamError::MaxSteps { steps: state.nu, remainder: state.norms_log[state.nu][0] });
        }
        let nf = state.normal_form();
        let sad = nf.selfadjoint_defect();
        if sad > TOL_STRUCT * nf.blocks.iter().map(|b| b[0][0].norm().max(b[1][1].norm())).fold(1.0, f64::max) {
            return Err(KamError::StructureViolation { what: "normal form blocks".into(), residual: sad });
        }
        melnikov_screen(&nf, &lat, state.ncut(), params, Some(state.nu))?;
        let n_prev = state.ncut() as f64;
        state = kam_step(&state, params, grid)?;
        let measured = state.norms_log[state.nu][0];
        let bound = r0b * n_prev.powf(-params.alpha);
        let ratio = if bound > 0.0 { measured / bound } else { 0.0 };
        tracing::debug!(nu = state.nu, cut = n_prev, remainder = measured, ratio, "kam step");
        ratios.push(ratio);
        if gated && ratio > cfg.slack {
            return Err(KamError::ContractionFailure { step: state.nu, measured, bound: cfg.slack * bound });
        }
    }
    let n_inf = state.normal_form();
    let eigenvalues = n_inf.eigenvalues();
    let fit = fit_eigenvalues(&n_inf.sites, &eigenvalues);
    let decay = decay_exponent(&state.norms_log, &state.cuts, lat.cutoff());
    Ok(KamResult {
        n_inf,
        chain: state.chain.clone(),
        state,
        eigenvalues,
        fit,
        target,
        gate_value,
        contraction_ratios: ratios,
        decay_exponent: decay,
    })
}

/// Solves `(omega.d_phi + N_inf) h = g` per Fourier mode with 2x2 solves.
pub fn linf_inverse(nf: &BlockNormalForm, g: &SequenceField, gamma: f64, tau: f64) -> Result<SequenceField> {
    let lat = g.lattice.clone();
    let n2 = g.ncomp();
    let n = n2 / 2;
    let mut h = g.same_shape();
    for md in 0..lat.len() {
        let wl = lat.dot(md, &nf.omega);
        let ellb = lat.bracket(md);
        for (p, b) in nf.blocks.iter().enumerate() {
            for half in 0..2 {
                let off = half * n + 2 * p;
                let rhs = [g.get(md, off), g.get(md, off + 1)];
                if rhs[0] == ZERO && rhs[1] == ZERO {
                    continue;
                }
                // w rows: i (omega.l + N1); wbar rows: i (omega.l - conj N1)
                let m: Block2 = if half == 0 {
                    [[b[0][0] + wl, b[0][1]], [b[1][0], b[1][1] + wl]]
                } else {
                    [[wl - b[0][0].conj(), -b[0][1].conj()], [-b[1][0].conj(), wl - b[1][1].conj()]]
                };
                let (lam, _) = herm2_eig(m);
                let thr = first_threshold(gamma, tau, nf.sites[p], ellb);
                let mind = lam[0].abs().min(lam[1].abs());
                if mind < thr {
                    return Err(KamError::FirstMelnikovViolation(Box::new(MelnikovWitness {
                        ell: lat.mode(md).to_vec(),
                        j: nf.sites[p],
                        k: nf.sites[p],
                        sign: None,
                        divisor: mind,
                        threshold: thr,
                        level: None,
                    })));
                }
                let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
                let x0 = (m[1][1] * rhs[0] - m[0][1] * rhs[1]) / det;
                let x1 = (m[0][0] * rhs[1] - m[1][0] * rhs[0]) / det;
                h.set(md, off, -I * x0);
                h.set(md, off + 1, -I * x1);
            }
        }
    }
    Ok(h)
}

/// `(omega.d_phi + N_inf) h`.
pub fn linf_apply(nf: &BlockNormalForm, h: &SequenceField, grid: &Grid) -> SequenceField {
    let op = nf.to_operator(h.lattice.clone(), h.sites.clone());
    let mut out = op.apply(h, grid);
    out.axpy(ONE, &h.omega_dphi(&nf.omega));
    out
}

/// `exp(-N_inf t)` on the doubled normal coordinates, blockwise from the
/// 2x2 eigen-decompositions.
pub fn normal_flow(nf: &BlockNormalForm, t: f64) -> CMat {
    let n = 2 * nf.len();
    let mut out = CMat::zeros(2 * n, 2 * n);
    for (p, e) in nf.eig().iter().enumerate() {
        let ph = [C64::from_polar(1.0, -e.lam[0] * t), C64::from_polar(1.0, -e.lam[1] * t)];
        for a in 0..2 {
            for c in 0..2 {
                let v: C64 = (0..2).map(|k| e.u[a][k] * ph[k] * e.u[c][k].conj()).sum();
                out.data[(2 * p + a) * 2 * n + 2 * p + c] = v;
                out.data[(n + 2 * p + a) * 2 * n + n + 2 * p + c] = v.conj();
            }
        }
    }
    out
}

/// Self-adjoint blocks near `diag(k^2, k^2)` with small coupling.
pub fn synthetic_normal_form(rng: &mut impl rand::Rng, sites: &[i64], omega: &[f64]) -> BlockNormalForm {
    let blocks = sites
        .iter()
        .map(|&k| {
            let base = (k * k) as f64;
            let a = base + rng.gen_range(-0.2..0.2);
            let d = base + rng.gen_range(-0.2..0.2);
            let b = C64::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
            [[C64::new(a, 0.0), b], [b.conj(), C64::new(d, 0.0)]]
        })
        .collect();
    BlockNormalForm { sites: sites.to_vec(), blocks, omega: omega.to_vec() }
}

/// Hamiltonian remainder `J A` with Fourier decay `<l>^{-p}` and no normal-form part.
pub fn synthetic_remainder(rng: &mut impl rand::Rng, lat: &Arc<AngleLattice>, sites: &[i64], amp: f64, p: f64) -> OperatorMap {
    let n = 2 * sites.len();
    let mut single = Vec::new();
    for &k in sites {
        single.push(-k);
        single.push(k);
    }
    let mut dsites = single.clone();
    dsites.extend_from_slice(&single);
    let mut b = OperatorMap::square(lat.clone(), single.clone());
    let mut c = OperatorMap::square(lat.clone(), single.clone());
    for md in 0..lat.len() {
        let w = amp * lat.bracket(md).powf(-p);
        let mb = CMat::from_fn(n, n, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * w);
        let mc = CMat::from_fn(n, n, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * w);
        b.set_block(md, &mb);
        c.set_block(md, &mc);
    }
    let b = b.add(&b.adjoint_op()).scale(C64::new(0.5, 0.0));
    let c = c.add(&c.transpose_op()).scale(C64::new(0.5, 0.0));
    let mut a = OperatorMap::square(lat.clone(), dsites);
    a.put_block(0, 0, &b);
    a.put_block(0, n, &c);
    a.put_block(n, 0, &c.conj_op());
    a.put_block(n, n, &b.conj_op());
    let z = crate::linearization::j_left(&a);
    crate::linearization::split_normal(&z).1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::SiteKind;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::FRAC_1_SQRT_2;

    fn diag_nf(sites: &[i64], vals: &[[f64; 2]], omega: &[f64]) -> BlockNormalForm {
        BlockNormalForm {
            sites: sites.to_vec(),
            blocks: vals.iter().map(|v| [[C64::new(v[0], 0.0), ZERO], [ZERO, C64::new(v[1], 0.0)]]).collect(),
            omega: omega.to_vec(),
        }
    }

    #[test]
    fn params_relations() {
        let p = MelnikovParams::new(0.1, 3.0);
        assert_eq!(p.alpha, 22.0);
        assert_eq!(p.beta, 23.0);
        assert_eq!(p.c0, 30.0);
    }

    #[test]
    fn melnikov_diagonal_blocks_eigenvalues() {
        let nf = diag_nf(&[2, 3], &[[4.0, 4.5], [9.0, 9.2]], &[1.0]);
        // L^- eigenvalues are omega.l + n_a - n_b
        let herm = kron_op(&nf.blocks[0], &nf.blocks[1], 1.0, MelnikovSign::Minus);
        let ev = DMatrix::from_row_slice(4, 4, &herm.data).symmetric_eigenvalues();
        let mut got: Vec<f64> = ev.iter().cloned().collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want = vec![1.0 + 4.0 - 9.0, 1.0 + 4.0 - 9.2, 1.0 + 4.5 - 9.0, 1.0 + 4.5 - 9.2];
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(melnikov_check(&nf, &[0], 0, 0, MelnikovSign::Minus, 0.1, 1.0).is_err());
    }

    #[test]
    fn melnikov_scalar_sanity() {
        // n_j - n_k = -0.5 on all four pairs, omega.l = 1
        let nf = diag_nf(&[2, 3], &[[1.0, 1.0], [2.5, 2.5]], &[1.0]);
        let v = melnikov_check(&nf, &[1], 0, 1, MelnikovSign::Minus, 0.01, 1.0).unwrap();
        match v {
            MelnikovVerdict::Ok { inverse_norm, .. } => assert!((inverse_norm - 2.0).abs() < 1e-12),
            _ => panic!("expected ok"),
        }
        // 0.5 < gamma <4 - 9> / <1> = 0.2 * 5
        let v = melnikov_check(&nf, &[1], 0, 1, MelnikovSign::Minus, 0.2, 1.0).unwrap();
        assert!(matches!(v, MelnikovVerdict::Violated(_)));
    }

    #[test]
    fn homological_single_mode_closed_form() {
        let lat = Arc::new(AngleLattice::new(1, 4));
        let grid = Grid::for_products(lat.clone());
        let nf = diag_nf(&[2, 3], &[[4.0, 4.3], [9.0, 9.1]], &[FRAC_1_SQRT_2]);
        let n_op = nf.to_operator(lat.clone(), vec![-2, 2, -3, 3, -2, 2, -3, 3]);
        let mut r = n_op.same_shape();
        let m = lat.index_of(&[2]).unwrap();
        let rv = C64::new(0.3, -0.2);
        r.block_mut(m)[8 + 2] = rv;
        let params = MelnikovParams::new(1e-3, 1.0);
        let sol = homological_solve(&r, &nf, 4, &params).unwrap();
        let want = -I * rv / (FRAC_1_SQRT_2 * 2.0 + 4.3 - 9.0);
        assert!((sol.psi.block(m)[8 + 2] - want).norm() < 1e-14);
        let (res, rn) = homological_residual(&sol.psi, &n_op, &r, &sol.rnf, 4, &grid);
        assert!(res <= 1e-12 * rn);
        let zero = homological_solve(&r.same_shape(), &nf, 4, &params).unwrap();
        assert_eq!(zero.psi.max_abs(), 0.0);
    }

    #[test]
    fn homological_random_blocks() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let lat = Arc::new(AngleLattice::new(2, 3));
        let grid = Grid::for_products(lat.clone());
        let sites = [2i64, 3, 5];
        let omega = [FRAC_1_SQRT_2, 1.3247];
        let nf = synthetic_normal_form(&mut rng, &sites, &omega);
        let params = MelnikovParams::new(1e-3, 3.0);
        melnikov_screen(&nf, &lat, 3, &params, None).unwrap();
        let r = synthetic_remainder(&mut rng, &lat, &sites, 1e-3, 2.0);
        let n_op = nf.to_operator(lat.clone(), r.row_sites.clone());
        let sol = homological_solve(&r, &nf, 3, &params).unwrap();
        let (res, rn) = homological_residual(&sol.psi, &n_op, &r, &sol.rnf, 3, &grid);
        assert!(res <= TOL_HOM * rn, "{res} {rn}");
        // Hamiltonian layout of Psi
        assert!(crate::linearization::hamiltonian_defect(&sol.psi) < 1e-12);
    }

    #[test]
    fn ladder_fixed_point_and_one_step_absorption() {
        let lat = Arc::new(AngleLattice::new(1, 4));
        let grid = Grid::for_products(lat.clone());
        let nf = diag_nf(&[2, 3], &[[4.0, 4.3], [9.0, 9.1]], &[FRAC_1_SQRT_2]);
        let ds = vec![-2, 2, -3, 3, -2, 2, -3, 3];
        let n_op = nf.to_operator(lat.clone(), ds.clone());
        let l0 = LinHamOperator { omega: nf.omega.clone(), n_part: n_op.clone(), r_part: n_op.same_shape() };
        let params = MelnikovParams::new(1e-3, 1.0);
        let res = reduce_to_limit(&l0, &params, &KamConfig::default(), &grid).unwrap();
        assert_eq!(res.state.nu, 0);
        assert!(res.chain.is_identity());
        // constant diagonal remainder inside the blocks is moved into N by the split
        let mut pert = n_op.same_shape();
        pert.block_mut(0)[0] = C64::new(0.0, 0.01);
        pert.block_mut(0)[4 * 8 + 4] = C64::new(0.0, -0.01);
        let l0 = LinHamOperator::from_total(&nf.omega, &n_op.add(&pert));
        assert_eq!(l0.r_part.max_abs(), 0.0);
        assert!((l0.n_part.block(0)[0] - C64::new(0.0, 4.01)).norm() < 1e-15);
    }

    #[test]
    fn ladder_converges_on_synthetic_remainder() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let lat = Arc::new(AngleLattice::new(1, 8));
        let grid = Grid::for_products(lat.clone());
        let sites = [2i64, 3, 4];
        let nf = synthetic_normal_form(&mut rng, &sites, &[FRAC_1_SQRT_2]);
        let r = synthetic_remainder(&mut rng, &lat, &sites, 1e-3, 3.0);
        let n_op = nf.to_operator(lat.clone(), r.row_sites.clone());
        let l0 = LinHamOperator { omega: nf.omega.clone(), n_part: n_op.clone(), r_part: r };
        let params = MelnikovParams::new(1e-3, 1.0);
        let cfg = KamConfig { n0: 8.0, ..KamConfig::default() };
        let res = reduce_to_limit(&l0, &params, &cfg, &grid).unwrap();
        assert!(res.state.norms_log.last().unwrap()[0] <= res.target);
        assert!(res.n_inf.selfadjoint_defect() < 1e-12);
        for e in &res.eigenvalues {
            assert!(e[0] <= e[1]);
        }
        assert!(res.n_inf.eigenvalue_imag_max() < 1e-10);
        // back-conjugating the limit recovers the start
        let mut z = res.n_inf.to_operator(lat.clone(), n_op.row_sites.clone()).add(&res.state.op.r_part);
        for t in res.chain.steps.iter().rev() {
            z = t.conjugate_back(&z, &nf.omega, &grid).unwrap();
        }
        let diff = z.sub(&l0.total());
        assert!(diff.wiener_fro() < 1e-9 * l0.total().wiener_fro());
        assert!(res.chain.symplectic_residual(&grid, 16) < 1e-10);
    }

    #[test]
    fn linf_inverse_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let lat = Arc::new(AngleLattice::new(2, 3));
        let grid = Grid::for_products(lat.clone());
        let sites = [2i64, 3];
        let nf = synthetic_normal_form(&mut rng, &sites, &[FRAC_1_SQRT_2, 1.3247]);
        let ds = vec![-2, 2, -3, 3, -2, 2, -3, 3];
        let mut g = SequenceField::zeros(lat.clone(), ds.clone(), SiteKind::Doubled);
        assert_eq!(linf_inverse(&nf, &g, 1e-3, 3.0).unwrap().max_abs(), 0.0);
        for v in g.coeffs.iter_mut() {
            *v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        let h = linf_inverse(&nf, &g, 1e-3, 3.0).unwrap();
        let back = linf_apply(&nf, &h, &grid);
        assert!(back.sub(&g).max_abs() < 1e-10);
        // closed form on a diagonal block
        let d = diag_nf(&[2], &[[4.0, 4.4]], &[FRAC_1_SQRT_2, 1.3247]);
        let mut g1 = SequenceField::zeros(lat.clone(), vec![-2, 2, -2, 2], SiteKind::Doubled);
        let m = lat.index_of(&[1, -1]).unwrap();
        g1.set(m, 0, ONE);
        g1.set(m, 1, C64::new(2.0, 0.0));
        let h1 = linf_inverse(&d, &g1, 1e-3, 3.0).unwrap();
        let wl = FRAC_1_SQRT_2 - 1.3247;
        assert!((h1.get(m, 0) - ONE / (I * (wl + 4.0))).norm() < 1e-14);
        assert!((h1.get(m, 1) - C64::new(2.0, 0.0) / (I * (wl + 4.4))).norm() < 1e-14);
    }

    #[test]
    fn eigen_fit_recovers_constants() {
        let sites = [2i64, 3, 4, 5, 6];
        let eig: Vec<[f64; 2]> = sites
            .iter()
            .map(|&k| {
                let b = crate::hamiltonian::FOUR_PI2 * (k * k) as f64 + 0.25;
                [b - 0.5 / k as f64, b + 0.5 / k as f64]
            })
            .collect();
        let f = fit_eigenvalues(&sites, &eig);
        assert!((f.c - 0.25).abs() < 1e-10);
        assert!((f.c_bound - 0.5).abs() < 1e-10);
    }
}
