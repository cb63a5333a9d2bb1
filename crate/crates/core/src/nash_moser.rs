//! Outer quasi-Newton iteration for the torus, with smoothing truncations,
//! a tightening Melnikov ladder and a linear-stability check of the result.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{KamError, MelnikovWitness, Result};
use crate::geometry::{gamma_chart, isotropize, taylor_k, Chart, IsotropicEmbedding, TaylorCoefficients};
use crate::hamiltonian::{residual_f, zeta_compatibility, Model, ResidualTriple, TorusEmbedding};
use crate::kam::{first_melnikov_screen, normal_flow, reduce_to_limit, KamConfig, KamResult, MelnikovParams, TransformChain};
use crate::lattice::{sobolev_norm, Discretization, Grid, SequenceField, SiteKind, SmoothProject};
use crate::linalg::{CMat, ONE, ZERO};
use crate::linearization::{linearize, Linearization};
use crate::right_inverse::{approximate_right_inverse, j2_field, RightInverseBundle};
use crate::tolerances::{S0, SIGMA, TOL_NM};
use crate::C64;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Exponent constants of the iteration for a given `mu1`; recorded, not enforced.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct NmConstants {
    pub mu1: u32,
    pub eta1: f64,
    pub alpha1: f64,
    pub kappa1: f64,
    pub beta1: f64,
}

impl NmConstants {
    pub fn new(mu1: u32) -> Self {
        let m = mu1 as f64;
        NmConstants { mu1, eta1: 6.0 * m + 1.0, alpha1: 2.0 * m + 2.0 / 3.0, kappa1: 6.0 * m + 1.0, beta1: 12.0 * m + 2.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NashMoserConfig {
    pub n0: f64,
    pub gamma: f64,
    pub tau: f64,
    pub max_outer: usize,
    pub tol_nm: f64,
    /// Threshold for `eps gamma^-4`.
    pub delta2: f64,
    pub mu1: u32,
    pub kam_n0: f64,
    pub kam_max_steps: usize,
    pub kam_target_rel: f64,
    pub kam_slack: f64,
}

impl NashMoserConfig {
    pub fn new(gamma: f64, n_tangential: usize) -> Self {
        let k = KamConfig::default();
        NashMoserConfig {
            n0: 3.0,
            gamma,
            tau: (2 * n_tangential + 1) as f64,
            max_outer: 8,
            tol_nm: TOL_NM,
            delta2: 1e-2,
            mu1: 1,
            kam_n0: k.n0,
            kam_max_steps: k.max_steps,
            kam_target_rel: k.target_rel,
            kam_slack: k.slack,
        }
    }

    pub fn kam(&self) -> KamConfig {
        KamConfig { n0: self.kam_n0, max_steps: self.kam_max_steps, target_rel: self.kam_target_rel, slack: self.kam_slack }
    }

    /// `N_n = N0^{(3/2)^n}`, capped at the lattice cutoff.
    pub fn cut(&self, n: usize, cutoff: usize) -> usize {
        let v = self.n0.powf(1.5f64.powi(n as i32));
        if v >= cutoff as f64 {
            cutoff
        } else {
            v.floor() as usize
        }
    }

    pub fn gamma_n(&self, n: usize) -> f64 {
        self.gamma * (1.0 + 0.5f64.powi(n as i32))
    }
}

/// Full linear-algebra stack at one iterate.
#[derive(Debug, Clone)]
pub struct IterateStack {
    pub iso: IsotropicEmbedding,
    pub linearization: Linearization,
    pub kam: KamResult,
    pub bundle: RightInverseBundle,
    pub first_melnikov_margin: f64,
}

impl IterateStack {
    pub fn chart(&self) -> &Chart {
        &self.bundle.chart
    }

    pub fn taylor(&self) -> &TaylorCoefficients {
        &self.bundle.taylor
    }
}

/// Isotropic correction, chart, Taylor data, linearization, KAM ladder and right-inverse bundle.
#[allow(clippy::too_many_arguments)]
pub fn build_stack(
    model: &Model,
    iota: &TorusEmbedding,
    zeta: &[f64],
    omega: &[f64],
    gamma: f64,
    tau: f64,
    kam_cfg: &KamConfig,
    disc: &Discretization,
) -> Result<IterateStack> {
    let grid = &disc.grid;
    let iso = isotropize(iota, None, omega, gamma, tau, disc)?;
    let chart = gamma_chart(&iso, grid)?;
    let taylor = taylor_k(model, &iso, &chart, zeta, grid)?;
    let lin = linearize(model, &iso, &taylor, omega, gamma, tau, grid)?;
    let params = MelnikovParams::new(gamma, tau);
    let kam = reduce_to_limit(&lin.l0, &params, kam_cfg, grid)?;
    let first_melnikov_margin = first_melnikov_screen(&kam.n_inf, disc.lattice(), gamma, tau)?;
    let mut frames = TransformChain { steps: lin.transforms.clone() };
    frames.steps.extend(kam.chain.steps.iter().cloned());
    let theta = iso.embedding().theta;
    let bundle = RightInverseBundle::new(taylor, chart, theta, frames, kam.n_inf.clone(), omega, gamma, tau, grid)?;
    Ok(IterateStack { iso, linearization: lin, kam, bundle, first_melnikov_margin })
}

/// Fourier data of an embedding for reports.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TorusCoefficients {
    pub modes: Vec<Vec<i32>>,
    pub tangential_sites: Vec<i64>,
    pub normal_sites: Vec<i64>,
    /// `[mode][component] = [re, im]`.
    pub theta: Vec<Vec<[f64; 2]>>,
    pub y: Vec<Vec<[f64; 2]>>,
    pub z: Vec<Vec<[f64; 2]>>,
}

impl TorusCoefficients {
    pub fn from_embedding(e: &TorusEmbedding) -> Self {
        let lat = &e.theta.lattice;
        let dump = |f: &SequenceField| -> Vec<Vec<[f64; 2]>> {
            (0..lat.len()).map(|m| (0..f.ncomp()).map(|c| [f.get(m, c).re, f.get(m, c).im]).collect()).collect()
        };
        TorusCoefficients {
            modes: (0..lat.len()).map(|m| lat.mode(m).to_vec()).collect(),
            tangential_sites: e.theta.sites.clone(),
            normal_sites: e.z.sites.clone(),
            theta: dump(&e.theta),
            y: dump(&e.y),
            z: dump(&e.z),
        }
    }
}

/// One outer iterate.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IterationRecord {
    pub n: usize,
    /// `||F||_{s0}` at the start of the iterate.
    pub residual: f64,
    /// `||F||_{s0 + beta1}`.
    pub residual_high: f64,
    pub zeta_norm: f64,
    pub zeta_ratio: f64,
    pub cut: Option<usize>,
    pub gamma_n: Option<f64>,
    pub step_norm: Option<f64>,
    pub melnikov_margin: Option<f64>,
    pub first_melnikov_margin: Option<f64>,
    pub kam_steps: Option<usize>,
    pub kam_remainders: Vec<f64>,
    pub mbar_cond: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub schema_version: u32,
    pub omega: Vec<f64>,
    pub eps: f64,
    pub config: NashMoserConfig,
    pub constants: NmConstants,
    pub converged: bool,
    pub iterations: Vec<IterationRecord>,
    pub final_residual: f64,
    pub zeta: Vec<f64>,
    pub zeta_compatibility: Vec<f64>,
    /// Ratios `log r_{n+1} / log r_n` over consecutive residuals below one.
    pub log_ratios: Vec<f64>,
    pub eigenvalues: Vec<[f64; 2]>,
    pub y_norm: f64,
    pub z_norm: f64,
    pub theta_norm: f64,
    pub torus: TorusCoefficients,
    pub witness: Option<MelnikovWitness>,
}

/// Converged torus with the stack built at it.
#[derive(Debug, Clone)]
pub struct NashMoserOutcome {
    pub torus: TorusEmbedding,
    pub zeta: Vec<f64>,
    pub report: RunReport,
    pub stack: Option<IterateStack>,
}

fn triple_project(f: &ResidualTriple, n: usize) -> ResidualTriple {
    ResidualTriple {
        e_theta: f.e_theta.smooth_project(n),
        e_y: f.e_y.smooth_project(n),
        e_z: f.e_z.smooth_project(n),
        zeta: f.zeta.clone(),
    }
}

fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn log_ratios(res: &[f64]) -> Vec<f64> {
    res.windows(2)
        .filter(|w| w[0] < 1.0 && w[0] > 0.0 && w[1] > 0.0)
        .map(|w| w[1].ln() / w[0].ln())
        .collect()
}

/// Runs the iteration from `(iota, zeta) = (0, 0)`. A Melnikov exclusion is
/// returned as an error; the partial history is lost in that case, see
/// [`nash_moser_solve_report`] for the variant that keeps it.
pub fn nash_moser_solve(model: &Model, omega: &[f64], cfg: &NashMoserConfig, disc: &Discretization) -> Result<NashMoserOutcome> {
    let (out, err) = nash_moser_solve_report(model, omega, cfg, disc);
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Same as [`nash_moser_solve`] but always returns the report, with the error if any.
pub fn nash_moser_solve_report(
    model: &Model,
    omega: &[f64],
    cfg: &NashMoserConfig,
    disc: &Discretization,
) -> (NashMoserOutcome, Option<KamError>) {
    let d = model.d();
    let constants = NmConstants::new(cfg.mu1);
    let grid = &disc.grid;
    let cutoff = disc.lattice().cutoff();
    let mut iota = TorusEmbedding::zeros(&model.ix);
    let mut zeta = vec![0.0; d];
    let mut iterations = Vec::new();
    let mut witness = None;
    let mut last_stack = None;
    let mut converged = false;
    let mut error = None;

    let gate = model.eps() * cfg.gamma.powi(-4);
    if gate >= cfg.delta2 {
        error = Some(KamError::SmallnessGate { value: gate, threshold: cfg.delta2 });
    }
    let mut f = match residual_f(model, &iota, &zeta, omega, grid) {
        Ok(f) => Some(f),
        Err(e) => {
            error.get_or_insert(e);
            None
        }
    };

    if error.is_none() {
        let kam_cfg = cfg.kam();
        for n in 0..=cfg.max_outer {
            let fv = f.as_ref().expect("residual available");
            let r = fv.norm(S0, SIGMA);
            let zn = vec_norm(&zeta);
            tracing::debug!(n, residual = r, zeta = zn, "outer iterate");
            let mut rec = IterationRecord {
                n,
                residual: r,
                residual_high: fv.norm(S0 + constants.beta1, SIGMA),
                zeta_norm: zn,
                zeta_ratio: if r > 0.0 { zn / r } else { 0.0 },
                cut: None,
                gamma_n: None,
                step_norm: None,
                melnikov_margin: None,
                first_melnikov_margin: None,
                kam_steps: None,
                kam_remainders: Vec::new(),
                mbar_cond: None,
            };
            if r <= cfg.tol_nm {
                converged = true;
                iterations.push(rec);
                break;
            }
            if n == cfg.max_outer {
                iterations.push(rec);
                error = Some(KamError::NoConvergence { iterations: n, residual: r });
                break;
            }
            let gn = cfg.gamma_n(n);
            let cut = cfg.cut(n, cutoff);
            rec.gamma_n = Some(gn);
            rec.cut = Some(cut);
            let step = (|| -> Result<(TorusEmbedding, Vec<f64>, IterateStack)> {
                let stack = build_stack(model, &iota, &zeta, omega, gn, cfg.tau, &kam_cfg, disc)?;
                let g = triple_project(fv, cut);
                let (u, zh) = approximate_right_inverse(&g, &stack.bundle, grid)?;
                Ok((u.smooth_project(cut), zh, stack))
            })();
            match step {
                Ok((u, zh, stack)) => {
                    rec.step_norm = Some((u.norm(S0, SIGMA).powi(2) + vec_norm(&zh).powi(2)).sqrt());
                    rec.melnikov_margin = Some(melnikov_margin_of(&stack, gn, cfg.tau, disc));
                    rec.first_melnikov_margin = Some(stack.first_melnikov_margin);
                    rec.kam_steps = Some(stack.kam.state.nu);
                    rec.kam_remainders = stack.kam.state.norms_log.iter().map(|v| v[0]).collect();
                    rec.mbar_cond = Some(stack.bundle.mbar_cond);
                    iterations.push(rec);
                    iota = iota.sub(&u);
                    for a in 0..d {
                        zeta[a] -= zh[a];
                    }
                    last_stack = Some(stack);
                }
                Err(e) => {
                    iterations.push(rec);
                    if let KamError::MelnikovViolation(w) | KamError::FirstMelnikovViolation(w) = &e {
                        let mut w = (**w).clone();
                        w.level = Some(n);
                        witness = Some(w);
                    }
                    error = Some(e);
                    break;
                }
            }
            match residual_f(model, &iota, &zeta, omega, grid) {
                Ok(nf) => f = Some(nf),
                Err(e) => {
                    error = Some(e);
                    break;
                }
            }
        }
    }

    // stack at the final torus for eigenvalues and stability
    if converged {
        let gn = cfg.gamma_n(iterations.len());
        match build_stack(model, &iota, &zeta, omega, gn, cfg.tau, &cfg.kam(), disc) {
            Ok(s) => last_stack = Some(s),
            Err(e) => {
                converged = false;
                error = Some(e);
            }
        }
    }

    let residuals: Vec<f64> = iterations.iter().map(|r| r.residual).collect();
    let final_residual = residuals.last().cloned().unwrap_or(f64::NAN);
    let compat = f.as_ref().map(|f| zeta_compatibility(&iota, f)).unwrap_or_default();
    let (y_norm, z_norm) = torus_size(&iota);
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        omega: omega.to_vec(),
        eps: model.eps(),
        config: cfg.clone(),
        constants,
        converged: converged && error.is_none(),
        iterations,
        final_residual,
        zeta: zeta.clone(),
        zeta_compatibility: compat,
        log_ratios: log_ratios(&residuals),
        eigenvalues: last_stack.as_ref().map(|s| s.kam.eigenvalues.clone()).unwrap_or_default(),
        y_norm,
        z_norm,
        theta_norm: sobolev_norm(&iota.theta, S0, 0.0),
        torus: TorusCoefficients::from_embedding(&iota),
        witness,
    };
    (NashMoserOutcome { torus: iota, zeta, report, stack: last_stack }, error)
}

fn melnikov_margin_of(stack: &IterateStack, gamma: f64, tau: f64, disc: &Discretization) -> f64 {
    let params = MelnikovParams::new(gamma, tau);
    crate::kam::melnikov_screen(&stack.kam.n_inf, disc.lattice(), disc.lattice().cutoff(), &params, None).unwrap_or(0.0)
}

/// `(||y||_{s0}, ||z||_{s0, sigma})`.
pub fn torus_size(torus: &TorusEmbedding) -> (f64, f64) {
    (sobolev_norm(&torus.y, S0, 0.0), sobolev_norm(&torus.z, S0, SIGMA))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TorusSizeAudit {
    pub y_norm: f64,
    pub z_norm: f64,
    /// Norms divided by `eps / gamma`.
    pub y_const: f64,
    pub z_const: f64,
}

pub fn torus_size_audit(torus: &TorusEmbedding, eps: f64, gamma: f64) -> TorusSizeAudit {
    let (y_norm, z_norm) = torus_size(torus);
    let scale = eps / gamma;
    let c = |v: f64| if scale > 0.0 { v / scale } else { 0.0 };
    TorusSizeAudit { y_norm, z_norm, y_const: c(y_norm), z_const: c(z_norm) }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x.iter().zip(y).filter(|(a, b)| **a > 0.0 && **b > 0.0).map(|(a, b)| (a.ln(), b.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

/// Result of integrating the linearized flow along the torus.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StabilityReport {
    pub horizon: f64,
    pub n_samples: usize,
    pub n_times: usize,
    /// `max_t ||W(t)|| / (||W(0)|| + |upsilon_0|)` over all samples.
    pub sup_ratio: f64,
    /// `max(kappa, (1 + kappa) P)` with `kappa` the frame condition number.
    pub frame_bound: f64,
    pub frame_cond: f64,
    pub particular_gain: f64,
    /// `max |upsilon(t) - upsilon(0)|`.
    pub upsilon_drift: f64,
    pub eigenvalues: Vec<[f64; 2]>,
}

/// Linearized flow in chart coordinates: `upsilon` is conserved and
/// `W(t) = W_p + Phi e^{-L_inf t} Phi^{-1} (W(0) - W_p)` with `L W_p = -J2 K11^t upsilon_0`.
pub struct LinearFlow<'a> {
    stack: &'a IterateStack,
    grid: &'a Grid,
    /// Frame matrix on the coefficient space, columns = images of unit vectors.
    frame: CMat,
    frame_inv: CMat,
}

impl<'a> LinearFlow<'a> {
    pub fn new(stack: &'a IterateStack, grid: &'a Grid) -> Result<Self> {
        let b = &stack.bundle;
        let sites = b.taylor.k02.row_sites.clone();
        let lat = grid.lattice.clone();
        let dim = lat.len() * sites.len();
        let mut frame = CMat::zeros(dim, dim);
        let mut frame_inv = CMat::zeros(dim, dim);
        let mut e = SequenceField::zeros(lat, sites, SiteKind::Doubled);
        for c in 0..dim {
            e.coeffs.iter_mut().for_each(|v| *v = ZERO);
            e.coeffs[c] = ONE;
            let f = b.frames.apply(&e, grid, false)?;
            let fi = b.frames.apply(&e, grid, true)?;
            for r in 0..dim {
                *frame.at_mut(r, c) = f.coeffs[r];
                *frame_inv.at_mut(r, c) = fi.coeffs[r];
            }
        }
        Ok(LinearFlow { stack, grid, frame, frame_inv })
    }

    pub fn frame_cond(&self) -> f64 {
        self.frame.spectral_norm() * self.frame_inv.spectral_norm()
    }

    /// `W_p` for a given `upsilon_0`.
    pub fn particular(&self, ups0: &[f64]) -> Result<SequenceField> {
        let b = &self.stack.bundle;
        let mut u = SequenceField::zeros(self.grid.lattice.clone(), b.theta.sites.clone(), SiteKind::TangentialReal);
        for (a, v) in ups0.iter().enumerate() {
            u.set(0, a, C64::new(*v, 0.0));
        }
        let mut rhs = b.taylor.k11.transpose_op().apply(&u, self.grid);
        rhs.kind = SiteKind::Doubled;
        Ok(b.frak_l_inverse(&j2_field(&rhs), self.grid)?.scale(-ONE))
    }

    /// `W(t)` from `W(0)` and the particular solution.
    pub fn evolve(&self, w0: &SequenceField, wp: &SequenceField, times: &[f64]) -> Vec<SequenceField> {
        let nf = &self.stack.bundle.n_inf;
        let lat = &w0.lattice;
        let n2 = w0.ncomp();
        let h0 = self.frame_inv.matvec(&w0.sub(wp).coeffs);
        times
            .iter()
            .map(|&t| {
                let flow = normal_flow(nf, t);
                let mut h = vec![ZERO; h0.len()];
                for m in 0..lat.len() {
                    let ph = C64::from_polar(1.0, -lat.dot(m, &nf.omega) * t);
                    let src = &h0[m * n2..(m + 1) * n2];
                    for r in 0..n2 {
                        let mut s = ZERO;
                        for c in 0..n2 {
                            s += flow.at(r, c) * src[c];
                        }
                        h[m * n2 + r] = ph * s;
                    }
                }
                let mut out = wp.clone();
                for (o, v) in out.coeffs.iter_mut().zip(self.frame.matvec(&h)) {
                    *o += v;
                }
                out
            })
            .collect()
    }
}

/// Random low-mode doubled field with unit coefficient norm.
pub fn random_normal_datum(rng: &mut impl Rng, like: &SequenceField) -> SequenceField {
    let lat = &like.lattice;
    let n = like.ncomp() / 2;
    let mut h = SequenceField::zeros(lat.clone(), like.sites[..n].to_vec(), SiteKind::NormalComplex);
    for m in 0..lat.len() {
        let amp = 0.3f64.powi(lat.norm1(m) as i32);
        for c in 0..n {
            let k = like.sites[c].unsigned_abs() as f64;
            let w = amp / (1.0 + k * k);
            h.set(m, c, C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * w);
        }
    }
    let d = h.doubled();
    let nrm = d.norm_l2();
    d.scale(C64::new(1.0 / nrm, 0.0))
}

/// Integrates the linearized system at `n_times` points on `[0, horizon]`
/// for `n_samples` random data.
pub fn stability_check(
    stack: &IterateStack,
    grid: &Grid,
    horizon: f64,
    n_samples: usize,
    n_times: usize,
    seed: u64,
) -> Result<StabilityReport> {
    let flow = LinearFlow::new(stack, grid)?;
    let kappa = flow.frame_cond();
    let d = stack.bundle.theta.ncomp();
    let like = SequenceField::zeros(grid.lattice.clone(), stack.bundle.taylor.k02.row_sites.clone(), SiteKind::Doubled);
    let mut gain = 0.0f64;
    for a in 0..d {
        let mut e = vec![0.0; d];
        e[a] = 1.0;
        gain += flow.particular(&e)?.norm_l2().powi(2);
    }
    let gain = gain.sqrt();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let times: Vec<f64> = (0..n_times).map(|i| horizon * i as f64 / (n_times.max(2) - 1) as f64).collect();
    let mut sup = 0.0f64;
    let mut drift = 0.0f64;
    for _ in 0..n_samples {
        let w0 = random_normal_datum(&mut rng, &like);
        let ups0: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ups_norm = vec_norm(&ups0);
        let wp = flow.particular(&ups0)?;
        // second row: upsilon' = 0
        let ups_t = ups0.clone();
        drift = drift.max(ups_t.iter().zip(&ups0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let denom = w0.norm_l2() + ups_norm;
        for w in flow.evolve(&w0, &wp, &times) {
            sup = sup.max(w.norm_l2() / denom);
        }
    }
    Ok(StabilityReport {
        horizon,
        n_samples,
        n_times,
        sup_ratio: sup,
        frame_bound: kappa.max((1.0 + kappa) * gain),
        frame_cond: kappa,
        particular_gain: gain,
        upsilon_drift: drift,
        eigenvalues: stack.kam.eigenvalues.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{xi_of_omega, FrequencyModel, Perturbation};
    use crate::lattice::IndexSets;

    fn instance(eps: f64, k: i64, l: usize) -> (Model, Discretization, Vec<f64>) {
        let ix = IndexSets::new(&[0], k, l).unwrap();
        let freq = FrequencyModel::quartic();
        let omega = vec![0.6];
        let xi = xi_of_omega(&omega, &ix.s, &freq).unwrap();
        let m = Model::new(ix.clone(), xi, freq, Perturbation::reference(k, eps)).unwrap();
        (m, Discretization::new(ix), omega)
    }

    fn config() -> NashMoserConfig {
        let mut cfg = NashMoserConfig::new(0.1, 1);
        cfg.delta2 = 2.0;
        cfg
    }

    #[test]
    fn unperturbed_converges_immediately() {
        let (m, disc, om) = instance(0.0, 8, 6);
        let out = nash_moser_solve(&m, &om, &config(), &disc).unwrap();
        assert_eq!(out.report.iterations.len(), 1);
        assert!(out.report.final_residual < 1e-12);
        assert_eq!(out.torus.norm(S0, SIGMA), 0.0);
        assert!(out.report.converged);
    }

    #[test]
    fn quadratic_convergence_and_determinism() {
        let (m, disc, om) = instance(1e-4, 8, 6);
        let cfg = config();
        let a = nash_moser_solve(&m, &om, &cfg, &disc).unwrap();
        let r = &a.report;
        assert!(r.converged && r.iterations.len() <= 8);
        assert!(r.log_ratios.iter().all(|x| *x >= 1.3), "{:?}", r.log_ratios);
        let res: Vec<f64> = r.iterations.iter().map(|i| i.residual).collect();
        assert!(res.windows(2).all(|w| w[1] < w[0]));
        assert!(r.zeta_compatibility.iter().all(|z| z.abs() <= 10.0 * cfg.tol_nm));
        // support of the iterate within the last truncation
        let last_cut = r.iterations.iter().filter_map(|i| i.cut).next_back().unwrap();
        let keep = disc.lattice().count_within(last_cut);
        assert!(a.torus.y.coeffs[keep..].iter().all(|v| *v == ZERO));
        let b = nash_moser_solve(&m, &om, &cfg, &disc).unwrap();
        assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
    }

    #[test]
    fn resonant_frequency_is_excluded() {
        let ix = IndexSets::new(&[0], 8, 6).unwrap();
        let freq = FrequencyModel::quartic();
        // 6 omega = lambda_1 at the unperturbed torus
        let om = vec![std::f64::consts::PI.powi(2)];
        let xi = xi_of_omega(&om, &ix.s, &freq).unwrap();
        let m = Model::new(ix.clone(), xi, freq, Perturbation::reference(8, 1e-4)).unwrap();
        let (out, err) = nash_moser_solve_report(&m, &om, &config(), &Discretization::new(ix));
        assert!(err.unwrap().is_exclusion());
        let w = out.report.witness.unwrap();
        assert_eq!(w.ell, vec![-6]);
        assert!(!out.report.converged);
    }

    #[test]
    fn smallness_gate() {
        let (m, disc, om) = instance(1e-4, 8, 6);
        let cfg = NashMoserConfig::new(0.1, 1);
        let err = nash_moser_solve(&m, &om, &cfg, &disc).unwrap_err();
        assert!(matches!(err, KamError::SmallnessGate { .. }));
    }

    #[test]
    fn defaults_and_ladders() {
        let cfg = NashMoserConfig::new(0.01, 3);
        assert_eq!(cfg.tau, 7.0);
        assert_eq!(cfg.cut(0, 6), 3);
        assert_eq!(cfg.cut(1, 6), 5);
        assert_eq!(cfg.cut(2, 6), 6);
        assert!((cfg.gamma_n(0) - 0.02).abs() < 1e-15 && (cfg.gamma_n(1) - 0.015).abs() < 1e-15);
        let c = NmConstants::new(1);
        assert_eq!((c.eta1, c.kappa1, c.beta1), (7.0, 7.0, 14.0));
    }

    #[test]
    fn stability_short_horizon() {
        let (m, disc, om) = instance(1e-4, 6, 4);
        let out = nash_moser_solve(&m, &om, &config(), &disc).unwrap();
        let st = out.stack.unwrap();
        let r = stability_check(&st, &disc.grid, 10.0, 2, 200, 1).unwrap();
        assert_eq!(r.upsilon_drift, 0.0);
        assert!(r.sup_ratio.is_finite() && r.sup_ratio <= r.frame_bound * (1.0 + 1e-9));
        // a single normal-form eigenvector only rotates in block coordinates
        let nf = &st.bundle.n_inf;
        let (lam, u) = crate::linalg::herm2_eig(nf.blocks[0]);
        for t in [0.5, 7.0, 300.0] {
            let f = normal_flow(nf, t);
            let n2 = f.rows;
            let mut v = vec![ZERO; n2];
            v[0] = u[0][1];
            v[1] = u[1][1];
            let fv = f.matvec(&v);
            let ph = C64::from_polar(1.0, -lam[1] * t);
            assert!((fv[0] - ph * v[0]).norm() < 1e-12 && (fv[1] - ph * v[1]).norm() < 1e-12);
        }
    }
}
