//! Sampling estimates of the set of frequencies removed by the diophantine and
//! Melnikov conditions.
//!
//! Every threshold is linear in `gamma`, so each sample is reduced once to a
//! critical value per family: the sample is excluded at `gamma` iff its
//! critical value is below `gamma`. A sweep is then a count.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::{KamError, MelnikovSign, MelnikovWitness, Result};
use crate::hamiltonian::{tangential_frequencies, xi_of_omega, FrequencyModel};
use crate::kam::{first_threshold, second_threshold, BlockNormalForm};
use crate::lattice::{AngleLattice, IndexSets};
use crate::linalg::ZERO;
use crate::nash_moser::loglog_slope;
use crate::C64;

pub const DEFAULT_SAMPLES: usize = 4096;
const WITNESS_LOG_CAP: usize = 16;
const SUBFAMILY_SIZE: usize = 4;

/// `tau_* = |S| + 1`.
pub fn tau_star(d: usize) -> f64 {
    d as f64 + 1.0
}

/// `gamma_* = gamma^{1/2}`.
pub fn gamma_star(gamma: f64) -> f64 {
    gamma.sqrt()
}

/// Axis-aligned box of tangential frequencies with a seeded uniform sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

impl FrequencyBox {
    /// Checks that the box is nonempty and that the actions `xi(omega)` are
    /// positive on it. The frequency map is affine, so the corners suffice.
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, n_samples: usize, seed: u64, s: &[i64], model: &FrequencyModel) -> Result<Self> {
        let mut errs = Vec::new();
        if lo.len() != s.len() || hi.len() != s.len() {
            errs.push(format!("box dimension must equal |S| = {}", s.len()));
        } else if lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            errs.push("box is empty".to_string());
        }
        if n_samples == 0 {
            errs.push("n_samples must be positive".to_string());
        }
        if !errs.is_empty() {
            return Err(KamError::Validation(errs));
        }
        let d = s.len();
        for c in 0..1usize << d {
            let corner: Vec<f64> = (0..d).map(|a| if c >> a & 1 == 1 { hi[a] } else { lo[a] }).collect();
            xi_of_omega(&corner, s, model)?;
        }
        Ok(FrequencyBox { lo, hi, n_samples, seed })
    }

    /// Cube of half-width `half_width` around the frequencies of the actions `xi0`.
    pub fn around_actions(xi0: &[f64], half_width: f64, n_samples: usize, seed: u64, s: &[i64], model: &FrequencyModel) -> Result<Self> {
        let c = tangential_frequencies(s, xi0, model);
        let lo = c.iter().map(|v| v - half_width).collect();
        let hi = c.iter().map(|v| v + half_width).collect();
        Self::new(lo, hi, n_samples, seed, s, model)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn samples(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_samples)
            .map(|_| self.lo.iter().zip(&self.hi).map(|(a, b)| rng.gen_range(*a..*b)).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum DiophantineVerdict {
    /// `min_margin = min |omega.l| - gamma / |l|^tau` over the ball.
    Ok { min_margin: f64 },
    Violated { ell: Vec<i32>, value: f64, threshold: f64 },
}

impl DiophantineVerdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, DiophantineVerdict::Ok { .. })
    }
}

/// Exhaustive check of `|omega.l| >= gamma / |l|_1^tau` over `0 < |l|_1 <= l_max`,
/// in order of increasing `|l|_1`.
pub fn diophantine_test(omega: &[f64], gamma: f64, tau: f64, l_max: usize) -> DiophantineVerdict {
    let lat = AngleLattice::new(omega.len(), l_max.max(1));
    diophantine_on(&lat, omega, gamma, tau)
}

fn diophantine_on(lat: &AngleLattice, omega: &[f64], gamma: f64, tau: f64) -> DiophantineVerdict {
    let mut min_margin = f64::INFINITY;
    for m in 1..lat.len() {
        let value = lat.dot(m, omega).abs();
        let threshold = gamma / lat.bracket(m).powf(tau);
        if value < threshold {
            return DiophantineVerdict::Violated { ell: lat.mode(m).to_vec(), value, threshold };
        }
        min_margin = min_margin.min(value - threshold);
    }
    DiophantineVerdict::Ok { min_margin }
}

/// Condition families screened by the survey.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Diophantine,
    First,
    SecondMinus,
    SecondPlus,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Diophantine, Family::First, Family::SecondMinus, Family::SecondPlus];
    pub const MELNIKOV: [Family; 3] = [Family::First, Family::SecondMinus, Family::SecondPlus];

    pub fn name(self) -> &'static str {
        match self {
            Family::Diophantine => "diophantine",
            Family::First => "first",
            Family::SecondMinus => "second_minus",
            Family::SecondPlus => "second_plus",
        }
    }
}

/// Smallest `divisor / threshold` over a family, with the triple attaining it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyMargin {
    pub family: Family,
    pub min_ratio: f64,
    pub witness: Option<MelnikovWitness>,
    pub checked: usize,
}

impl FamilyMargin {
    fn empty(family: Family) -> Self {
        FamilyMargin { family, min_ratio: f64::INFINITY, witness: None, checked: 0 }
    }

    pub fn passes(&self) -> bool {
        self.min_ratio >= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelnikovSurvey {
    pub first: FamilyMargin,
    pub second_minus: FamilyMargin,
    pub second_plus: FamilyMargin,
}

impl MelnikovSurvey {
    pub fn passes(&self) -> bool {
        self.first.passes() && self.second_minus.passes() && self.second_plus.passes()
    }

    pub fn family(&self, f: Family) -> Option<&FamilyMargin> {
        match f {
            Family::First => Some(&self.first),
            Family::SecondMinus => Some(&self.second_minus),
            Family::SecondPlus => Some(&self.second_plus),
            Family::Diophantine => None,
        }
    }
}

/// Unperturbed block normal form at the actions `xi(omega)`: `diag(omega_{-j}, omega_j) + shift`.
pub fn seed_normal_form(ix: &IndexSets, omega: &[f64], model: &FrequencyModel, shift: f64) -> Result<BlockNormalForm> {
    let xi = xi_of_omega(omega, &ix.s, model)?;
    let sum: f64 = xi.iter().sum();
    let mut sites = Vec::with_capacity(ix.s_perp_plus.len());
    let mut blocks = Vec::with_capacity(ix.s_perp_plus.len());
    for &j in &ix.s_perp_plus {
        let mut b = [[ZERO; 2]; 2];
        b[0][0] = C64::new(model.omega(-j, 0.0, sum) + shift, 0.0);
        b[1][1] = C64::new(model.omega(j, 0.0, sum) + shift, 0.0);
        sites.push(j);
        blocks.push(b);
    }
    Ok(BlockNormalForm { sites, blocks, omega: omega.to_vec() })
}

/// Precomputed divisor data for one frequency.
struct Divisors<'a> {
    lat: &'a AngleLattice,
    wl: Vec<f64>,
    w_max: f64,
    sites: Vec<i64>,
    eig: Vec<[f64; 2]>,
}

impl<'a> Divisors<'a> {
    fn new(lat: &'a AngleLattice, omega: &[f64], nf: &BlockNormalForm) -> Self {
        let wl: Vec<f64> = (0..lat.len()).map(|m| lat.dot(m, omega)).collect();
        let w_max = wl.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        Divisors { lat, wl, w_max, sites: nf.sites.clone(), eig: nf.eigenvalues() }
    }

    fn witness(&self, m: usize, j: usize, k: usize, sign: Option<MelnikovSign>, divisor: f64, threshold: f64) -> MelnikovWitness {
        MelnikovWitness {
            ell: self.lat.mode(m).to_vec(),
            j: self.sites[j],
            k: self.sites[k],
            sign,
            divisor,
            threshold,
            level: None,
        }
    }

    /// Calls `f(m, j, k, divisor, threshold)` for every triple of the family at
    /// `gamma`. With `prune_ratio = Some(r)`, families of triples whose divisor
    /// ratio is provably at least `r` are skipped.
    fn for_each(&self, fam: Family, gamma: f64, tau: f64, prune_ratio: Option<f64>, mut f: impl FnMut(usize, usize, usize, f64, f64)) {
        let p = self.eig.len();
        match fam {
            Family::Diophantine => {}
            Family::First => {
                for j in 0..p {
                    let thr_max = first_threshold(gamma, tau, self.sites[j], 1.0);
                    for a in 0..2 {
                        let mu = self.eig[j][a];
                        if let Some(r) = prune_ratio {
                            if mu.abs() - self.w_max >= r * thr_max {
                                continue;
                            }
                        }
                        for m in 0..self.lat.len() {
                            let thr = first_threshold(gamma, tau, self.sites[j], self.lat.bracket(m));
                            f(m, j, j, (self.wl[m] + mu).abs(), thr);
                        }
                    }
                }
            }
            Family::SecondMinus | Family::SecondPlus => {
                let sign = if fam == Family::SecondMinus { MelnikovSign::Minus } else { MelnikovSign::Plus };
                let s = if sign == MelnikovSign::Minus { -1.0 } else { 1.0 };
                for j in 0..p {
                    for k in 0..p {
                        let thr_max = second_threshold(gamma, tau, self.sites[j], self.sites[k], sign, 1.0);
                        for a in 0..2 {
                            for b in 0..2 {
                                let mu = self.eig[j][a] + s * self.eig[k][b];
                                if let Some(r) = prune_ratio {
                                    if mu.abs() - self.w_max >= r * thr_max {
                                        continue;
                                    }
                                }
                                for m in 0..self.lat.len() {
                                    if sign == MelnikovSign::Minus && j == k && m == 0 {
                                        continue;
                                    }
                                    let thr = second_threshold(gamma, tau, self.sites[j], self.sites[k], sign, self.lat.bracket(m));
                                    f(m, j, k, (self.wl[m] + mu).abs(), thr);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn margin(&self, fam: Family, gamma: f64, tau: f64, prune_ratio: Option<f64>) -> FamilyMargin {
        let sign = match fam {
            Family::SecondMinus => Some(MelnikovSign::Minus),
            Family::SecondPlus => Some(MelnikovSign::Plus),
            _ => None,
        };
        let mut out = FamilyMargin::empty(fam);
        let mut best: Option<(usize, usize, usize, f64, f64)> = None;
        self.for_each(fam, gamma, tau, prune_ratio, |m, j, k, div, thr| {
            out.checked += 1;
            let r = div / thr;
            if r < out.min_ratio {
                out.min_ratio = r;
                best = Some((m, j, k, div, thr));
            }
        });
        out.witness = best.map(|(m, j, k, div, thr)| self.witness(m, j, k, sign, div, thr));
        out
    }

    fn diophantine_critical(&self, tau_s: f64) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for m in 1..self.lat.len() {
            let c = self.wl[m].abs() * self.lat.bracket(m).powf(tau_s);
            if c < best.0 {
                best = (c, m);
            }
        }
        best
    }
}

/// Minimal `divisor / threshold` per Melnikov family for `|l|_1 <= l_max` and
/// every block of `nf`. Triples whose divisor is bounded below by
/// `|lambda_j +- lambda_k| - max |omega.l|` above their threshold are skipped
/// when the family already has a ratio below one.
pub fn melnikov_survey(omega: &[f64], nf: &BlockNormalForm, gamma: f64, tau: f64, l_max: usize) -> MelnikovSurvey {
    let lat = AngleLattice::new(omega.len(), l_max.max(1));
    let dv = Divisors::new(&lat, omega, nf);
    MelnikovSurvey {
        first: dv.margin(Family::First, gamma, tau, None),
        second_minus: dv.margin(Family::SecondMinus, gamma, tau, None),
        second_plus: dv.margin(Family::SecondPlus, gamma, tau, None),
    }
}

/// Every violated triple of the Melnikov families. `pruned` skips the triples
/// ruled out by the index bounds.
pub fn melnikov_violations(omega: &[f64], nf: &BlockNormalForm, gamma: f64, tau: f64, l_max: usize, pruned: bool) -> Vec<MelnikovWitness> {
    let lat = AngleLattice::new(omega.len(), l_max.max(1));
    let dv = Divisors::new(&lat, omega, nf);
    let mut out = Vec::new();
    for fam in Family::MELNIKOV {
        let sign = match fam {
            Family::SecondMinus => Some(MelnikovSign::Minus),
            Family::SecondPlus => Some(MelnikovSign::Plus),
            _ => None,
        };
        dv.for_each(fam, gamma, tau, pruned.then_some(1.0), |m, j, k, div, thr| {
            if div < thr {
                out.push(dv.witness(m, j, k, sign, div, thr));
            }
        });
    }
    out
}

/// Fitted constants `C` in the index bounds `j^2 <= C <l>`, `|j^2 +- k^2| <= C <l>`
/// and `|j| <= C gamma_*^{-1} <l>^{tau_*}` over a list of violated triples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct IndexBoundAudit {
    pub first: f64,
    pub second_minus: f64,
    pub second_plus: f64,
    pub diagonal: f64,
}

pub fn index_bound_audit(witnesses: &[MelnikovWitness], gamma: f64, d: usize) -> IndexBoundAudit {
    let mut a = IndexBoundAudit::default();
    let gs = gamma_star(gamma);
    let ts = tau_star(d);
    for w in witnesses {
        let lb = w.ell.iter().map(|l| l.unsigned_abs() as f64).sum::<f64>().max(1.0);
        let (j2, k2) = ((w.j * w.j) as f64, (w.k * w.k) as f64);
        match w.sign {
            None => a.first = a.first.max(j2 / lb),
            Some(MelnikovSign::Plus) => a.second_plus = a.second_plus.max((j2 + k2) / lb),
            Some(MelnikovSign::Minus) if w.j == w.k => a.diagonal = a.diagonal.max(w.j.abs() as f64 * gs / lb.powf(ts)),
            Some(MelnikovSign::Minus) => a.second_minus = a.second_minus.max((j2 - k2).abs() / lb),
        }
    }
    a
}

/// Which families enter the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSuite {
    pub diophantine: bool,
    pub first: bool,
    pub second: bool,
}

impl Default for ConditionSuite {
    fn default() -> Self {
        ConditionSuite { diophantine: true, first: true, second: true }
    }
}

impl ConditionSuite {
    pub fn diophantine_only() -> Self {
        ConditionSuite { diophantine: true, first: false, second: false }
    }

    fn families(&self) -> Vec<Family> {
        let mut v = Vec::new();
        if self.diophantine {
            v.push(Family::Diophantine);
        }
        if self.first {
            v.push(Family::First);
        }
        if self.second {
            v.extend([Family::SecondMinus, Family::SecondPlus]);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureParams {
    pub s: Vec<i64>,
    pub k_normal: i64,
    pub model: FrequencyModel,
    /// Truncation `|l|_1 <= l_max` of the divisor checks.
    pub l_max: usize,
    /// Melnikov exponent.
    pub tau: f64,
    /// Constant shift of the seed normal frequencies.
    pub shift: f64,
    pub gammas: Vec<f64>,
}

/// Excluded fraction with its exact 95% binomial interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fraction {
    pub count: usize,
    pub n: usize,
    pub fraction: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl Fraction {
    pub fn new(count: usize, n: usize) -> Self {
        let (ci_lo, ci_hi) = clopper_pearson(count, n, 0.05);
        Fraction { count, n, fraction: count as f64 / n as f64, ci_lo, ci_hi }
    }
}

/// Exact two-sided binomial interval at level `1 - alpha`.
pub fn clopper_pearson(k: usize, n: usize, alpha: f64) -> (f64, f64) {
    let (kf, nf) = (k as f64, n as f64);
    let lo = if k == 0 { 0.0 } else { Beta::new(kf, nf - kf + 1.0).map(|b| b.inverse_cdf(alpha / 2.0)).unwrap_or(0.0) };
    let hi = if k == n { 1.0 } else { Beta::new(kf + 1.0, nf - kf).map(|b| b.inverse_cdf(1.0 - alpha / 2.0)).unwrap_or(1.0) };
    (lo, hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub gamma: f64,
    pub gamma_star: f64,
    /// Keys: family names, `"melnikov"` (any Melnikov family) and `"total"`.
    pub fractions: BTreeMap<String, Fraction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedWitness {
    pub gamma: f64,
    pub sample: usize,
    pub omega: Vec<f64>,
    pub family: Family,
    pub witness: MelnikovWitness,
}

/// Empirical measure of one resonant set against `gamma <weight> <l>^{-tau-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonantSetMeasure {
    pub family: Family,
    pub ell: Vec<i32>,
    pub j: i64,
    pub k: i64,
    pub fractions: Vec<f64>,
    pub predicted_scale: Vec<f64>,
    pub slope: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureReport {
    pub frequency_box: FrequencyBox,
    pub params: MeasureParams,
    pub suite: ConditionSuite,
    pub tau_star: f64,
    pub sweep: Vec<SweepPoint>,
    /// Log-log slopes: `"diophantine"` against `gamma_*`, the others against `gamma`.
    pub scaling_fits: BTreeMap<String, f64>,
    pub witness_log: Vec<LoggedWitness>,
    pub resonant_sets: Vec<ResonantSetMeasure>,
}

/// Per-sample critical values; excluded at `gamma` iff below `gamma`
/// (below `gamma_*` for the diophantine family).
#[derive(Debug, Clone)]
struct SampleCritical {
    values: BTreeMap<Family, f64>,
    witnesses: BTreeMap<Family, MelnikovWitness>,
}

fn sample_critical(
    omega: &[f64],
    ix: &IndexSets,
    lat: &AngleLattice,
    params: &MeasureParams,
    families: &[Family],
    gamma_max: f64,
) -> Result<SampleCritical> {
    let nf = seed_normal_form(ix, omega, &params.model, params.shift)?;
    let dv = Divisors::new(lat, omega, &nf);
    let mut values = BTreeMap::new();
    let mut witnesses = BTreeMap::new();
    for &fam in families {
        if fam == Family::Diophantine {
            let (c, m) = dv.diophantine_critical(tau_star(ix.d()));
            values.insert(fam, c);
            let value = dv.wl[m].abs();
            witnesses.insert(fam, MelnikovWitness { ell: lat.mode(m).to_vec(), j: 0, k: 0, sign: None, divisor: value, threshold: f64::NAN, level: None });
            continue;
        }
        // ratios at unit gamma are the critical gammas
        let fm = dv.margin(fam, 1.0, params.tau, Some(gamma_max));
        values.insert(fam, fm.min_ratio);
        if let Some(w) = fm.witness {
            witnesses.insert(fam, w);
        }
    }
    Ok(SampleCritical { values, witnesses })
}

fn excluded_at(c: &SampleCritical, fam: Family, gamma: f64) -> bool {
    let g = if fam == Family::Diophantine { gamma_star(gamma) } else { gamma };
    c.values.get(&fam).is_some_and(|v| *v < g)
}

/// Monte-Carlo estimate of the excluded fractions over a `gamma` sweep.
pub fn measure_estimate(fbox: &FrequencyBox, suite: ConditionSuite, params: &MeasureParams) -> Result<MeasureReport> {
    if params.gammas.is_empty() || params.gammas.iter().any(|g| !(*g > 0.0)) {
        return Err(KamError::Validation(vec!["gamma sweep must be nonempty and positive".into()]));
    }
    let ix = IndexSets::new(&params.s, params.k_normal, params.l_max)?;
    let lat = AngleLattice::new(ix.d(), params.l_max.max(1));
    let families = suite.families();
    let gamma_max = params.gammas.iter().cloned().fold(0.0, f64::max);
    let samples = fbox.samples();
    let crit: Vec<SampleCritical> = samples
        .par_iter()
        .map(|om| sample_critical(om, &ix, &lat, params, &families, gamma_max))
        .collect::<Result<_>>()?;
    let n = samples.len();

    let mut sweep = Vec::with_capacity(params.gammas.len());
    let mut witness_log = Vec::new();
    for &g in &params.gammas {
        let mut fractions = BTreeMap::new();
        for &fam in &families {
            let cnt = crit.iter().filter(|c| excluded_at(c, fam, g)).count();
            fractions.insert(fam.name().to_string(), Fraction::new(cnt, n));
        }
        let mel = crit.iter().filter(|c| Family::MELNIKOV.iter().any(|f| excluded_at(c, *f, g))).count();
        if families.iter().any(|f| *f != Family::Diophantine) {
            fractions.insert("melnikov".to_string(), Fraction::new(mel, n));
        }
        let total = crit.iter().filter(|c| families.iter().any(|f| excluded_at(c, *f, g))).count();
        fractions.insert("total".to_string(), Fraction::new(total, n));
        for (i, c) in crit.iter().enumerate() {
            if witness_log.len() >= WITNESS_LOG_CAP * (sweep.len() + 1) {
                break;
            }
            if let Some(&fam) = families.iter().find(|f| excluded_at(c, **f, g)) {
                if let Some(w) = c.witnesses.get(&fam) {
                    let mut w = w.clone();
                    if fam == Family::Diophantine {
                        let lb = w.ell.iter().map(|l| l.unsigned_abs() as f64).sum::<f64>();
                        w.threshold = gamma_star(g) / lb.powf(tau_star(ix.d()));
                    } else {
                        w.divisor *= g;
                        w.threshold *= g;
                    }
                    witness_log.push(LoggedWitness { gamma: g, sample: i, omega: samples[i].clone(), family: fam, witness: w });
                }
            }
        }
        sweep.push(SweepPoint { gamma: g, gamma_star: gamma_star(g), fractions });
    }

    let mut scaling_fits = BTreeMap::new();
    let gs: Vec<f64> = params.gammas.clone();
    let gss: Vec<f64> = gs.iter().map(|g| gamma_star(*g)).collect();
    let keys: Vec<String> = sweep[0].fractions.keys().cloned().collect();
    for key in keys {
        let y: Vec<f64> = sweep.iter().map(|p| p.fractions[&key].fraction).collect();
        let x = if key == Family::Diophantine.name() { &gss } else { &gs };
        if let Some(sl) = loglog_slope(x, &y) {
            scaling_fits.insert(key, sl);
        }
    }

    let resonant_sets = resonant_subfamily(&crit, &samples, &ix, &lat, params, gamma_max)?;
    Ok(MeasureReport {
        frequency_box: fbox.clone(),
        params: params.clone(),
        suite,
        tau_star: tau_star(ix.d()),
        sweep,
        scaling_fits,
        witness_log,
        resonant_sets,
    })
}

/// The most frequently binding Melnikov triples at the largest `gamma`, with
/// their individual excluded fractions across the sweep.
fn resonant_subfamily(
    crit: &[SampleCritical],
    samples: &[Vec<f64>],
    ix: &IndexSets,
    lat: &AngleLattice,
    params: &MeasureParams,
    gamma_max: f64,
) -> Result<Vec<ResonantSetMeasure>> {
    let mut counts: BTreeMap<(Family, Vec<i32>, i64, i64), usize> = BTreeMap::new();
    for c in crit {
        for fam in Family::MELNIKOV {
            if excluded_at(c, fam, gamma_max) {
                if let Some(w) = c.witnesses.get(&fam) {
                    *counts.entry((fam, w.ell.clone(), w.j, w.k)).or_default() += 1;
                }
            }
        }
    }
    let mut ranked: Vec<_> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out = Vec::new();
    for ((fam, ell, j, k), _) in ranked.into_iter().take(SUBFAMILY_SIZE) {
        let m = lat.index_of(&ell).expect("witness mode lies in the lattice");
        let jp = ix.s_perp_plus.iter().position(|s| *s == j).expect("normal site");
        let kp = ix.s_perp_plus.iter().position(|s| *s == k).expect("normal site");
        let ratios: Vec<f64> = samples
            .par_iter()
            .map(|om| -> Result<f64> {
                let nf = seed_normal_form(ix, om, &params.model, params.shift)?;
                Ok(triple_ratio(&nf, lat, om, fam, m, jp, kp, params.tau))
            })
            .collect::<Result<_>>()?;
        let sign = if fam == Family::SecondPlus { MelnikovSign::Plus } else { MelnikovSign::Minus };
        let lb = lat.bracket(m);
        let fractions: Vec<f64> = params.gammas.iter().map(|g| ratios.iter().filter(|r| **r < *g).count() as f64 / ratios.len() as f64).collect();
        let predicted_scale = params
            .gammas
            .iter()
            .map(|g| {
                let w = if fam == Family::First { 2.0 * (j * j) as f64 } else { second_threshold(1.0, 0.0, j, k, sign, 1.0) };
                g * w * lb.powf(-params.tau - 1.0)
            })
            .collect();
        let slope = loglog_slope(&params.gammas, &fractions);
        out.push(ResonantSetMeasure { family: fam, ell, j, k, fractions, predicted_scale, slope });
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn triple_ratio(nf: &BlockNormalForm, lat: &AngleLattice, omega: &[f64], fam: Family, m: usize, j: usize, k: usize, tau: f64) -> f64 {
    let eig = nf.eigenvalues();
    let wl = lat.dot(m, omega);
    let lb = lat.bracket(m);
    let mut best = f64::INFINITY;
    for a in 0..2 {
        match fam {
            Family::First => best = best.min((wl + eig[j][a]).abs() / first_threshold(1.0, tau, nf.sites[j], lb)),
            Family::SecondMinus | Family::SecondPlus => {
                let (s, sign) = if fam == Family::SecondMinus { (-1.0, MelnikovSign::Minus) } else { (1.0, MelnikovSign::Plus) };
                for b in 0..2 {
                    let div = (wl + eig[j][a] + s * eig[k][b]).abs();
                    best = best.min(div / second_threshold(1.0, tau, nf.sites[j], nf.sites[k], sign, lb));
                }
            }
            Family::Diophantine => {}
        }
    }
    best
}
