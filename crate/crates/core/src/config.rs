//! Solver configuration: a TOML file with required instance keys and
//! explicitly defaulted everything else.
//!
//! ```toml
//! S = [-1, 0, 1]
//! K_normal = 8
//! L_angle = 6
//! eps = 1e-5
//! gamma = 1e-2
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KamError, Result};
use crate::hamiltonian::{tangential_frequencies, FrequencyModel, Perturbation, PerturbationTerm};
use crate::kam::KamConfig;
use crate::lattice::IndexSets;
use crate::measure::DEFAULT_SAMPLES;
use crate::nash_moser::NashMoserConfig;
use crate::tolerances::TOL_NM;

/// Tangential action used when neither `omega` nor `xi` is given.
pub const DEFAULT_ACTION: f64 = 0.3;

/// Log-spaced sweep `name=lo:hi:n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Gamma,
    Eps,
}

impl SweepSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = |m: &str| KamError::Parse { line: None, message: format!("sweep `{s}`: {m}") };
        let (name, range) = s.split_once('=').ok_or_else(|| bad("expected name=lo:hi:n"))?;
        let param = match name.trim() {
            "gamma" => SweepParam::Gamma,
            "eps" => SweepParam::Eps,
            other => return Err(bad(&format!("unknown parameter `{other}`"))),
        };
        let parts: Vec<&str> = range.split(':').collect();
        if parts.len() != 3 {
            return Err(bad("expected lo:hi:n"));
        }
        let num = |t: &str| t.trim().parse::<f64>().map_err(|e| bad(&e.to_string()));
        let lo = num(parts[0])?;
        let hi = num(parts[1])?;
        let n = parts[2].trim().parse::<usize>().map_err(|e| bad(&e.to_string()))?;
        let spec = SweepSpec { param, lo, hi, n };
        let errs = spec.problems();
        if !errs.is_empty() {
            return Err(bad(&errs.join("; ")));
        }
        Ok(spec)
    }

    fn problems(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lo > 0.0 && self.hi > 0.0 && self.lo.is_finite() && self.hi.is_finite()) {
            v.push("sweep bounds must be positive".to_string());
        }
        if self.lo > self.hi {
            v.push("sweep lo exceeds hi".to_string());
        }
        if self.n < 1 || (self.n == 1 && self.lo != self.hi) {
            v.push("sweep needs n >= 2 unless lo = hi".to_string());
        }
        v
    }

    /// Values from `lo` to `hi`, evenly spaced in the logarithm.
    pub fn values(&self) -> Vec<f64> {
        if self.n == 1 {
            return vec![self.lo];
        }
        let (a, b) = (self.lo.ln(), self.hi.ln());
        let mut v: Vec<f64> = (0..self.n).map(|i| (a + (b - a) * i as f64 / (self.n - 1) as f64).exp()).collect();
        v[0] = self.lo;
        v[self.n - 1] = self.hi;
        v
    }
}

impl std::fmt::Display for SweepSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self.param {
            SweepParam::Gamma => "gamma",
            SweepParam::Eps => "eps",
        };
        write!(f, "{name}={:e}:{:e}:{}", self.lo, self.hi, self.n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub terms: Vec<PerturbationTerm>,
    pub grid_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub tol_nm: f64,
    pub delta2: f64,
    pub max_outer: usize,
    pub mu1: u32,
    pub kam_n0: f64,
    pub kam_max_steps: usize,
    pub kam_target_rel: f64,
    pub kam_slack: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        let k = KamConfig::default();
        Tolerances {
            tol_nm: TOL_NM,
            delta2: 1e-2,
            max_outer: 8,
            mu1: 1,
            kam_n0: k.n0,
            kam_max_steps: k.max_steps,
            kam_target_rel: k.target_rel,
            kam_slack: k.slack,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureSettings {
    pub n_samples: usize,
    /// Half-width of the frequency cube around `omega`.
    pub half_width: f64,
    pub l_max: usize,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilitySettings {
    pub horizons: Vec<f64>,
    pub n_samples: usize,
    pub n_times: usize,
}

impl Default for StabilitySettings {
    fn default() -> Self {
        StabilitySettings { horizons: vec![100.0, 1000.0], n_samples: 4, n_times: 4000 }
    }
}

/// Fully defaulted and validated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    #[serde(rename = "S")]
    pub s: Vec<i64>,
    #[serde(rename = "K_normal")]
    pub k_normal: i64,
    #[serde(rename = "L_angle")]
    pub l_angle: usize,
    pub eps: f64,
    pub gamma: f64,
    pub tau: f64,
    #[serde(rename = "N0")]
    pub n0: f64,
    pub xi: Vec<f64>,
    pub omega: Vec<f64>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<String>,
    pub frequency: FrequencyModel,
    pub perturbation: PerturbationSpec,
    pub tolerances: Tolerances,
    pub measure: MeasureSettings,
    pub stability: StabilitySettings,
}

/// File contents before defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(rename = "S")]
    s: Option<Vec<i64>>,
    #[serde(rename = "K_normal")]
    k_normal: Option<i64>,
    #[serde(rename = "L_angle")]
    l_angle: Option<usize>,
    eps: Option<f64>,
    gamma: Option<f64>,
    tau: Option<f64>,
    #[serde(rename = "N0")]
    n0: Option<f64>,
    xi: Option<Vec<f64>>,
    omega: Option<Vec<f64>>,
    seed: Option<u64>,
    sweep: Option<String>,
    frequency: Option<FrequencyModel>,
    perturbation: Option<RawPerturbation>,
    tolerances: Option<RawTolerances>,
    measure: Option<RawMeasure>,
    stability: Option<RawStability>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPerturbation {
    terms: Option<Vec<PerturbationTerm>>,
    grid_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTolerances {
    tol_nm: Option<f64>,
    delta2: Option<f64>,
    max_outer: Option<usize>,
    mu1: Option<u32>,
    kam_n0: Option<f64>,
    kam_max_steps: Option<usize>,
    kam_target_rel: Option<f64>,
    kam_slack: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMeasure {
    n_samples: Option<usize>,
    half_width: Option<f64>,
    l_max: Option<usize>,
    shift: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStability {
    horizons: Option<Vec<f64>>,
    n_samples: Option<usize>,
    n_times: Option<usize>,
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

/// Parses and validates a configuration held in memory.
pub fn parse_config(src: &str) -> Result<SolverConfig> {
    let raw: RawConfig = toml::from_str(src).map_err(|e| KamError::Parse {
        line: e.span().map(|s| line_of(src, s.start)),
        message: e.message().to_string(),
    })?;
    complete(raw)
}

pub fn load_config(path: &Path) -> Result<SolverConfig> {
    let src = std::fs::read_to_string(path)
        .map_err(|e| KamError::Parse { line: None, message: format!("{}: {e}", path.display()) })?;
    parse_config(&src)
}

/// TOML text with every field explicit; `parse_config(&dump_config(c)) == c`.
pub fn dump_config(cfg: &SolverConfig) -> String {
    toml::to_string(cfg).expect("configuration serializes to TOML")
}

fn complete(raw: RawConfig) -> Result<SolverConfig> {
    let mut errs: Vec<String> = Vec::new();
    let mut need = |name: &str, present: bool| {
        if !present {
            errs.push(format!("missing required key `{name}`"));
        }
    };
    need("S", raw.s.is_some());
    need("K_normal", raw.k_normal.is_some());
    need("L_angle", raw.l_angle.is_some());
    need("eps", raw.eps.is_some());
    need("gamma", raw.gamma.is_some());
    if !errs.is_empty() {
        return Err(KamError::Validation(errs));
    }
    let s = raw.s.unwrap();
    let k_normal = raw.k_normal.unwrap();
    let l_angle = raw.l_angle.unwrap();
    let eps = raw.eps.unwrap();
    let gamma = raw.gamma.unwrap();
    let d = s.len();
    let frequency = raw.frequency.unwrap_or_default();

    let mut sorted = s.clone();
    sorted.sort();
    if let Err(KamError::Validation(v)) = IndexSets::new(&s, k_normal, l_angle.max(1)) {
        errs.extend(v);
    }
    if l_angle < 1 {
        errs.push("L_angle must be at least 1".into());
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        errs.push(format!("eps = {eps} must be finite and nonnegative"));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        errs.push(format!("gamma = {gamma} must be positive"));
    }
    let tau = raw.tau.unwrap_or((2 * d + 1) as f64);
    if !(tau > 0.0) {
        errs.push(format!("tau = {tau} must be positive"));
    }
    let n0 = raw.n0.unwrap_or(3.0);
    if !(n0 > 1.0) {
        errs.push(format!("N0 = {n0} must exceed 1"));
    }

    // tangential frequency and actions: omega wins, xi otherwise, then the default action
    let (xi, omega) = match (raw.omega, raw.xi) {
        (Some(om), xi) => {
            if om.len() != d {
                errs.push(format!("omega has {} entries, S has {d}", om.len()));
                (xi.unwrap_or_default(), om)
            } else {
                match crate::hamiltonian::xi_of_omega(&om, &sorted, &frequency) {
                    Ok(x) => match xi {
                        Some(given) => {
                            if given.len() != d || given.iter().zip(&x).any(|(a, b)| (a - b).abs() > 1e-9 * (1.0 + b.abs())) {
                                errs.push("xi and omega are both given and disagree".into());
                            }
                            (given, om)
                        }
                        None => (x, om),
                    },
                    Err(e) => {
                        errs.push(format!("omega: {e}"));
                        (Vec::new(), om)
                    }
                }
            }
        }
        (None, xi) => {
            let x = xi.unwrap_or_else(|| vec![DEFAULT_ACTION; d]);
            if x.len() != d {
                errs.push(format!("xi has {} entries, S has {d}", x.len()));
            }
            if x.iter().any(|v| !(*v > 0.0)) {
                errs.push("xi entries must be positive".into());
            }
            let om = if x.len() == d { tangential_frequencies(&sorted, &x, &frequency) } else { Vec::new() };
            (x, om)
        }
    };

    let rp = raw.perturbation.unwrap_or_default();
    let reference = Perturbation::reference(k_normal, eps);
    let perturbation = PerturbationSpec {
        terms: rp.terms.unwrap_or(reference.terms),
        grid_size: rp.grid_size.unwrap_or(reference.grid_size),
    };
    if let Err(KamError::Validation(v)) =
        (Perturbation { terms: perturbation.terms.clone(), grid_size: perturbation.grid_size, eps }).validate(k_normal)
    {
        errs.extend(v);
    }

    let rt = raw.tolerances.unwrap_or_default();
    let dt = Tolerances::default();
    let tolerances = Tolerances {
        tol_nm: rt.tol_nm.unwrap_or(dt.tol_nm),
        delta2: rt.delta2.unwrap_or(dt.delta2),
        max_outer: rt.max_outer.unwrap_or(dt.max_outer),
        mu1: rt.mu1.unwrap_or(dt.mu1),
        kam_n0: rt.kam_n0.unwrap_or(dt.kam_n0),
        kam_max_steps: rt.kam_max_steps.unwrap_or(dt.kam_max_steps),
        kam_target_rel: rt.kam_target_rel.unwrap_or(dt.kam_target_rel),
        kam_slack: rt.kam_slack.unwrap_or(dt.kam_slack),
    };
    for (name, v) in [("tol_nm", tolerances.tol_nm), ("delta2", tolerances.delta2), ("kam_target_rel", tolerances.kam_target_rel)] {
        if !(v > 0.0) {
            errs.push(format!("tolerances.{name} must be positive"));
        }
    }
    if tolerances.max_outer == 0 {
        errs.push("tolerances.max_outer must be positive".into());
    }

    let rm = raw.measure.unwrap_or_default();
    let measure = MeasureSettings {
        n_samples: rm.n_samples.unwrap_or(DEFAULT_SAMPLES),
        half_width: rm.half_width.unwrap_or(0.5),
        l_max: rm.l_max.unwrap_or(l_angle),
        shift: rm.shift.unwrap_or(0.0),
    };
    if measure.n_samples == 0 {
        errs.push("measure.n_samples must be positive".into());
    }
    if !(measure.half_width > 0.0) {
        errs.push("measure.half_width must be positive".into());
    }

    let rs = raw.stability.unwrap_or_default();
    let ds = StabilitySettings::default();
    let stability = StabilitySettings {
        horizons: rs.horizons.unwrap_or(ds.horizons),
        n_samples: rs.n_samples.unwrap_or(ds.n_samples),
        n_times: rs.n_times.unwrap_or(ds.n_times),
    };
    if stability.horizons.is_empty() || stability.horizons.iter().any(|h| !(*h > 0.0)) {
        errs.push("stability.horizons must be nonempty and positive".into());
    }
    if stability.n_samples == 0 || stability.n_times < 2 {
        errs.push("stability needs n_samples >= 1 and n_times >= 2".into());
    }

    if let Some(sw) = &raw.sweep {
        if let Err(e) = SweepSpec::parse(sw) {
            errs.push(e.to_string());
        }
    }
    if !errs.is_empty() {
        return Err(KamError::Validation(errs));
    }
    Ok(SolverConfig {
        s: sorted,
        k_normal,
        l_angle,
        eps,
        gamma,
        tau,
        n0,
        xi,
        omega,
        seed: raw.seed.unwrap_or(0),
        sweep: raw.sweep,
        frequency,
        perturbation,
        tolerances,
        measure,
        stability,
    })
}

impl SolverConfig {
    pub fn index_sets(&self) -> Result<IndexSets> {
        IndexSets::new(&self.s, self.k_normal, self.l_angle)
    }

    pub fn perturbation(&self) -> Perturbation {
        Perturbation { terms: self.perturbation.terms.clone(), grid_size: self.perturbation.grid_size, eps: self.eps }
    }

    pub fn nash_moser(&self) -> NashMoserConfig {
        let t = &self.tolerances;
        NashMoserConfig {
            n0: self.n0,
            gamma: self.gamma,
            tau: self.tau,
            max_outer: t.max_outer,
            tol_nm: t.tol_nm,
            delta2: t.delta2,
            mu1: t.mu1,
            kam_n0: t.kam_n0,
            kam_max_steps: t.kam_max_steps,
            kam_target_rel: t.kam_target_rel,
            kam_slack: t.kam_slack,
        }
    }

    pub fn sweep_spec(&self) -> Result<Option<SweepSpec>> {
        self.sweep.as_deref().map(SweepSpec::parse).transpose()
    }

    /// Replaces the tangential frequency; the actions follow.
    pub fn with_omega(&self, omega: Vec<f64>) -> Result<SolverConfig> {
        let xi = crate::hamiltonian::xi_of_omega(&omega, &self.s, &self.frequency)?;
        Ok(SolverConfig { omega, xi, ..self.clone() })
    }
}
