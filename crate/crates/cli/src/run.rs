//! Dispatch of one subcommand: load, run, write artifacts, map the outcome.

use std::fs;

use anyhow::{anyhow, bail, Context, Result};
use kamtor_core::config::{load_config, SolverConfig, SweepParam, SweepSpec};
use kamtor_core::error::{KamError, MelnikovWitness};
use kamtor_core::hamiltonian::{Model, TorusEmbedding};
use kamtor_core::kam::EigenFit;
use kamtor_core::lattice::Discretization;
use kamtor_core::linearization::LinearizationReport;
use kamtor_core::measure::{measure_estimate, ConditionSuite, FrequencyBox, MeasureParams};
use kamtor_core::nash_moser::{
    build_stack, loglog_slope, nash_moser_solve_report, stability_check, NashMoserOutcome, RunReport, StabilityReport,
};
use serde::Serialize;
use tracing::info;

use crate::output::{write_csv, write_csv_with_header, write_json, Envelope, SCHEMA_VERSION};
use crate::Common;

#[derive(Debug, Clone, Copy)]
pub enum Subcommand {
    Solve,
    Reduce,
    Measure,
    Stability,
}

impl Subcommand {
    fn name(self) -> &'static str {
        match self {
            Subcommand::Solve => "solve",
            Subcommand::Reduce => "reduce",
            Subcommand::Measure => "measure",
            Subcommand::Stability => "stability",
        }
    }
}

pub enum Status {
    Done,
    Excluded(String),
}

pub fn run_pipeline(cmd: Subcommand, common: &Common) -> Result<Status> {
    let mut cfg = load_config(&common.config).map_err(|e| anyhow!("{}: {e}", common.config.display()))?;
    if let Some(om) = &common.omega {
        cfg = cfg.with_omega(om.clone()).map_err(|e| anyhow!("--omega: {e}"))?;
    }
    if let Some(sw) = &common.sweep {
        SweepSpec::parse(sw)?;
        cfg.sweep = Some(sw.clone());
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    info!(command = cmd.name(), out = %common.out.display(), "run");
    let ctx = Ctx { cfg: &cfg, out: &common.out, cmd };
    match cmd {
        Subcommand::Solve => solve(&ctx),
        Subcommand::Reduce => reduce(&ctx),
        Subcommand::Measure => measure(&ctx),
        Subcommand::Stability => stability(&ctx),
    }
}

struct Ctx<'a> {
    cfg: &'a SolverConfig,
    out: &'a std::path::Path,
    cmd: Subcommand,
}

impl Ctx<'_> {
    fn emit<T: Serialize>(&self, status: &str, error: Option<String>, result: &T) -> Result<()> {
        let env = Envelope { schema_version: SCHEMA_VERSION, command: self.cmd.name(), status, error, config: self.cfg, result };
        write_json(self.out, &format!("{}.json", self.cmd.name()), &env)
    }
}

fn instance(cfg: &SolverConfig) -> Result<(Model, Discretization)> {
    let ix = cfg.index_sets()?;
    let model = Model::new(ix.clone(), cfg.xi.clone(), cfg.frequency.clone(), cfg.perturbation())?;
    Ok((model, Discretization::new(ix)))
}

fn solve_one(cfg: &SolverConfig) -> Result<(NashMoserOutcome, Option<KamError>)> {
    let (model, disc) = instance(cfg)?;
    Ok(nash_moser_solve_report(&model, &cfg.omega, &cfg.nash_moser(), &disc))
}

fn status_of(err: &Option<KamError>) -> &'static str {
    match err {
        None => "converged",
        Some(e) if e.is_exclusion() => "excluded",
        Some(_) => "failed",
    }
}

#[derive(Serialize)]
struct ResidualRow {
    n: usize,
    cut: Option<usize>,
    residual: f64,
    residual_high: f64,
    zeta_norm: f64,
    step_norm: Option<f64>,
}

fn residual_rows(r: &RunReport) -> Vec<ResidualRow> {
    r.iterations
        .iter()
        .map(|it| ResidualRow {
            n: it.n,
            cut: it.cut,
            residual: it.residual,
            residual_high: it.residual_high,
            zeta_norm: it.zeta_norm,
            step_norm: it.step_norm,
        })
        .collect()
}

#[derive(Serialize)]
struct SweepRow {
    param: &'static str,
    value: f64,
    status: &'static str,
    iterations: usize,
    final_residual: f64,
    y_norm: f64,
    z_norm: f64,
}

#[derive(Serialize)]
struct SolveSweep {
    sweep: String,
    rows: Vec<SweepRow>,
    /// Log-log slopes of the torus size against the swept parameter, over converged runs.
    y_slope: Option<f64>,
    z_slope: Option<f64>,
    runs: Vec<RunReport>,
}

fn solve(ctx: &Ctx) -> Result<Status> {
    match ctx.cfg.sweep_spec()? {
        None => {
            let (out, err) = solve_one(ctx.cfg)?;
            write_csv(ctx.out, "residuals.csv", &residual_rows(&out.report))?;
            ctx.emit(status_of(&err), err.as_ref().map(|e| e.to_string()), &out.report)?;
            finish(err)
        }
        Some(spec) => {
            let mut rows = Vec::new();
            let mut runs = Vec::new();
            let mut worst: Option<KamError> = None;
            for v in spec.values() {
                let mut c = ctx.cfg.clone();
                let param = match spec.param {
                    SweepParam::Eps => {
                        c.eps = v;
                        "eps"
                    }
                    SweepParam::Gamma => {
                        c.gamma = v;
                        "gamma"
                    }
                };
                let (out, err) = solve_one(&c)?;
                let r = out.report;
                rows.push(SweepRow {
                    param,
                    value: v,
                    status: status_of(&err),
                    iterations: r.iterations.len(),
                    final_residual: r.final_residual,
                    y_norm: r.y_norm,
                    z_norm: r.z_norm,
                });
                runs.push(r);
                if let Some(e) = err {
                    if worst.as_ref().is_none_or(|w| w.is_exclusion()) {
                        worst = Some(e);
                    }
                }
            }
            let ok: Vec<&SweepRow> = rows.iter().filter(|r| r.status == "converged").collect();
            let xs: Vec<f64> = ok.iter().map(|r| r.value).collect();
            let y_slope = loglog_slope(&xs, &ok.iter().map(|r| r.y_norm).collect::<Vec<_>>());
            let z_slope = loglog_slope(&xs, &ok.iter().map(|r| r.z_norm).collect::<Vec<_>>());
            write_csv(ctx.out, "solve_sweep.csv", &rows)?;
            let res = SolveSweep { sweep: spec.to_string(), rows, y_slope, z_slope, runs };
            ctx.emit(status_of(&worst), worst.as_ref().map(|e| e.to_string()), &res)?;
            finish(worst)
        }
    }
}

fn finish(err: Option<KamError>) -> Result<Status> {
    match err {
        None => Ok(Status::Done),
        Some(e) if e.is_exclusion() => Ok(Status::Excluded(e.to_string())),
        Some(e) => Err(e.into()),
    }
}

fn witness_of(e: &KamError) -> Option<MelnikovWitness> {
    match e {
        KamError::MelnikovViolation(w) | KamError::FirstMelnikovViolation(w) => Some((**w).clone()),
        KamError::DiophantineViolation { ell, value } => Some(MelnikovWitness {
            ell: ell.clone(),
            j: 0,
            k: 0,
            sign: None,
            divisor: *value,
            threshold: f64::NAN,
            level: None,
        }),
        _ => None,
    }
}

#[derive(Serialize, Default)]
struct ReduceResult {
    witness: Option<MelnikovWitness>,
    gate_value: Option<f64>,
    target: Option<f64>,
    remainders: Vec<[f64; 2]>,
    cuts: Vec<Option<usize>>,
    contraction_ratios: Vec<f64>,
    decay_exponent: Option<f64>,
    eigenvalues: Vec<[f64; 2]>,
    sites: Vec<i64>,
    fit: Option<EigenFit>,
    selfadjoint_defect: Option<f64>,
    first_melnikov_margin: Option<f64>,
    chain_symplectic_residual: Option<f64>,
    linearization: Option<LinearizationReport>,
}

#[derive(Serialize)]
struct LadderRow {
    step: usize,
    cut: Option<usize>,
    remainder: f64,
    remainder_beta: f64,
}

#[derive(Serialize)]
struct EigenRow {
    site: i64,
    lambda_minus: f64,
    lambda_plus: f64,
}

fn reduce(ctx: &Ctx) -> Result<Status> {
    let cfg = ctx.cfg;
    let (model, disc) = instance(cfg)?;
    let iota = TorusEmbedding::zeros(&model.ix);
    let zeta = vec![0.0; model.d()];
    let nm = cfg.nash_moser();
    match build_stack(&model, &iota, &zeta, &cfg.omega, cfg.gamma, cfg.tau, &nm.kam(), &disc) {
        Ok(st) => {
            let k = &st.kam;
            let res = ReduceResult {
                witness: None,
                gate_value: Some(k.gate_value),
                target: Some(k.target),
                remainders: k.state.norms_log.clone(),
                cuts: k.state.cuts.clone(),
                contraction_ratios: k.contraction_ratios.clone(),
                decay_exponent: k.decay_exponent,
                eigenvalues: k.eigenvalues.clone(),
                sites: k.n_inf.sites.clone(),
                fit: Some(k.fit.clone()),
                selfadjoint_defect: Some(k.n_inf.selfadjoint_defect()),
                first_melnikov_margin: Some(st.first_melnikov_margin),
                chain_symplectic_residual: Some(k.chain.symplectic_residual(&disc.grid, 4)),
                linearization: Some(st.linearization.report.clone()),
            };
            let ladder: Vec<LadderRow> = k
                .state
                .norms_log
                .iter()
                .zip(&k.state.cuts)
                .enumerate()
                .map(|(step, (n, c))| LadderRow { step, cut: *c, remainder: n[0], remainder_beta: n[1] })
                .collect();
            let eig: Vec<EigenRow> = k
                .n_inf
                .sites
                .iter()
                .zip(&k.eigenvalues)
                .map(|(s, l)| EigenRow { site: *s, lambda_minus: l[0], lambda_plus: l[1] })
                .collect();
            write_csv(ctx.out, "kam_ladder.csv", &ladder)?;
            write_csv(ctx.out, "eigenvalues.csv", &eig)?;
            ctx.emit("reduced", None, &res)?;
            Ok(Status::Done)
        }
        Err(e) => {
            let res = ReduceResult { witness: witness_of(&e), ..Default::default() };
            let status = if e.is_exclusion() { "excluded" } else { "failed" };
            ctx.emit(status, Some(e.to_string()), &res)?;
            finish(Some(e))
        }
    }
}

#[derive(Serialize)]
struct MeasureRow {
    gamma: f64,
    gamma_star: f64,
    condition: String,
    count: usize,
    n: usize,
    fraction: f64,
    ci_lo: f64,
    ci_hi: f64,
}

fn measure(ctx: &Ctx) -> Result<Status> {
    let cfg = ctx.cfg;
    let gammas = match cfg.sweep_spec()? {
        None => vec![cfg.gamma],
        Some(SweepSpec { param: SweepParam::Gamma, .. }) => cfg.sweep_spec()?.unwrap().values(),
        Some(_) => bail!("measure sweeps over gamma only"),
    };
    let hw = cfg.measure.half_width;
    let lo = cfg.omega.iter().map(|w| w - hw).collect();
    let hi = cfg.omega.iter().map(|w| w + hw).collect();
    let fbox = FrequencyBox::new(lo, hi, cfg.measure.n_samples, cfg.seed, &cfg.s, &cfg.frequency)?;
    let params = MeasureParams {
        s: cfg.s.clone(),
        k_normal: cfg.k_normal,
        model: cfg.frequency.clone(),
        l_max: cfg.measure.l_max,
        tau: cfg.tau,
        shift: cfg.measure.shift,
        gammas,
    };
    let rep = measure_estimate(&fbox, ConditionSuite::default(), &params)?;
    let rows: Vec<MeasureRow> = rep
        .sweep
        .iter()
        .flat_map(|p| {
            p.fractions.iter().map(move |(k, f)| MeasureRow {
                gamma: p.gamma,
                gamma_star: p.gamma_star,
                condition: k.clone(),
                count: f.count,
                n: f.n,
                fraction: f.fraction,
                ci_lo: f.ci_lo,
                ci_hi: f.ci_hi,
            })
        })
        .collect();
    write_csv(ctx.out, "measure.csv", &rows)?;
    ctx.emit("estimated", None, &rep)?;
    Ok(Status::Done)
}

#[derive(Serialize)]
struct StabilityResult {
    converged: bool,
    final_residual: f64,
    witness: Option<MelnikovWitness>,
    reports: Vec<StabilityReport>,
    /// `max sup / min sup - 1` across the horizons.
    horizon_spread: Option<f64>,
}

fn stability(ctx: &Ctx) -> Result<Status> {
    let cfg = ctx.cfg;
    if cfg.sweep.is_some() {
        bail!("stability does not take a sweep");
    }
    let (model, disc) = instance(cfg)?;
    let (out, err) = nash_moser_solve_report(&model, &cfg.omega, &cfg.nash_moser(), &disc);
    let header = ["horizon", "sup_ratio", "frame_bound", "frame_cond", "upsilon_drift"];
    let mut reports = Vec::new();
    if let (None, Some(stack)) = (&err, &out.stack) {
        let st = &cfg.stability;
        for &h in &st.horizons {
            reports.push(stability_check(stack, &disc.grid, h, st.n_samples, st.n_times, cfg.seed)?);
        }
    }
    #[derive(Serialize)]
    struct Row {
        horizon: f64,
        sup_ratio: f64,
        frame_bound: f64,
        frame_cond: f64,
        upsilon_drift: f64,
    }
    let rows: Vec<Row> = reports
        .iter()
        .map(|r| Row { horizon: r.horizon, sup_ratio: r.sup_ratio, frame_bound: r.frame_bound, frame_cond: r.frame_cond, upsilon_drift: r.upsilon_drift })
        .collect();
    write_csv_with_header(ctx.out, "stability.csv", &header, &rows)?;
    let sups: Vec<f64> = reports.iter().map(|r| r.sup_ratio).collect();
    let horizon_spread = (!sups.is_empty()).then(|| {
        let mx = sups.iter().cloned().fold(f64::MIN, f64::max);
        let mn = sups.iter().cloned().fold(f64::MAX, f64::min);
        mx / mn - 1.0
    });
    let res = StabilityResult {
        converged: out.report.converged,
        final_residual: out.report.final_residual,
        witness: out.report.witness.clone(),
        reports,
        horizon_spread,
    };
    ctx.emit(status_of(&err), err.as_ref().map(|e| e.to_string()), &res)?;
    finish(err)
}
